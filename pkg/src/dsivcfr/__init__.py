"""Sequential treatment-effect estimation under unmeasured confounders.

A pure-numpy library: a reverse-mode autodiff tensor engine, causal
transformer encoders, mutual-information objectives that split observed
histories into instrument-like and confounder-like representations, an
adversarial moment-based training criterion, deterministic synthetic panel
generators with exhaustive decision oracles, and a benchmarking harness.
"""

from .bench import (Decision, EvalReport, ExperimentSpec, RegretStats, SweepGrid,
                    decide_sequence, evaluate_one_step, multi_seed,
                    oracle_regret, random_policy_regret, run_decision,
                    run_one_step, sweep)
from .cfr import (DsivModel, LossBundle, ModelConfig, TrainConfig, TrainReport,
                  adversarial_loss, bridge_weights, fit, mse_loss,
                  overall_loss, predict_denormalized, predict_outcomes)
from .decompose import (PairWeights, ReprOutputs, VariationalHead, club_loss,
                        decompose_history, lld_total_loss, mi_total_loss,
                        rbf_pair_weights, weighted_club_loss)
from .errors import (ConfigurationError, ContractError, DeterminismError,
                     DimensionError, DsivError, NumericError, ParseError,
                     TrainingError)
from .nn import (MLP, Adam, LayerNorm, Linear, MultiHeadAttention,
                 TransformerBlock, TransformerEncoder, assign_checkpoint,
                 causal_mask, dropout, load_checkpoint, save_checkpoint,
                 sinusoidal_encoding, zero_grads)
from .simgen import (GenConfig, OracleDecisionSet, PanelDataset,
                     enumerate_blocks, generate_decision_dataset,
                     generate_simulation, generate_splits, load_oracle,
                     load_panel, save_oracle, save_panel, substream)
from .tensor import GradReport, Tensor, concat, grad_check, zeros

__all__ = [name for name in dir() if not name.startswith("_")]
__version__ = "0.1.0"
