"""Evaluation harness: multi-seed counterfactual MSE, hyper-parameter
sweeps, and multi-step treatment decisions scored against exhaustive
oracles."""

from __future__ import annotations

import json
import os
from concurrent.futures import ProcessPoolExecutor
from dataclasses import asdict, dataclass, field

import numpy as np

from .cfr import (DsivModel, ModelConfig, TrainConfig, fit, mse_loss,
                  predict_denormalized)
from .errors import ConfigurationError, ContractError, TrainingError
from .simgen import (GenConfig, OracleDecisionSet, PanelDataset, enumerate_blocks,
                     generate_decision_dataset, generate_splits, substream)


def evaluate_one_step(model: DsivModel, test: PanelDataset) -> float:
    """Mean squared one-step-ahead prediction error on the original outcome
    scale, averaged over every (unit, time) cell."""
    if test.d_x != model.d_x or test.d_a != model.d_a:
        raise ConfigurationError(
            f"test dims (d_x={test.d_x}, d_a={test.d_a}) do not match the "
            f"trained model (d_x={model.d_x}, d_a={model.d_a})")
    pred = predict_denormalized(model, test.x, test.a, test.y)
    return float(np.mean((pred - test.y) ** 2))


@dataclass
class ExperimentSpec:
    """Everything needed to reproduce one train + evaluate run."""
    gen: GenConfig
    model: ModelConfig
    train: TrainConfig

    def fingerprint(self) -> str:
        return json.dumps({"gen": asdict(self.gen), "model": asdict(self.model),
                           "train": asdict(self.train)}, sort_keys=True)


@dataclass
class EvalReport:
    seeds: list[int]
    mses: list[float]
    mean: float
    std: float
    config_fingerprint: str = ""
    incomplete: bool = False

    def summary(self) -> str:
        return f"MSE = {self.mean:.4f} ± {self.std:.4f} ({len(self.mses)} seeds)"

    def to_json(self) -> str:
        return json.dumps(asdict(self), sort_keys=True)


def _aggregate(seeds, mses, fingerprint, incomplete=False) -> EvalReport:
    mean = float(np.mean(mses)) if mses else float("nan")
    std = float(np.std(mses, ddof=1)) if len(mses) > 1 else 0.0
    return EvalReport(seeds=list(seeds), mses=list(mses), mean=mean, std=std,
                      config_fingerprint=fingerprint, incomplete=incomplete)


def run_one_step(spec: ExperimentSpec, seed: int) -> float:
    """Train on freshly generated splits for `seed`; return counterfactual
    test MSE.  Both the trajectories and the training stream derive from
    the seed, so paired configurations see identical data."""
    gen = GenConfig(**{**asdict(spec.gen), "seed": seed})
    train_ds, val_ds, test_ds = generate_splits(gen)
    tcfg = TrainConfig(**{**asdict(spec.train), "seed": seed})
    rng = substream(seed, "init")
    model = DsivModel(spec.model, gen.d_x, 1, rng)
    fit(model, train_ds, val_ds, tcfg)
    return evaluate_one_step(model, test_ds)


def multi_seed(spec: ExperimentSpec, seeds: list[int]) -> EvalReport:
    if len(seeds) < 2:
        raise ConfigurationError("multi_seed needs at least 2 seeds")
    mses = []
    done = []
    incomplete = False
    for s in seeds:
        try:
            mses.append(run_one_step(spec, s))
            done.append(s)
        except TrainingError:
            incomplete = True
    return _aggregate(done, mses, spec.fingerprint(), incomplete=incomplete)


# ---- hyper-parameter sweep --------------------------------------------------


@dataclass
class SweepGrid:
    alphas: list[float]
    betas: list[float]
    cells: dict = field(default_factory=dict)   # (alpha, beta) -> mean test MSE

    def cell(self, alpha: float, beta: float) -> float:
        return self.cells[(alpha, beta)]

    def to_csv(self) -> str:
        lines = ["alpha,beta,mean_mse"]
        for a in self.alphas:
            for b in self.betas:
                lines.append(f"{a},{b},{repr(self.cells[(a, b)])}")
        return "\n".join(lines) + "\n"


def _sweep_cell(args) -> tuple[float, float, float]:
    spec_dict, alpha, beta, seeds = args
    spec = ExperimentSpec(gen=GenConfig(**spec_dict["gen"]),
                          model=ModelConfig(**spec_dict["model"]),
                          train=TrainConfig(**{**spec_dict["train"],
                                               "alpha": alpha, "beta": beta}))
    mses = [run_one_step(spec, s) for s in seeds]
    return alpha, beta, float(np.mean(mses))


def sweep(alphas: list[float], betas: list[float], base: ExperimentSpec,
          seeds: list[int], workers: int = 1) -> SweepGrid:
    """One multi-seed mean per (alpha, beta) cell; cells are independent and
    may run in parallel worker processes."""
    if not alphas or not betas:
        raise ConfigurationError("sweep grids must be nonempty")
    spec_dict = {"gen": asdict(base.gen), "model": asdict(base.model),
                 "train": asdict(base.train)}
    jobs = [(spec_dict, a, b, seeds) for a in alphas for b in betas]
    grid = SweepGrid(alphas=list(alphas), betas=list(betas))
    if workers > 1:
        with ProcessPoolExecutor(max_workers=workers) as pool:
            results = list(pool.map(_sweep_cell, jobs))
    else:
        results = [_sweep_cell(j) for j in jobs]
    for a, b, mse in results:
        grid.cells[(a, b)] = mse
    return grid


# ---- decision making --------------------------------------------------------


@dataclass
class Decision:
    unit: int
    sequence: tuple[int, ...]
    sequence_index: int
    predicted_outcome: float


def decide_sequence(model: DsivModel, oset: OracleDecisionSet,
                    tau: int | None = None,
                    unit_chunk: int = 8) -> list[Decision]:
    """Enumerate every candidate treatment block per unit, predict the
    terminal outcome, and return the arg-max choice (ties broken toward the
    lexicographically smallest block).  Units are scored in chunks to bound
    the size of the prediction graph."""
    tau = oset.tau if tau is None else tau
    blocks = enumerate_blocks(tau)
    n, T = oset.n, oset.x.shape[1]
    t_hist = T - tau
    n_b = len(blocks)

    pred = np.zeros((n, n_b))
    for lo in range(0, n, unit_chunk):
        hi = min(lo + unit_chunk, n)
        m = hi - lo
        x = np.repeat(oset.x[lo:hi], n_b, axis=0)
        a = np.zeros((m * n_b, T, 1))
        a[:, :t_hist, 0] = np.repeat(oset.a_hist[lo:hi, :, 0], n_b, axis=0)
        a[:, t_hist:, 0] = np.tile(np.array(blocks, dtype=np.float64), (m, 1))
        y = np.zeros((m * n_b, T))
        y[:, :t_hist] = np.repeat(oset.y_hist[lo:hi], n_b, axis=0)
        out = predict_denormalized(model, x, a, y, y_mask_from=t_hist)[:, -1]
        pred[lo:hi] = out.reshape(m, n_b)
    decisions = []
    for i in range(n):
        best = int(np.argmax(pred[i]))  # first max = lexicographically smallest
        decisions.append(Decision(unit=i, sequence=blocks[best],
                                  sequence_index=best,
                                  predicted_outcome=float(pred[i, best])))
    return decisions


@dataclass
class RegretStats:
    per_unit: list[float]
    min: float
    max: float
    avg: float
    std: float

    def to_json(self) -> str:
        return json.dumps(asdict(self), sort_keys=True)


def _stats(regrets: np.ndarray) -> RegretStats:
    return RegretStats(per_unit=regrets.tolist(), min=float(regrets.min()),
                       max=float(regrets.max()), avg=float(regrets.mean()),
                       std=float(np.std(regrets, ddof=1)) if regrets.size > 1 else 0.0)


def oracle_regret(decisions: list[Decision], oracle: OracleDecisionSet) -> RegretStats:
    """Regret per unit: oracle value minus the *true* outcome of the chosen
    block, looked up in the enumerated table."""
    regrets = np.zeros(len(decisions))
    for k, d in enumerate(decisions):
        if d.sequence not in oracle.candidates:
            raise ContractError(f"chosen sequence {d.sequence} missing from oracle table")
        idx = oracle.candidates.index(d.sequence)
        regrets[k] = oracle.oracle_value[d.unit] - oracle.outcomes[d.unit, idx]
    return _stats(regrets)


def random_policy_regret(oracle: OracleDecisionSet) -> float:
    """Exact expected regret of choosing a candidate uniformly at random."""
    return float(np.mean(oracle.oracle_value[:, None] - oracle.outcomes))


def run_decision(spec: ExperimentSpec, seed: int) -> tuple[RegretStats, list[Decision], OracleDecisionSet]:
    gen = GenConfig(**{**asdict(spec.gen), "seed": seed})
    train_ds, val_ds, oset = generate_decision_dataset(gen)
    tcfg = TrainConfig(**{**asdict(spec.train), "seed": seed,
                          "mode": "decision", "tau": gen.tau})
    rng = substream(seed, "init")
    model = DsivModel(spec.model, gen.d_x, 1, rng)
    fit(model, train_ds, val_ds, tcfg)
    decisions = decide_sequence(model, oset)
    return oracle_regret(decisions, oset), decisions, oset


# ---- report serialization ---------------------------------------------------


def write_report(report: EvalReport, dir_path: str, stem: str = "eval_report") -> None:
    os.makedirs(dir_path, exist_ok=True)
    with open(os.path.join(dir_path, f"{stem}.json"), "w") as fh:
        fh.write(report.to_json())
    with open(os.path.join(dir_path, f"{stem}.txt"), "w") as fh:
        fh.write(report.summary() + "\n")
        for s, m in zip(report.seeds, report.mses):
            fh.write(f"seed {s:>6}  mse {m:.6f}\n")
