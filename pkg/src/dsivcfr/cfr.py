"""Counterfactual outcome regression under an adversarial moment criterion.

An outcome transformer predicts each step's outcome from the current
treatment and the causal history of confounder representations.  A bridge
MLP maps instrument / confounder summaries to per-sample weights; driving
the weighted residual mean to zero while the bridge tries to expose it
forms the min-max moment game.  Training alternates three phases per outer
iteration: the main objective over encoder + representation heads + outcome
net, the variational-head likelihoods, and the bridge.
"""

from __future__ import annotations

import json
from dataclasses import asdict, dataclass, field

import numpy as np

from .decompose import (ReprOutputs, VariationalHead, cummean, cummean_exclusive,
                        decompose_history, lld_total_loss, mi_total_loss)
from .errors import ConfigurationError, ContractError, DimensionError, TrainingError
from .nn import MLP, Adam, Linear, TransformerEncoder, zero_grads
from .simgen import PanelDataset, substream
from .tensor import Tensor, concat


@dataclass
class ModelConfig:
    d_model: int = 32
    n_layers: int = 2
    n_heads: int = 4
    d_ff: int = 64
    d_z: int = 8
    d_c: int = 16
    phi_hidden: int = 32
    head_hidden: int = 32
    bridge_hidden: int = 32
    dropout: float = 0.1


@dataclass
class TrainConfig:
    alpha: float = 0.1
    beta: float = 0.1
    lr: float = 1e-3
    K: int = 200                 # outer iterations
    R: int = 3                   # inner alternation rounds
    batch_size: int = 256
    reg_coef: float = 0.25       # quadratic penalty bounding the bridge adversary
    clip_norm: float = 5.0
    sigma: float = 1.0           # RBF width for pair weights
    val_every: int = 5
    seed: int = 0
    mode: str = "one_step"       # "one_step" | "decision"
    tau: int = 5

    def validate(self) -> None:
        if self.alpha < 0 or self.beta < 0:
            raise ConfigurationError("alpha and beta must be non-negative")
        if self.K < 0 or self.R < 1 or self.batch_size < 1:
            raise ConfigurationError("invalid K / R / batch_size")
        if self.mode not in ("one_step", "decision"):
            raise ConfigurationError(f"unknown training mode '{self.mode}'")


class DsivModel:
    """Parameter bundle: causal encoder, representation heads, five
    variational heads, outcome network, bridge network."""

    def __init__(self, mcfg: ModelConfig, d_x: int, d_a: int,
                 rng: np.random.Generator):
        self.mcfg = mcfg
        self.d_x = d_x
        self.d_a = d_a
        m = mcfg
        d_in = d_x + d_a + 1
        self.encoder = TransformerEncoder(d_in, m.d_model, m.n_layers, m.n_heads,
                                          m.d_ff, m.dropout, rng)
        self.phi_z = MLP([m.d_model, m.phi_hidden, m.d_z], rng)
        self.phi_c = MLP([m.d_model, m.phi_hidden, m.d_c], rng)
        self.q_za = VariationalHead("bernoulli", m.d_z, d_a, m.head_hidden, rng)
        self.q_zy = VariationalHead("gaussian", m.d_z, 1, m.head_hidden, rng)
        self.q_ca = VariationalHead("bernoulli", m.d_c, d_a, m.head_hidden, rng)
        self.q_cy = VariationalHead("gaussian", m.d_c, 1, m.head_hidden, rng)
        self.q_zc = VariationalHead("gaussian", m.d_c, m.d_z, m.head_hidden, rng)
        self.outcome = TransformerEncoder(d_a + m.d_c, m.d_model, m.n_layers,
                                          m.n_heads, m.d_ff, m.dropout, rng)
        self.out_proj = Linear(m.d_model, 1, rng)
        self.bridge = MLP([d_a + m.d_c + m.d_z, m.bridge_hidden, 1], rng)
        self.y_mean = 0.0
        self.y_std = 1.0

    # ---- parameter groups (disjoint; the alternation contract) ----------

    def main_params(self) -> dict[str, Tensor]:
        p = self.encoder.params("encoder")
        p.update(self.phi_z.params("phi_z"))
        p.update(self.phi_c.params("phi_c"))
        p.update(self.outcome.params("outcome"))
        p.update(self.out_proj.params("out_proj"))
        return p

    def head_params(self) -> dict[str, Tensor]:
        p = {}
        for name in ("q_za", "q_zy", "q_ca", "q_cy", "q_zc"):
            p.update(getattr(self, name).params(name))
        return p

    def bridge_params(self) -> dict[str, Tensor]:
        return self.bridge.params("bridge")

    def all_params(self) -> dict[str, Tensor]:
        p = self.main_params()
        p.update(self.head_params())
        p.update(self.bridge_params())
        return p

    def config_dict(self) -> dict:
        return {"model": asdict(self.mcfg), "d_x": self.d_x, "d_a": self.d_a,
                "y_mean": self.y_mean, "y_std": self.y_std}


def predict_outcomes(model: DsivModel, a: np.ndarray, c_rep: Tensor,
                     training: bool = False,
                     rng: np.random.Generator | None = None) -> Tensor:
    """Per-position normalized outcome predictions, [n, T].

    Token k concatenates the step-k treatment with the representation of the
    pre-step-k confounder history; causal masking keeps each prediction a
    function of treatments up to its own step only.
    """
    if a.shape[:2] != c_rep.shape[:2]:
        raise DimensionError(f"treatment {a.shape} / representation {c_rep.shape} misaligned")
    tokens = concat([Tensor(a), c_rep], axis=-1)
    h = model.outcome(tokens, training=training, rng=rng)
    out = model.out_proj(h)
    return out.reshape(out.shape[0], out.shape[1])


def mse_loss(pred: Tensor, truth: Tensor) -> Tensor:
    if pred.shape != truth.shape:
        raise ContractError(f"mse shapes differ: {pred.shape} vs {truth.shape}")
    return (pred - truth).square().mean()


def bridge_weights(model: DsivModel, a: np.ndarray, c_rep: Tensor,
                   z_rep: Tensor) -> Tensor:
    """Bridge-net weights M, one scalar per (unit, time).

    Treatment history enters as a causal mean pool of earlier treatments;
    the confounder history as the inclusive running mean of its
    representation.
    """
    a_bar = cummean_exclusive(a, axis=1)
    feats = concat([Tensor(a_bar), cummean(c_rep, axis=1), z_rep], axis=-1)
    m = model.bridge(feats)
    return m.reshape(m.shape[0], m.shape[1])


def adversarial_loss(m_weights: Tensor, residuals: Tensor,
                     regularizer_coef: float) -> tuple[Tensor, Tensor]:
    """Two views of the moment game.

    h-view: mean(M * r) with M constant (the outcome net minimizes the
    moment violation).  f-view: -(mean(M * r) - c * mean(M^2)) with r
    constant; the quadratic penalty bounds the adversary, whose pointwise
    optimum is M* = r / (2c).
    """
    if m_weights.shape != residuals.shape:
        raise ContractError(f"adversarial shapes differ: {m_weights.shape} vs {residuals.shape}")
    if regularizer_coef < 0:
        raise ConfigurationError("regularizer_coef must be >= 0")
    h_view = (m_weights.detach() * residuals).mean()
    f_view = -((m_weights * residuals.detach()).mean()
               - regularizer_coef * m_weights.square().mean())
    return h_view, f_view


@dataclass
class LossBundle:
    mse: float
    mi: float
    adv: float
    total: float
    alpha: float
    beta: float


def overall_loss(mse: Tensor, mi: Tensor, adv: Tensor,
                 alpha: float, beta: float) -> tuple[Tensor, LossBundle]:
    if alpha < 0 or beta < 0:
        raise ConfigurationError("alpha and beta must be non-negative")
    total = mse + alpha * mi + beta * adv
    bundle = LossBundle(mse=float(mse.data), mi=float(mi.data), adv=float(adv.data),
                        total=float(total.data), alpha=alpha, beta=beta)
    return total, bundle


@dataclass
class TrainReport:
    iterations: list = field(default_factory=list)
    best_iter: int = 0
    best_val_mse: float = float("inf")
    diverged: bool = False

    def to_text(self) -> str:
        lines = ["iter mse mi adv val_mse"]
        for rec in self.iterations:
            lines.append("{iter} {mse:.6g} {mi:.6g} {adv:.6g} {val_mse}".format(
                iter=rec["iter"], mse=rec["mse"], mi=rec["mi"], adv=rec["adv"],
                val_mse=("%.6g" % rec["val_mse"]) if rec["val_mse"] is not None else "-"))
        lines.append(f"best_iter {self.best_iter} best_val_mse {self.best_val_mse:.6g}")
        return "\n".join(lines) + "\n"

    def to_json(self) -> str:
        return json.dumps({"iterations": self.iterations, "best_iter": self.best_iter,
                           "best_val_mse": self.best_val_mse, "diverged": self.diverged},
                          sort_keys=True)


def _norm_y(model: DsivModel, y: np.ndarray) -> np.ndarray:
    return (y - model.y_mean) / model.y_std


def _mse_positions(cfg: TrainConfig, T: int) -> slice:
    # decision mode supervises only the terminal step of each sequence
    return slice(T - 1, T) if cfg.mode == "decision" else slice(0, T)


def _adv_positions(cfg: TrainConfig, T: int) -> slice:
    # moment sum starts at the second step (first has an empty instrument history)
    return slice(T - 1, T) if cfg.mode == "decision" else slice(1, T)


def _y_mask_from(cfg: TrainConfig, T: int) -> int | None:
    return T - cfg.tau if cfg.mode == "decision" else None


def fit(model: DsivModel, train: PanelDataset, val: PanelDataset,
        cfg: TrainConfig) -> TrainReport:
    """Alternating min-max training; returns per-iteration traces.

    Phase 1 minimizes mse + alpha*MI + beta*adv over encoder, representation
    heads, and outcome net.  Phase 2 runs R rounds on the variational-head
    likelihoods with detached representations.  Phase 3 runs R rounds of the
    bridge's regularized moment objective with detached residuals.  The best
    checkpoint is selected on validation mse.
    """
    cfg.validate()
    if val.n == 0:
        raise ConfigurationError("validation split is empty")
    if val.d_x != train.d_x or val.d_a != train.d_a:
        raise ConfigurationError("train/val dimension mismatch")

    model.y_mean = float(train.y.mean())
    model.y_std = float(train.y.std()) or 1.0
    y_train = _norm_y(model, train.y)
    y_val = _norm_y(model, val.y)

    opt_main = Adam(model.main_params(), lr=cfg.lr, clip_norm=cfg.clip_norm)
    opt_heads = Adam(model.head_params(), lr=cfg.lr, clip_norm=cfg.clip_norm)
    opt_bridge = Adam(model.bridge_params(), lr=cfg.lr, clip_norm=cfg.clip_norm)

    shuffle_rng = substream(cfg.seed, "shuffle")
    dropout_rng = substream(cfg.seed, "dropout")
    T = train.T
    mse_pos = _mse_positions(cfg, T)
    adv_pos = _adv_positions(cfg, T)
    mask_from = _y_mask_from(cfg, T)

    report = TrainReport()
    best_snapshot = {k: v.data.copy() for k, v in model.all_params().items()}

    def val_mse() -> float:
        reps = decompose_history(model, val.x, val.a, y_val, training=False,
                                 y_mask_from=mask_from)
        pred = predict_outcomes(model, val.a, reps.c_rep, training=False)
        return float(mse_loss(pred[:, mse_pos], Tensor(y_val[:, mse_pos])).data)

    for k in range(1, cfg.K + 1):
        if train.n > cfg.batch_size:
            idx = shuffle_rng.choice(train.n, size=cfg.batch_size, replace=False)
        else:
            idx = np.arange(train.n)
        xb, ab, yb = train.x[idx], train.a[idx], y_train[idx]

        # ---- phase 1: main objective over {encoder, phi_Z, phi_C, h} ----
        reps = decompose_history(model, xb, ab, yb, training=True,
                                 rng=dropout_rng, y_mask_from=mask_from)
        pred = predict_outcomes(model, ab, reps.c_rep, training=True, rng=dropout_rng)
        mse = mse_loss(pred[:, mse_pos], Tensor(yb[:, mse_pos]))
        mi = mi_total_loss(model, ab, yb, reps, sigma=cfg.sigma) if cfg.alpha > 0 else Tensor(0.0)
        if cfg.beta > 0:
            m_w = bridge_weights(model, ab, reps.c_rep, reps.z_rep)
            resid = pred - Tensor(yb)
            adv_h, _ = adversarial_loss(m_w[:, adv_pos], resid[:, adv_pos], cfg.reg_coef)
        else:
            adv_h = Tensor(0.0)
        total, bundle = overall_loss(mse, mi, adv_h, cfg.alpha, cfg.beta)
        if not np.isfinite(total.data):
            report.diverged = True
            raise TrainingError(f"loss diverged at iteration {k}")
        zero_grads(model.all_params())
        total.backward()
        opt_main.step()

        # ---- phase 2: variational heads on detached representations -----
        if cfg.alpha > 0:
            reps2 = decompose_history(model, xb, ab, yb, training=True,
                                      rng=dropout_rng, y_mask_from=mask_from)
            reps2 = ReprOutputs(z_rep=reps2.z_rep.detach(), c_rep=reps2.c_rep.detach())
            for _ in range(cfg.R):
                lld = lld_total_loss(model, ab, yb, reps2)
                zero_grads(model.head_params())
                lld.backward()
                opt_heads.step()

        # ---- phase 3: bridge on detached residuals ----------------------
        if cfg.beta > 0:
            reps3 = decompose_history(model, xb, ab, yb, training=True,
                                      rng=dropout_rng, y_mask_from=mask_from)
            c3, z3 = reps3.c_rep.detach(), reps3.z_rep.detach()
            pred3 = predict_outcomes(model, ab, c3, training=True, rng=dropout_rng)
            resid3 = (pred3 - Tensor(yb)).detach()
            for _ in range(cfg.R):
                m_w = bridge_weights(model, ab, c3, z3)
                _, adv_f = adversarial_loss(m_w[:, adv_pos], resid3[:, adv_pos],
                                            cfg.reg_coef)
                zero_grads(model.bridge_params())
                adv_f.backward()
                opt_bridge.step()

        rec = {"iter": k, "mse": bundle.mse, "mi": bundle.mi, "adv": bundle.adv,
               "total": bundle.total, "val_mse": None}
        if k % cfg.val_every == 0 or k == cfg.K:
            vm = val_mse()
            rec["val_mse"] = vm
            if vm < report.best_val_mse:
                report.best_val_mse = vm
                report.best_iter = k
                best_snapshot = {name: p.data.copy()
                                 for name, p in model.all_params().items()}
        report.iterations.append(rec)

    if cfg.K > 0 and report.best_iter > 0:
        for name, p in model.all_params().items():
            p.data = best_snapshot[name]
            p.grad = None
    return report


def predict_denormalized(model: DsivModel, ds_x: np.ndarray, ds_a: np.ndarray,
                         ds_y: np.ndarray, y_mask_from: int | None = None) -> np.ndarray:
    """Eval-mode outcome predictions on the original outcome scale."""
    y_norm = _norm_y(model, ds_y)
    reps = decompose_history(model, ds_x, ds_a, y_norm, training=False,
                             y_mask_from=y_mask_from)
    pred = predict_outcomes(model, ds_a, reps.c_rep, training=False)
    return pred.data * model.y_std + model.y_mean
