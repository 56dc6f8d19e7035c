"""Instrument / confounder representation learning.

A causal encoder pass produces a per-position embedding of the observed
history; two MLP heads map it to an instrument representation (drives
treatment, carries no direct outcome information) and a confounder
representation (drives both).  The dependence structure is shaped by
contrastive log-ratio upper-bound (CLUB) losses over five variational
conditional-density heads, trained in alternation with the representations.

The CLUB double sums are evaluated in closed form through per-timestep
target moments, which is algebraically identical to the n x n pair sum
(verified against brute-force double loops in the tests).
"""

from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np

from .errors import ConfigurationError, ContractError, DimensionError
from .nn import MLP
from .tensor import Tensor, concat

LOG_2PI = math.log(2.0 * math.pi)
LOGVAR_CLAMP = 8.0


class VariationalHead:
    """Conditional density head: diagonal Gaussian or factorized Bernoulli.

    The MLP maps a conditioning vector to (mean, log-variance) pairs or to
    logits.  `frozen=True` applies the current weights as constants, the
    stop-gradient side of CLUB training.
    """

    def __init__(self, kind: str, cond_dim: int, target_dim: int, hidden: int,
                 rng: np.random.Generator):
        if kind not in ("gaussian", "bernoulli"):
            raise ConfigurationError(f"unknown head kind '{kind}'")
        self.kind = kind
        self.target_dim = target_dim
        out = 2 * target_dim if kind == "gaussian" else target_dim
        self.net = MLP([cond_dim, hidden, out], rng)

    def _forward(self, cond: Tensor, frozen: bool):
        raw = self.net(cond, frozen=frozen)
        if self.kind == "gaussian":
            d = self.target_dim
            mu = raw[..., :d]
            logvar = raw[..., d:].clamp(-LOGVAR_CLAMP, LOGVAR_CLAMP)
            return mu, logvar
        return raw  # logits

    def _check_binary(self, target: Tensor) -> None:
        vals = target.data
        if not np.all((vals == 0.0) | (vals == 1.0)):
            raise ContractError("bernoulli head target must be in {0, 1}")

    def loglik(self, cond: Tensor, target: Tensor, frozen: bool = False) -> Tensor:
        """Per-sample log density of `target` given `cond`, summed over target dims."""
        if cond.shape[:-1] != target.shape[:-1]:
            raise DimensionError(f"cond {cond.shape} / target {target.shape} misaligned")
        if self.kind == "gaussian":
            mu, logvar = self._forward(cond, frozen)
            sq = (target - mu).square() * (-logvar).exp()
            return -0.5 * (LOG_2PI * self.target_dim) - 0.5 * (logvar + sq).sum(axis=-1)
        self._check_binary(target)
        logits = self._forward(cond, frozen)
        return (target * logits - logits.softplus()).sum(axis=-1)

    def cross_mean_loglik(self, cond: Tensor, target: Tensor,
                          frozen: bool = False) -> Tensor:
        """(1/n) sum_j log q(target_j | cond_i), units on axis 0.

        Uses first/second target moments over the unit axis; identical to
        the explicit double loop for both head families.
        """
        if self.kind == "gaussian":
            mu, logvar = self._forward(cond, frozen)
            m1 = target.mean(axis=0, keepdims=True)
            m2 = target.square().mean(axis=0, keepdims=True)
            esq = (m2 - 2.0 * mu * m1 + mu.square()) * (-logvar).exp()
            return -0.5 * (LOG_2PI * self.target_dim) - 0.5 * (logvar + esq).sum(axis=-1)
        self._check_binary(target)
        logits = self._forward(cond, frozen)
        m1 = target.mean(axis=0, keepdims=True)
        return (m1 * logits - logits.softplus()).sum(axis=-1)

    def weighted_cross_loglik(self, cond: Tensor, target: Tensor, w: Tensor,
                              frozen: bool = False) -> Tensor:
        """sum_j w[t, i, j] * log q(target_j | cond_i) for [n, T, d] inputs."""
        t_by_time = target.swapaxes(0, 1)                      # [T, n, d]
        wm1 = (w @ t_by_time).swapaxes(0, 1)                   # [n, T, d]
        if self.kind == "gaussian":
            wm2 = (w @ t_by_time.square()).swapaxes(0, 1)
            mu, logvar = self._forward(cond, frozen)
            esq = (wm2 - 2.0 * mu * wm1 + mu.square()) * (-logvar).exp()
            return -0.5 * (LOG_2PI * self.target_dim) - 0.5 * (logvar + esq).sum(axis=-1)
        self._check_binary(target)
        logits = self._forward(cond, frozen)
        return (wm1 * logits - logits.softplus()).sum(axis=-1)

    def params(self, prefix: str):
        return self.net.params(f"{prefix}.net")


@dataclass
class ReprOutputs:
    z_rep: Tensor   # [n, T, d_z]
    c_rep: Tensor   # [n, T, d_c]


@dataclass
class PairWeights:
    w: np.ndarray   # [..., n, n], rows sum to 1
    sigma: float


def rbf_pair_weights(v: np.ndarray, sigma: float = 1.0) -> PairWeights:
    """Row-softmax of the RBF kernel over pairwise squared distances.

    `v` is [n, d] or [T, n, d]; weights are treated as constants (no
    gradients flow through them).
    """
    if sigma <= 0:
        raise ConfigurationError("rbf sigma must be positive")
    v = np.asarray(v, dtype=np.float64)
    sq = np.sum((v[..., :, None, :] - v[..., None, :, :]) ** 2, axis=-1)
    k = np.exp(-sq / (2.0 * sigma ** 2))
    shifted = k - k.max(axis=-1, keepdims=True)
    e = np.exp(shifted)
    return PairWeights(w=e / e.sum(axis=-1, keepdims=True), sigma=sigma)


def club_values(head: VariationalHead, cond: Tensor, target: Tensor,
                weights: PairWeights | None = None, frozen: bool = True) -> Tensor:
    """Per-timestep CLUB estimates, [T], for [n, T, d] cond/target."""
    n = cond.shape[0]
    pos = head.loglik(cond, target, frozen)                    # [n, T]
    if n == 1:
        # the only (i, j) pair is i = j, which cancels identically; the
        # zero-valued graph keeps the (identically zero) gradient exact
        return (pos - pos).mean(axis=0)
    if weights is None:
        neg = head.cross_mean_loglik(cond, target, frozen)
        return (pos - neg).mean(axis=0)
    if weights.w.shape[-2:] != (n, n):
        raise ContractError(f"pair-weight shape {weights.w.shape} does not match n={n}")
    wneg = head.weighted_cross_loglik(cond, target, Tensor(weights.w), frozen)
    # row-stochastic weights collapse the inner sum, leaving an extra 1/n
    return (pos - wneg).mean(axis=0) * (1.0 / n)


def club_loss(head: VariationalHead, condition: Tensor, target: Tensor,
              sign: str = "minimize-mi", weights: PairWeights | None = None,
              frozen: bool = True) -> Tensor:
    """Scalar CLUB loss for a single timestep of [n, d] samples.

    `maximize-mi` returns the negated estimate (relevance losses);
    `minimize-mi` returns it as-is (exclusion losses).
    """
    if sign not in ("maximize-mi", "minimize-mi"):
        raise ConfigurationError(f"unknown club sign '{sign}'")
    cond3 = condition.reshape(condition.shape[0], 1, condition.shape[1])
    targ3 = target.reshape(target.shape[0], 1, target.shape[1])
    w = weights
    if w is not None and w.w.ndim == 2:
        w = PairWeights(w=w.w[None, :, :], sigma=w.sigma)
    value = club_values(head, cond3, targ3, weights=w, frozen=frozen).sum()
    return -value if sign == "maximize-mi" else value


def weighted_club_loss(head: VariationalHead, condition: Tensor, target: Tensor,
                       weights: PairWeights) -> Tensor:
    """Pair-weighted CLUB for one timestep, minimized as-is."""
    return club_loss(head, condition, target, sign="minimize-mi", weights=weights)


# ---- batch plumbing ---------------------------------------------------------


def cummean(x: Tensor, axis: int = 1) -> Tensor:
    """Inclusive running mean along `axis`."""
    counts = np.arange(1, x.shape[axis] + 1, dtype=np.float64)
    shape = [1] * x.ndim
    shape[axis] = -1
    return x.cumsum(axis=axis) * Tensor(1.0 / counts.reshape(shape))


def cummean_exclusive(x: np.ndarray, axis: int = 1) -> np.ndarray:
    """Running mean of strictly earlier positions; zeros at position 0."""
    cs = np.cumsum(x, axis=axis)
    cs = np.roll(cs, 1, axis=axis)
    sl = [slice(None)] * x.ndim
    sl[axis] = 0
    cs[tuple(sl)] = 0.0
    counts = np.maximum(np.arange(x.shape[axis], dtype=np.float64), 1.0)
    shape = [1] * x.ndim
    shape[axis] = -1
    return cs / counts.reshape(shape)


def build_tokens(x: np.ndarray, a: np.ndarray, y_norm: np.ndarray,
                 y_mask_from: int | None = None) -> np.ndarray:
    """Encoder input: position k carries the step-(k-1) observation triple.

    Position 0 is the all-zero boundary token (no history yet), so the
    encoder output at position k summarizes exactly the history available
    before the step-k treatment.  `y_mask_from` zeroes outcome entries from
    that step index on (decision mode, where future outcomes are unknown).
    """
    n, T, _ = x.shape
    y_in = y_norm.copy()
    if y_mask_from is not None:
        y_in[:, y_mask_from:] = 0.0
    obs = np.concatenate([x, a, y_in[..., None]], axis=-1)
    tokens = np.zeros((n, T, obs.shape[-1]))
    tokens[:, 1:, :] = obs[:, :-1, :]
    return tokens


def decompose_history(model, x: np.ndarray, a: np.ndarray, y_norm: np.ndarray,
                      training: bool = False, rng: np.random.Generator | None = None,
                      y_mask_from: int | None = None) -> ReprOutputs:
    """Single causal encoder pass, then the two representation heads."""
    if x.shape[0] == 0:
        raise DimensionError("empty batch")
    tokens = Tensor(build_tokens(x, a, y_norm, y_mask_from))
    psi = model.encoder(tokens, training=training, rng=rng)
    return ReprOutputs(z_rep=model.phi_z(psi), c_rep=model.phi_c(psi))


def _mi_lld_inputs(model, a: np.ndarray, y_norm: np.ndarray, reps: ReprOutputs,
                   detach_reps: bool):
    z = reps.z_rep.detach() if detach_reps else reps.z_rep
    c = reps.c_rep.detach() if detach_reps else reps.c_rep
    cbar = cummean(c, axis=1)
    a_t = Tensor(a)
    y_t = Tensor(y_norm[..., None])
    return z, c, cbar, a_t, y_t


def _zy_pair_weights(model, a: np.ndarray, y_norm: np.ndarray, reps: ReprOutputs,
                     sigma: float) -> PairWeights:
    # conditioning vector [A_t, past-A mean, past-C mean, previous Y]; the
    # representation part enters detached (weights are constants)
    cbar = cummean(reps.c_rep, axis=1).data
    a_bar = cummean_exclusive(a, axis=1)
    y_prev = np.zeros_like(y_norm)
    y_prev[:, 1:] = y_norm[:, :-1]
    v = np.concatenate([a, a_bar, cbar, y_prev[..., None]], axis=-1)  # [n, T, d]
    return rbf_pair_weights(np.swapaxes(v, 0, 1), sigma=sigma)        # [T, n, n]


def mi_total_loss(model, a: np.ndarray, y_norm: np.ndarray, reps: ReprOutputs,
                  sigma: float = 1.0, weights: PairWeights | None = None) -> Tensor:
    """Timestep-averaged sum of the five dependence-shaping losses.

    Head parameters enter frozen; gradients reach the encoder and the two
    representation heads only.  The pair weights are constants; pass
    `weights` to pin them (otherwise they are recomputed from the current
    representations).
    """
    if a.shape[1] == 0:
        raise DimensionError("mi loss over empty time axis")
    z, c, cbar, a_t, y_t = _mi_lld_inputs(model, a, y_norm, reps, detach_reps=False)
    w = weights if weights is not None else _zy_pair_weights(model, a, y_norm, reps, sigma)
    l_za = -club_values(model.q_za, z, a_t, frozen=True)
    l_ca = -club_values(model.q_ca, c, a_t, frozen=True)
    l_cy = -club_values(model.q_cy, c, y_t, frozen=True)
    l_zc = club_values(model.q_zc, cbar, z, frozen=True)
    l_zy = club_values(model.q_zy, z, y_t, weights=w, frozen=True)
    return (l_za + l_ca + l_cy + l_zc + l_zy).mean()


def lld_total_loss(model, a: np.ndarray, y_norm: np.ndarray, reps: ReprOutputs) -> Tensor:
    """Timestep-averaged negative log-likelihood of the five variational heads.

    Representations enter detached; gradients reach head parameters only.
    """
    if a.shape[1] == 0:
        raise DimensionError("lld loss over empty time axis")
    z, c, cbar, a_t, y_t = _mi_lld_inputs(model, a, y_norm, reps, detach_reps=True)
    terms = [
        model.q_za.loglik(z, a_t),
        model.q_zy.loglik(z, y_t),
        model.q_ca.loglik(c, a_t),
        model.q_cy.loglik(c, y_t),
        model.q_zc.loglik(cbar, z),
    ]
    total = terms[0]
    for t in terms[1:]:
        total = total + t
    return -total.mean()
