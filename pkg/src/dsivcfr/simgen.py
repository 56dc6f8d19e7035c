"""Deterministic synthetic panel-data generators and CSV panel I/O.

Two generator kinds:

* ``one_step`` -- binary-treatment panels where covariates mix an
  instrument-like latent block Z (drives treatment only) and a confounder
  block C (drives treatment and outcome), plus unmeasured confounders U.
* ``decision`` -- the five-step decision variant: outcomes accumulate the
  last five treatments through fixed sequence coefficients, and the test
  split enumerates all 2^tau candidate treatment blocks with their true
  terminal outcomes (the oracle table).

All randomness is drawn from counter-based Philox streams keyed by
(master seed, unit id), so generation is order-independent and bitwise
reproducible.
"""

from __future__ import annotations

import hashlib
import json
import math
import os
from dataclasses import dataclass, field

import numpy as np

from .errors import ConfigurationError, ParseError


def _tag64(tag: str) -> int:
    return int.from_bytes(hashlib.sha256(tag.encode()).digest()[:8], "little")


def substream(seed: int, tag: str, index: int = 0) -> np.random.Generator:
    """Named Philox substream: key = (seed ^ hash(tag), index)."""
    key = np.array([np.uint64(seed) ^ np.uint64(_tag64(tag)), np.uint64(index)],
                   dtype=np.uint64)
    return np.random.Generator(np.random.Philox(key=key))


@dataclass
class GenConfig:
    kind: str = "one_step"          # "one_step" | "decision"
    d_z: int = 3
    d_c: int = 7
    d_u: int = 3
    T: int = 100
    n_train: int = 10000
    n_val: int = 1000
    n_test: int = 1000
    coef_seed: int = 7
    seed: int = 0                   # trajectory seed
    mixing: str = "concat"          # "concat" | "orthogonal"
    tau: int = 5                    # decision-mode treatment block length
    latent_diagnostics: bool = False
    # Additive shift on the treatment logit.  At 0 the -cos(v^2) terms push
    # the logit so far negative that the observational policy assigns a
    # constant treatment; a positive shift restores overlap so treatments
    # actually vary (and stay confounded with the latent state).
    logit_offset: float = 0.0

    @staticmethod
    def decision_defaults(**kw) -> "GenConfig":
        base = dict(kind="decision", d_z=3, d_c=12, d_u=5, T=30,
                    n_train=2000, n_val=200, n_test=100, tau=5)
        base.update(kw)
        return GenConfig(**base)

    def validate(self) -> None:
        if self.kind not in ("one_step", "decision"):
            raise ConfigurationError(f"unknown generator kind '{self.kind}'")
        if min(self.d_z, self.d_c, self.d_u, self.T) <= 0:
            raise ConfigurationError("generator dims and T must be positive")
        if self.mixing not in ("concat", "orthogonal"):
            raise ConfigurationError(f"unknown mixing mode '{self.mixing}'")
        if self.kind == "decision" and self.T <= self.tau:
            raise ConfigurationError("decision mode needs T > tau")

    @property
    def d_x(self) -> int:
        return self.d_z + self.d_c


@dataclass
class PanelDataset:
    """Per-unit, per-time covariates X, treatments A, outcomes Y.

    Latent blocks (z, c, u) are diagnostics only and must never reach the
    estimator; the trainer reads exclusively x, a, y.
    """
    x: np.ndarray                   # [n, T, d_x]
    a: np.ndarray                   # [n, T, d_a]
    y: np.ndarray                   # [n, T]
    treatment_kind: str = "binary"
    z: np.ndarray | None = None
    c: np.ndarray | None = None
    u: np.ndarray | None = None
    y_mean: float | None = None
    y_std: float | None = None

    @property
    def n(self) -> int:
        return self.x.shape[0]

    @property
    def T(self) -> int:
        return self.x.shape[1]

    @property
    def d_x(self) -> int:
        return self.x.shape[2]

    @property
    def d_a(self) -> int:
        return self.a.shape[2]


@dataclass
class OracleDecisionSet:
    """Decision-mode test units with exhaustively enumerated true outcomes."""
    x: np.ndarray                   # [n, T, d_x] covariates, observable through the window
    a_hist: np.ndarray              # [n, T_hist, 1] observational treatments
    y_hist: np.ndarray              # [n, T_hist]
    candidates: list[tuple[int, ...]]   # all 2^tau treatment blocks, lexicographic
    outcomes: np.ndarray            # [n, 2^tau] true terminal outcomes
    oracle_value: np.ndarray        # [n] = max over outcomes
    oracle_argmax: np.ndarray       # [n] index into candidates
    tau: int = 5

    @property
    def n(self) -> int:
        return self.x.shape[0]

    @property
    def T_hist(self) -> int:
        return self.y_hist.shape[1]


# ---- coefficient and mixing draws -------------------------------------------


def draw_coefficients(cfg: GenConfig) -> dict[str, np.ndarray]:
    rng = substream(cfg.coef_seed, "coefficients")
    d_v = cfg.d_z + cfg.d_c + cfg.d_u
    d_vp = cfg.d_c + 2 * cfg.d_u
    coefs = {
        "coef_a": rng.uniform(-1.0, 1.0, size=d_v),
        "coef_y": rng.uniform(-1.0, 1.0, size=d_vp),
        "coef_seq": rng.uniform(-1.0, 1.0, size=cfg.tau),
    }
    return coefs


def mixing_matrix(cfg: GenConfig) -> np.ndarray | None:
    if cfg.mixing == "concat":
        return None
    rng = substream(cfg.coef_seed, "mixing")
    raw = rng.standard_normal((cfg.d_x, cfg.d_x))
    q, r = np.linalg.qr(raw)
    return q * np.sign(np.diag(r))  # fixed random orthogonal map


# ---- single-step mechanisms -------------------------------------------------


def assign_treatment(v_prev: np.ndarray, a_prev: float, y_prev: float,
                     coef_a: np.ndarray, t: int,
                     policy: str = "observational",
                     rng: np.random.Generator | None = None,
                     logit_offset: float = 0.0) -> float:
    """Binary treatment for step t+1 given the step-t state.

    Observational policy thresholds a sigmoid at 0.5 (ties assign 1);
    random policy is Bernoulli(0.5) from the unit stream.
    """
    if policy == "random":
        if rng is None:
            raise ConfigurationError("random policy requires an rng")
        return float(rng.random() < 0.5)
    logit = float(np.sum(coef_a * v_prev - np.cos(v_prev ** 2))
                  - 0.5 * a_prev + 0.2 * y_prev - 0.1 * math.sin(t)
                  + logit_offset)
    p = 1.0 / (1.0 + math.exp(-logit))
    return 1.0 if p >= 0.5 else 0.0


def generate_outcome(c_prev: np.ndarray, u_prev: np.ndarray, u_prev2: np.ndarray,
                     a_window: np.ndarray, coef_y: np.ndarray,
                     coef_seq: np.ndarray, t: int, kind: str) -> float:
    """Outcome for step t+1 from the step-t state and applied treatments.

    ``a_window`` carries [a_{t+1}, a_t, ..., a_{t+2-tau}] newest-first; only
    its first entry is used in one_step mode.
    """
    vp = np.concatenate([c_prev, u_prev, u_prev2])
    base = float(np.sum(coef_y * vp))
    if kind == "one_step":
        return base - 0.2 * math.sin(a_window[0]) + 0.5 * math.sin(t / 5.0)
    return 0.2 * base - 0.5 * float(np.sum(coef_seq * a_window)) + math.sin(t)


def _unit_states(cfg: GenConfig, rng: np.random.Generator) -> tuple[np.ndarray, ...]:
    """Latent trajectories z, c, u for one unit over steps 1..T."""
    hi = 3.0 if cfg.kind == "decision" else 1.0
    z = np.zeros((cfg.T, cfg.d_z))
    c = np.zeros((cfg.T, cfg.d_c))
    u = np.zeros((cfg.T, cfg.d_u))
    z_prev = np.zeros(cfg.d_z)
    c_prev = np.zeros(cfg.d_c)
    for s in range(cfg.T):
        z[s] = 0.4 * z_prev + 0.6 * rng.uniform(0.0, hi, cfg.d_z) + 0.3 * math.sin(s)
        c[s] = 0.3 * c_prev + 0.7 * rng.uniform(0.0, hi, cfg.d_c) + 0.2 * math.sin(s)
        u[s] = rng.standard_normal(cfg.d_u) - 0.1 * math.cos(s)
        z_prev, c_prev = z[s], c[s]
    return z, c, u


def _roll_unit(cfg: GenConfig, coefs: dict, unit: int, policy: str,
               applied: np.ndarray | None = None,
               states: tuple[np.ndarray, ...] | None = None) -> dict:
    """One unit's full trajectory; `applied` overrides the policy per step where non-negative."""
    rng = substream(cfg.seed, "trajectory", unit)
    if states is None:
        states = _unit_states(cfg, rng)
    z, c, u = states
    a = np.zeros(cfg.T)
    y = np.zeros(cfg.T)
    zeros_z = np.zeros(cfg.d_z)
    zeros_c = np.zeros(cfg.d_c)
    zeros_u = np.zeros(cfg.d_u)
    for s in range(cfg.T):
        z_prev = z[s - 1] if s >= 1 else zeros_z
        c_prev = c[s - 1] if s >= 1 else zeros_c
        u_prev = u[s - 1] if s >= 1 else zeros_u
        u_prev2 = u[s - 2] if s >= 2 else zeros_u
        a_prev = a[s - 1] if s >= 1 else 0.0
        y_prev = y[s - 1] if s >= 1 else 0.0
        if applied is not None and applied[s] >= 0.0:
            a[s] = applied[s]
        else:
            v_prev = np.concatenate([z_prev, c_prev, u_prev])
            a[s] = assign_treatment(v_prev, a_prev, y_prev, coefs["coef_a"], s,
                                    policy=policy, rng=rng,
                                    logit_offset=cfg.logit_offset)
        window = np.zeros(cfg.tau)
        for j in range(cfg.tau):
            if s - j >= 0:
                window[j] = a[s - j]
        y[s] = generate_outcome(c_prev, u_prev, u_prev2, window,
                                coefs["coef_y"], coefs["coef_seq"], s, cfg.kind)
    return {"z": z, "c": c, "u": u, "a": a, "y": y}


def _observed_x(cfg: GenConfig, z: np.ndarray, c: np.ndarray) -> np.ndarray:
    x = np.concatenate([z, c], axis=-1)
    mix = mixing_matrix(cfg)
    if mix is not None:
        x = x @ mix.T
    return x


def generate_simulation(cfg: GenConfig, n: int, policy: str = "observational",
                        unit_offset: int = 0) -> PanelDataset:
    """Generate an n-unit panel under the given treatment policy."""
    cfg.validate()
    coefs = draw_coefficients(cfg)
    x = np.zeros((n, cfg.T, cfg.d_x))
    a = np.zeros((n, cfg.T, 1))
    y = np.zeros((n, cfg.T))
    z = np.zeros((n, cfg.T, cfg.d_z))
    c = np.zeros((n, cfg.T, cfg.d_c))
    u = np.zeros((n, cfg.T, cfg.d_u))
    for i in range(n):
        traj = _roll_unit(cfg, coefs, unit_offset + i, policy)
        z[i], c[i], u[i] = traj["z"], traj["c"], traj["u"]
        a[i, :, 0] = traj["a"]
        y[i] = traj["y"]
        x[i] = _observed_x(cfg, traj["z"], traj["c"])
    ds = PanelDataset(x=x, a=a, y=y)
    if cfg.latent_diagnostics:
        ds.z, ds.c, ds.u = z, c, u
    return ds


def generate_splits(cfg: GenConfig) -> tuple[PanelDataset, PanelDataset, PanelDataset]:
    """Train/val observational, test with randomized (counterfactual) treatments."""
    train = generate_simulation(cfg, cfg.n_train, "observational", unit_offset=0)
    val = generate_simulation(cfg, cfg.n_val, "observational", unit_offset=cfg.n_train)
    test = generate_simulation(cfg, cfg.n_test, "random",
                               unit_offset=cfg.n_train + cfg.n_val)
    return train, val, test


def enumerate_blocks(tau: int) -> list[tuple[int, ...]]:
    if tau > 20:
        raise ConfigurationError(f"tau={tau} exceeds the exhaustive-enumeration guard (20)")
    return [tuple((b >> (tau - 1 - j)) & 1 for j in range(tau))
            for b in range(2 ** tau)]


def generate_decision_dataset(cfg: GenConfig) -> tuple[PanelDataset, PanelDataset, OracleDecisionSet]:
    """Decision-mode splits plus the exhaustive oracle table for the test units.

    Test units get an observational prefix of T - tau steps; each candidate
    treatment block is then applied directly (bypassing the policy) and the
    terminal outcome recorded.  Latent states do not depend on treatments,
    so all candidates share one state trajectory per unit.
    """
    cfg.validate()
    if cfg.kind != "decision":
        raise ConfigurationError("generate_decision_dataset requires kind='decision'")
    train = generate_simulation(cfg, cfg.n_train, "observational", unit_offset=0)
    val = generate_simulation(cfg, cfg.n_val, "observational", unit_offset=cfg.n_train)

    coefs = draw_coefficients(cfg)
    blocks = enumerate_blocks(cfg.tau)
    t_hist = cfg.T - cfg.tau
    n = cfg.n_test
    offset = cfg.n_train + cfg.n_val
    x = np.zeros((n, cfg.T, cfg.d_x))
    a_hist = np.zeros((n, t_hist, 1))
    y_hist = np.zeros((n, t_hist))
    outcomes = np.zeros((n, len(blocks)))
    for i in range(n):
        unit = offset + i
        rng = substream(cfg.seed, "trajectory", unit)
        states = _unit_states(cfg, rng)
        base = _roll_unit(cfg, coefs, unit, "observational", states=states)
        x[i] = _observed_x(cfg, states[0], states[1])
        a_hist[i, :, 0] = base["a"][:t_hist]
        y_hist[i] = base["y"][:t_hist]
        for bi, block in enumerate(blocks):
            applied = np.full(cfg.T, -1.0)
            applied[:t_hist] = base["a"][:t_hist]
            applied[t_hist:] = block
            traj = _roll_unit(cfg, coefs, unit, "observational",
                              applied=applied, states=states)
            outcomes[i, bi] = traj["y"][-1]
    oracle_argmax = outcomes.argmax(axis=1)
    return train, val, OracleDecisionSet(
        x=x, a_hist=a_hist, y_hist=y_hist, candidates=blocks, outcomes=outcomes,
        oracle_value=outcomes.max(axis=1), oracle_argmax=oracle_argmax, tau=cfg.tau)


# ---- CSV / JSON persistence -------------------------------------------------


def _fmt(v: float) -> str:
    return repr(float(v))


def save_panel(ds: PanelDataset, path: str, latents: bool = False) -> None:
    """Long-format CSV: unit,t,x0..,a0..,y (+ latent columns when requested)."""
    cols = ["unit", "t"]
    cols += [f"x{k}" for k in range(ds.d_x)]
    cols += [f"a{k}" for k in range(ds.d_a)]
    cols += ["y"]
    lat = latents and ds.z is not None
    if lat:
        cols += [f"z{k}" for k in range(ds.z.shape[2])]
        cols += [f"c{k}" for k in range(ds.c.shape[2])]
        cols += [f"u{k}" for k in range(ds.u.shape[2])]
    with open(path, "w") as fh:
        fh.write(",".join(cols) + "\n")
        for i in range(ds.n):
            for t in range(ds.T):
                row = [str(i), str(t)]
                row += [_fmt(v) for v in ds.x[i, t]]
                row += [_fmt(v) for v in ds.a[i, t]]
                row.append(_fmt(ds.y[i, t]))
                if lat:
                    row += [_fmt(v) for v in ds.z[i, t]]
                    row += [_fmt(v) for v in ds.c[i, t]]
                    row += [_fmt(v) for v in ds.u[i, t]]
                fh.write(",".join(row) + "\n")


def load_panel(path: str) -> PanelDataset:
    with open(path) as fh:
        header = fh.readline().rstrip("\n")
        cols = header.split(",")
        for required in ("unit", "t", "y"):
            if required not in cols:
                raise ParseError(f"{path}:1: missing column '{required}'")
        idx = {c: k for k, c in enumerate(cols)}

        def block(prefix: str) -> list[int]:
            out = []
            k = 0
            while f"{prefix}{k}" in idx:
                out.append(idx[f"{prefix}{k}"])
                k += 1
            return out

        x_cols, a_cols = block("x"), block("a")
        z_cols, c_cols, u_cols = block("z"), block("c"), block("u")
        if not x_cols or not a_cols:
            raise ParseError(f"{path}:1: missing x/a columns")
        rows = []
        for lineno, line in enumerate(fh, start=2):
            line = line.rstrip("\n")
            if not line:
                continue
            parts = line.split(",")
            if len(parts) != len(cols):
                raise ParseError(f"{path}:{lineno}: expected {len(cols)} cells, got {len(parts)}")
            try:
                rows.append([float(p) for p in parts])
            except ValueError as exc:
                raise ParseError(f"{path}:{lineno}: non-numeric cell ({exc})") from exc
    data = np.array(rows)
    units = data[:, idx["unit"]].astype(int)
    times = data[:, idx["t"]].astype(int)
    n = units.max() + 1
    T = times.max() + 1
    if len(rows) != n * T:
        raise ParseError(f"{path}: ragged panel, expected {n * T} rows, got {len(rows)}")

    def gather(col_ids: list[int]) -> np.ndarray:
        arr = np.zeros((n, T, len(col_ids)))
        arr[units, times] = data[:, col_ids]
        return arr

    ds = PanelDataset(x=gather(x_cols), a=gather(a_cols),
                      y=gather([idx["y"]])[:, :, 0])
    if z_cols:
        ds.z, ds.c, ds.u = gather(z_cols), gather(c_cols), gather(u_cols)
    return ds


def save_metadata(path: str, cfg: GenConfig, extra: dict | None = None) -> None:
    meta = {
        "kind": cfg.kind, "d_z": cfg.d_z, "d_c": cfg.d_c, "d_u": cfg.d_u,
        "d_x": cfg.d_x, "T": cfg.T, "tau": cfg.tau,
        "n_train": cfg.n_train, "n_val": cfg.n_val, "n_test": cfg.n_test,
        "seed": cfg.seed, "coef_seed": cfg.coef_seed, "mixing": cfg.mixing,
        "logit_offset": cfg.logit_offset,
        "rng": "philox per-unit substreams keyed by (seed, tag, unit)",
    }
    if extra:
        meta.update(extra)
    with open(path, "w") as fh:
        json.dump(meta, fh, indent=2)


def save_oracle(oset: OracleDecisionSet, dir_path: str) -> None:
    """oracle.csv: unit, one column per candidate block, oracle value/argmax."""
    os.makedirs(dir_path, exist_ok=True)
    labels = ["".join(map(str, b)) for b in oset.candidates]
    with open(os.path.join(dir_path, "oracle.csv"), "w") as fh:
        fh.write("unit," + ",".join(f"y_{l}" for l in labels) + ",oracle,argmax\n")
        for i in range(oset.n):
            cells = [str(i)] + [_fmt(v) for v in oset.outcomes[i]]
            cells += [_fmt(oset.oracle_value[i]), str(int(oset.oracle_argmax[i]))]
            fh.write(",".join(cells) + "\n")
    payload = {
        "tau": oset.tau,
        "candidates": [list(b) for b in oset.candidates],
        "x": oset.x.tolist(), "a_hist": oset.a_hist.tolist(),
        "y_hist": oset.y_hist.tolist(), "outcomes": oset.outcomes.tolist(),
        "oracle_value": oset.oracle_value.tolist(),
        "oracle_argmax": oset.oracle_argmax.tolist(),
    }
    with open(os.path.join(dir_path, "oracle.json"), "w") as fh:
        json.dump(payload, fh)


def load_oracle(dir_path: str) -> OracleDecisionSet:
    with open(os.path.join(dir_path, "oracle.json")) as fh:
        payload = json.load(fh)
    return OracleDecisionSet(
        x=np.array(payload["x"]), a_hist=np.array(payload["a_hist"]),
        y_hist=np.array(payload["y_hist"]),
        candidates=[tuple(b) for b in payload["candidates"]],
        outcomes=np.array(payload["outcomes"]),
        oracle_value=np.array(payload["oracle_value"]),
        oracle_argmax=np.array(payload["oracle_argmax"], dtype=int),
        tau=payload["tau"])
