"""Generative meta-model: family -> design and mask -> coefficients -> data.

A dataset is produced by

1. drawing a family (class scope) or using the configured one,
2. sampling a design matrix ``X`` (N x R, zero padded to R_max),
3. sampling a binary mask ``M`` and coefficients ``B`` (intercept row from
   the intrinsic priors, slope rows from N(0, 1)),
4. mapping ``Theta = g(X (M * B))`` through the per-parameter links,
5. simulating one trial per row of ``Theta``.

Everything downstream of a dataset seed is deterministic, and batches are a
pure function of ``(config, master seed, batch index)``.
"""

from __future__ import annotations

import logging
from dataclasses import dataclass, field
from typing import Dict, List, Optional, Sequence, Tuple

import numpy as np

from .presets import get_preset
from .priors import LinkFunction, PriorSpec, apply_link, prior_table
from .simulators import FAMILIES, Family, SimSettings, get_family

log = logging.getLogger(__name__)

SCOPES = ("instance", "family", "class")
COLUMN_KINDS = ("continuous", "categorical", "interaction")
C_OBS_MAX = 2
FAMILIES_PARAMS_ALL = frozenset(p for f in FAMILIES.values() for p in f.params)


class SimulationError(RuntimeError):
    """A dataset could not be produced within the resample budget."""

    def __init__(self, message, provenance=None):
        super().__init__(message)
        self.provenance = provenance or {}


class PathologicalDraw(ValueError):
    pass


@dataclass(frozen=True)
class StructurePrior:
    n_min: int = 64
    n_max: int = 512
    r_max: int = 8
    # probabilities of continuous / categorical / interaction columns
    kind_weights: Tuple[float, float, float] = (0.4, 0.4, 0.2)
    p_active: float = 0.5
    # probability that each fixable intrinsic parameter is switched off
    p_fixed: float = 0.5
    fixable: Tuple[str, ...] = ("sv", "st")

    def __post_init__(self):
        if not 1 <= self.n_min <= self.n_max:
            raise ValueError("need 1 <= n_min <= n_max")
        if self.r_max < 1:
            raise ValueError("r_max must be >= 1")
        if len(self.kind_weights) != 3 or any(w < 0 for w in self.kind_weights) or sum(self.kind_weights) <= 0:
            raise ValueError("kind_weights must be three non-negative weights")
        for p in (self.p_active, self.p_fixed):
            if not 0 <= p <= 1:
                raise ValueError("probabilities must lie in [0, 1]")


@dataclass(frozen=True)
class ModelConfig:
    """Everything that determines the simulation distribution."""

    scope: str = "family"
    families: Tuple[str, ...] = ("ddm",)
    family_probs: Optional[Tuple[float, ...]] = None
    preset: Optional[str] = None
    structure: StructurePrior = StructurePrior()
    sim: SimSettings = SimSettings()
    # {family: {param: PriorSpec}}; missing entries use the shipped tables
    priors: Dict[str, Dict[str, PriorSpec]] = field(default_factory=dict)
    max_censoring: float = 0.01
    max_resample: int = 10
    guard_factor: float = 10.0

    def __post_init__(self):
        if self.scope not in SCOPES:
            raise ValueError(f"scope must be one of {SCOPES}, got {self.scope!r}")
        if not self.families:
            raise ValueError("at least one family is required")
        for f in self.families:
            get_family(f)
        if self.scope != "class" and len(self.families) != 1:
            raise ValueError(f"{self.scope} scope takes exactly one family")
        if self.scope == "instance" and self.preset is None:
            raise ValueError("instance scope needs a preset")
        if self.preset is not None:
            p = get_preset(self.preset)
            for f in self.families:
                p.active(f)
            if p.n_rows > self.structure.r_max:
                raise ValueError("preset has more rows than r_max")
        if self.family_probs is not None:
            if len(self.family_probs) != len(self.families) or abs(sum(self.family_probs) - 1) > 1e-9:
                raise ValueError("family_probs must match families and sum to 1")

    @property
    def d_max(self) -> int:
        return max(get_family(f).dim for f in self.families)

    @property
    def r_max(self) -> int:
        return self.structure.r_max

    def family_priors(self, family: str) -> Dict[str, PriorSpec]:
        table = prior_table(family)
        table.update(self.priors.get(family, {}))
        return table

    def links(self, family: str) -> List[LinkFunction]:
        pri = self.family_priors(family)
        return [pri[p].link for p in get_family(family).params]


@dataclass
class DesignMatrix:
    values: np.ndarray  # (N, R_max)
    n_active: int
    kinds: Tuple[str, ...]

    @property
    def n_trials(self) -> int:
        return self.values.shape[0]


@dataclass
class Dataset:
    family: int
    X: np.ndarray  # (N, R_max)
    B: np.ndarray  # (R_max, D_max), unconstrained scale, masked entries 0
    M: np.ndarray  # (R_max, D_max) uint8
    Y: np.ndarray  # (N, C_OBS_MAX)
    n_regressors: int
    seed: int
    kinds: Tuple[str, ...] = ()
    censoring_rate: float = 0.0
    attempts: int = 1

    @property
    def n_trials(self) -> int:
        return self.X.shape[0]

    @property
    def family_name(self) -> str:
        return get_family(self.family).name

    def active_cells(self) -> List[Tuple[int, int]]:
        return [tuple(map(int, rc)) for rc in np.argwhere(self.M > 0)]


@dataclass
class SimBatch:
    X: np.ndarray  # (B, N, R_max)
    Y: np.ndarray  # (B, N, C_OBS_MAX)
    B: np.ndarray  # (B, R_max, D_max)
    M: np.ndarray  # (B, R_max, D_max)
    family: np.ndarray  # (B,)
    n_trials: int
    n_regressors: int
    seeds: np.ndarray
    batch_index: int = 0

    def __len__(self):
        return self.X.shape[0]

    @classmethod
    def from_datasets(cls, datasets: Sequence[Dataset], batch_index: int = 0) -> "SimBatch":
        ns = {d.n_trials for d in datasets}
        if len(ns) != 1:
            raise ValueError("datasets in a batch must share N")
        return cls(
            X=np.stack([d.X for d in datasets]),
            Y=np.stack([d.Y for d in datasets]),
            B=np.stack([d.B for d in datasets]),
            M=np.stack([d.M for d in datasets]),
            family=np.array([d.family for d in datasets], dtype=np.int64),
            n_trials=ns.pop(),
            n_regressors=max(d.n_regressors for d in datasets),
            seeds=np.array([d.seed for d in datasets], dtype=np.uint64),
            batch_index=batch_index,
        )


def derive_seed(*keys: int) -> int:
    """Stable 64-bit seed from a tuple of non-negative integer keys."""
    return int(np.random.SeedSequence([int(k) for k in keys]).generate_state(1, np.uint64)[0])


def _categorical_column(n, rng):
    col = np.full(n, 0.5)
    col[: n // 2] = -0.5
    if n % 2:
        col[-1] = rng.choice((-0.5, 0.5))
    return rng.permutation(col)


def sample_design(n_trials: int, n_regressors: int, rng: np.random.Generator,
                  r_max: int = 8, kind_weights=(0.4, 0.4, 0.2),
                  kinds: Optional[Sequence[str]] = None) -> DesignMatrix:
    """Sample an ``N x R_max`` design with ``R`` active columns.

    Column 0 is the intercept. Other columns are continuous (standard
    normal), categorical (balanced +-0.5 codes) or the product of two earlier
    non-intercept columns. ``kinds`` pins the column types, e.g.
    ``("intercept", "continuous", "categorical", "interaction:1:2")``.
    """
    if not 1 <= n_regressors <= r_max:
        raise ValueError(f"R must lie in [1, {r_max}], got {n_regressors}")
    if n_trials < 1:
        raise ValueError("need at least one trial")
    X = np.zeros((n_trials, r_max))
    X[:, 0] = 1.0
    chosen = ["intercept"]
    w = np.asarray(kind_weights, dtype=float)
    w = w / w.sum()
    for r in range(1, n_regressors):
        if kinds is not None:
            kind = kinds[r]
        else:
            kind = COLUMN_KINDS[rng.choice(3, p=w)]
            if kind == "interaction":
                if r < 3:
                    kind = "continuous"
                else:
                    i, j = sorted(rng.choice(np.arange(1, r), size=2, replace=False))
                    kind = f"interaction:{i}:{j}"
        if kind == "continuous":
            X[:, r] = rng.standard_normal(n_trials)
        elif kind == "categorical":
            X[:, r] = _categorical_column(n_trials, rng)
        elif kind.startswith("interaction:"):
            _, i, j = kind.split(":")
            i, j = int(i), int(j)
            if not (0 < i < r and 0 < j < r and i != j):
                raise ValueError(f"interaction parents must be earlier non-intercept columns: {kind}")
            X[:, r] = X[:, i] * X[:, j]
        else:
            raise ValueError(f"unknown column kind {kind!r}")
        chosen.append(kind)
    return DesignMatrix(X, n_regressors, tuple(chosen))


def sample_mask(family: str, n_regressors: int, rng: np.random.Generator,
                r_max: int = 8, d_max: Optional[int] = None, preset: Optional[str] = None,
                p_active: float = 0.5, p_fixed: float = 0.0,
                fixable: Sequence[str] = ()) -> np.ndarray:
    """Binary ``r_max x d_max`` mask for one dataset.

    With a preset the mask is pinned cell-for-cell. Otherwise fixable
    parameters are switched off with probability ``p_fixed``, intercepts of
    active parameters are always on and slope cells on rows ``1..R-1`` are
    Bernoulli(``p_active``).
    """
    fam = get_family(family)
    d_max = fam.dim if d_max is None else d_max
    if preset is not None:
        return get_preset(preset).mask(fam.name, r_max, d_max)
    unknown = set(fixable) - set(FAMILIES_PARAMS_ALL)
    if unknown:
        raise ValueError(f"mask spec references unknown parameters {sorted(unknown)}")
    m = np.zeros((r_max, d_max), dtype=np.uint8)
    fixed_draw = rng.random(fam.dim)
    slope_draw = rng.random((r_max, fam.dim))
    for d, name in enumerate(fam.params):
        if name in fixable and fixed_draw[d] < p_fixed:
            continue
        m[0, d] = 1
        m[1:n_regressors, d] = slope_draw[1:n_regressors, d] < p_active
    return m


def sample_coefficients(priors: Sequence[PriorSpec], mask: np.ndarray,
                        rng: np.random.Generator) -> np.ndarray:
    """Intercepts from the intrinsic priors, slopes from N(0, 1), masked to 0."""
    r_max, d_max = mask.shape
    B = rng.standard_normal((r_max, d_max))
    for d, pri in enumerate(priors):
        B[0, d] = pri.mean + pri.std * B[0, d]
    B[:, len(priors):] = 0.0
    return B * (mask > 0)


def build_theta(X: np.ndarray, B: np.ndarray, M: np.ndarray,
                links: Sequence[LinkFunction]) -> np.ndarray:
    """``Theta = g(X (M * B))`` restricted to the family's ``len(links)`` columns."""
    X = np.asarray(X, dtype=np.float64)
    if X.shape[1] != B.shape[0] or B.shape != M.shape:
        raise ValueError(f"shapes not conformable: X {X.shape}, B {B.shape}, M {M.shape}")
    eta = X @ (np.asarray(M, dtype=np.float64) * B)
    theta = np.empty((X.shape[0], len(links)))
    for d, link in enumerate(links):
        theta[:, d] = apply_link(link, eta[:, d])
    if not np.all(np.isfinite(theta)):
        raise PathologicalDraw("non-finite constrained parameter")
    return theta


def _guard(theta, priors, factor):
    for d, pri in enumerate(priors):
        if pri.link.kind in ("softplus", "sigmoid"):
            limit = factor * pri.constrained_quantile(0.999)
            if np.any(theta[:, d] > limit):
                raise PathologicalDraw(f"parameter {d} exceeds {limit:.3g}")


def _pick_family(config: ModelConfig, rng) -> Family:
    if config.scope == "class" and len(config.families) > 1:
        probs = config.family_probs
        if probs is None:
            probs = np.full(len(config.families), 1.0 / len(config.families))
        return get_family(config.families[rng.choice(len(config.families), p=probs)])
    return get_family(config.families[0])


def simulate_dataset(config: ModelConfig, n_trials: int, seed: int,
                     n_regressors: Optional[int] = None,
                     family: Optional[str] = None) -> Dataset:
    """Simulate one dataset; a pure function of ``(config, N, R, seed)``."""
    rng = np.random.default_rng(seed)
    fam = get_family(family) if family is not None else _pick_family(config, rng)
    st = config.structure
    preset = get_preset(config.preset) if config.preset is not None else None
    if preset is not None:
        n_regressors = preset.n_rows
        kinds = preset.columns
    else:
        kinds = None
        if n_regressors is None:
            n_regressors = int(rng.integers(1, st.r_max + 1))
    pri_map = config.family_priors(fam.name)
    priors = [pri_map[p] for p in fam.params]
    links = [p.link for p in priors]
    reasons = []
    for attempt in range(config.max_resample + 1):
        design = sample_design(n_trials, n_regressors, rng, st.r_max, st.kind_weights, kinds)
        M = sample_mask(fam.name, n_regressors, rng, st.r_max, config.d_max,
                        preset=config.preset, p_active=st.p_active,
                        p_fixed=st.p_fixed, fixable=st.fixable)
        B = sample_coefficients(priors, M, rng)
        try:
            theta = build_theta(design.values, B[:, : fam.dim], M[:, : fam.dim], links)
            _guard(theta, priors, config.guard_factor)
        except PathologicalDraw as exc:
            reasons.append(str(exc))
            continue
        out = fam.simulate(theta, config.sim, rng=rng)
        if out.censoring_rate > config.max_censoring:
            reasons.append(f"censoring {out.censoring_rate:.3f}")
            log.debug("dataset seed=%d attempt %d rejected: censoring %.3f",
                      seed, attempt, out.censoring_rate)
            continue
        Y = np.zeros((n_trials, C_OBS_MAX))
        Y[:, 0] = out.rt
        if fam.n_obs > 1:
            Y[:, 1] = out.response
        return Dataset(fam.fid, design.values, B, M, Y, n_regressors, int(seed),
                       design.kinds, out.censoring_rate, attempt + 1)
    raise SimulationError(
        f"{fam.name} dataset seed={seed} rejected {config.max_resample + 1} times: {reasons[-1]}",
        provenance={"family": fam.name, "seed": int(seed), "n_trials": n_trials,
                    "n_regressors": n_regressors, "reasons": reasons},
    )


def draw_structure(config: ModelConfig, rng: np.random.Generator) -> Tuple[int, int]:
    """One (N, R) pair for a batch."""
    st = config.structure
    n = int(rng.integers(st.n_min, st.n_max + 1))
    if config.preset is not None:
        r = get_preset(config.preset).n_rows
    else:
        r = int(rng.integers(1, st.r_max + 1))
    return n, r


def make_batch(config: ModelConfig, batch_size: int, seed: int, batch_index: int = 0,
               n_trials: Optional[int] = None) -> SimBatch:
    """Batch ``batch_index`` of the stream defined by ``seed``.

    N and R are shared across the batch; family, design, mask and
    coefficients vary per item.
    """
    if batch_size < 1:
        raise ValueError("batch_size must be >= 1")
    rng = np.random.default_rng([int(seed), int(batch_index)])
    n, r = draw_structure(config, rng)
    if n_trials is not None:
        n = n_trials
    items = [
        simulate_dataset(config, n, derive_seed(seed, batch_index, i), n_regressors=r)
        for i in range(batch_size)
    ]
    return SimBatch.from_datasets(items, batch_index)


def prior_coefficient_draws(config: ModelConfig, family: str, n_draws: int,
                            seed: int) -> np.ndarray:
    """Monte Carlo draws of ``B`` under the config's mask distribution."""
    rng = np.random.default_rng(seed)
    fam = get_family(family)
    st = config.structure
    pri = config.family_priors(fam.name)
    priors = [pri[p] for p in fam.params]
    n_rows = get_preset(config.preset).n_rows if config.preset else st.r_max
    out = np.empty((n_draws, st.r_max, config.d_max))
    for k in range(n_draws):
        M = sample_mask(fam.name, n_rows, rng, st.r_max, config.d_max, preset=config.preset,
                        p_active=st.p_active, p_fixed=st.p_fixed, fixable=st.fixable)
        out[k] = sample_coefficients(priors, M, rng)
    return out
