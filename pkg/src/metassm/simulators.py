"""Trial-level first-passage simulators for the DDM, RDM and CDM.

All three models are integrated with Euler-Maruyama at unit diffusion
(``s = 1``). Between grid points the path is treated as a Brownian bridge:
if neither endpoint is past the boundary, a crossing is still declared with
the bridge crossing probability ``exp(-2 d0 d1 / dt)``, where ``d0`` and
``d1`` are the distances of the endpoints to the boundary. This removes the
O(sqrt(dt)) overshoot bias of plain Euler first-passage detection. Crossing
times are reported at the midpoint of the step in which they occur.

Kernels consume a ``numpy.random.Generator`` so a dataset is a pure function
of its seed. Each trial draws its drift perturbation and non-decision jitter
before its path noise, always in the same order.
"""

from __future__ import annotations

import math
from dataclasses import dataclass
from typing import Callable, Dict, Tuple

import numpy as np
from numba import njit

CORRECTIONS = {"none": 0, "bridge": 1}


@dataclass(frozen=True)
class SimSettings:
    dt: float = 1e-3
    t_max: float = 10.0
    seed: int = 0
    boundary_correction: str = "bridge"
    # RDM only: share one drift perturbation across both accumulators
    rdm_shared_drift_noise: bool = True

    def __post_init__(self):
        if not 0 < self.dt <= 0.01:
            raise ValueError(f"dt must lie in (0, 0.01], got {self.dt}")
        if self.t_max < 1:
            raise ValueError(f"t_max must be >= 1, got {self.t_max}")
        if self.boundary_correction not in CORRECTIONS:
            raise ValueError(f"unknown boundary correction {self.boundary_correction!r}")


@dataclass
class TrialOutcome:
    """Per-trial outcomes; ``response`` is a choice (DDM/RDM), an angle (CDM) or 0."""

    rt: np.ndarray
    response: np.ndarray
    censored: np.ndarray
    ndt: np.ndarray

    @property
    def censoring_rate(self) -> float:
        return float(self.censored.mean()) if self.censored.size else 0.0

    def as_observables(self) -> np.ndarray:
        return np.stack([self.rt, self.response], axis=1)


@njit(cache=True)
def _bridge_hit(d0, d1, dt, rng):
    # one uniform is consumed only when the crossing probability is material
    e = 2.0 * d0 * d1 / dt
    if e > 40.0:
        return False
    return rng.random() < math.exp(-e)


@njit(cache=True)
def _ddm_kernel(theta, dt, t_max, correction, rng):
    n = theta.shape[0]
    rt = np.empty(n)
    choice = np.empty(n)
    censored = np.zeros(n, dtype=np.bool_)
    ndt = np.empty(n)
    sq = math.sqrt(dt)
    max_steps = int(math.ceil(t_max / dt))
    for i in range(n):
        v, a, z, t0, sv, st = theta[i, 0], theta[i, 1], theta[i, 2], theta[i, 3], theta[i, 4], theta[i, 5]
        vi = v + sv * rng.standard_normal()
        ndt[i] = t0 + st * rng.random()
        x = a * z
        step = 0
        resp = -1.0
        while step < max_steps:
            x1 = x + vi * dt + sq * rng.standard_normal()
            step += 1
            if x1 >= a:
                resp = 1.0
            elif x1 <= 0.0:
                resp = 0.0
            elif correction == 1:
                if _bridge_hit(a - x, a - x1, dt, rng):
                    resp = 1.0
                elif _bridge_hit(x, x1, dt, rng):
                    resp = 0.0
            x = x1
            if resp >= 0.0:
                break
        if resp < 0.0:
            censored[i] = True
            # censored: report the nearer boundary
            resp = 1.0 if x >= 0.5 * a else 0.0
            rt[i] = t_max + ndt[i]
        else:
            rt[i] = (step - 0.5) * dt + ndt[i]
        choice[i] = resp
    return rt, choice, censored, ndt


@njit(cache=True)
def _rdm_kernel(theta, dt, t_max, correction, shared, rng):
    n = theta.shape[0]
    rt = np.empty(n)
    choice = np.empty(n)
    censored = np.zeros(n, dtype=np.bool_)
    ndt = np.empty(n)
    sq = math.sqrt(dt)
    max_steps = int(math.ceil(t_max / dt))
    for i in range(n):
        v, vd, a, t0, sv, st = theta[i, 0], theta[i, 1], theta[i, 2], theta[i, 3], theta[i, 4], theta[i, 5]
        e0 = sv * rng.standard_normal()
        e1 = sv * rng.standard_normal()
        if shared:
            e1 = e0
        v0 = v + e0
        v1 = v + vd + e1
        ndt[i] = t0 + st * rng.random()
        x0 = 0.0
        x1 = 0.0
        step = 0
        resp = -1.0
        while step < max_steps:
            y0 = x0 + v0 * dt + sq * rng.standard_normal()
            y1 = x1 + v1 * dt + sq * rng.standard_normal()
            step += 1
            # reflecting lower barrier at zero
            if y0 < 0.0:
                y0 = 0.0
            if y1 < 0.0:
                y1 = 0.0
            hit0 = y0 >= a
            hit1 = y1 >= a
            if correction == 1:
                if not hit0:
                    hit0 = _bridge_hit(a - x0, a - y0, dt, rng)
                if not hit1:
                    hit1 = _bridge_hit(a - x1, a - y1, dt, rng)
            x0 = y0
            x1 = y1
            if hit0 and hit1:
                resp = 1.0 if y1 > y0 else 0.0
                break
            if hit0:
                resp = 0.0
                break
            if hit1:
                resp = 1.0
                break
        if resp < 0.0:
            censored[i] = True
            resp = 1.0 if x1 > x0 else 0.0
            rt[i] = t_max + ndt[i]
        else:
            rt[i] = (step - 0.5) * dt + ndt[i]
        choice[i] = resp
    return rt, choice, censored, ndt


@njit(cache=True)
def _cdm_kernel(theta, dt, t_max, correction, rng):
    n = theta.shape[0]
    rt = np.empty(n)
    angle = np.empty(n)
    censored = np.zeros(n, dtype=np.bool_)
    ndt = np.empty(n)
    sq = math.sqrt(dt)
    max_steps = int(math.ceil(t_max / dt))
    for i in range(n):
        v, th, a, t0, sv, st = theta[i, 0], theta[i, 1], theta[i, 2], theta[i, 3], theta[i, 4], theta[i, 5]
        vi = v + sv * rng.standard_normal()
        ndt[i] = t0 + st * rng.random()
        mx = vi * math.cos(th) * dt
        my = vi * math.sin(th) * dt
        x = 0.0
        y = 0.0
        step = 0
        hit = False
        while step < max_steps:
            x1 = x + mx + sq * rng.standard_normal()
            y1 = y + my + sq * rng.standard_normal()
            step += 1
            r1 = math.sqrt(x1 * x1 + y1 * y1)
            if r1 >= a:
                hit = True
            elif correction == 1:
                # tangent-plane bridge approximation of the circular boundary
                r0 = math.sqrt(x * x + y * y)
                hit = _bridge_hit(a - r0, a - r1, dt, rng)
            x = x1
            y = y1
            if hit:
                break
        angle[i] = math.atan2(y, x)
        if angle[i] == -math.pi:
            angle[i] = math.pi
        if hit:
            rt[i] = (step - 0.5) * dt + ndt[i]
        else:
            censored[i] = True
            rt[i] = t_max + ndt[i]
    return rt, angle, censored, ndt


def _as_theta(params, names) -> np.ndarray:
    if isinstance(params, dict):
        cols = [np.atleast_1d(np.asarray(params[k], dtype=np.float64)) for k in names]
        n = max(c.size for c in cols)
        theta = np.stack([np.broadcast_to(c, (n,)) for c in cols], axis=1)
    else:
        theta = np.atleast_2d(np.asarray(params, dtype=np.float64))
    if theta.shape[1] != len(names):
        raise ValueError(f"expected {len(names)} parameters {names}, got shape {theta.shape}")
    return np.ascontiguousarray(theta)


def _rng(settings: SimSettings, rng):
    return rng if rng is not None else np.random.default_rng(settings.seed)


def _check_common(theta, a_col, t_col, sv_col, st_col):
    if np.any(theta[:, a_col] <= 0):
        raise ValueError("threshold a must be positive")
    if np.any(theta[:, t_col] < 0) or np.any(theta[:, sv_col] < 0) or np.any(theta[:, st_col] < 0):
        raise ValueError("t, sv and st must be non-negative")
    if not np.all(np.isfinite(theta)):
        raise ValueError("non-finite trial parameters")


DDM_PARAMS = ("v", "a", "z", "t", "sv", "st")
RDM_PARAMS = ("v", "v_diff", "a", "t", "sv", "st")
CDM_PARAMS = ("v", "v_angle", "a", "t", "sv", "st")
GAUSSIAN_PARAMS = ("mu",)


def simulate_ddm(params, settings: SimSettings = SimSettings(), rng=None) -> TrialOutcome:
    """Two-boundary diffusion on ``[0, a]`` started at ``a * z``.

    ``params`` is an ``(n, 6)`` array ordered as ``DDM_PARAMS`` or a dict of
    scalars/arrays. Choice is 1 when the upper boundary is reached first.
    """
    theta = _as_theta(params, DDM_PARAMS)
    _check_common(theta, 1, 3, 4, 5)
    if np.any((theta[:, 2] <= 0) | (theta[:, 2] >= 1)):
        raise ValueError("starting point z must lie in (0, 1)")
    out = _ddm_kernel(theta, settings.dt, settings.t_max,
                      CORRECTIONS[settings.boundary_correction], _rng(settings, rng))
    return TrialOutcome(*out)


def simulate_rdm(params, settings: SimSettings = SimSettings(), rng=None) -> TrialOutcome:
    """Two racing accumulators from 0 to a shared threshold ``a``.

    Accumulator 0 drifts at ``v`` and accumulator 1 at ``v + v_diff``. The
    response is the index of the winner.
    """
    theta = _as_theta(params, RDM_PARAMS)
    _check_common(theta, 2, 3, 4, 5)
    out = _rdm_kernel(theta, settings.dt, settings.t_max,
                      CORRECTIONS[settings.boundary_correction],
                      settings.rdm_shared_drift_noise, _rng(settings, rng))
    return TrialOutcome(*out)


def simulate_cdm(params, settings: SimSettings = SimSettings(), rng=None) -> TrialOutcome:
    """Planar diffusion absorbed on the circle of radius ``a``.

    The response is the crossing angle in ``(-pi, pi]``, read as the angular
    error relative to the correct direction.
    """
    theta = _as_theta(params, CDM_PARAMS)
    _check_common(theta, 2, 3, 4, 5)
    out = _cdm_kernel(theta, settings.dt, settings.t_max,
                      CORRECTIONS[settings.boundary_correction], _rng(settings, rng))
    return TrialOutcome(*out)


def simulate_gaussian_oracle(params, settings: SimSettings = SimSettings(), rng=None) -> TrialOutcome:
    """Conjugate test family: one ``N(mu, 1)`` draw per trial in the rt slot."""
    theta = _as_theta(params, GAUSSIAN_PARAMS)
    n = theta.shape[0]
    y = theta[:, 0] + _rng(settings, rng).standard_normal(n)
    zeros = np.zeros(n)
    return TrialOutcome(y, zeros, np.zeros(n, dtype=bool), zeros.copy())


def gaussian_posterior(y, prior_mean: float, prior_std: float) -> Tuple[float, float]:
    """Closed-form posterior (mean, std) of ``mu`` given ``y_i ~ N(mu, 1)``."""
    y = np.asarray(y, dtype=np.float64)
    precision = 1.0 / prior_std**2 + y.size
    mean = (prior_mean / prior_std**2 + y.sum()) / precision
    return float(mean), float(1.0 / np.sqrt(precision))


@dataclass(frozen=True)
class Family:
    name: str
    fid: int
    params: Tuple[str, ...]
    simulate: Callable[..., TrialOutcome]
    n_obs: int = 2

    @property
    def dim(self) -> int:
        return len(self.params)


FAMILIES: Dict[str, Family] = {
    "ddm": Family("ddm", 0, DDM_PARAMS, simulate_ddm),
    "rdm": Family("rdm", 1, RDM_PARAMS, simulate_rdm),
    "cdm": Family("cdm", 2, CDM_PARAMS, simulate_cdm),
    "gaussian": Family("gaussian", 3, GAUSSIAN_PARAMS, simulate_gaussian_oracle, n_obs=1),
}
FAMILY_BY_ID = {f.fid: f for f in FAMILIES.values()}
N_FAMILIES = len(FAMILIES)


def get_family(name_or_id) -> Family:
    if isinstance(name_or_id, (int, np.integer)):
        try:
            return FAMILY_BY_ID[int(name_or_id)]
        except KeyError:
            raise KeyError(f"unknown family id {name_or_id}") from None
    try:
        return FAMILIES[str(name_or_id).lower()]
    except KeyError:
        raise KeyError(f"unknown family {name_or_id!r}") from None
