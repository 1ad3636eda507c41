"""Gaussian latent priors and link functions for the intrinsic parameters.

Every intrinsic parameter is drawn from a Gaussian on an unconstrained scale
and pushed through a link function into its admissible domain before
simulation.
"""

from __future__ import annotations

from dataclasses import dataclass
from typing import Dict

import numpy as np
from scipy.special import expit
from scipy.stats import norm

LINK_KINDS = ("softplus", "sigmoid", "scaled_sigmoid", "identity")

_SOFTPLUS_CUTOFF = 30.0


def softplus(x):
    """Stable ``log(1 + exp(x))``: linear above 30, exponential below -30."""
    x = np.asarray(x, dtype=np.float64)
    out = np.log1p(np.exp(np.clip(x, -_SOFTPLUS_CUTOFF, _SOFTPLUS_CUTOFF)))
    out = np.where(x > _SOFTPLUS_CUTOFF, x, out)
    out = np.where(x < -_SOFTPLUS_CUTOFF, np.exp(np.maximum(x, -745.0)), out)
    return out if out.ndim else float(out)


@dataclass(frozen=True)
class LinkFunction:
    kind: str
    lower: float = 0.0
    upper: float = 1.0

    def __post_init__(self):
        if self.kind not in LINK_KINDS:
            raise ValueError(f"unknown link kind {self.kind!r}")
        if self.kind == "scaled_sigmoid" and not self.lower < self.upper:
            raise ValueError(
                f"scaled_sigmoid needs lower < upper, got ({self.lower}, {self.upper})"
            )

    def __call__(self, x):
        return apply_link(self, x)

    def to_dict(self) -> dict:
        d = {"kind": self.kind}
        if self.kind == "scaled_sigmoid":
            d.update(lower=self.lower, upper=self.upper)
        return d


def apply_link(link: LinkFunction, x):
    """Map an unconstrained value (scalar or array) into the link's codomain."""
    if link.kind == "softplus":
        return softplus(x)
    if link.kind == "sigmoid":
        out = expit(np.asarray(x, dtype=np.float64))
    elif link.kind == "scaled_sigmoid":
        out = link.lower + (link.upper - link.lower) * expit(np.asarray(x, dtype=np.float64))
    else:
        out = np.asarray(x, dtype=np.float64)
    return out if out.ndim else float(out)


@dataclass(frozen=True)
class PriorSpec:
    """Gaussian prior on the unconstrained scale plus the link applied afterwards."""

    mean: float
    std: float
    link: LinkFunction = LinkFunction("identity")

    def __post_init__(self):
        if not self.std > 0:
            raise ValueError(f"prior std must be positive, got {self.std}")

    def constrained_quantile(self, q: float) -> float:
        return apply_link(self.link, self.mean + self.std * norm.ppf(q))


def sample_intrinsic(prior: PriorSpec, rng: np.random.Generator, size=None):
    """Draw unconstrained value(s) from ``N(prior.mean, prior.std)``."""
    return rng.normal(prior.mean, prior.std, size=size)


# (parameter, mean, std) on the unconstrained scale.
_PRIOR_TABLES = {
    "ddm": [
        ("v", 1.0, 0.8),
        ("a", 0.5, 0.5),
        ("z", 0.0, 0.8),
        ("t", -1.2, 0.5),
        ("sv", -1.2, 1.0),
        ("st", -1.5, 0.7),
    ],
    "rdm": [
        ("v", 0.6, 0.5),
        ("v_diff", 0.6, 0.5),
        ("a", 0.25, 0.5),
        ("t", -1.2, 0.5),
        ("sv", -1.0, 0.6),
        ("st", -1.5, 0.7),
    ],
    "cdm": [
        ("v", 1.0, 0.8),
        ("v_angle", 0.0, 0.5),
        ("a", 0.5, 0.5),
        ("t", -1.2, 0.5),
        ("sv", -1.0, 0.6),
        ("st", -1.5, 0.7),
    ],
    "gaussian": [
        ("mu", 0.0, 1.0),
    ],
}

DDM_Z_BOUNDS = (0.1, 0.9)
CDM_ANGLE_BOUNDS = (-np.pi / 2, np.pi / 2)


def _default_links(family: str) -> Dict[str, LinkFunction]:
    sp = LinkFunction("softplus")
    if family == "ddm":
        return {
            "v": sp, "a": sp, "t": sp, "sv": sp, "st": sp,
            "z": LinkFunction("scaled_sigmoid", *DDM_Z_BOUNDS),
        }
    if family == "rdm":
        # s_tau uses a plain sigmoid, i.e. a (0, 1) s interval
        return {
            "v": sp, "v_diff": sp, "a": sp, "t": sp, "sv": sp,
            "st": LinkFunction("sigmoid"),
        }
    if family == "cdm":
        return {
            "v": sp, "a": sp, "t": sp, "sv": sp, "st": sp,
            "v_angle": LinkFunction("scaled_sigmoid", *CDM_ANGLE_BOUNDS),
        }
    if family == "gaussian":
        return {"mu": LinkFunction("identity")}
    raise KeyError(f"unknown family {family!r}")


def link_table(family: str) -> Dict[str, LinkFunction]:
    """Per-parameter link functions of a family, in roster order."""
    links = _default_links(family)
    return {name: links[name] for name, _, _ in _PRIOR_TABLES[family]}


def prior_table(family: str) -> Dict[str, PriorSpec]:
    """Per-parameter intercept priors of a family, in roster order."""
    if family not in _PRIOR_TABLES:
        raise KeyError(f"unknown family {family!r}")
    links = link_table(family)
    return {
        name: PriorSpec(mean, std, links[name])
        for name, mean, std in _PRIOR_TABLES[family]
    }
