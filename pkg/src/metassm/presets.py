"""The five benchmark design configurations, pinned per family.

Each preset fixes the design columns and, for every family, which intrinsic
parameters are active on each design row. Rows are ordered
intercept, u1, u2, u1 x u2. Presets are read-only.
"""

from __future__ import annotations

from dataclasses import dataclass
from types import MappingProxyType
from typing import Mapping, Tuple

import numpy as np

from .simulators import get_family

# u1 is a continuous covariate, u2 a two-level condition
PRESET_COLUMNS = ("intercept", "continuous", "categorical", "interaction:1:2")

_DDM_ALL = ("v", "a", "z", "t", "sv", "st")
_RDM_ALL = ("v", "v_diff", "a", "t", "sv", "st")
_CDM_ALL = ("v", "v_angle", "a", "t", "sv", "st")


@dataclass(frozen=True)
class Preset:
    name: str
    label: str
    columns: Tuple[str, ...]
    rows: Mapping[str, Tuple[Tuple[str, ...], ...]]

    @property
    def n_rows(self) -> int:
        return len(self.columns)

    def families(self) -> Tuple[str, ...]:
        return tuple(self.rows)

    def active(self, family: str) -> Tuple[Tuple[str, ...], ...]:
        try:
            return self.rows[family]
        except KeyError:
            raise KeyError(f"preset {self.name!r} has no {family!r} configuration") from None

    def mask(self, family: str, r_max: int, d_max: int | None = None) -> np.ndarray:
        """Pinned ``r_max x d_max`` binary mask for ``family``."""
        fam = get_family(family)
        d_max = fam.dim if d_max is None else d_max
        if self.n_rows > r_max:
            raise ValueError(f"preset {self.name!r} needs {self.n_rows} rows, r_max={r_max}")
        m = np.zeros((r_max, d_max), dtype=np.uint8)
        for r, names in enumerate(self.active(family)):
            for name in names:
                m[r, fam.params.index(name)] = 1
        return m


def _preset(name, label, n_cols, ddm, rdm, cdm, gaussian=None):
    rows = {"ddm": ddm, "rdm": rdm, "cdm": cdm}
    if gaussian is not None:
        rows["gaussian"] = gaussian
    return Preset(name, label, PRESET_COLUMNS[:n_cols], MappingProxyType(rows))


PRESETS: Mapping[str, Preset] = MappingProxyType({
    p.name: p
    for p in (
        _preset(
            "intercept_only", "Intercept Only", 1,
            ddm=(_DDM_ALL,),
            rdm=(_RDM_ALL,),
            cdm=(_CDM_ALL,),
            gaussian=(("mu",),),
        ),
        _preset(
            "fixed", "Fixed Variability", 1,
            ddm=(("v", "a", "z", "t"),),
            rdm=(("v", "v_diff", "a", "t"),),
            cdm=(("v", "v_angle", "a", "t"),),
        ),
        _preset(
            "regressed", "Regressed", 3,
            ddm=(_DDM_ALL, ("v", "a", "z"), ("v", "a", "z")),
            rdm=(_RDM_ALL, ("v_diff", "a"), ("v_diff", "a")),
            cdm=(_CDM_ALL, ("v", "a"), ("v", "a")),
            gaussian=(("mu",), ("mu",), ("mu",)),
        ),
        _preset(
            "fixed_regressed", "Fixed + Regressed", 3,
            ddm=(("v", "a", "z", "t"), ("v", "a", "z"), ("v", "a", "z")),
            rdm=(("v", "v_diff", "a", "t"), ("v_diff", "a"), ("v_diff", "a")),
            cdm=(("v", "v_angle", "a", "t"), ("v", "a"), ("v", "a")),
        ),
        _preset(
            "interaction", "With Interaction", 4,
            ddm=(_DDM_ALL, ("v", "a", "z", "t", "sv"), ("v", "a", "z", "t"), ("v", "a", "z")),
            rdm=(_RDM_ALL, ("v", "v_diff", "a", "t", "sv"), ("v", "v_diff", "a", "t"),
                 ("v", "v_diff", "a")),
            cdm=(_CDM_ALL, ("v", "v_angle", "a", "t", "sv"), ("v", "v_angle", "a", "t"),
                 ("v", "v_angle", "a")),
        ),
    )
})

BENCHMARK_PRESETS = ("intercept_only", "fixed", "regressed", "fixed_regressed", "interaction")


def get_preset(name: str) -> Preset:
    key = name.strip()
    if key in PRESETS:
        return PRESETS[key]
    for p in PRESETS.values():
        if p.label.lower() == key.lower():
            return p
    raise KeyError(f"unknown preset {name!r}; choose from {sorted(PRESETS)}")
