"""Posterior-quality metrics and amortization-gap aggregation.

All functions are pure over their inputs. Arrays follow the convention
``truths: (n_datasets, n_cells)``, ``means: (n_datasets, n_cells)`` and
``draws: (n_datasets, n_draws, n_cells)``.
"""

from __future__ import annotations

import csv
import json
import math
from dataclasses import dataclass, field
from pathlib import Path
from typing import Dict, Iterable, List, Mapping, Optional, Sequence, Tuple

import numpy as np
from scipy import stats
from sklearn.linear_model import LogisticRegression
from sklearn.model_selection import StratifiedKFold, cross_val_score
from sklearn.neural_network import MLPClassifier
from sklearn.pipeline import make_pipeline
from sklearn.preprocessing import StandardScaler

NUM_QUANTILES = 20
N_BOOTSTRAP = 1000
PRIOR_MC_DRAWS = 10_000

# headline figures of the full-budget runs; not reproducible at desk scale
REFERENCE = {
    "ddm_baseline_nrmse": 0.078,
    "ddm_baseline_contraction": 0.902,
    "ddm_family_vs_baseline_c2st": 0.693,
}

# every estimator choice in force, copied into report manifests
CONVENTIONS = {
    "point_estimate": "posterior mean",
    "nrmse_normalizer": "truth range (max - min) over the test set",
    "calibration_error": "mean absolute ECDF deviation from uniform at quantile midpoints",
    "num_quantiles": NUM_QUANTILES,
    "calibration_band": "simulated simultaneous 95% band, uniform null, matched dataset count",
    "contraction_prior_variance": f"Monte Carlo, {PRIOR_MC_DRAWS} draws per cell",
    "c2st_classifier": "logistic regression",
    "c2st_folds": 5,
    "c2st_standardize": True,
    "sem": f"bootstrap SEM of the median, {N_BOOTSTRAP} resamples",
}


class DiagnosticsError(ValueError):
    pass


def _2d(a) -> np.ndarray:
    a = np.asarray(a, dtype=np.float64)
    return a[:, None] if a.ndim == 1 else a


def recovery_r(truths, means) -> np.ndarray:
    """Pearson r per cell across datasets; NaN where the truths do not vary."""
    truths, means = _2d(truths), _2d(means)
    if truths.shape != means.shape:
        raise DiagnosticsError(f"shape mismatch {truths.shape} vs {means.shape}")
    if truths.shape[0] < 3:
        raise DiagnosticsError("recovery needs at least 3 datasets")
    tc = truths - truths.mean(axis=0)
    mc = means - means.mean(axis=0)
    denom = np.sqrt((tc ** 2).sum(axis=0) * (mc ** 2).sum(axis=0))
    with np.errstate(invalid="ignore", divide="ignore"):
        r = (tc * mc).sum(axis=0) / denom
    r[~(denom > 0)] = np.nan
    return np.clip(r, -1.0, 1.0)


def nrmse(truths, means, normalizer=None) -> np.ndarray:
    """RMSE of posterior means divided by the truth range (or ``normalizer``)."""
    truths, means = _2d(truths), _2d(means)
    if truths.shape != means.shape:
        raise DiagnosticsError(f"shape mismatch {truths.shape} vs {means.shape}")
    if normalizer is None:
        normalizer = truths.max(axis=0) - truths.min(axis=0)
    normalizer = np.broadcast_to(np.asarray(normalizer, dtype=np.float64), truths.shape[1:])
    if np.any(~(normalizer > 0)):
        raise DiagnosticsError("degenerate truth range")
    return np.sqrt(((means - truths) ** 2).mean(axis=0)) / normalizer


def fractional_ranks(truths, draws) -> np.ndarray:
    """Share of draws strictly below the truth, per dataset and cell."""
    truths = _2d(truths)
    draws = np.asarray(draws, dtype=np.float64)
    if draws.ndim == 2:
        draws = draws[..., None]
    if draws.shape[0] != truths.shape[0] or draws.shape[2] != truths.shape[1]:
        raise DiagnosticsError(f"draws {draws.shape} do not match truths {truths.shape}")
    return (draws < truths[:, None, :]).mean(axis=1)


def quantile_points(num_quantiles: int = NUM_QUANTILES) -> np.ndarray:
    return (np.arange(num_quantiles) + 0.5) / num_quantiles


def ecdf(ranks, grid) -> np.ndarray:
    """ECDF of ``ranks`` (n, c) on ``grid``; returns (len(grid), c)."""
    ranks = _2d(ranks)
    return (ranks[None, :, :] <= np.asarray(grid)[:, None, None]).mean(axis=1)


def calibration_error(ranks, num_quantiles: int = NUM_QUANTILES) -> np.ndarray:
    q = quantile_points(num_quantiles)
    return np.abs(ecdf(ranks, q) - q[:, None]).mean(axis=0)


def simultaneous_band(n_datasets: int, n_draws: Optional[int] = None, grid=None,
                      level: float = 0.95, n_sims: int = 2000, seed: int = 0):
    """Simultaneous band for the rank ECDF of ``n_datasets`` calibrated ranks.

    Ranks under the null are simulated with the same discreteness as real
    fractional ranks (``k / n_draws``, ``k`` uniform on ``0..n_draws``). A
    pointwise binomial tail level ``gamma`` is tuned so that ``level`` of the
    simulated ECDF curves lie entirely inside the band.
    """
    grid = np.linspace(0.01, 0.99, 99) if grid is None else np.asarray(grid)
    rng = np.random.default_rng(seed)
    if n_draws is None:
        null = rng.random((n_sims, n_datasets))
        p0 = grid
    else:
        null = rng.integers(0, n_draws + 1, size=(n_sims, n_datasets)) / n_draws
        p0 = (np.floor(grid * n_draws + 1e-9) + 1) / (n_draws + 1)
    counts = (null[:, :, None] <= grid[None, None, :]).sum(axis=1)  # (sims, grid)
    lower_tail = stats.binom.cdf(counts, n_datasets, p0)
    upper_tail = stats.binom.sf(counts - 1, n_datasets, p0)
    extreme = np.minimum(lower_tail, upper_tail).min(axis=1)
    gamma = float(np.quantile(extreme, 1 - level))
    lo = stats.binom.ppf(gamma / 2, n_datasets, p0) / n_datasets
    hi = stats.binom.ppf(1 - gamma / 2, n_datasets, p0) / n_datasets
    return grid, lo, hi


@dataclass
class CalibrationResult:
    ranks: np.ndarray  # (n_datasets, n_cells)
    error: np.ndarray  # (n_cells,)
    grid: np.ndarray
    ecdf: np.ndarray  # (len(grid), n_cells)
    band_lo: np.ndarray
    band_hi: np.ndarray

    def within_band(self) -> np.ndarray:
        inside = (self.ecdf >= self.band_lo[:, None] - 1e-12) & (self.ecdf <= self.band_hi[:, None] + 1e-12)
        return inside.all(axis=0)


def calibration(truths, draws, num_quantiles: int = NUM_QUANTILES, seed: int = 0,
                n_band_sims: int = 2000) -> CalibrationResult:
    draws = np.asarray(draws)
    if draws.ndim < 2 or draws.shape[1] < 20:
        raise DiagnosticsError("calibration needs at least 20 draws per dataset")
    ranks = fractional_ranks(truths, draws)
    grid, lo, hi = simultaneous_band(ranks.shape[0], draws.shape[1], seed=seed, n_sims=n_band_sims)
    return CalibrationResult(ranks, calibration_error(ranks, num_quantiles), grid,
                             ecdf(ranks, grid), lo, hi)


def calibration_null(n_datasets: int, num_quantiles: int = NUM_QUANTILES,
                     n_sims: int = 2000, seed: int = 0) -> np.ndarray:
    """Null distribution of the calibration error for i.i.d. uniform ranks."""
    rng = np.random.default_rng(seed)
    ranks = rng.random((n_sims, n_datasets))
    q = quantile_points(num_quantiles)
    e = (ranks[:, :, None] <= q[None, None, :]).mean(axis=1)
    return np.abs(e - q).mean(axis=1)


def contraction(prior_variance, posterior_variance) -> np.ndarray:
    prior_variance = np.asarray(prior_variance, dtype=np.float64)
    if np.any(~(prior_variance > 0)):
        raise DiagnosticsError("prior variance must be positive")
    return 1.0 - np.asarray(posterior_variance, dtype=np.float64) / prior_variance


def c2st(draws_a, draws_b, folds: int = 5, classifier: str = "logistic",
         standardize: bool = True, seed: int = 0) -> float:
    """Cross-validated accuracy of a classifier telling ``draws_a`` from ``draws_b``."""
    a, b = _2d(draws_a), _2d(draws_b)
    if a.shape[1] != b.shape[1]:
        raise DiagnosticsError(f"dimension mismatch {a.shape[1]} vs {b.shape[1]}")
    if min(len(a), len(b)) < 100:
        raise DiagnosticsError("c2st needs at least 100 draws per side")
    X = np.concatenate([a, b])
    y = np.concatenate([np.zeros(len(a)), np.ones(len(b))])
    if classifier == "logistic":
        clf = LogisticRegression(max_iter=1000)
    elif classifier == "mlp":
        dim = X.shape[1]
        clf = MLPClassifier(hidden_layer_sizes=(10 * dim,), max_iter=1000, random_state=seed)
    else:
        raise DiagnosticsError(f"unknown classifier {classifier!r}")
    model = make_pipeline(StandardScaler(), clf) if standardize else clf
    cv = StratifiedKFold(n_splits=folds, shuffle=True, random_state=seed)
    return float(np.mean(cross_val_score(model, X, y, cv=cv, scoring="accuracy")))


def median_sem(values, n_boot: int = N_BOOTSTRAP, seed: int = 0) -> Tuple[float, float]:
    """Median and bootstrap standard error of the median (NaN for one value)."""
    v = np.asarray(values, dtype=np.float64)
    v = v[np.isfinite(v)]
    if v.size == 0:
        return math.nan, math.nan
    med = float(np.median(v))
    if v.size == 1:
        return med, math.nan
    rng = np.random.default_rng(seed)
    boots = np.median(v[rng.integers(0, v.size, size=(n_boot, v.size))], axis=1)
    return med, float(boots.std(ddof=1))


# ---------------------------------------------------------------------------
# evaluation records and reports

METRICS = ("r", "nrmse", "calibration_error", "contraction")


@dataclass
class EvalRun:
    """Truths and posterior draws for one (family, preset, scope) test set."""

    family: str
    preset: str
    scope: str
    cells: List[Tuple[int, int]]
    truths: np.ndarray  # (n_datasets, n_cells)
    draws: List[np.ndarray]  # per dataset (n_draws_i, n_cells)
    prior_variance: np.ndarray  # (n_cells,)
    labels: List[str] = field(default_factory=list)

    def __post_init__(self):
        self.truths = _2d(self.truths)
        if self.truths.shape[1] != len(self.cells):
            raise DiagnosticsError("truths and cells address different active sets")
        for d in self.draws:
            if np.asarray(d).shape[-1] != len(self.cells):
                raise DiagnosticsError("truths and draws address different active sets")

    def means(self) -> np.ndarray:
        return np.stack([np.asarray(d).mean(axis=0) for d in self.draws])

    def variances(self) -> np.ndarray:
        return np.stack([np.asarray(d).var(axis=0, ddof=1) for d in self.draws])

    def draw_array(self) -> np.ndarray:
        n = min(len(d) for d in self.draws)
        return np.stack([np.asarray(d)[:n] for d in self.draws])


@dataclass
class CellMetrics:
    family: str
    preset: str
    scope: str
    cell: Tuple[int, int]
    label: str
    r: float
    nrmse: float
    calibration_error: float
    contraction: float


def evaluate_run(run: EvalRun, num_quantiles: int = NUM_QUANTILES, seed: int = 0):
    """Per-cell metrics plus the calibration result (ECDF traces)."""
    means = run.means()
    r = recovery_r(run.truths, means)
    rng_ = run.truths.max(axis=0) - run.truths.min(axis=0)
    e = np.full(len(run.cells), np.nan)
    ok = rng_ > 0
    if ok.any():
        e[ok] = nrmse(run.truths[:, ok], means[:, ok])
    cal = calibration(run.truths, run.draw_array(), num_quantiles, seed=seed)
    pc = np.median(contraction(run.prior_variance[None, :], run.variances()), axis=0)
    labels = run.labels or [f"b[{i},{j}]" for i, j in run.cells]
    rows = [
        CellMetrics(run.family, run.preset, run.scope, tuple(c), labels[k],
                    float(r[k]), float(e[k]), float(cal.error[k]), float(pc[k]))
        for k, c in enumerate(run.cells)
    ]
    return rows, cal


@dataclass
class GapRow:
    family: str
    scope: str
    metric: str
    median: float
    sem: float
    gap: float  # median(scope) - median(baseline)


def aggregate(rows: Sequence[CellMetrics], scopes: Sequence[str], baseline: Optional[str] = None,
              c2st_scores: Optional[Mapping[Tuple[str, str], Sequence[float]]] = None,
              seed: int = 0) -> List[GapRow]:
    """Median +- SEM per (family, scope, metric) and the gap to the baseline scope.

    ``c2st_scores`` maps ``(family, scope)`` to accuracies of that scope's
    posteriors against the baseline's.
    """
    if len(scopes) < 2:
        raise DiagnosticsError("aggregation needs at least two scopes")
    present = {r.scope for r in rows}
    for s in scopes:
        if s not in present:
            raise DiagnosticsError(f"missing scope {s!r} in evaluation results")
    baseline = baseline or scopes[0]
    families = sorted({r.family for r in rows})
    out: List[GapRow] = []
    for fam in families:
        base_med = {}
        for scope in [baseline] + [s for s in scopes if s != baseline]:
            sel = [r for r in rows if r.family == fam and r.scope == scope]
            for metric in METRICS:
                med, sem = median_sem([getattr(r, metric) for r in sel], seed=seed)
                if scope == baseline:
                    base_med[metric] = med
                out.append(GapRow(fam, scope, metric, med, sem, med - base_med[metric]))
            if c2st_scores and (fam, scope) in c2st_scores:
                med, sem = median_sem(c2st_scores[(fam, scope)], seed=seed)
                out.append(GapRow(fam, scope, "c2st", med, sem, med - 0.5))
    return out


def _fmt(x) -> str:
    if isinstance(x, float):
        return "nan" if math.isnan(x) else repr(round(x, 10))
    return str(x)


def write_tsv(path, header: Sequence[str], rows: Iterable[Sequence]) -> Path:
    path = Path(path)
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh, delimiter="\t", lineterminator="\n")
        w.writerow(header)
        for row in rows:
            w.writerow([_fmt(x) for x in row])
    return path


def write_metric_table(path, rows: Sequence[CellMetrics]) -> Path:
    header = ("family", "preset", "scope", "row", "col", "label") + METRICS
    return write_tsv(path, header, [
        (r.family, r.preset, r.scope, r.cell[0], r.cell[1], r.label,
         r.r, r.nrmse, r.calibration_error, r.contraction) for r in rows])


def write_gap_report(path, rows: Sequence[GapRow]) -> Path:
    return write_tsv(path, ("family", "scope", "metric", "median", "sem", "gap"),
                     [(g.family, g.scope, g.metric, g.median, g.sem, g.gap) for g in rows])


def write_ecdf(path, run: EvalRun, cal: CalibrationResult, labels: Sequence[str]) -> Path:
    rows = []
    for k, lab in enumerate(labels):
        for g, e, lo, hi in zip(cal.grid, cal.ecdf[:, k], cal.band_lo, cal.band_hi):
            rows.append((run.family, run.preset, run.scope, lab, float(g), float(e), float(lo), float(hi)))
    return write_tsv(path, ("family", "preset", "scope", "label", "q", "ecdf", "band_lo", "band_hi"), rows)


def write_recovery(path, run: EvalRun, labels: Sequence[str]) -> Path:
    means, sds = run.means(), np.sqrt(run.variances())
    rows = []
    for i in range(run.truths.shape[0]):
        for k, lab in enumerate(labels):
            rows.append((run.family, run.preset, run.scope, i, lab, float(run.truths[i, k]),
                         float(means[i, k]), float(sds[i, k])))
    return write_tsv(path, ("family", "preset", "scope", "dataset", "label", "truth", "mean", "sd"), rows)


def write_manifest(path, extra: Optional[Dict] = None) -> Path:
    info = {"conventions": dict(CONVENTIONS), "reference": dict(REFERENCE)}
    info.update(extra or {})
    Path(path).write_text(json.dumps(info, indent=2, sort_keys=True) + "\n")
    return Path(path)
