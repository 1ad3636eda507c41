"""Orchestration behind the command-line subcommands.

Seeds are derived from the master seed with fixed stream tags, so every
output is a pure function of ``(config, master seed)``:

* stream 1: training (batches, flow noise, initialization)
* stream 2: posterior sampling, keyed by the dataset seed
* stream 3: ``simulate`` datasets, keyed by index
* stream 4: evaluation test sets, keyed by (family, preset, index)
* stream 5: prior Monte Carlo for contraction
"""

from __future__ import annotations

import json
import logging
import zlib
from dataclasses import dataclass, replace
from pathlib import Path
from typing import Dict, List, Optional, Sequence, Tuple

import numpy as np
import torch

from . import diagnostics as diag
from . import persistence as io
from .config import RunConfig
from .flow import (CoefficientScaler, PosteriorDraws, SamplerSpec, TrainResult, batch_tensors,
                   fm_loss, sample_posterior, step_generator, train)
from .meta_simulator import (Dataset, ModelConfig, derive_seed, draw_structure, make_batch,
                             prior_coefficient_draws, simulate_dataset)
from .network import VelocityNet
from .presets import BENCHMARK_PRESETS, PRESETS, get_preset
from .simulators import get_family
from .autodiff import GradCheckResult, check_gradients, check_ops

log = logging.getLogger(__name__)

STREAM_TRAIN, STREAM_SAMPLE, STREAM_SIMULATE, STREAM_EVAL, STREAM_PRIOR = 1, 2, 3, 4, 5
BASELINE = "instance"


class DataError(ValueError):
    """Input files do not fit the request (scope, family or digest)."""


class BudgetMismatch(ValueError):
    pass


def configure_threads(threads: Optional[int] = None, deterministic: bool = False):
    if deterministic:
        torch.set_num_threads(1)
        torch.use_deterministic_algorithms(True)
    elif threads:
        torch.set_num_threads(int(threads))


def _json(path: Path, obj) -> Path:
    path.write_text(json.dumps(obj, indent=2, sort_keys=True) + "\n")
    return path


def run_manifest(cfg: RunConfig, **extra) -> Dict:
    info = {"config_digest": cfg.digest(), "master_seed": cfg.seed, "config": cfg.canonical(include_out=False)}
    info.update(extra)
    return info


# ---------------------------------------------------------------------------
# simulate


def simulate_one(cfg: RunConfig, index: int, n_trials: Optional[int] = None) -> Dataset:
    mc = cfg.model_config()
    rng = np.random.default_rng([cfg.seed, STREAM_SIMULATE, index])
    n, r = draw_structure(mc, rng)
    n = n_trials or n
    return simulate_dataset(mc, n, derive_seed(cfg.seed, STREAM_SIMULATE, index), n_regressors=r)


def simulate_files(cfg: RunConfig, count: int, out: Path, n_trials: Optional[int] = None) -> List[Path]:
    out.mkdir(parents=True, exist_ok=True)
    paths, entries = [], []
    for i in range(count):
        ds = simulate_one(cfg, i, n_trials)
        p = io.write_dataset(out / f"dataset_{i:05d}.mfsm", ds, cfg.digest(), cfg.seed)
        paths.append(p)
        entries.append({"file": p.name, "index": i, "digest": io.dataset_digest(ds)})
    _json(out / "simulate_manifest.json", run_manifest(cfg, n_trials=n_trials, datasets=entries))
    return paths


def verify_files(cfg: RunConfig, out: Path) -> List[str]:
    """Re-derive every dataset listed in the manifest; returns problems found."""
    manifest = json.loads((out / "simulate_manifest.json").read_text())
    problems = []
    if manifest["config_digest"] != cfg.digest():
        problems.append("manifest config digest does not match the config")
    for e in manifest["datasets"]:
        f = io.read_dataset(out / e["file"])
        if f.config_digest != cfg.digest() or f.master_seed != cfg.seed:
            problems.append(f"{e['file']}: embedded digest/seed do not match the config")
            continue
        ds = simulate_one(cfg, e["index"], manifest.get("n_trials"))
        if io.dataset_digest(ds) != e["digest"] or io.dataset_digest(f.dataset) != e["digest"]:
            problems.append(f"{e['file']}: content digest mismatch")
    return problems


# ---------------------------------------------------------------------------
# train


def train_run(cfg: RunConfig, out: Path, resume: bool = False, stop_after: Optional[int] = None,
              model: Optional[ModelConfig] = None) -> TrainResult:
    out.mkdir(parents=True, exist_ok=True)
    mc = model or cfg.model_config()
    spec = replace(cfg.train_spec(), seed=derive_seed(cfg.seed, STREAM_TRAIN))
    (out / "config.cfg").write_text(cfg.canonical(include_out=False))
    digest = _model_digest(cfg, mc)
    return train(spec, mc, cfg.network_config(), out_dir=out, resume=resume, stop_after=stop_after,
                 config_digest=digest, master_seed=cfg.seed)


def _model_digest(cfg: RunConfig, mc: ModelConfig) -> str:
    if mc.preset == (cfg["run"]["preset"] or None) and mc.scope == cfg["run"]["scope"]:
        return cfg.digest()
    return cfg.with_overrides(run__scope=mc.scope, run__preset=mc.preset or "").digest()


@dataclass
class LoadedModel:
    net: VelocityNet
    scaler: CoefficientScaler
    meta: Dict
    digest: str

    @property
    def scope(self) -> str:
        return self.meta.get("scope", "")

    @property
    def families(self) -> Tuple[str, ...]:
        return tuple(self.meta.get("families", ()))


def load_model(path, expected_digest: Optional[str] = None) -> LoadedModel:
    ck = io.load_checkpoint(path, expected_digest=expected_digest)
    ck.net.eval()
    scaler = CoefficientScaler(np.array(ck.meta["scaler_loc"]), np.array(ck.meta["scaler_scale"]))
    return LoadedModel(ck.net, scaler, ck.meta, ck.config_digest)


# ---------------------------------------------------------------------------
# sample


def sampler_for(cfg: RunConfig, ds: Dataset, n_draws: Optional[int] = None,
                label: str = "") -> SamplerSpec:
    """Sampler for one dataset; ``label`` gives each evaluated scope its own noise
    so that two scopes' draws are independent samples (needed by C2ST)."""
    tag = zlib.crc32(label.encode()) if label else 0
    spec = cfg.sampler_spec(seed=derive_seed(cfg.seed, STREAM_SAMPLE, ds.seed, tag))
    return replace(spec, n_draws=n_draws) if n_draws else spec


def check_compatible(model: LoadedModel, ds: Dataset, preset: Optional[str] = None):
    if ds.family_name not in model.families:
        raise DataError(f"checkpoint trained on {list(model.families)} cannot serve a "
                        f"{ds.family_name} dataset")
    if model.scope != "instance":
        return
    trained = model.meta.get("preset")
    if preset is not None and preset != trained:
        raise DataError(f"instance checkpoint for preset {trained!r} cannot evaluate preset {preset!r}")
    if trained and not np.array_equal(ds.M, PRESETS[trained].mask(ds.family_name, *ds.M.shape)):
        raise DataError(f"dataset mask does not match the checkpoint's preset {trained!r}")


def sample_files(cfg: RunConfig, checkpoint, data: Sequence[Path], out: Path,
                 n_draws: Optional[int] = None) -> List[Path]:
    model = load_model(checkpoint)
    out.mkdir(parents=True, exist_ok=True)
    paths = []
    for p in data:
        f = io.read_dataset(p)
        check_compatible(model, f.dataset)
        spec = sampler_for(cfg, f.dataset, n_draws)
        draws = sample_posterior(f.dataset, model.net, spec, model.scaler, io.dataset_digest(f.dataset))
        paths.append(io.write_draws(out / (Path(p).stem + ".mfpd"), draws, cfg.digest(), cfg.seed))
    return paths


# ---------------------------------------------------------------------------
# evaluate


def cell_labels(family: str, preset: str, cells) -> List[str]:
    fam = get_family(family)
    cols = ("intercept", "u1", "u2", "u1xu2")
    return [f"{fam.params[j]}:{cols[i] if i < len(cols) else i}" for i, j in cells]


def test_set(cfg: RunConfig, family: str, preset: str, n_datasets: Optional[int] = None) -> List[Dataset]:
    ev = cfg["eval"]
    mc = cfg.model_config(scope="instance", preset=preset, families=(family,))
    pidx = list(PRESETS).index(preset)
    fid = get_family(family).fid
    n = ev["n_datasets"] if n_datasets is None else n_datasets
    return [
        io.quantize_dataset(simulate_dataset(mc, ev["n_trials"],
                                             derive_seed(cfg.seed, STREAM_EVAL, fid, pidx, i)))
        for i in range(n)
    ]


def prior_variance(cfg: RunConfig, family: str, preset: str, cells) -> np.ndarray:
    mc = cfg.model_config(scope="instance", preset=preset, families=(family,))
    pidx = list(PRESETS).index(preset)
    B = prior_coefficient_draws(mc, family, cfg["eval"]["prior_draws"],
                                derive_seed(cfg.seed, STREAM_PRIOR, get_family(family).fid, pidx))
    return np.array([B[:, i, j].var(ddof=1) for i, j in cells])


def evaluate_preset(cfg: RunConfig, model: LoadedModel, family: str, preset: str, scope_label: str,
                    datasets: Optional[List[Dataset]] = None):
    datasets = test_set(cfg, family, preset) if datasets is None else datasets
    if not datasets:
        raise DataError(f"no test datasets for {family}/{preset}")
    cells = datasets[0].active_cells()
    truths, draws = [], []
    for ds in datasets:
        check_compatible(model, ds, preset)
        if ds.active_cells() != cells:
            raise DataError("test datasets of one preset must share their active cells")
        d = sample_posterior(ds, model.net, sampler_for(cfg, ds, label=scope_label), model.scaler)
        truths.append([ds.B[i, j] for i, j in cells])
        draws.append(d.values)
    labels = cell_labels(family, preset, cells)
    run = diag.EvalRun(family, preset, scope_label, cells, np.array(truths), draws,
                       prior_variance(cfg, family, preset, cells), labels)
    return run


def scope_label(model: LoadedModel) -> str:
    return "baseline" if model.scope == "instance" else model.scope


def evaluate(cfg: RunConfig, checkpoint, out: Path, data: Optional[Sequence[Path]] = None,
             label: Optional[str] = None) -> Tuple[List[diag.CellMetrics], List[diag.EvalRun]]:
    model = load_model(checkpoint)
    label = label or scope_label(model)
    out.mkdir(parents=True, exist_ok=True)
    runs: List[diag.EvalRun] = []
    if data:
        groups: Dict[Tuple[str, Tuple], List[Dataset]] = {}
        for p in data:
            ds = io.read_dataset(p).dataset
            check_compatible(model, ds)
            groups.setdefault((ds.family_name, tuple(ds.active_cells())), []).append(ds)
        preset = model.meta.get("preset")
        for (fam, _), dss in groups.items():
            if preset:
                runs.append(evaluate_preset(cfg, model, fam, preset, label, dss))
            else:
                runs.append(_evaluate_custom(cfg, model, fam, label, dss))
    else:
        for fam in model.families:
            presets = cfg.eval_presets(fam)
            if model.scope == "instance":
                presets = (model.meta["preset"],)
            for preset in presets:
                runs.append(evaluate_preset(cfg, model, fam, preset, label))
    rows = write_reports(cfg, runs, out, checkpoint_digest=model.digest)
    return rows, runs


def _evaluate_custom(cfg, model, family, label, datasets):
    # externally supplied test sets without a preset: prior variance from the family-scope mask prior
    cells = datasets[0].active_cells()
    truths, draws = [], []
    for ds in datasets:
        d = sample_posterior(ds, model.net, sampler_for(cfg, ds, label=label), model.scaler)
        truths.append([ds.B[i, j] for i, j in cells])
        draws.append(d.values)
    mc = cfg.model_config(scope="family", families=(family,))
    B = prior_coefficient_draws(mc, family, cfg["eval"]["prior_draws"],
                                derive_seed(cfg.seed, STREAM_PRIOR, get_family(family).fid, 99))
    pv = np.array([B[:, i, j][B[:, i, j] != 0].var(ddof=1) for i, j in cells])
    return diag.EvalRun(family, "custom", label, cells, np.array(truths), draws, pv,
                        cell_labels(family, "custom", cells))


def write_reports(cfg: RunConfig, runs: Sequence[diag.EvalRun], out: Path,
                  checkpoint_digest: str = "") -> List[diag.CellMetrics]:
    rows, ecdf_rows, rec_rows = [], [], []
    nq = cfg["eval"]["num_quantiles"]
    for run in runs:
        r, cal = diag.evaluate_run(run, nq, seed=derive_seed(cfg.seed, STREAM_EVAL, 0))
        rows.extend(r)
        for k, lab in enumerate(run.labels):
            for g, e, lo, hi in zip(cal.grid, cal.ecdf[:, k], cal.band_lo, cal.band_hi):
                ecdf_rows.append((run.family, run.preset, run.scope, lab, float(g), float(e),
                                  float(lo), float(hi)))
        means, sds = run.means(), np.sqrt(run.variances())
        for i in range(run.truths.shape[0]):
            for k, lab in enumerate(run.labels):
                rec_rows.append((run.family, run.preset, run.scope, i, lab, float(run.truths[i, k]),
                                 float(means[i, k]), float(sds[i, k])))
    diag.write_metric_table(out / "metrics.tsv", rows)
    diag.write_tsv(out / "ecdf.tsv", ("family", "preset", "scope", "label", "q", "ecdf", "band_lo",
                                      "band_hi"), ecdf_rows)
    diag.write_tsv(out / "recovery.tsv", ("family", "preset", "scope", "dataset", "label", "truth",
                                          "mean", "sd"), rec_rows)
    extra = run_manifest(cfg, checkpoint_digest=checkpoint_digest,
                         c2st_classifier=cfg["eval"]["c2st_classifier"],
                         c2st_standardize=cfg["eval"]["c2st_standardize"],
                         num_quantiles=nq, sampler=dict(cfg["sampler"]))
    diag.write_manifest(out / "manifest.json", extra)
    return rows


# ---------------------------------------------------------------------------
# benchmark


def check_budgets(budgets: Dict[str, int], n_presets: int, allow_mismatch: bool = False) -> int:
    """Meta-scope budgets must equal ``n_presets`` baseline budgets."""
    if BASELINE not in budgets:
        raise BudgetMismatch("benchmark needs an instance-scope baseline")
    total = n_presets * budgets[BASELINE]
    bad = {s: b for s, b in budgets.items() if s != BASELINE and b != total}
    if bad and not allow_mismatch:
        raise BudgetMismatch(f"budget mismatch: baseline total {total} "
                             f"({n_presets} presets x {budgets[BASELINE]}) vs {bad}")
    return total


def benchmark(configs: Dict[str, RunConfig], scopes: Sequence[str], out: Path,
              allow_mismatch: bool = False):
    """Train (or reload) every scope, evaluate on the shared presets, report gaps."""
    from .config import ConfigError

    for s in scopes:
        if s not in configs:
            raise ConfigError(f"missing scope {s!r}: no config supplied for it")
    if BASELINE not in scopes:
        raise ConfigError(f"missing scope {BASELINE!r}: the baseline is required")
    base = configs[BASELINE]
    families = tuple(base["run"]["families"])
    presets = {f: base.eval_presets(f) if base["eval"]["presets"] else
               tuple(p for p in BENCHMARK_PRESETS if f in PRESETS[p].families()) for f in families}
    n_presets = len(presets[families[0]])
    check_budgets({s: configs[s].train_spec().budget for s in scopes}, n_presets, allow_mismatch)
    out.mkdir(parents=True, exist_ok=True)
    rows: List[diag.CellMetrics] = []
    runs: Dict[Tuple[str, str, str], diag.EvalRun] = {}
    for scope in scopes:
        cfg = configs[scope]
        label = "baseline" if scope == BASELINE else scope
        for fam in families:
            if scope == BASELINE:
                for preset in presets[fam]:
                    mc = cfg.model_config(scope="instance", preset=preset, families=(fam,))
                    d = out / scope / f"{fam}_{preset}"
                    train_run(cfg, d, resume=True, model=mc)
                    model = load_model(d / "last.mfck")
                    runs[(fam, preset, label)] = evaluate_preset(base, model, fam, preset, label)
            else:
                d = out / scope
                if fam == families[0]:
                    train_run(cfg, d, resume=True)
                model = load_model(d / "last.mfck")
                for preset in presets[fam]:
                    runs[(fam, preset, label)] = evaluate_preset(base, model, fam, preset, label)
    all_runs = list(runs.values())
    rows = write_reports(base, all_runs, out)
    labels = ["baseline" if s == BASELINE else s for s in scopes]
    c2st_scores = c2st_pairs(base, runs, labels)
    gaps = diag.aggregate(rows, labels, baseline="baseline", c2st_scores=c2st_scores)
    diag.write_gap_report(out / "gap_report.tsv", gaps)
    _json(out / "benchmark_manifest.json", {
        "scopes": {s: {"config_digest": configs[s].digest(), "budget": configs[s].train_spec().budget}
                   for s in scopes},
        "presets": {f: list(p) for f, p in presets.items()},
        "master_seed": base.seed,
    })
    return gaps


def c2st_pairs(cfg: RunConfig, runs: Dict[Tuple[str, str, str], diag.EvalRun],
               labels: Sequence[str]) -> Dict[Tuple[str, str], List[float]]:
    ev = cfg["eval"]
    scores: Dict[Tuple[str, str], List[float]] = {}
    for (fam, preset, label), run in runs.items():
        if label == "baseline":
            continue
        base = runs.get((fam, preset, "baseline"))
        if base is None:
            continue
        for i in range(min(ev["c2st_datasets"], len(run.draws))):
            acc = diag.c2st(base.draws[i], run.draws[i], folds=ev["c2st_folds"],
                            classifier=ev["c2st_classifier"], standardize=ev["c2st_standardize"],
                            seed=derive_seed(cfg.seed, i) % 2**32)
            scores.setdefault((fam, label), []).append(acc)
    return scores


# ---------------------------------------------------------------------------
# gradcheck


def loss_gradcheck(cfg: RunConfig, n_entries: int = 200, seed: int = 0, tol: float = 1e-4) -> GradCheckResult:
    """Finite-difference check of the full flow-matching loss in 64-bit."""
    mc = cfg.model_config(scope="family")
    net_cfg = cfg.network_config()
    torch.manual_seed(seed)
    net = VelocityNet(net_cfg).double()
    # perturb the zero-initialized FiLM heads so their gradients are exercised
    with torch.no_grad():
        for name, p in net.named_parameters():
            if "film" in name:
                p.normal_(0, 0.05)
    small = replace(mc, structure=replace(mc.structure, n_min=12, n_max=12))
    batch = make_batch(small, 2, seed, 0)
    tensors = batch_tensors(batch, CoefficientScaler.from_config(mc), dtype=torch.float64)
    params = dict(net.named_parameters())

    def loss():
        return fm_loss(net, tensors, step_generator(seed, 0))

    return check_gradients(loss, params, n_entries=n_entries, h=1e-3, tol=tol, seed=seed,
                           name="flow_matching_loss", order=4)


def gradcheck(cfg: RunConfig, ops=None, n_entries: int = 200, tol: float = 1e-4) -> List[GradCheckResult]:
    results = check_ops(ops, tol=tol)
    results.append(loss_gradcheck(cfg, n_entries=n_entries, tol=tol))
    return results
