"""Acceptance gate: one test per criterion, each printing a PASS/FAIL line.

Criteria 7 and 8 train networks end to end and take several minutes each.
"""

import math
import time
from pathlib import Path

import numpy as np
import pytest
import torch

from metassm import pipeline
from metassm.cli import main
from metassm.config import load_config
from metassm.diagnostics import c2st, calibration, calibration_error, calibration_null, recovery_r
from metassm.flow import CoefficientScaler, SamplerSpec, batch_tensors, fm_loss, sample_posterior, step_generator
from metassm.meta_simulator import ModelConfig, StructurePrior, make_batch, simulate_dataset
from metassm.network import VelocityNet, network_profile
from metassm.simulators import SimSettings, gaussian_posterior, simulate_cdm, simulate_ddm, simulate_rdm

from snapshot import compare_presets

CONFIGS = Path(__file__).resolve().parent.parent / "configs"

# criterion 8 thresholds, pinned from the recorded pilot run (see README)
RECOVERY_MIN_R = 0.7
LOSS_DROP_MIN = 0.5


def _const(n, **kw):
    return {k: np.full(n, float(v)) for k, v in kw.items()}


def test_c01_ddm_first_passage_oracle(record):
    n = 1_000_000
    t0 = time.time()
    worst_p, worst_z = 0.0, 0.0
    for i, z in enumerate((0.3, 0.5, 0.7)):
        out = simulate_ddm(_const(n, v=0, a=1, z=z, t=0, sv=0, st=0), rng=np.random.default_rng(100 + i))
        worst_p = max(worst_p, abs(out.response.mean() - z))
        dt = out.rt - out.ndt
        worst_z = max(worst_z, abs(dt.mean() - z * (1 - z)) / (dt.std(ddof=1) / math.sqrt(n)))
    wall = time.time() - t0
    ok = worst_p < 0.01 and worst_z < 3 and wall < 60
    record(1, ok, f"max|P(upper)-z|={worst_p:.4f} (<0.01), max mean-DT error={worst_z:.2f} SE (<3), {wall:.1f}s (<60)")
    assert ok


def _circ_mean(a):
    return math.atan2(np.sin(a).mean(), np.cos(a).mean())


def test_c02_cdm_symmetry(record):
    n = 100_000
    ang = simulate_cdm(_const(n, v=0, v_angle=0, a=1, t=0, sv=0, st=0), rng=np.random.default_rng(1)).response
    rbar = math.hypot(np.cos(ang).mean(), np.sin(ang).mean())
    p_rayleigh = math.exp(-n * rbar ** 2)
    delta = 0.6
    base = _circ_mean(simulate_cdm(_const(n, v=1.5, v_angle=0, a=1, t=0, sv=0, st=0),
                                   rng=np.random.default_rng(2)).response)
    shifted = _circ_mean(simulate_cdm(_const(n, v=1.5, v_angle=delta, a=1, t=0, sv=0, st=0),
                                      rng=np.random.default_rng(3)).response)
    shift = shifted - base
    ok = p_rayleigh > 0.01 and abs(shift - delta) <= 0.02
    record(2, ok, f"Rayleigh p={p_rayleigh:.3f} (>0.01), mean shift {shift:.4f} for delta={delta} (+-0.02)")
    assert ok


def test_c03_rdm_exchangeability(record):
    n = 100_000
    p0 = simulate_rdm(_const(n, v=1, v_diff=0, a=1, t=0, sv=0, st=0), rng=np.random.default_rng(0)).response.mean()
    grid = (-0.6, -0.3, 0.0, 0.3, 0.6)
    rates, fine = [], []
    for k, vd in enumerate(grid):
        th = _const(n, v=1, v_diff=vd, a=1, t=0, sv=0, st=0)
        rates.append(simulate_rdm(th, rng=np.random.default_rng(10 + k)).response.mean())
        fine.append(simulate_rdm(th, SimSettings(dt=2.5e-4), rng=np.random.default_rng(20 + k)).response.mean())
    rates, fine = np.array(rates), np.array(fine)
    se = np.sqrt(2 * rates * (1 - rates) / n)
    agree = np.all(np.abs(rates - fine) < 3 * se + 1e-12)
    mono = np.all(np.diff(rates) >= 0) and np.all(np.diff(fine) >= 0)
    ok = abs(p0 - 0.5) <= 0.005 and mono and agree
    record(3, ok, f"choice rate at v_diff=0: {p0:.4f} (0.5+-0.005); rates {np.round(rates, 3).tolist()} "
                  f"monotone={mono}; refined-dt agreement={agree}")
    assert ok


def test_c04_gradient_fidelity(record):
    t0 = time.time()
    results = pipeline.gradcheck(load_config(None), n_entries=200)
    wall = time.time() - t0
    worst = max(results, key=lambda r: r.max_rel_error)
    ok = all(r.passed for r in results) and wall < 300
    record(4, ok, f"{len(results) - 1} ops + full loss, worst {worst.name} {worst.max_rel_error:.2e} (<1e-4), "
                  f"{wall:.0f}s (<300)")
    assert ok


def test_c05_masking_exactness(record):
    torch.manual_seed(0)
    net = VelocityNet(network_profile("desk")).eval()
    cfg = ModelConfig(structure=StructurePrior(n_min=20, n_max=30))
    tensors = batch_tensors(make_batch(cfg, 8, seed=4), CoefficientScaler.from_config(cfg))

    class Garbage(torch.nn.Module):
        """Same network with arbitrary output on masked cells."""

        def __init__(self, fill):
            super().__init__()
            self.fill = fill
            self.lin = net

        def encode(self, X, Y, fam):
            return net.encode(X, Y, fam)

        def decode(self, z, s, t, M, fam, n):
            u = net.decode(z, s, t, M, fam, n)
            return torch.where(M > 0, u, self.fill(u))

        def forward(self, z, t, X, Y, M, fam):
            return self.decode(z, self.encode(X, Y, fam), t, M, fam, X.shape[1])

    fills = [lambda u: torch.full_like(u, 1e30), lambda u: torch.full_like(u, float("nan")),
             lambda u: torch.randn_like(u) * 1e3]
    with torch.no_grad():
        base = fm_loss(net, tensors, step_generator(0, 0))
        loss_ok = all(torch.equal(base, fm_loss(Garbage(f), tensors, step_generator(0, 0))) for f in fills)
    ds = simulate_dataset(ModelConfig(scope="instance", families=("ddm",), preset="fixed_regressed"), 40, seed=2)
    spec = SamplerSpec(n_draws=64, seed=1)
    sc = CoefficientScaler.from_config(ModelConfig())
    ref = sample_posterior(ds, net, spec, sc).values
    draws_ok = all(np.array_equal(ref, sample_posterior(ds, Garbage(f), spec, sc).values) for f in fills)
    ok = loss_ok and draws_ok
    record(5, ok, f"fm_loss bit-identical={loss_ok}, sample_posterior bit-identical={draws_ok}")
    assert ok


def test_c06_encoder_invariance(record):
    torch.manual_seed(0)
    net = VelocityNet(network_profile("desk")).eval()
    ds = simulate_dataset(ModelConfig(scope="instance", families=("ddm",), preset="regressed"), 256, seed=1)
    X = torch.tensor(ds.X, dtype=torch.float32)[None]
    Y = torch.tensor(ds.Y, dtype=torch.float32)[None]
    fam = torch.tensor([0])
    perm = torch.randperm(256, generator=torch.Generator().manual_seed(0))
    with torch.no_grad():
        a = net.encode(X, Y, fam)
        b = net.encode(X[:, perm], Y[:, perm], fam)
        one = net.encode(X[:, :1], Y[:, :1], fam)
    diff = (a - b).abs().max().item()
    shapes = a.shape == one.shape == (1, net.cfg.encoder.n_seeds, net.cfg.encoder.seed_dim)
    ok = diff <= 1e-5 and shapes
    record(6, ok, f"permutation max-abs {diff:.2e} (<=1e-5), N=1 and N=256 summaries {tuple(a.shape)}")
    assert ok


def test_c07_conjugate_end_to_end(record, tmp_path):
    cfg = load_config(CONFIGS / "gaussian_oracle.cfg")
    torch.set_num_threads(1)
    t0 = time.time()
    pipeline.train_run(cfg, tmp_path)
    train_wall = time.time() - t0
    model = pipeline.load_model(tmp_path / ("ema.mfck" if cfg["train"]["ema_decay"] else "last.mfck"))
    datasets = pipeline.test_set(cfg, "gaussian", "intercept_only")
    zm, zs, truths, draws = [], [], [], []
    for ds in datasets:
        d = sample_posterior(ds, model.net, pipeline.sampler_for(cfg, ds), model.scaler).values[:, 0]
        m, s = gaussian_posterior(ds.Y[:, 0], 0.0, 1.0)
        n = d.size
        zm.append((d.mean() - m) / (s / math.sqrt(n)))
        zs.append((d.std(ddof=1) - s) / (s / math.sqrt(2 * (n - 1))))
        truths.append(ds.B[0, 0])
        draws.append(d)
    zm, zs = np.abs(zm), np.abs(zs)
    cal = calibration(np.array(truths), np.array(draws)[..., None], seed=1)
    out_m, out_s = int((zm > 3).sum()), int((zs > 3).sum())
    in_band = bool(cal.within_band()[0])
    # an exact sampler exceeds 3 SE on some of 100 checks about 24% of the time,
    # so up to 2 of 50 per moment are tolerated (see README)
    ok = out_m <= 2 and out_s <= 2 and in_band and train_wall <= 600
    record(7, ok, f"{len(datasets)} datasets: mean outside 3 SE {out_m}/50 (max {zm.max():.2f}), "
                  f"std outside 3 SE {out_s}/50 (max {zs.max():.2f}), ECDF in band={in_band}, "
                  f"train {train_wall:.0f}s (<=600)")
    assert ok


def test_c08_desk_recovery(record, tmp_path):
    cfg = load_config(CONFIGS / "ddm_recovery.cfg")
    torch.set_num_threads(1)
    t0 = time.time()
    res = pipeline.train_run(cfg, tmp_path)
    model = pipeline.load_model(tmp_path / "last.mfck")
    run = pipeline.evaluate_preset(cfg, model, "ddm", "intercept_only", "baseline")
    wall = time.time() - t0
    r = dict(zip(run.labels, recovery_r(run.truths, run.means())))
    drop = 1 - res.epoch_losses[-1] / res.epoch_losses[0]
    ok = r["v:intercept"] >= RECOVERY_MIN_R and r["a:intercept"] >= RECOVERY_MIN_R and wall <= 1800
    others = " ".join(f"{k}={v:.2f}" for k, v in r.items() if k not in ("v:intercept", "a:intercept"))
    record(8, ok, f"r(v)={r['v:intercept']:.3f} r(a)={r['a:intercept']:.3f} (>={RECOVERY_MIN_R}), "
                  f"{wall / 60:.1f} min (<=30); other cells {others}; "
                  f"training loss drop {drop:.0%} (pinned floor {LOSS_DROP_MIN:.0%})")
    assert ok
    assert drop >= LOSS_DROP_MIN


def test_c09_diagnostic_nulls(record):
    rng = np.random.default_rng(9)
    accs = np.array([c2st(rng.normal(size=(500, 3)), rng.normal(size=(500, 3)), seed=k) for k in range(100)])
    inside = int(((accs >= 0.45) & (accs <= 0.58)).sum())
    p95 = float(np.quantile(calibration_null(200, n_sims=5000, seed=1), 0.95))
    err = float(calibration_error(rng.random(200))[0])
    ok = inside >= 95 and err < p95
    record(9, ok, f"C2ST null in [0.45, 0.58] {inside}/100 (>=95); uniform-rank calibration error "
                  f"{err:.4f} < null p95 {p95:.4f}")
    assert ok


TINY = """
[run]
scope = {scope}
families = ddm
preset = {preset}
seed = 5
[structure]
n_min = 16
n_max = 24
[train]
epochs = 2
steps_per_epoch = 3
batch_size = 4
checkpoint_every = 1
[sampler]
step_size = 0.1
n_draws = 100
[eval]
n_datasets = 4
n_trials = 20
prior_draws = 200
presets = intercept_only
c2st_datasets = 2
"""


def _tree(path):
    # train.log carries wall-clock times by design and is excluded
    return {str(p.relative_to(path)): p.read_bytes() for p in sorted(path.rglob("*"))
            if p.is_file() and p.name != "train.log"}


def test_c10_reproducibility(record, tmp_path, capsys):
    inst = tmp_path / "inst.cfg"
    inst.write_text(TINY.format(scope="instance", preset="intercept_only"))
    fam = tmp_path / "fam.cfg"
    fam.write_text(TINY.format(scope="family", preset=""))
    trees, outputs = {}, {}
    for rep in ("a", "b"):
        root = tmp_path / rep
        c = ["--config", str(inst), "--deterministic"]
        assert main(["simulate", *c, "--count", "3", "--out", str(root / "sim")]) == 0
        assert main(["train", *c, "--out", str(root / "train")]) == 0
        ck = str(root / "train" / "last.mfck")
        data = [str(p) for p in sorted((root / "sim").glob("*.mfsm"))]
        assert main(["sample", *c, "--checkpoint", ck, "--data", *data, "--out", str(root / "sample")]) == 0
        assert main(["evaluate", *c, "--checkpoint", ck, "--out", str(root / "eval")]) == 0
        assert main(["benchmark", "--deterministic", "--scope-config", f"instance={inst}",
                     "--scope-config", f"family={fam}", "--out", str(root / "bench")]) == 0
        capsys.readouterr()
        assert main(["gradcheck", "--deterministic", "--entries", "20"]) == 0
        outputs[rep] = capsys.readouterr().out
        trees[rep] = {sub: _tree(root / sub) for sub in ("sim", "train", "sample", "eval", "bench")}
    same = {sub: trees["a"][sub] == trees["b"][sub] for sub in trees["a"]}
    same["gradcheck"] = outputs["a"] == outputs["b"]
    n_files = sum(len(v) for v in trees["a"].values())
    ok = all(same.values())
    record(10, ok, f"byte-identical reruns: {same} ({n_files} files)")
    assert ok


def test_c11_preset_fidelity(record):
    bad = compare_presets()
    record(11, not bad, f"15 (configuration, family) masks vs design-configuration snapshot; mismatches {bad}")
    assert not bad
