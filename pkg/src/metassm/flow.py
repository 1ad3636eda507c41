"""Masked conditional flow matching: objective, training loop and sampler.

Coefficients travel along the linear path ``Z_t = (1 - t) B + t Z_1`` with
``Z_1 ~ N(0, I)``; the network regresses the constant velocity
``Z_1 - B`` on active cells only. Inactive cells are pinned to zero in the
network input both during training and sampling, so nothing the network
emits on them can leak into the active cells.

The network works on standardized coefficients: intercepts are shifted and
scaled by their prior mean and std, slopes (already N(0, 1)) are left alone.
Posterior draws are mapped back to the raw coefficient scale.
"""

from __future__ import annotations

import copy
import logging
import math
import time
from dataclasses import dataclass, field
from pathlib import Path
from typing import Callable, Dict, List, Optional, Sequence

import numpy as np
import torch

from .autodiff import Adam
from .meta_simulator import Dataset, ModelConfig, SimBatch, derive_seed, make_batch
from .network import NetworkConfig, VelocityNet
from .simulators import N_FAMILIES, get_family

log = logging.getLogger(__name__)


@dataclass(frozen=True)
class TrainSpec:
    epochs: int = 20
    steps_per_epoch: int = 100
    batch_size: int = 32
    lr: float = 1e-4
    warmup_steps: int = 100
    seed: int = 0
    checkpoint_every: int = 10
    # "constant" after warmup, or "cosine" decay to zero at the end of the budget
    lr_schedule: str = "constant"
    # flow times are drawn as u ** time_power with u ~ U(0, 1); powers above 1
    # spend more of the batch near the posterior end of the path
    time_power: float = 1.0
    # decay of an exponential moving average of the weights (0 disables it);
    # the average is written to ema.mfck and is usually the better sampler
    ema_decay: float = 0.0

    def __post_init__(self):
        for name in ("epochs", "steps_per_epoch", "batch_size", "checkpoint_every"):
            if getattr(self, name) < 1:
                raise ValueError(f"{name} must be positive")
        if self.lr <= 0 or self.warmup_steps < 0:
            raise ValueError("lr must be positive and warmup_steps non-negative")
        if self.lr_schedule not in ("constant", "cosine"):
            raise ValueError(f"unknown lr schedule {self.lr_schedule!r}")
        if self.time_power <= 0:
            raise ValueError("time_power must be positive")
        if not 0 <= self.ema_decay < 1:
            raise ValueError("ema_decay must lie in [0, 1)")

    @property
    def budget(self) -> int:
        """Number of simulated datasets consumed."""
        return self.epochs * self.steps_per_epoch * self.batch_size

    def lr_at(self, step: int) -> float:
        if self.warmup_steps and step < self.warmup_steps:
            return self.lr * (step + 1) / self.warmup_steps
        if self.lr_schedule == "cosine":
            total = self.epochs * self.steps_per_epoch
            frac = (step - self.warmup_steps) / max(1, total - self.warmup_steps)
            return self.lr * 0.5 * (1 + math.cos(math.pi * min(1.0, frac)))
        return self.lr


@dataclass(frozen=True)
class SamplerSpec:
    step_size: float = 1e-2
    n_draws: int = 1000
    seed: int = 0
    chunk: int = 1000

    def __post_init__(self):
        if not 0 < self.step_size <= 0.1:
            raise ValueError(f"step size must lie in (0, 0.1], got {self.step_size}")
        if self.n_draws < 1:
            raise ValueError("n_draws must be positive")

    @property
    def n_steps(self) -> int:
        return int(round(1.0 / self.step_size))


class CoefficientScaler:
    """Per-(family, row, column) affine standardization of coefficient grids."""

    def __init__(self, loc: np.ndarray, scale: np.ndarray):
        self.loc = np.asarray(loc, dtype=np.float64)
        self.scale = np.asarray(scale, dtype=np.float64)

    @classmethod
    def from_config(cls, config: ModelConfig) -> "CoefficientScaler":
        r, d = config.r_max, config.d_max
        loc = np.zeros((N_FAMILIES, r, d))
        scale = np.ones((N_FAMILIES, r, d))
        for name in config.families:
            fam = get_family(name)
            pri = config.family_priors(name)
            for j, p in enumerate(fam.params):
                loc[fam.fid, 0, j] = pri[p].mean
                scale[fam.fid, 0, j] = pri[p].std
        return cls(loc, scale)

    def standardize(self, B, family):
        family = np.asarray(family)
        return (np.asarray(B) - self.loc[family]) / self.scale[family]

    def unstandardize(self, Z, family):
        family = np.asarray(family)
        return np.asarray(Z) * self.scale[family] + self.loc[family]


@dataclass
class FlowSample:
    B: torch.Tensor
    Z1: torch.Tensor
    t: torch.Tensor
    Zt: torch.Tensor
    M: torch.Tensor

    @property
    def target(self) -> torch.Tensor:
        return self.Z1 - self.B


def interpolate(B, Z1, t):
    """Point ``(1 - t) B + t Z1`` on the linear path; ``t`` broadcasts per item."""
    t = torch.as_tensor(t, dtype=B.dtype)
    if torch.any(t < 0) or torch.any(t > 1):
        raise ValueError("t must lie in [0, 1]")
    if B.shape != Z1.shape:
        raise ValueError(f"shape mismatch {tuple(B.shape)} vs {tuple(Z1.shape)}")
    if t.ndim == 1:
        t = t.reshape(-1, *([1] * (B.ndim - 1)))
    return (1 - t) * B + t * Z1


def batch_tensors(batch: SimBatch, scaler: CoefficientScaler, dtype=torch.float32) -> Dict[str, torch.Tensor]:
    B = scaler.standardize(batch.B, batch.family) * (batch.M > 0)
    return {
        "X": torch.as_tensor(batch.X, dtype=dtype),
        "Y": torch.as_tensor(batch.Y, dtype=dtype),
        "B": torch.as_tensor(B, dtype=dtype),
        "M": torch.as_tensor(batch.M, dtype=dtype),
        "family": torch.as_tensor(batch.family, dtype=torch.long),
    }


def flow_sample(B: torch.Tensor, M: torch.Tensor, gen: torch.Generator,
                time_power: float = 1.0) -> FlowSample:
    active = M > 0
    Z1 = torch.randn(B.shape, generator=gen, dtype=B.dtype)
    t = torch.rand(B.shape[0], generator=gen, dtype=B.dtype)
    if time_power != 1.0:
        t = t ** time_power
    zero = torch.zeros((), dtype=B.dtype)
    Z1 = torch.where(active, Z1, zero)
    B = torch.where(active, B, zero)
    return FlowSample(B, Z1, t, interpolate(B, Z1, t), M)


def masked_loss(u: torch.Tensor, sample: FlowSample,
                time_weight: Optional[Callable[[torch.Tensor], torch.Tensor]] = None) -> torch.Tensor:
    """Batch mean of ``w(t) * ||M * (u - (Z1 - B))||^2``."""
    diff = torch.where(sample.M > 0, u - sample.target, torch.zeros((), dtype=u.dtype))
    per_item = diff.square().flatten(1).sum(dim=1)
    if time_weight is not None:
        per_item = time_weight(sample.t) * per_item
    return per_item.mean()


def fm_loss(net, tensors: Dict[str, torch.Tensor], gen: torch.Generator,
            time_weight=None, time_power: float = 1.0) -> torch.Tensor:
    sample = flow_sample(tensors["B"], tensors["M"], gen, time_power)
    u = net(sample.Zt, sample.t, tensors["X"], tensors["Y"], tensors["M"], tensors["family"])
    return masked_loss(u, sample, time_weight)


def step_generator(seed: int, step: int) -> torch.Generator:
    return torch.Generator().manual_seed(derive_seed(seed, step, 0x5EED) % (2**63))


@dataclass
class TrainResult:
    net: VelocityNet
    optimizer: Adam
    epoch_losses: List[float] = field(default_factory=list)
    step: int = 0
    best_loss: float = math.inf
    skipped: int = 0
    ema: Optional[VelocityNet] = None


@torch.no_grad()
def _ema_update(ema: torch.nn.Module, net: torch.nn.Module, decay: float):
    for pe, p in zip(ema.parameters(), net.parameters()):
        pe.mul_(decay).add_(p, alpha=1 - decay)


def train(spec: TrainSpec, config: ModelConfig, net_config: Optional[NetworkConfig] = None,
          out_dir: Optional[Path] = None, resume: bool = False, stop_after: Optional[int] = None,
          config_digest: str = "", master_seed: Optional[int] = None,
          progress: Optional[Callable[[int, float], None]] = None,
          extra_meta: Optional[Dict] = None) -> TrainResult:
    """Train a velocity network on the meta-simulator stream.

    Batch ``k`` of the run is ``make_batch(config, batch_size, spec.seed, k)``
    and the flow noise of step ``k`` comes from its own generator, so a run
    resumed from a checkpoint reproduces the uninterrupted weights exactly.
    ``stop_after`` ends the run after that many epochs (for interruption).
    """
    from . import persistence

    net_config = net_config or NetworkConfig(r_max=config.r_max, d_max=config.d_max)
    if (net_config.r_max, net_config.d_max) != (config.r_max, config.d_max):
        raise ValueError("network grid does not match the model config")
    scaler = CoefficientScaler.from_config(config)
    torch.manual_seed(derive_seed(spec.seed, 0xC0FFEE) % (2**63))
    net = VelocityNet(net_config)
    opt = Adam(net.parameters(), lr=spec.lr)
    result = TrainResult(net, opt)
    if spec.ema_decay:
        result.ema = copy.deepcopy(net)
    start_epoch = 0
    log_file = None
    if out_dir is not None:
        out_dir = Path(out_dir)
        out_dir.mkdir(parents=True, exist_ok=True)
        last = out_dir / "last.mfck"
        if resume and last.exists():
            ck = persistence.load_checkpoint(last, net, expected_digest=config_digest or None)
            opt.load_moments(ck.moments, ck.meta["step"])
            result.step = ck.meta["step"]
            result.epoch_losses = list(ck.meta["epoch_losses"])
            result.best_loss = ck.meta["best_loss"]
            start_epoch = ck.meta["epoch"]
            if result.ema is not None:
                persistence.load_checkpoint(out_dir / "ema.mfck", result.ema)
            log.info("resumed from %s at epoch %d", last, start_epoch)
        log_file = open(out_dir / "train.log", "a")
    seed = spec.seed if master_seed is None else master_seed
    t0 = time.time()
    try:
        for epoch in range(start_epoch, spec.epochs):
            if stop_after is not None and epoch >= stop_after:
                break
            losses = []
            for _ in range(spec.steps_per_epoch):
                k = result.step
                batch = make_batch(config, spec.batch_size, spec.seed, k)
                tensors = batch_tensors(batch, scaler)
                opt.set_lr(spec.lr_at(k))
                opt.zero_grad()
                loss = fm_loss(net, tensors, step_generator(spec.seed, k), time_power=spec.time_power)
                if torch.isfinite(loss):
                    loss.backward()
                    opt.step()
                    if result.ema is not None:
                        _ema_update(result.ema, net, min(spec.ema_decay, (1 + k) / (10 + k)))
                    losses.append(loss.item())
                else:
                    opt.state.skipped += 1
                    log.warning("non-finite loss at step %d (batch seeds %s); skipped",
                                k, batch.seeds[:3].tolist())
                result.step += 1
                if progress is not None:
                    progress(result.step, losses[-1] if losses else float("nan"))
            mean_loss = float(np.mean(losses)) if losses else float("nan")
            result.epoch_losses.append(mean_loss)
            result.skipped = opt.state.skipped
            if log_file is not None:
                log_file.write(f"epoch={epoch + 1} step={result.step} loss={mean_loss:.6f} "
                               f"wall={time.time() - t0:.2f}\n")
                log_file.flush()
            log.info("epoch %d/%d loss %.4f (%.1fs)", epoch + 1, spec.epochs, mean_loss, time.time() - t0)
            if out_dir is not None:
                meta = {"epoch": epoch + 1, "step": result.step, "best_loss": result.best_loss,
                        "epoch_losses": result.epoch_losses, "seed": seed,
                        "scaler_loc": scaler.loc.tolist(), "scaler_scale": scaler.scale.tolist(),
                        "scope": config.scope, "families": list(config.families),
                        "preset": config.preset, "budget": spec.budget}
                meta.update(extra_meta or {})
                if mean_loss < result.best_loss:
                    result.best_loss = mean_loss
                    meta["best_loss"] = mean_loss
                    persistence.save_checkpoint(out_dir / "best.mfck", net, opt, meta, config_digest)
                if (epoch + 1) % spec.checkpoint_every == 0 or epoch + 1 == spec.epochs:
                    persistence.save_checkpoint(out_dir / "last.mfck", net, opt, meta, config_digest)
                    persistence.save_checkpoint(out_dir / f"epoch{epoch + 1:05d}.mfck", net, opt,
                                                meta, config_digest)
                    if result.ema is not None:
                        persistence.save_checkpoint(out_dir / "ema.mfck", result.ema, None,
                                                    meta, config_digest)
            elif mean_loss < result.best_loss:
                result.best_loss = mean_loss
    finally:
        if log_file is not None:
            log_file.close()
    return result


# ---------------------------------------------------------------------------
# sampling


@dataclass
class PosteriorDraws:
    """Draws of the active coefficients of one dataset (raw scale)."""

    values: np.ndarray  # (n_valid, n_active)
    cells: List[tuple]
    n_flagged: int
    step_size: float
    seed: int
    dataset_digest: str = ""

    @property
    def n_draws(self) -> int:
        return self.values.shape[0]

    def mean(self) -> np.ndarray:
        return self.values.mean(axis=0)

    def std(self) -> np.ndarray:
        return self.values.std(axis=0, ddof=1)


def integrate(velocity: Callable[[torch.Tensor, float], torch.Tensor], z1: torch.Tensor,
              M: torch.Tensor, step_size: float) -> torch.Tensor:
    """Euler from t=1 to t=0: ``Z <- Z - dt * u(Z, t)`` on active cells only."""
    n_steps = int(round(1.0 / step_size))
    active = M > 0
    zero = torch.zeros((), dtype=z1.dtype)
    z = torch.where(active, z1, zero)
    for k in range(n_steps):
        t = 1.0 - k * step_size
        u = velocity(z, t)
        z = z - step_size * torch.where(active, u, zero)
    return z


@torch.no_grad()
def sample_posterior(dataset: Dataset, net, spec: SamplerSpec, scaler: CoefficientScaler,
                     dataset_digest: str = "") -> PosteriorDraws:
    """Draw ``spec.n_draws`` posterior samples of the active coefficients."""
    dtype = next(net.parameters()).dtype if hasattr(net, "parameters") else torch.float32
    X = torch.as_tensor(dataset.X, dtype=dtype)[None]
    Y = torch.as_tensor(dataset.Y, dtype=dtype)[None]
    fam = torch.tensor([dataset.family], dtype=torch.long)
    summaries = net.encode(X, Y, fam)
    M = torch.as_tensor(dataset.M, dtype=dtype)
    cells = dataset.active_cells()
    rows = np.array([c[0] for c in cells], dtype=int)
    cols = np.array([c[1] for c in cells], dtype=int)
    gen = torch.Generator().manual_seed(int(spec.seed) % (2**63))
    out, flagged = [], 0
    done = 0
    while done < spec.n_draws:
        n = min(spec.chunk, spec.n_draws - done)
        z1 = torch.randn((n,) + tuple(M.shape), generator=gen, dtype=dtype)
        Mb = M.expand(n, -1, -1)
        s = summaries.expand(n, -1, -1)
        fb = fam.expand(n)

        def velocity(z, t, s=s, Mb=Mb, fb=fb):
            return net.decode(z, s, t, Mb, fb, dataset.n_trials)

        z = integrate(velocity, z1, Mb, spec.step_size).double().numpy()
        raw = scaler.unstandardize(z, np.full(n, dataset.family))
        vals = raw[:, rows, cols]
        ok = np.all(np.isfinite(vals), axis=1)
        flagged += int((~ok).sum())
        out.append(vals[ok])
        done += n
    if flagged:
        log.warning("%d non-finite posterior draws excluded", flagged)
    return PosteriorDraws(np.concatenate(out), cells, flagged, spec.step_size, spec.seed, dataset_digest)
