"""Reverse-mode differentiation layer used by the velocity network.

Tensors, the tape and the adaptive-moment update come from ``torch``. This
module adds what training needs on top of them: a graph wrapper that names
the offending layer on shape errors and refuses backward before forward, an
optimizer wrapper that skips non-finite updates, and an independent
central-difference gradient checker with a registry of the primitive ops the
network is built from.
"""

from __future__ import annotations

import logging
import math
from dataclasses import dataclass, field
from typing import Callable, Dict, Iterable, List, Mapping, Optional, Sequence

import numpy as np
import torch
import torch.nn.functional as F
from torch import nn

log = logging.getLogger(__name__)

Tensor = torch.Tensor


class ShapeError(ValueError):
    """Input shapes do not fit a node of the graph."""

    def __init__(self, node: str, message: str):
        super().__init__(f"shape mismatch at node {node!r}: {message}")
        self.node = node


class BackwardBeforeForward(RuntimeError):
    pass


def set_precision(bits: int) -> torch.dtype:
    """Select 32- or 64-bit default floats and return the dtype."""
    dtype = {32: torch.float32, 64: torch.float64}.get(bits)
    if dtype is None:
        raise ValueError(f"precision must be 32 or 64, got {bits}")
    torch.set_default_dtype(dtype)
    return dtype


class Graph:
    """A differentiable computation with named weights.

    ``fn`` is either an ``nn.Module`` (its parameters are the weights) or a
    plain callable together with an explicit ``weights`` mapping.
    """

    def __init__(self, fn: Callable[..., Tensor], weights: Optional[Mapping[str, Tensor]] = None):
        self.fn = fn
        if weights is None:
            if not isinstance(fn, nn.Module):
                raise TypeError("weights are required for a plain callable")
            weights = dict(fn.named_parameters())
        self.weights: Dict[str, Tensor] = dict(weights)
        self.output: Optional[Tensor] = None
        self._stack: List[str] = []
        self._hooks = []
        if isinstance(fn, nn.Module):
            for name, mod in fn.named_modules():
                self._hooks.append(mod.register_forward_pre_hook(self._enter(name or "<root>")))
                self._hooks.append(mod.register_forward_hook(self._leave))

    def _enter(self, name):
        def hook(_mod, _inp):
            self._stack.append(name)
        return hook

    def _leave(self, _mod, _inp, _out):
        self._stack.pop()

    def forward(self, *args, **inputs) -> Tensor:
        self._stack.clear()
        try:
            out = self.fn(*args, **inputs)
        except RuntimeError as exc:
            msg = str(exc)
            if "shape" in msg or "size" in msg or "dimension" in msg:
                node = self._stack[-1] if self._stack else getattr(self.fn, "__name__", "<fn>")
                raise ShapeError(node, msg) from exc
            raise
        self.output = out
        return out

    __call__ = forward

    def backward(self, seed_grad: Optional[Tensor] = None) -> Dict[str, Tensor]:
        """Accumulate gradients of the last output and return them by weight name."""
        if self.output is None:
            raise BackwardBeforeForward("backward called before forward")
        if seed_grad is None:
            seed_grad = torch.ones_like(self.output)
        self.output.backward(seed_grad)
        self.output = None
        return {
            name: (w.grad if w.grad is not None else torch.zeros_like(w))
            for name, w in self.weights.items()
        }

    def zero_grad(self):
        for w in self.weights.values():
            w.grad = None


def forward(graph: Graph, *args, **inputs) -> Tensor:
    return graph.forward(*args, **inputs)


def backward(graph: Graph, seed_grad: Optional[Tensor] = None) -> Dict[str, Tensor]:
    return graph.backward(seed_grad)


@dataclass
class OptimizerState:
    lr: float = 1e-4
    betas: tuple = (0.9, 0.999)
    eps: float = 1e-8
    step: int = 0
    skipped: int = 0


class Adam:
    """Bias-corrected adaptive-moment updates that skip non-finite gradients."""

    def __init__(self, params: Iterable[Tensor], lr: float = 1e-4,
                 betas=(0.9, 0.999), eps: float = 1e-8):
        self.params = [p for p in params if p.requires_grad]
        self.state = OptimizerState(lr, tuple(betas), eps)
        self._opt = torch.optim.Adam(self.params, lr=lr, betas=betas, eps=eps)

    def set_lr(self, lr: float):
        self.state.lr = lr
        for g in self._opt.param_groups:
            g["lr"] = lr

    def grads_finite(self) -> bool:
        return all(p.grad is None or bool(torch.isfinite(p.grad).all()) for p in self.params)

    def step(self) -> bool:
        """Apply one update; returns False (and warns) if it was skipped."""
        if not self.grads_finite():
            self.state.skipped += 1
            log.warning("non-finite gradient at step %d; update skipped", self.state.step)
            self.zero_grad()
            return False
        self._opt.step()
        self.state.step += 1
        return True

    def zero_grad(self):
        self._opt.zero_grad(set_to_none=True)

    def moments(self) -> List[tuple]:
        """(first, second) moment tensors per parameter, zeros before the first step."""
        out = []
        for p in self.params:
            st = self._opt.state.get(p, {})
            out.append((st.get("exp_avg", torch.zeros_like(p)), st.get("exp_avg_sq", torch.zeros_like(p))))
        return out

    def load_moments(self, moments: Sequence[tuple], step: int):
        if len(moments) != len(self.params):
            raise ValueError("moment list does not match parameters")
        for p, (m, v) in zip(self.params, moments):
            if m.shape != p.shape or v.shape != p.shape:
                raise ValueError("moment shape mismatch")
            self._opt.state[p] = {
                "step": torch.tensor(float(step)),
                "exp_avg": m.clone().to(p.dtype),
                "exp_avg_sq": v.clone().to(p.dtype),
            }
        self.state.step = step


def step(optimizer: Adam) -> bool:
    return optimizer.step()


# ---------------------------------------------------------------------------
# finite-difference checking


def relative_error(analytic: float, numeric: float, floor: float = 1e-8) -> float:
    return abs(analytic - numeric) / max(abs(analytic), abs(numeric), floor)


@dataclass
class GradCheckResult:
    name: str
    max_rel_error: float
    n_checked: int
    worst: str = ""
    tol: float = 1e-4

    @property
    def passed(self) -> bool:
        return self.max_rel_error < self.tol


def check_gradients(loss_fn: Callable[[], Tensor], tensors: Mapping[str, Tensor],
                    n_entries: Optional[int] = None, h: float = 1e-5, tol: float = 1e-4,
                    seed: int = 0, name: str = "graph", order: int = 2) -> GradCheckResult:
    """Compare autograd gradients with central differences.

    ``tensors`` must be 64-bit leaves with ``requires_grad``; ``n_entries``
    random entries are probed across all of them (every entry if None).
    ``order=4`` uses the five-point stencil, which tolerates a larger ``h``
    and so keeps rounding noise below small gradients of large losses.
    """
    if order not in (2, 4):
        raise ValueError("order must be 2 or 4")
    for t in tensors.values():
        t.grad = None
    loss = loss_fn()
    loss.backward()
    analytic = {k: t.grad.detach().clone() if t.grad is not None else torch.zeros_like(t)
                for k, t in tensors.items()}
    index = [(k, i) for k, t in tensors.items() for i in range(t.numel())]
    if n_entries is not None and n_entries < len(index):
        rng = np.random.default_rng(seed)
        index = [index[j] for j in rng.choice(len(index), n_entries, replace=False)]
    worst, worst_at = 0.0, ""
    with torch.no_grad():
        for k, i in index:
            flat = tensors[k].view(-1)
            orig = flat[i].item()
            flat[i] = orig + h
            fp = loss_fn().item()
            flat[i] = orig - h
            fm = loss_fn().item()
            numeric = (fp - fm) / (2 * h)
            if order == 4:
                flat[i] = orig + 2 * h
                fpp = loss_fn().item()
                flat[i] = orig - 2 * h
                fmm = loss_fn().item()
                numeric = (8 * (fp - fm) - (fpp - fmm)) / (12 * h)
            flat[i] = orig
            err = relative_error(analytic[k].view(-1)[i].item(), numeric)
            if err > worst or math.isnan(err):
                worst, worst_at = err, f"{k}[{i}]"
    return GradCheckResult(name, worst, len(index), worst_at, tol)


@dataclass
class OpCase:
    fn: Callable[..., Tensor]
    shapes: Sequence[tuple]


def _attention(q, k, v):
    return F.scaled_dot_product_attention(q, k, v)


def _film(h, scale, shift):
    return h * scale + shift


OPS: Dict[str, OpCase] = {
    "add": OpCase(torch.add, [(3, 4), (4,)]),
    "mul": OpCase(torch.mul, [(3, 4), (3, 1)]),
    "sub": OpCase(torch.sub, [(2, 3), (2, 3)]),
    "matmul": OpCase(torch.matmul, [(2, 3, 4), (4, 5)]),
    "linear": OpCase(F.linear, [(5, 4), (3, 4), (3,)]),
    "sum": OpCase(lambda x: x.sum(dim=-1), [(3, 4)]),
    "mean": OpCase(lambda x: x.mean(dim=0), [(3, 4)]),
    "square": OpCase(torch.square, [(3, 4)]),
    "exp": OpCase(torch.exp, [(3, 4)]),
    "sin": OpCase(torch.sin, [(3, 4)]),
    "cos": OpCase(torch.cos, [(3, 4)]),
    "gelu": OpCase(F.gelu, [(3, 4)]),
    "softmax": OpCase(lambda x: torch.softmax(x, dim=-1), [(3, 5)]),
    "layer_norm": OpCase(lambda x, w, b: F.layer_norm(x, (6,), w, b), [(3, 6), (6,), (6,)]),
    "attention": OpCase(_attention, [(2, 2, 3, 4), (2, 2, 5, 4), (2, 2, 5, 4)]),
    "film": OpCase(_film, [(3, 4), (3, 4), (3, 4)]),
    "concat": OpCase(lambda a, b: torch.cat([a, b], dim=-1), [(2, 3), (2, 2)]),
    "masked_where": OpCase(
        lambda x, m: torch.where(m > 0, x, torch.zeros_like(x)), [(3, 4), (3, 4)]),
}


def check_op(name: str, case: OpCase, seed: int = 0, h: float = 1e-5,
             tol: float = 1e-4) -> GradCheckResult:
    """Gradient check of one op on inputs uniform in [-2, 2] (64-bit)."""
    gen = torch.Generator().manual_seed(seed)
    inputs = [
        (torch.rand(s, generator=gen, dtype=torch.float64) * 4 - 2).requires_grad_(True)
        for s in case.shapes
    ]
    with torch.no_grad():
        probe = case.fn(*inputs)
    weights = torch.rand(probe.shape, generator=gen, dtype=torch.float64) * 2 - 1

    def loss():
        return (case.fn(*inputs) * weights).sum()

    return check_gradients(loss, {f"in{i}": x for i, x in enumerate(inputs)},
                           h=h, tol=tol, name=name)


def check_ops(ops: Optional[Mapping[str, OpCase]] = None, seed: int = 0,
              tol: float = 1e-4) -> List[GradCheckResult]:
    ops = OPS if ops is None else ops
    return [check_op(name, case, seed=seed, tol=tol) for name, case in ops.items()]
