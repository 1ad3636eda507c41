"""Encoder-decoder velocity field over unrolled coefficient grids.

The encoder is a set transformer over trials: each trial token is the design
row plus observables (plus a family embedding); attention blocks mix trials
and a pooling-by-attention layer maps them onto ``L`` learned seed vectors.
Attention pooling makes the summaries invariant to trial order and to
replicating every trial, so the trial count is handed to the decoder as an
explicit conditioning feature.

The decoder unrolls the ``R_max x D`` coefficient grid into tokens. Each token
carries its current value, sinusoidal embeddings of its (row, column, family)
triplet, a learned family embedding and a learned mask embedding. Layers
alternate cross-attention over the summaries, self-attention across tokens
and a FiLM-modulated feed-forward block conditioned on time, position, mask
and trial count.
"""

from __future__ import annotations

import hashlib
import json
import math
from dataclasses import asdict, dataclass, field, replace
from typing import List, Tuple

import numpy as np
import torch
import torch.nn.functional as F
from torch import nn

from .simulators import N_FAMILIES


@dataclass(frozen=True)
class EncoderConfig:
    layers: int = 2
    heads: int = 4
    dim: int = 64
    n_seeds: int = 8
    seed_dim: int = 64
    # "isab" (inducing points) or "sab" (full trial-trial attention)
    block: str = "isab"
    n_inducing: int = 16

    def __post_init__(self):
        if self.dim % self.heads:
            raise ValueError(f"encoder dim {self.dim} not divisible by {self.heads} heads")
        if self.seed_dim % self.heads:
            raise ValueError(f"seed dim {self.seed_dim} not divisible by {self.heads} heads")
        if self.block not in ("isab", "sab"):
            raise ValueError(f"unknown encoder block {self.block!r}")


@dataclass(frozen=True)
class DecoderConfig:
    layers: int = 2
    heads: int = 4
    dim: int = 64
    time_dim: int = 16
    pos_dim: int = 16
    family_dim: int = 8
    # how positional features join the token value: "concat" or "add"
    token_mix: str = "concat"

    def __post_init__(self):
        if self.dim % self.heads:
            raise ValueError(f"decoder dim {self.dim} not divisible by {self.heads} heads")
        for name in ("time_dim", "pos_dim"):
            if getattr(self, name) % 2:
                raise ValueError(f"{name} must be even")
        if self.token_mix not in ("concat", "add"):
            raise ValueError(f"unknown token_mix {self.token_mix!r}")


@dataclass(frozen=True)
class NetworkConfig:
    encoder: EncoderConfig = field(default_factory=EncoderConfig)
    decoder: DecoderConfig = field(default_factory=DecoderConfig)
    r_max: int = 8
    d_max: int = 6
    c_obs: int = 2
    n_families: int = N_FAMILIES

    def digest(self) -> str:
        blob = json.dumps(asdict(self), sort_keys=True).encode()
        return hashlib.sha256(blob).hexdigest()


PROFILES = {
    "desk": NetworkConfig(),
    "full": NetworkConfig(
        encoder=EncoderConfig(layers=8, heads=8, dim=256, n_seeds=32, seed_dim=64, n_inducing=32),
        decoder=DecoderConfig(layers=8, heads=8, dim=256, time_dim=32, pos_dim=32, family_dim=8),
    ),
}


def network_profile(name: str, r_max: int = 8, d_max: int = 6) -> NetworkConfig:
    try:
        base = PROFILES[name]
    except KeyError:
        raise KeyError(f"unknown network profile {name!r}; choose from {sorted(PROFILES)}") from None
    return replace(base, r_max=r_max, d_max=d_max)


# ---------------------------------------------------------------------------
# embeddings


def sinusoidal_embed(index, dim: int, base: float = 10000.0) -> torch.Tensor:
    """Interleaved ``[sin, cos, sin, cos, ...]`` features of integer indices.

    Frequencies are ``base ** (-2k / dim)``. Works on scalars or tensors of
    indices; the feature axis is appended last.
    """
    if dim % 2:
        raise ValueError(f"sinusoidal embedding dim must be even, got {dim}")
    idx = torch.as_tensor(index, dtype=torch.get_default_dtype())
    if torch.any(idx < 0):
        raise ValueError("indices must be non-negative")
    freqs = base ** (-torch.arange(0, dim, 2, dtype=idx.dtype) / dim)
    ang = idx[..., None] * freqs
    return torch.stack([torch.sin(ang), torch.cos(ang)], dim=-1).flatten(-2)


def time_frequencies(dim: int, w_max: float = 64 * math.pi) -> torch.Tensor:
    """Geometric frequency bank from pi (period 2, longer than [0, 1]) to ``w_max``."""
    k = dim // 2
    if k == 1:
        return torch.tensor([math.pi])
    return math.pi * (w_max / math.pi) ** (torch.arange(k, dtype=torch.float64) / (k - 1))


def fourier_time_embed(t, dim: int) -> torch.Tensor:
    """Interleaved sin/cos of ``t`` in [0, 1] against a fixed frequency bank."""
    if dim % 2:
        raise ValueError(f"time embedding dim must be even, got {dim}")
    t = torch.as_tensor(t, dtype=torch.get_default_dtype())
    if torch.any(t < 0) or torch.any(t > 1):
        raise ValueError("t must lie in [0, 1]")
    ang = t[..., None] * time_frequencies(dim).to(t.dtype)
    return torch.stack([torch.sin(ang), torch.cos(ang)], dim=-1).flatten(-2)


def film_modulate(h: torch.Tensor, scale: torch.Tensor, shift: torch.Tensor) -> torch.Tensor:
    if h.shape != scale.shape or h.shape != shift.shape:
        raise ValueError(f"FiLM shapes differ: {tuple(h.shape)}, {tuple(scale.shape)}, {tuple(shift.shape)}")
    return scale * h + shift


# ---------------------------------------------------------------------------
# attention blocks


def _linear(n_in, n_out, bias=True):
    lin = nn.Linear(n_in, n_out, bias=bias)
    nn.init.uniform_(lin.weight, -1 / math.sqrt(n_in), 1 / math.sqrt(n_in))
    if bias:
        nn.init.zeros_(lin.bias)
    return lin


class MultiHeadAttention(nn.Module):
    def __init__(self, dim, heads, kv_dim=None):
        super().__init__()
        kv_dim = dim if kv_dim is None else kv_dim
        self.heads = heads
        self.q = _linear(dim, dim)
        # a key bias only shifts every logit of a query equally, which softmax ignores
        self.k = _linear(kv_dim, dim, bias=False)
        self.v = _linear(kv_dim, dim)
        self.out = _linear(dim, dim)

    def _split(self, x):
        b, n, d = x.shape
        return x.view(b, n, self.heads, d // self.heads).transpose(1, 2)

    def forward(self, x_q, x_kv):
        q, k, v = self._split(self.q(x_q)), self._split(self.k(x_kv)), self._split(self.v(x_kv))
        h = F.scaled_dot_product_attention(q, k, v)
        b, _, n, _ = h.shape
        return self.out(h.transpose(1, 2).reshape(b, n, -1))


class FeedForward(nn.Module):
    def __init__(self, dim, mult=2):
        super().__init__()
        self.fc1 = _linear(dim, mult * dim)
        self.fc2 = _linear(mult * dim, dim)

    def forward(self, x):
        return self.fc2(F.gelu(self.fc1(x)))


class MAB(nn.Module):
    """Pre-norm multihead attention block: ``h = q + Att(q, kv); h + FF(h)``."""

    def __init__(self, dim, heads, kv_dim=None):
        super().__init__()
        kv_dim = dim if kv_dim is None else kv_dim
        self.norm_q = nn.LayerNorm(dim)
        self.norm_kv = nn.LayerNorm(kv_dim)
        self.attn = MultiHeadAttention(dim, heads, kv_dim)
        self.norm_ff = nn.LayerNorm(dim)
        self.ff = FeedForward(dim)

    def forward(self, q, kv):
        h = q + self.attn(self.norm_q(q), self.norm_kv(kv))
        return h + self.ff(self.norm_ff(h))


class ISAB(nn.Module):
    def __init__(self, dim, heads, n_inducing):
        super().__init__()
        self.inducing = nn.Parameter(torch.randn(1, n_inducing, dim) / math.sqrt(dim))
        self.mab_in = MAB(dim, heads)
        self.mab_out = MAB(dim, heads)

    def forward(self, x):
        h = self.mab_in(self.inducing.expand(x.shape[0], -1, -1), x)
        return self.mab_out(x, h)


class SAB(nn.Module):
    def __init__(self, dim, heads):
        super().__init__()
        self.mab = MAB(dim, heads)

    def forward(self, x):
        return self.mab(x, x)


class PMA(nn.Module):
    """Pool a set onto ``n_seeds`` learned query vectors."""

    def __init__(self, dim, heads, n_seeds, out_dim):
        super().__init__()
        self.seeds = nn.Parameter(torch.randn(1, n_seeds, out_dim) / math.sqrt(out_dim))
        self.mab = MAB(out_dim, heads, kv_dim=dim)

    def forward(self, x):
        return self.mab(self.seeds.expand(x.shape[0], -1, -1), x)


class SetEncoder(nn.Module):
    def __init__(self, cfg: EncoderConfig, r_max: int, c_obs: int, n_families: int, family_dim: int):
        super().__init__()
        self.cfg = cfg
        self.family = nn.Embedding(n_families, family_dim)
        self.embed = _linear(r_max + c_obs + family_dim, cfg.dim)
        if cfg.block == "isab":
            self.blocks = nn.ModuleList(ISAB(cfg.dim, cfg.heads, cfg.n_inducing) for _ in range(cfg.layers))
        else:
            self.blocks = nn.ModuleList(SAB(cfg.dim, cfg.heads) for _ in range(cfg.layers))
        self.pool = PMA(cfg.dim, cfg.heads, cfg.n_seeds, cfg.seed_dim)
        self.norm = nn.LayerNorm(cfg.seed_dim)

    def forward(self, X, Y, family):
        if X.shape[1] == 0:
            raise ValueError("cannot encode an empty trial set (N = 0)")
        fam = self.family(family)[:, None, :].expand(-1, X.shape[1], -1)
        h = self.embed(torch.cat([X, Y, fam], dim=-1))
        for blk in self.blocks:
            h = blk(h)
        return self.norm(self.pool(h))


class FiLMFeedForward(nn.Module):
    """``h + FF(FiLM(LN(h); cond))`` with (scale, shift) predicted from ``cond``."""

    def __init__(self, dim, cond_dim):
        super().__init__()
        self.norm = nn.LayerNorm(dim)
        self.film = nn.Linear(cond_dim, 2 * dim)
        nn.init.zeros_(self.film.weight)
        nn.init.zeros_(self.film.bias)
        self.ff = FeedForward(dim)

    def forward(self, h, cond):
        d_scale, shift = self.film(cond).chunk(2, dim=-1)
        return h + self.ff(film_modulate(self.norm(h), 1.0 + d_scale, shift))


class DecoderLayer(nn.Module):
    def __init__(self, dim, heads, seed_dim, cond_dim):
        super().__init__()
        self.norm_cross = nn.LayerNorm(dim)
        self.cross = MultiHeadAttention(dim, heads, kv_dim=seed_dim)
        self.norm_self = nn.LayerNorm(dim)
        self.self_attn = MultiHeadAttention(dim, heads)
        self.ff = FiLMFeedForward(dim, cond_dim)

    def forward(self, h, summaries, cond):
        h = h + self.cross(self.norm_cross(h), summaries)
        x = self.norm_self(h)
        h = h + self.self_attn(x, x)
        return self.ff(h, cond)


class VelocityNet(nn.Module):
    """``u(Z_t; X, Y, M, family, t)`` on an ``R_max x D_max`` grid."""

    def __init__(self, cfg: NetworkConfig = NetworkConfig()):
        super().__init__()
        self.cfg = cfg
        enc, dec = cfg.encoder, cfg.decoder
        self.encoder = SetEncoder(enc, cfg.r_max, cfg.c_obs, cfg.n_families, dec.family_dim)
        self.family = nn.Embedding(cfg.n_families, dec.family_dim)
        self.mask_embed = nn.Embedding(2, dec.dim)
        pos_feats = 3 * dec.pos_dim
        if dec.token_mix == "concat":
            self.token_in = _linear(1 + pos_feats + dec.family_dim, dec.dim)
        else:
            self.token_in = _linear(1, dec.dim)
            self.pos_in = _linear(pos_feats + dec.family_dim, dec.dim)
        cond_in = dec.time_dim + pos_feats + 2
        self.cond = nn.Sequential(_linear(cond_in, dec.dim), nn.GELU(), _linear(dec.dim, dec.dim))
        self.layers = nn.ModuleList(
            DecoderLayer(dec.dim, dec.heads, enc.seed_dim, dec.dim) for _ in range(dec.layers)
        )
        self.norm_out = nn.LayerNorm(dec.dim)
        self.head = _linear(dec.dim, 1)
        rows, cols = torch.meshgrid(torch.arange(cfg.r_max), torch.arange(cfg.d_max), indexing="ij")
        self.register_buffer("row_idx", rows.reshape(-1), persistent=False)
        self.register_buffer("col_idx", cols.reshape(-1), persistent=False)

    @property
    def n_tokens(self) -> int:
        return self.cfg.r_max * self.cfg.d_max

    def encode(self, X, Y, family):
        return self.encoder(X, Y, family)

    def positional(self, family):
        """``(B, T, 3 * pos_dim)`` sinusoidal features of each token's (i, j, f)."""
        p = self.cfg.decoder.pos_dim
        b = family.shape[0]
        ei = sinusoidal_embed(self.row_idx, p).to(self.head.weight.dtype)
        ej = sinusoidal_embed(self.col_idx, p).to(ei.dtype)
        ef = sinusoidal_embed(family, p).to(ei.dtype)
        return torch.cat([
            ei.expand(b, -1, -1), ej.expand(b, -1, -1),
            ef[:, None, :].expand(-1, self.n_tokens, -1),
        ], dim=-1)

    def decode(self, z, summaries, t, M, family, n_trials):
        """Velocity for grid values ``z`` (B, R_max, D_max) given encoder summaries."""
        cfg = self.cfg
        b = z.shape[0]
        if z.shape[1:] != (cfg.r_max, cfg.d_max) or M.shape != z.shape:
            raise ValueError(f"grid shape {tuple(z.shape)} / mask {tuple(M.shape)} do not match "
                             f"({cfg.r_max}, {cfg.d_max})")
        dtype = self.head.weight.dtype
        tokens = z.reshape(b, -1, 1).to(dtype)
        mask = M.reshape(b, -1).long()
        pos = self.positional(family)
        fam = self.family(family)[:, None, :].expand(-1, self.n_tokens, -1)
        if cfg.decoder.token_mix == "concat":
            h = self.token_in(torch.cat([tokens, pos, fam], dim=-1))
        else:
            h = self.token_in(tokens) + self.pos_in(torch.cat([pos, fam], dim=-1))
        h = h + self.mask_embed(mask)
        t = torch.as_tensor(t, dtype=dtype).reshape(-1)
        if t.numel() == 1:
            t = t.expand(b)
        temb = fourier_time_embed(t, cfg.decoder.time_dim).to(dtype)
        n_feat = torch.as_tensor(n_trials, dtype=dtype).reshape(-1)
        if n_feat.numel() == 1:
            n_feat = n_feat.expand(b)
        n_feat = torch.log(n_feat) - math.log(256.0)
        cond = torch.cat([
            temb[:, None, :].expand(-1, self.n_tokens, -1),
            pos,
            mask[..., None].to(dtype),
            n_feat[:, None, None].expand(-1, self.n_tokens, 1),
        ], dim=-1)
        cond = self.cond(cond)
        for layer in self.layers:
            h = layer(h, summaries, cond)
        return self.head(self.norm_out(h)).reshape(b, cfg.r_max, cfg.d_max)

    def forward(self, z, t, X, Y, M, family):
        summaries = self.encode(X, Y, family)
        return self.decode(z, summaries, t, M, family, X.shape[1])

    def manifest(self) -> List[Tuple[str, Tuple[int, ...]]]:
        return [(name, tuple(p.shape)) for name, p in self.named_parameters()]

    def n_parameters(self) -> int:
        return sum(p.numel() for p in self.parameters())


def flat_weights(net: nn.Module) -> np.ndarray:
    return np.concatenate([p.detach().cpu().double().numpy().ravel() for p in net.parameters()])
