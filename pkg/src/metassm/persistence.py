"""Little-endian binary containers for datasets, checkpoints and posterior draws.

Dataset (``.mfsm``)::

    header   "MFSM" | version u16 | family u8 | N u32 | R u32 | D u32 | C_obs u32 | seed u64
    blocks   f32 X (N x R) | f32 B (R x D) | f32 M (R x D) | f32 Y (N x C_obs), row-major
    trailer  "MFTR" | config digest (64 ascii hex) | master seed u64 | R_max u16 | D_max u16
             | kinds length u32 | kinds (utf-8 json)

Checkpoint (``.mfck``)::

    "MFCK" | version u16 | config digest (64 ascii hex) | json length u32 | json
    | f32 weights in manifest order | f32 first moments | f32 second moments

Posterior draws (``.mfpd``)::

    "MFPD" | version u16 | dataset digest (64 ascii hex) | draws u32 | cells u32
    | step size f64 | seed u64 | flagged u32 | cells (u16 row, u16 col)*
    | f32 draws (draws x cells) | config digest (64 ascii hex) | master seed u64
"""

from __future__ import annotations

import hashlib
import io
import json
import struct
from dataclasses import asdict, dataclass
from pathlib import Path
from typing import Dict, List, Optional

import numpy as np
import torch

from .meta_simulator import Dataset
from .simulators import get_family

VERSION = 1
_DS_HEADER = struct.Struct("<4sHBIIIIQ")
_DS_TRAILER = struct.Struct("<4s64sQHHI")
_CK_HEADER = struct.Struct("<4sH64sI")
_PD_HEADER = struct.Struct("<4sH64sIIdQI")
_PD_TRAILER = struct.Struct("<64sQ")

NO_DIGEST = "0" * 64


class FormatError(ValueError):
    pass


class DigestMismatch(ValueError):
    pass


def _f32(a) -> bytes:
    return np.ascontiguousarray(a, dtype="<f4").tobytes()


def _digest_field(digest: str) -> bytes:
    digest = digest or NO_DIGEST
    if len(digest) != 64:
        raise ValueError("digest must be 64 hex characters")
    return digest.encode("ascii")


def _dataset_body(ds: Dataset) -> bytes:
    fam = get_family(ds.family)
    R, D, C = ds.n_regressors, fam.dim, fam.n_obs
    head = _DS_HEADER.pack(b"MFSM", VERSION, fam.fid, ds.n_trials, R, D, C, int(ds.seed))
    return b"".join([
        head,
        _f32(ds.X[:, :R]),
        _f32(ds.B[:R, :D]),
        _f32(ds.M[:R, :D]),
        _f32(ds.Y[:, :C]),
    ])


def dataset_digest(ds: Dataset) -> str:
    return hashlib.sha256(_dataset_body(ds)).hexdigest()


def encode_dataset(ds: Dataset, config_digest: str = "", master_seed: int = 0) -> bytes:
    kinds = json.dumps(list(ds.kinds)).encode()
    trailer = _DS_TRAILER.pack(b"MFTR", _digest_field(config_digest), int(master_seed),
                               ds.X.shape[1], ds.B.shape[1], len(kinds))
    return _dataset_body(ds) + trailer + kinds


def write_dataset(path, ds: Dataset, config_digest: str = "", master_seed: int = 0) -> Path:
    path = Path(path)
    path.write_bytes(encode_dataset(ds, config_digest, master_seed))
    return path


@dataclass
class DatasetFile:
    dataset: Dataset
    config_digest: str
    master_seed: int


def decode_dataset(buf: bytes) -> DatasetFile:
    if len(buf) < _DS_HEADER.size or buf[:4] != b"MFSM":
        raise FormatError("not a dataset container (bad magic)")
    magic, version, fid, N, R, D, C, seed = _DS_HEADER.unpack_from(buf, 0)
    if version != VERSION:
        raise FormatError(f"unsupported dataset version {version}")
    off = _DS_HEADER.size

    def block(rows, cols):
        nonlocal off
        n = rows * cols * 4
        if off + n > len(buf):
            raise FormatError("truncated dataset container")
        a = np.frombuffer(buf, dtype="<f4", count=rows * cols, offset=off).reshape(rows, cols)
        off += n
        return a.astype(np.float64)

    X, B, M, Y = block(N, R), block(R, D), block(R, D), block(N, C)
    if off + _DS_TRAILER.size > len(buf):
        raise FormatError("dataset trailer missing")
    tmagic, digest, master, r_max, d_max, klen = _DS_TRAILER.unpack_from(buf, off)
    if tmagic != b"MFTR":
        raise FormatError("bad dataset trailer")
    off += _DS_TRAILER.size
    kinds = tuple(json.loads(buf[off:off + klen].decode())) if klen else ()
    Xp = np.zeros((N, r_max))
    Xp[:, :R] = X
    Bp = np.zeros((r_max, d_max))
    Bp[:R, :D] = B
    Mp = np.zeros((r_max, d_max), dtype=np.uint8)
    Mp[:R, :D] = M.astype(np.uint8)
    Yp = np.zeros((N, 2))
    Yp[:, :C] = Y
    ds = Dataset(int(fid), Xp, Bp, Mp, Yp, int(R), int(seed), kinds)
    return DatasetFile(ds, digest.decode("ascii"), int(master))


def read_dataset(path) -> DatasetFile:
    return decode_dataset(Path(path).read_bytes())


def quantize_dataset(ds: Dataset) -> Dataset:
    """The dataset exactly as it reads back from its container."""
    return decode_dataset(encode_dataset(ds)).dataset


# ---------------------------------------------------------------------------
# checkpoints


@dataclass
class Checkpoint:
    net: torch.nn.Module
    moments: List[tuple]
    meta: Dict
    config_digest: str
    manifest: List


def encode_checkpoint(net, optimizer=None, meta: Optional[Dict] = None,
                      config_digest: str = "") -> bytes:
    params = list(net.named_parameters())
    has_moments = optimizer is not None
    info = {
        "manifest": [[name, list(p.shape)] for name, p in params],
        "network": asdict(net.cfg) if hasattr(net, "cfg") else None,
        "moments": has_moments,
        "meta": meta or {},
    }
    blob = json.dumps(info, sort_keys=True).encode()
    out = io.BytesIO()
    out.write(_CK_HEADER.pack(b"MFCK", VERSION, _digest_field(config_digest), len(blob)))
    out.write(blob)
    for _, p in params:
        out.write(_f32(p.detach().cpu().numpy()))
    if has_moments:
        moments = optimizer.moments()
        for m, _ in moments:
            out.write(_f32(m.detach().cpu().numpy()))
        for _, v in moments:
            out.write(_f32(v.detach().cpu().numpy()))
    return out.getvalue()


def save_checkpoint(path, net, optimizer=None, meta=None, config_digest: str = "") -> Path:
    path = Path(path)
    tmp = path.with_suffix(path.suffix + ".tmp")
    tmp.write_bytes(encode_checkpoint(net, optimizer, meta, config_digest))
    tmp.replace(path)
    return path


def read_checkpoint_header(path) -> Dict:
    buf = Path(path).read_bytes()
    if buf[:4] != b"MFCK":
        raise FormatError("not a checkpoint (bad magic)")
    _, version, digest, n = _CK_HEADER.unpack_from(buf, 0)
    info = json.loads(buf[_CK_HEADER.size:_CK_HEADER.size + n])
    info["config_digest"] = digest.decode("ascii")
    info["version"] = version
    return info


def load_checkpoint(path, net=None, expected_digest: Optional[str] = None) -> Checkpoint:
    """Load weights (and optimizer moments) into ``net``, building it if None."""
    from .network import DecoderConfig, EncoderConfig, NetworkConfig, VelocityNet

    buf = Path(path).read_bytes()
    if len(buf) < _CK_HEADER.size or buf[:4] != b"MFCK":
        raise FormatError(f"{path}: not a checkpoint (bad magic)")
    _, version, digest, n = _CK_HEADER.unpack_from(buf, 0)
    if version != VERSION:
        raise FormatError(f"unsupported checkpoint version {version}")
    digest = digest.decode("ascii")
    if expected_digest is not None and digest != expected_digest:
        raise DigestMismatch(f"{path}: checkpoint digest {digest[:12]} != config digest {expected_digest[:12]}")
    off = _CK_HEADER.size
    info = json.loads(buf[off:off + n])
    off += n
    if net is None:
        nc = info["network"]
        net = VelocityNet(NetworkConfig(
            encoder=EncoderConfig(**nc["encoder"]), decoder=DecoderConfig(**nc["decoder"]),
            r_max=nc["r_max"], d_max=nc["d_max"], c_obs=nc["c_obs"], n_families=nc["n_families"]))
    params = list(net.named_parameters())
    manifest = [(name, tuple(shape)) for name, shape in info["manifest"]]
    if manifest != [(name, tuple(p.shape)) for name, p in params]:
        raise FormatError(f"{path}: layer manifest does not match the network")

    def take(shape):
        nonlocal off
        count = int(np.prod(shape)) if shape else 1
        if off + 4 * count > len(buf):
            raise FormatError(f"{path}: truncated checkpoint")
        a = np.frombuffer(buf, dtype="<f4", count=count, offset=off).reshape(shape)
        off += 4 * count
        return torch.from_numpy(a.copy())

    with torch.no_grad():
        for (_, p), (_, shape) in zip(params, manifest):
            p.copy_(take(shape).to(p.dtype))
    moments = []
    if info["moments"]:
        ms = [take(shape) for _, shape in manifest]
        vs = [take(shape) for _, shape in manifest]
        moments = list(zip(ms, vs))
    if off != len(buf):
        raise FormatError(f"{path}: trailing bytes in checkpoint")
    return Checkpoint(net, moments, info["meta"], digest, manifest)


# ---------------------------------------------------------------------------
# posterior draws


def encode_draws(draws, config_digest: str = "", master_seed: int = 0) -> bytes:
    vals = np.asarray(draws.values)
    cells = draws.cells
    out = io.BytesIO()
    out.write(_PD_HEADER.pack(b"MFPD", VERSION, _digest_field(draws.dataset_digest),
                              vals.shape[0], len(cells), float(draws.step_size),
                              int(draws.seed) % 2**64, int(draws.n_flagged)))
    for r, c in cells:
        out.write(struct.pack("<HH", r, c))
    out.write(_f32(vals))
    out.write(_PD_TRAILER.pack(_digest_field(config_digest), int(master_seed)))
    return out.getvalue()


def write_draws(path, draws, config_digest: str = "", master_seed: int = 0) -> Path:
    path = Path(path)
    path.write_bytes(encode_draws(draws, config_digest, master_seed))
    return path


def read_draws(path):
    from .flow import PosteriorDraws

    buf = Path(path).read_bytes()
    if buf[:4] != b"MFPD":
        raise FormatError("not a posterior-draws file (bad magic)")
    _, version, ddig, n, c, dt, seed, flagged = _PD_HEADER.unpack_from(buf, 0)
    off = _PD_HEADER.size
    cells = [struct.unpack_from("<HH", buf, off + 4 * k) for k in range(c)]
    off += 4 * c
    vals = np.frombuffer(buf, dtype="<f4", count=n * c, offset=off).reshape(n, c).astype(np.float64)
    off += 4 * n * c
    cdig, master = _PD_TRAILER.unpack_from(buf, off)
    draws = PosteriorDraws(vals, [tuple(x) for x in cells], flagged, dt, seed, ddig.decode("ascii"))
    return draws, cdig.decode("ascii"), master
