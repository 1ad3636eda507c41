import numpy as np
import pytest
import torch

from metassm.autodiff import Adam
from metassm.flow import PosteriorDraws
from metassm.meta_simulator import ModelConfig, StructurePrior, simulate_dataset
from metassm.network import VelocityNet, flat_weights
from metassm.persistence import (DigestMismatch, FormatError, dataset_digest, decode_dataset,
                                 encode_checkpoint, encode_dataset, load_checkpoint,
                                 quantize_dataset, read_checkpoint_header, read_dataset,
                                 read_draws, save_checkpoint, write_dataset, write_draws)

from conftest import tiny_network

DIG = "ab" * 32


@pytest.fixture
def ds():
    cfg = ModelConfig(scope="instance", families=("ddm",), preset="interaction")
    return simulate_dataset(cfg, 40, seed=5)


def test_dataset_header_layout(ds):
    buf = encode_dataset(ds, DIG, 17)
    assert buf[:4] == b"MFSM"
    import struct
    magic, ver, fid, N, R, D, C, seed = struct.unpack_from("<4sHBIIIIQ", buf)
    assert (ver, fid, N, R, D, C, seed) == (1, 0, 40, 4, 6, 2, 5)
    off = struct.calcsize("<4sHBIIIIQ")
    X = np.frombuffer(buf, "<f4", count=N * R, offset=off).reshape(N, R)
    assert np.array_equal(X, ds.X[:, :R].astype("<f4"))


def test_dataset_roundtrip(tmp_path, ds):
    path = write_dataset(tmp_path / "d.mfsm", ds, DIG, 17)
    f = read_dataset(path)
    assert f.config_digest == DIG and f.master_seed == 17
    q = f.dataset
    assert np.array_equal(q.X, ds.X.astype(np.float32).astype(np.float64))
    assert np.array_equal(q.M, ds.M) and q.kinds == ds.kinds and q.seed == ds.seed
    assert dataset_digest(q) == dataset_digest(ds)
    # quantization is idempotent
    assert encode_dataset(quantize_dataset(q), DIG, 17) == path.read_bytes()


def test_dataset_bad_magic_and_truncation(ds):
    buf = encode_dataset(ds)
    with pytest.raises(FormatError):
        decode_dataset(b"XXXX" + buf[4:])
    with pytest.raises(FormatError):
        decode_dataset(buf[:100])


def test_gaussian_dataset_one_observable():
    cfg = ModelConfig(scope="instance", families=("gaussian",), preset="intercept_only",
                      structure=StructurePrior(r_max=1))
    d = simulate_dataset(cfg, 10, seed=1)
    q = decode_dataset(encode_dataset(d)).dataset
    assert q.Y.shape == (10, 2) and np.all(q.Y[:, 1] == 0)


def test_checkpoint_roundtrip(tmp_path):
    torch.manual_seed(0)
    net = VelocityNet(tiny_network())
    opt = Adam(net.parameters(), lr=1e-3)
    for p in net.parameters():
        p.grad = torch.randn_like(p)
    opt.step()
    path = save_checkpoint(tmp_path / "c.mfck", net, opt, {"step": 1}, DIG)
    ck = load_checkpoint(path, expected_digest=DIG)
    assert np.array_equal(flat_weights(ck.net), flat_weights(net))
    assert ck.meta == {"step": 1}
    for (m0, v0), (m1, v1) in zip(opt.moments(), ck.moments):
        assert torch.equal(m0, m1) and torch.equal(v0, v1)
    hdr = read_checkpoint_header(path)
    assert hdr["config_digest"] == DIG and sum(np.prod(s) for _, s in hdr["manifest"]) == net.n_parameters()
    assert not list(tmp_path.glob("*.tmp"))


def test_checkpoint_encoding_deterministic():
    torch.manual_seed(0)
    a = VelocityNet(tiny_network())
    torch.manual_seed(0)
    b = VelocityNet(tiny_network())
    assert encode_checkpoint(a, meta={"x": 1}) == encode_checkpoint(b, meta={"x": 1})


def test_checkpoint_digest_mismatch(tmp_path):
    path = save_checkpoint(tmp_path / "c.mfck", VelocityNet(tiny_network()), config_digest=DIG)
    with pytest.raises(DigestMismatch):
        load_checkpoint(path, expected_digest="cd" * 32)


def test_checkpoint_manifest_mismatch(tmp_path):
    path = save_checkpoint(tmp_path / "c.mfck", VelocityNet(tiny_network()))
    with pytest.raises(FormatError):
        load_checkpoint(path, net=VelocityNet(tiny_network(r_max=4)))


def test_checkpoint_trailing_bytes(tmp_path):
    path = save_checkpoint(tmp_path / "c.mfck", VelocityNet(tiny_network()))
    path.write_bytes(path.read_bytes() + b"\0")
    with pytest.raises(FormatError):
        load_checkpoint(path)


def test_draws_roundtrip(tmp_path):
    vals = np.random.default_rng(0).normal(size=(30, 3))
    d = PosteriorDraws(vals, [(0, 0), (0, 1), (1, 2)], 2, 0.01, 99, DIG)
    back, cdig, master = read_draws(write_draws(tmp_path / "p.mfpd", d, "cd" * 32, 4))
    assert np.array_equal(back.values, vals.astype(np.float32).astype(np.float64))
    assert back.cells == d.cells and back.n_flagged == 2 and back.step_size == 0.01
    assert back.seed == 99 and back.dataset_digest == DIG
    assert cdig == "cd" * 32 and master == 4


def test_bad_digest_length(ds):
    with pytest.raises(ValueError):
        encode_dataset(ds, "abc")
