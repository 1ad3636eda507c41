import numpy as np
import pytest
import torch

from metassm.network import DecoderConfig, EncoderConfig, NetworkConfig


def tiny_network(r_max=8, d_max=6) -> NetworkConfig:
    return NetworkConfig(
        encoder=EncoderConfig(layers=1, heads=2, dim=16, n_seeds=2, seed_dim=16, n_inducing=4),
        decoder=DecoderConfig(layers=1, heads=2, dim=16, time_dim=8, pos_dim=8, family_dim=4),
        r_max=r_max, d_max=d_max,
    )


class FieldNet(torch.nn.Module):
    """Stand-in velocity network defined by ``fn(z, t)``."""

    def __init__(self, fn):
        super().__init__()
        self.fn = fn
        self.dummy = torch.nn.Parameter(torch.zeros(1, dtype=torch.float64))

    def encode(self, X, Y, family):
        return torch.zeros(X.shape[0], 1, 1, dtype=torch.float64)

    def decode(self, z, summaries, t, M, family, n_trials):
        return self.fn(z, t)


@pytest.fixture(autouse=True)
def _single_thread():
    torch.set_num_threads(1)
    yield


@pytest.fixture
def rng():
    return np.random.default_rng(1234)


# acceptance results: criterion id -> (passed, detail); printed after the run
ACCEPTANCE = {}


@pytest.fixture
def record():
    def _record(cid, passed, detail):
        ACCEPTANCE[cid] = (bool(passed), detail)
        print(f"criterion {cid}: {'PASS' if passed else 'FAIL'} {detail}")
        return passed
    return _record


def pytest_terminal_summary(terminalreporter):
    if not ACCEPTANCE:
        return
    terminalreporter.section("acceptance criteria")
    for cid in sorted(ACCEPTANCE):
        ok, detail = ACCEPTANCE[cid]
        terminalreporter.write_line(f"criterion {cid:>2}: {'PASS' if ok else 'FAIL'}  {detail}")
