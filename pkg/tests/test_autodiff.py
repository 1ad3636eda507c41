import logging

import pytest
import torch
from torch import nn

from metassm.autodiff import (OPS, Adam, BackwardBeforeForward, Graph, OpCase, ShapeError,
                              backward, check_gradients, check_op, check_ops, forward,
                              set_precision)


def scalar(x):
    return torch.tensor(float(x), dtype=torch.float64, requires_grad=True)


def test_square_forward_and_backward():
    x = scalar(3.0)
    g = Graph(lambda: x * x, {"x": x})
    assert forward(g).item() == 9.0
    assert backward(g, torch.tensor(1.0, dtype=torch.float64))["x"].item() == 6.0


def test_identity_graph():
    t = torch.randn(3, 4)
    g = Graph(nn.Identity())
    assert torch.equal(forward(g, t), t)


def test_softmax_symmetry():
    out = torch.softmax(torch.zeros(2), dim=0)
    assert torch.equal(out, torch.tensor([0.5, 0.5]))


def test_constant_node_has_zero_grad():
    x, c = scalar(2.0), scalar(5.0)
    g = Graph(lambda: x * 3 + 0 * c.detach(), {"x": x, "c": c})
    forward(g)
    grads = backward(g)
    assert grads["c"].item() == 0.0 and grads["x"].item() == 3.0


def test_backward_before_forward():
    x = scalar(1.0)
    with pytest.raises(BackwardBeforeForward):
        backward(Graph(lambda: x, {"x": x}))


def test_shape_error_names_node():
    net = nn.Sequential(nn.Linear(4, 3), nn.Linear(5, 2))
    with pytest.raises(ShapeError) as exc:
        forward(Graph(net), torch.zeros(2, 4))
    assert exc.value.node == "1"


def test_forward_deterministic():
    torch.manual_seed(0)
    net = nn.Sequential(nn.Linear(4, 8), nn.GELU(), nn.Linear(8, 1))
    x = torch.randn(16, 4)
    assert torch.equal(forward(Graph(net), x), forward(Graph(net), x))


def test_batch_linearity():
    torch.manual_seed(1)
    net = nn.Sequential(nn.Linear(3, 5), nn.Tanh(), nn.Linear(5, 1)).double()
    x = torch.randn(4, 3, dtype=torch.float64)
    g = Graph(lambda: net(x).sum(), dict(net.named_parameters()))
    forward(g)
    total = {k: v.clone() for k, v in backward(g).items()}
    acc = {k: torch.zeros_like(v) for k, v in total.items()}
    for i in range(4):
        g.zero_grad()
        gi = Graph(lambda i=i: net(x[i:i + 1]).sum(), dict(net.named_parameters()))
        forward(gi)
        for k, v in backward(gi).items():
            acc[k] += v
    for k in total:
        assert torch.allclose(total[k], acc[k], atol=1e-12)


def test_zero_gradient_leaves_weights():
    w = nn.Parameter(torch.tensor([1.0, -2.0]))
    opt = Adam([w], lr=0.1)
    w.grad = torch.zeros(2)
    opt.step()
    assert torch.equal(w.detach(), torch.tensor([1.0, -2.0]))
    assert opt.state.step == 1


def test_constant_gradient_descends():
    w = nn.Parameter(torch.tensor([0.0]))
    opt = Adam([w], lr=0.01)
    for _ in range(50):
        w.grad = torch.tensor([2.5])
        opt.step()
    assert w.item() < 0


def test_quadratic_bowl():
    w = nn.Parameter(torch.tensor([1.0], dtype=torch.float64))
    opt = Adam([w], lr=0.05)
    for _ in range(500):
        opt.zero_grad()
        (w ** 2).sum().backward()
        opt.step()
    assert abs(w.item()) < 0.01


def test_nonfinite_gradient_skipped(caplog):
    w = nn.Parameter(torch.tensor([1.0]))
    opt = Adam([w], lr=0.1)
    w.grad = torch.tensor([float("nan")])
    with caplog.at_level(logging.WARNING):
        assert opt.step() is False
    assert w.item() == 1.0 and opt.state.skipped == 1 and opt.state.step == 0
    assert "non-finite" in caplog.text


def test_moments_roundtrip():
    w = nn.Parameter(torch.tensor([1.0, 2.0]))
    opt = Adam([w], lr=0.1)
    w.grad = torch.tensor([0.5, -0.5])
    opt.step()
    mom = opt.moments()
    opt2 = Adam([nn.Parameter(w.detach().clone())], lr=0.1)
    opt2.load_moments(mom, opt.state.step)
    assert all(torch.equal(a[0], b[0]) and torch.equal(a[1], b[1]) for a, b in zip(mom, opt2.moments()))


def test_precision_switch():
    try:
        assert set_precision(64) == torch.float64
        assert torch.zeros(1).dtype == torch.float64
    finally:
        set_precision(32)
    with pytest.raises(ValueError):
        set_precision(16)


@pytest.mark.parametrize("name", sorted(OPS))
def test_registered_op_gradients(name):
    res = check_op(name, OPS[name])
    assert res.passed, (name, res.max_rel_error, res.worst)


def test_corrupted_op_is_caught():
    class Wrong(torch.autograd.Function):
        @staticmethod
        def forward(ctx, x):
            ctx.save_for_backward(x)
            return x ** 2

        @staticmethod
        def backward(ctx, g):
            (x,) = ctx.saved_tensors
            return g * 3 * x

    res = check_ops({"bad_square": OpCase(Wrong.apply, [(3,)])})
    assert not res[0].passed and res[0].name == "bad_square"


def test_five_point_stencil():
    x = torch.tensor([0.7, -1.3], dtype=torch.float64, requires_grad=True)
    res = check_gradients(lambda: torch.sin(x).sum() * 40, {"x": x}, h=1e-3, order=4)
    assert res.max_rel_error < 1e-9
    with pytest.raises(ValueError):
        check_gradients(lambda: x.sum(), {"x": x}, order=3)
