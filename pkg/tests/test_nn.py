from __future__ import annotations

import numpy as np
import pytest

from stitchrl.nn import Adam, Mlp, MlpSpec, NumericError, gradient_check, load_checkpoint, save_checkpoint

# every architecture built elsewhere in the package (state dim 8, 16 actions)
ARCHS = [
    MlpSpec((8, 64, 64, 16), "relu"),      # Q network / behaviour cloning
    MlpSpec((16, 64, 64, 16), "relu"),     # inverse dynamics
    MlpSpec((24, 64, 64, 1), "relu"),      # reward model
    MlpSpec((33, 128, 128, 16), "tanh"),   # bridge net
    MlpSpec((3, 5), "tanh"),
]


def test_spec_validation():
    with pytest.raises(ValueError):
        MlpSpec((3,))
    with pytest.raises(ValueError):
        MlpSpec((3, 0, 2))
    with pytest.raises(ValueError):
        MlpSpec((3, 2), "gelu")


def test_zero_weights_give_zero_output():
    net = Mlp(MlpSpec((4, 6, 2)), rng=0)
    for p in net.params:
        p[...] = 0
    assert np.array_equal(net(np.ones((3, 4))), np.zeros((3, 2)))


def test_linear_one_by_one():
    net = Mlp(MlpSpec((1, 1)), rng=0)
    net.params[0][...] = 2.5
    net.params[1][...] = -1.0
    out, cache = net.forward(np.array([[3.0]]), keep=True)
    assert out[0, 0] == 2.5 * 3.0 - 1.0
    grads, _ = net.backward(cache, np.ones((1, 1)))
    assert grads[0][0, 0] == 3.0 and grads[1][0] == 1.0


def test_identical_rows_identical_outputs():
    net = Mlp(MlpSpec((5, 7, 3)), rng=1)
    x = np.tile(np.random.default_rng(2).normal(size=5), (2, 1))
    out = net(x)
    assert np.array_equal(out[0], out[1])


def test_shape_mismatch():
    net = Mlp(MlpSpec((5, 3)), rng=1)
    with pytest.raises(ValueError):
        net(np.zeros((2, 4)))
    _, cache = net.forward(np.zeros((2, 5)), keep=True)
    with pytest.raises(ValueError):
        net.backward(cache, np.zeros((3, 3)))


def test_zero_upstream_gives_zero_grads():
    net = Mlp(MlpSpec((5, 8, 3)), rng=1)
    _, cache = net.forward(np.ones((4, 5)), keep=True)
    grads, _ = net.backward(cache, np.zeros((4, 3)))
    assert all(not g.any() for g in grads)


@pytest.mark.parametrize("spec", ARCHS, ids=lambda s: f"{s.widths}-{s.activation}")
def test_finite_difference_gradients(spec):
    rng = np.random.default_rng(3)
    net = Mlp(spec, rng)
    x = rng.normal(size=(9, spec.n_in))
    proj = rng.normal(size=(9, spec.n_out))
    out, cache = net.forward(x, keep=True)
    grads, _ = net.backward(cache, proj)
    err = gradient_check(lambda: float(np.sum(net(x) * proj)), net.params, grads, 64, 1e-5, rng)
    assert err < 1e-4


def test_input_gradient():
    rng = np.random.default_rng(4)
    net = Mlp(MlpSpec((3, 6, 2), "tanh"), rng)
    x = rng.normal(size=(1, 3))
    proj = rng.normal(size=(1, 2))
    _, cache = net.forward(x, keep=True)
    _, gx = net.backward(cache, proj)
    h = 1e-6
    for j in range(3):
        e = np.zeros_like(x)
        e[0, j] = h
        num = (np.sum(net(x + e) * proj) - np.sum(net(x - e) * proj)) / (2 * h)
        assert abs(num - gx[0, j]) < 1e-7


def test_adam_first_step():
    p = np.array([0.7])
    opt = Adam([p], lr=0.01)
    opt.step([np.array([0.3])])
    assert abs((p[0] - 0.7) - (-0.01 * 0.3 / (0.3 + 1e-8))) < 1e-9
    assert opt.step_count == 1


def test_adam_zero_gradient_and_descent():
    p = np.array([1.0, -2.0])
    opt = Adam([p], lr=0.1)
    opt.step([np.zeros(2)])
    assert np.array_equal(p, [1.0, -2.0])
    for _ in range(50):
        opt.step([np.array([1.0, -1.0])])
    assert p[0] < 1.0 and p[1] > -2.0


def test_adam_rejects_non_finite_and_names_block():
    opt = Adam([np.zeros(2), np.zeros(3)])
    with pytest.raises(NumericError, match="block 1"):
        opt.step([np.zeros(2), np.array([0.0, np.nan, 0.0])])


def test_non_finite_output_raises():
    net = Mlp(MlpSpec((2, 2)), rng=0)
    with pytest.raises(NumericError):
        net(np.array([[np.inf, 0.0]]))


def test_checkpoint_round_trip(tmp_path):
    a = Mlp(MlpSpec((4, 5, 2), "tanh"), rng=0)
    b = Mlp(MlpSpec((3, 1)), rng=1)
    save_checkpoint(tmp_path / "c.npz", {"a": a, "b": b}, {"seed": 3})
    nets, meta = load_checkpoint(tmp_path / "c.npz")
    assert meta == {"seed": 3}
    assert nets["a"].spec == a.spec
    for x, y in zip(nets["a"].params + nets["b"].params, a.params + b.params):
        assert np.array_equal(x, y)


def test_init_is_seeded_and_bounded():
    a, b = Mlp(MlpSpec((10, 20, 5)), rng=5), Mlp(MlpSpec((10, 20, 5)), rng=5)
    assert np.array_equal(a.flat(), b.flat())
    assert np.abs(a.params[0]).max() <= np.sqrt(6 / 30)
