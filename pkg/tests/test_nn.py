import numpy as np
import pytest

from chronocon.nn import MLP, AdamW, ReduceLROnPlateau, dumps_arrays, load_arrays, save_arrays
from oracles import central_diff, rel_err


@pytest.mark.parametrize("act", ["relu", "tanh"])
def test_mlp_backward_matches_finite_differences(act):
    rng = np.random.default_rng(0)
    net = MLP((5, 7, 6, 3), act, rng)
    x = rng.standard_normal((4, 5))
    w = rng.standard_normal((4, 3))

    def f_params(p):
        net.params[...] = p
        return float(np.sum(net(x) * w))

    p0 = net.params.copy()
    out, cache = net.forward(x)
    g, gx = net.backward(cache, w)
    fd = central_diff(f_params, p0)
    net.params[...] = p0
    assert rel_err(g, fd) < 1e-6
    assert rel_err(gx, central_diff(lambda X: float(np.sum(net(X) * w)), x)) < 1e-6


def test_views_share_memory_and_copy_is_deep():
    net = MLP((2, 3, 1), rng=np.random.default_rng(1))
    net.params[0] = 42.0
    assert net.weights[0][0, 0] == 42.0
    other = net.copy()
    other.params[0] = 0.0
    assert net.params[0] == 42.0
    with pytest.raises(ValueError):
        MLP((2, 3), "sigmoid")


def test_adamw_first_step_by_hand():
    p = np.array([1.0, -2.0])
    g = np.array([0.5, -0.25])
    opt = AdamW(2, lr=0.1, weight_decay=0.01)
    opt.step(p, g)
    # bias-corrected first step moves each coordinate by lr * sign(g) after decay
    expect = np.array([1.0, -2.0]) * (1 - 0.1 * 0.01) - 0.1 * g / (np.abs(g) + 1e-8)
    assert np.allclose(p, expect, rtol=0, atol=1e-12)
    frozen = np.array([1.0])
    AdamW(1, lr=0.0, weight_decay=1.0).step(frozen, np.array([3.0]))
    assert frozen[0] == 1.0


def test_adamw_minimizes_quadratic():
    p = np.array([5.0, -3.0])
    opt = AdamW(2, lr=0.1)
    for _ in range(2000):
        opt.step(p, 2 * p)
    assert np.all(np.abs(p) < 1e-3)


def test_plateau_scheduler():
    opt = AdamW(1, lr=1.0)
    sched = ReduceLROnPlateau([opt], factor=0.5, patience=2)
    hits = [sched.step(m) for m in (1.0, 0.9, 0.9, 0.9, 0.9, 0.8)]
    assert hits == [False, False, False, False, True, False]
    assert opt.lr == 0.5


def test_array_container_roundtrip(tmp_path):
    rng = np.random.default_rng(2)
    arrays = {"a": rng.standard_normal((3, 2)), "b": np.array([np.pi, -0.0, 1e-310])}
    save_arrays(tmp_path / "m.json", arrays, {"x": 1})
    back, meta = load_arrays(tmp_path / "m.json")
    assert meta == {"x": 1}
    for k in arrays:
        assert np.array_equal(back[k], arrays[k]) and back[k].shape == arrays[k].shape
    assert dumps_arrays(arrays, {"x": 1}) == dumps_arrays(dict(reversed(list(arrays.items()))), {"x": 1})
    (tmp_path / "bad.json").write_text('{"format": "other"}')
    with pytest.raises(ValueError):
        load_arrays(tmp_path / "bad.json")
