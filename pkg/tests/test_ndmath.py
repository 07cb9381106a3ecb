import math

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st
from hypothesis.extra.numpy import arrays

from adapam import ndmath as nm
from adapam.errors import ConfigError, NumericError, ShapeError
from conftest import fd_coordinate_errors


def naive_forward(params, sizes, x):
    h = list(x)
    n = len(sizes) - 1
    for k in range(n):
        W, b = params[f"W{k}"], params[f"b{k}"]
        z = [sum(h[i] * W[i][j] for i in range(sizes[k])) + b[j] for j in range(sizes[k + 1])]
        h = z if k == n - 1 else [math.tanh(v) for v in z]
    return np.array(h)


class TestInit:
    def test_bounds_and_shapes(self):
        p = nm.mlp_init(nm.MlpSpec((2, 3)), 7)
        assert p["W0"].shape == (2, 3) and p["b0"].shape == (3,)
        assert np.all(np.abs(p["W0"]) <= math.sqrt(6 / 5))
        assert np.all(p["b0"] == 0)

    def test_deterministic(self):
        spec = nm.MlpSpec((4, 8, 5))
        assert nm.mlp_init(spec, 1).identical(nm.mlp_init(spec, 1))
        assert not nm.mlp_init(spec, 1).identical(nm.mlp_init(spec, 2))

    def test_entry_names(self):
        p = nm.mlp_init(nm.MlpSpec((4, 8, 5)), 1)
        assert p.shapes == {"W0": (4, 8), "b0": (8,), "W1": (8, 5), "b1": (5,)}

    @pytest.mark.parametrize("sizes", [(4, 0, 2), (3,), (), (2, -1)])
    def test_bad_spec(self, sizes):
        with pytest.raises(ConfigError):
            nm.MlpSpec(sizes)

    def test_unknown_activation(self):
        with pytest.raises(ConfigError):
            nm.MlpSpec((2, 2), "sigmoid")

    def test_params_are_read_only(self):
        p = nm.mlp_init(nm.MlpSpec((2, 3)), 0)
        with pytest.raises(ValueError):
            p["W0"][0, 0] = 1.0


class TestForward:
    def test_zero_net(self):
        spec = nm.MlpSpec((3, 4, 2))
        p = nm.mlp_init(spec, 0).zeros_like()
        assert np.array_equal(nm.mlp_forward(p, spec, [1.0, -2.0, 3.0]), np.zeros(2))

    def test_identity(self):
        spec = nm.MlpSpec((2, 2))
        p = nm.ParameterSet({"W0": np.eye(2), "b0": np.zeros(2)})
        assert np.array_equal(nm.mlp_forward(p, spec, [1.0, 2.0]), [1.0, 2.0])

    def test_matches_naive_oracle(self, rng):
        sizes = (6, 9, 7, 4)
        spec = nm.MlpSpec(sizes)
        p = nm.mlp_init(spec, 11)
        p = p.map(lambda a: a + rng.normal(scale=0.1, size=a.shape))
        x = rng.normal(size=6)
        assert np.max(np.abs(nm.mlp_forward(p, spec, x) - naive_forward(p, sizes, x))) < 1e-12

    def test_batch_matches_rows(self, small_net, rng):
        x = rng.normal(size=(10, 5))
        batch = small_net(x)
        for i in range(10):
            assert np.allclose(batch[i], small_net(x[i]), rtol=0, atol=1e-12)

    @pytest.mark.parametrize("shape", [(4,), (6,), (3, 4), (2, 2, 5)])
    def test_shape_error(self, small_net, shape):
        with pytest.raises(ShapeError):
            small_net(np.zeros(shape))


class TestSoftmax:
    def test_uniform(self):
        assert np.allclose(nm.softmax([0.0, 0.0, 0.0]), [1 / 3] * 3, atol=1e-15)

    def test_overflow_safe(self):
        p = nm.softmax([1000.0, 0.0])
        assert np.all(np.isfinite(p)) and p[0] == pytest.approx(1.0) and p[1] < 1e-300 + 1e-12

    def test_reference_values(self):
        p = nm.softmax([1.0, 2.0, 3.0])
        e = np.exp([1.0, 2.0, 3.0])
        assert np.allclose(p, e / e.sum(), atol=1e-15)
        assert np.allclose(p, [0.0900, 0.2447, 0.6652], atol=1e-4)

    def test_empty(self):
        with pytest.raises(ShapeError):
            nm.softmax([])
        with pytest.raises(ShapeError):
            nm.log_softmax(np.zeros(0))

    @given(arrays(np.float64, st.integers(1, 12), elements=st.floats(-50, 50)))
    def test_probability_vector(self, z):
        p = nm.softmax(z)
        assert np.all(p > 0) and np.all(p <= 1)
        assert abs(p.sum() - 1.0) <= 1e-12

    @given(arrays(np.float64, st.integers(1, 8), elements=st.floats(-30, 30)))
    def test_log_softmax_consistent(self, z):
        assert np.allclose(np.exp(nm.log_softmax(z)), nm.softmax(z), rtol=1e-12, atol=1e-300)


class TestArgmax:
    def test_first_of_ties(self):
        assert nm.argmax_first([0.5, 0.5]) == 0
        assert nm.argmax_first([0.1, 0.9, 0.3]) == 1
        assert nm.argmax_first([0.0, 2.0, 2.0]) == 1


def _heads(rng, b, k, x):
    return {
        "cross_entropy": nm.CrossEntropy(rng.integers(0, k, b)),
        "weighted_ce": nm.CrossEntropy(rng.integers(0, k, b), rng.uniform(0.1, 1, b)),
        "mse": nm.MeanSquared(rng.normal(size=(b, k))),
        "critic_td": nm.TableSquared(rng.integers(0, k, b), rng.normal(size=b)),
        "weighted_log_prob": nm.WeightedLogProb(rng.integers(0, k, b), rng.normal(size=b), 0.3),
        "cw": nm.CarliniWagner(x + rng.uniform(-0.2, 0.2, x.shape), rng.integers(0, k, b), 3.0, 0.1),
    }


class TestGrad:
    def test_ce_hand_value(self):
        h = nm.CrossEntropy([0])
        loss, d, _ = h.evaluate(np.zeros((1, 2)), np.zeros((1, 1)))
        assert np.allclose(d, [[-0.5, 0.5]]) and loss == pytest.approx(math.log(2))

    def test_mse_zero_at_minimum(self, small_net, rng):
        x = rng.normal(size=(3, 5))
        g = nm.grad(small_net.params, small_net.spec, x, nm.MeanSquared(small_net(x)), want_input=True)
        assert g.loss == 0.0
        assert all(np.all(v == 0) for v in g.d_params.values())
        assert np.all(g.d_input == 0)

    def test_critic_residual_hand_value(self):
        loss, _, _ = nm.TableSquared([0], [0.0]).evaluate(np.array([[2.0, 5.0]]), np.zeros((1, 1)))
        assert loss == 2.0

    @pytest.mark.parametrize("name", ["cross_entropy", "weighted_ce", "mse", "critic_td",
                                      "weighted_log_prob", "cw"])
    def test_finite_differences(self, name, rng):
        net = nm.Network.init((5, 7, 4), seed=3)
        x = rng.uniform(-1, 1, size=(6, 5))
        head = _heads(rng, 6, 4, x)[name]
        g = nm.grad(net.params, net.spec, x, head, want_input=True)
        flat = net.params.flat()
        f = lambda v: nm.loss_value(net.params.from_flat(v), net.spec, x, head)  # noqa: E731
        errs = fd_coordinate_errors(f, g.d_params.flat(), flat, 40, rng)
        assert errs.max() < 1e-4
        fx = lambda v: nm.loss_value(net.params, net.spec, v, head)  # noqa: E731
        errs = fd_coordinate_errors(fx, g.d_input, x, 30, rng)
        assert errs.max() < 1e-4

    def test_bce_finite_differences(self, rng):
        net = nm.Network.init((4, 6, 1), seed=5)
        x = rng.normal(size=(8, 4))
        head = nm.SigmoidCrossEntropy(rng.integers(0, 2, 8), rng.uniform(0.1, 1, 8))
        g = nm.grad(net.params, net.spec, x, head)
        f = lambda v: nm.loss_value(net.params.from_flat(v), net.spec, x, head)  # noqa: E731
        assert fd_coordinate_errors(f, g.d_params.flat(), net.params.flat(), 40, rng).max() < 1e-4

    def test_grad_names_and_shapes(self, small_net, rng):
        g = nm.grad(small_net.params, small_net.spec, rng.normal(size=(2, 5)), nm.CrossEntropy([0, 1]))
        assert g.d_params.shapes == small_net.params.shapes
        assert g.d_input is None

    def test_single_input_gradient_shape(self, small_net, rng):
        g = nm.grad(small_net.params, small_net.spec, rng.normal(size=5), nm.CrossEntropy([2]),
                    want_input=True)
        assert g.d_input.shape == (5,)

    def test_unregistered_head(self, small_net):
        class Custom(nm.Head):
            def evaluate(self, logits, x):
                return 0.0, np.zeros_like(logits), None

        with pytest.raises(ConfigError):
            nm.grad(small_net.params, small_net.spec, np.zeros(5), Custom())
        with pytest.raises(ConfigError):
            nm.make_head("hinge")

    def test_make_head(self):
        assert isinstance(nm.make_head("cross_entropy", targets=[0]), nm.CrossEntropy)

    def test_non_finite_loss(self, small_net):
        with pytest.raises(NumericError):
            nm.grad(small_net.params, small_net.spec, np.zeros(5), nm.MeanSquared(np.inf))

    def test_margin(self):
        f, runner = nm.margin(np.array([[1.0, 3.0, 2.0]]), [1])
        assert f[0] == 0.0
        f, runner = nm.margin(np.array([[1.0, 3.0, 2.0]]), [0], kappa=0.5)
        assert f[0] == pytest.approx(2.5) and runner[0] == 1


class TestAdam:
    def test_zero_gradient(self, small_net):
        p = small_net.params
        p2, _ = nm.adam_step(p, p.zeros_like(), nm.adam_init(p), 0.1)
        assert p2.identical(p)

    def test_first_step_is_sign(self, small_net, rng):
        p = small_net.params
        g = p.map(lambda a: rng.normal(size=a.shape))
        p2, st = nm.adam_step(p, g, nm.adam_init(p), 1e-3)
        move = p2.flat() - p.flat()
        assert np.allclose(move, -1e-3 * np.sign(g.flat()), rtol=1e-4, atol=1e-9)
        assert st.t == 1

    def test_deterministic(self, small_net, rng):
        p = small_net.params
        g = p.map(lambda a: rng.normal(size=a.shape))
        s = nm.adam_init(p)
        a, _ = nm.adam_step(p, g, s, 0.01)
        b, _ = nm.adam_step(p, g, s, 0.01)
        assert a.identical(b)

    def test_shape_mismatch(self, small_net):
        other = nm.Network.init((5, 3, 4), seed=0).params
        with pytest.raises(ShapeError):
            nm.adam_step(small_net.params, other, nm.adam_init(small_net.params), 0.1)

    def test_descends(self, small_net, rng):
        x = rng.normal(size=(16, 5))
        head = nm.CrossEntropy(rng.integers(0, 4, 16))
        p, st = small_net.params, nm.adam_init(small_net.params)
        before = nm.loss_value(p, small_net.spec, x, head)
        for _ in range(50):
            g = nm.grad(p, small_net.spec, x, head)
            p, st = nm.adam_step(p, g.d_params, st, 0.01)
        assert nm.loss_value(p, small_net.spec, x, head) < before


class TestPolyak:
    def _pair(self):
        t = nm.ParameterSet({"w": np.zeros((2, 2))})
        o = nm.ParameterSet({"w": np.ones((2, 2))})
        return t, o

    def test_default_rate(self):
        t, o = self._pair()
        assert np.all(nm.polyak_update(t, o, 0.005)["w"] == 0.005)

    def test_extremes(self):
        t, o = self._pair()
        assert nm.polyak_update(t, o, 0.0).identical(t)
        assert nm.polyak_update(t, o, 1.0).identical(o)

    def test_errors(self):
        t, o = self._pair()
        with pytest.raises(ConfigError):
            nm.polyak_update(t, o, 1.5)
        with pytest.raises(ShapeError):
            nm.polyak_update(t, nm.ParameterSet({"w": np.ones(3)}), 0.5)

    @settings(max_examples=50)
    @given(st.floats(0, 1), st.floats(-5, 5), st.floats(-5, 5))
    def test_convex_combination(self, mu, a, b):
        t = nm.ParameterSet({"w": np.full(3, a)})
        o = nm.ParameterSet({"w": np.full(3, b)})
        out = nm.polyak_update(t, o, mu)["w"]
        assert np.all(out >= min(a, b) - 1e-12) and np.all(out <= max(a, b) + 1e-12)


class TestCheckpoint:
    def test_round_trip_bit_exact(self, tmp_path, small_net):
        path = nm.save_network(tmp_path / "n.ckpt", small_net, {"note": "x"})
        net, meta = nm.load_network(path)
        assert net.params.identical(small_net.params) and net.spec == small_net.spec
        assert meta["note"] == "x"
        nm.save_network(tmp_path / "m.ckpt", net, {"note": "x"})
        assert (tmp_path / "m.ckpt").read_bytes() == path.read_bytes()

    def test_manifest_line(self, tmp_path, small_net):
        path = nm.save_checkpoint(tmp_path / "c.ckpt", small_net.params)
        first = path.read_bytes().split(b"\n", 1)[0]
        assert b'"format":"adapam-ckpt-1"' in first

    def test_truncated(self, tmp_path, small_net):
        path = nm.save_checkpoint(tmp_path / "c.ckpt", small_net.params)
        path.write_bytes(path.read_bytes()[:-8])
        with pytest.raises(ShapeError):
            nm.load_checkpoint(path)

    def test_trailing_bytes(self, tmp_path, small_net):
        path = nm.save_checkpoint(tmp_path / "c.ckpt", small_net.params)
        path.write_bytes(path.read_bytes() + b"\0" * 8)
        with pytest.raises(ShapeError):
            nm.load_checkpoint(path)

    def test_wrong_format(self, tmp_path):
        (tmp_path / "c.ckpt").write_bytes(b'{"format":"other"}\n')
        with pytest.raises(ConfigError):
            nm.load_checkpoint(tmp_path / "c.ckpt")


class TestParameterSet:
    def test_flat_round_trip(self, small_net):
        p = small_net.params
        assert p.from_flat(p.flat()).identical(p)
        with pytest.raises(ShapeError):
            p.from_flat(np.zeros(p.size + 1))

    def test_clip_by_global_norm(self):
        g = nm.ParameterSet({"a": np.array([3.0, 4.0])})
        assert np.allclose(nm.clip_by_global_norm(g, 1.0)["a"], [0.6, 0.8])
        assert nm.clip_by_global_norm(g, 10.0) is g
