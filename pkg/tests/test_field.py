import numpy as np
import pytest

from conftest import TINY_FIELD, rel_err, unit_dirs
from hardnerf.encoding import encode
from hardnerf.field import (
    FieldConfig,
    FieldParams,
    activate,
    backward,
    density_only,
    encode_directions,
    forward_inference,
    forward_training,
)
from hardnerf.ledger import CostLedger


def batch(n, seed=0):
    rng = np.random.default_rng(seed)
    return rng.random((n, 3)), unit_dirs(n, rng)


def probe_loss(params, pts, dirs, u, v):
    out = forward_inference(params, pts, dirs)
    return float(np.sum(u * out.sigma_pre) + np.sum(v * out.color_pre))


def jvp(params, pts, dirs, tangent):
    """Forward-mode derivative of (sigma', c') along a parameter tangent."""
    cfg, w = params.config, params.weights
    feats = encode(params.grid, pts)
    dfeats = encode(params.grid, pts, table=tangent["hash"])

    def lin(name, h, dh):
        return h @ w[f"{name}.w"] + w[f"{name}.b"], dh @ w[f"{name}.w"] + h @ tangent[f"{name}.w"] + tangent[f"{name}.b"]

    z, dz = lin("density0", feats, dfeats)
    h, dh = np.maximum(z, 0), dz * (z > 0)
    d, dd = lin("density1", h, dh)
    enc = encode_directions(dirs, cfg.dir_bands)
    h = np.concatenate([d[:, 1:], enc], axis=1)
    dh = np.concatenate([dd[:, 1:], np.zeros_like(enc)], axis=1)
    names = cfg.color_layer_names
    for name in names[:-1]:
        z, dz = lin(name, h, dh)
        h, dh = np.maximum(z, 0), dz * (z > 0)
    _, dc = lin(names[-1], h, dh)
    return dd[:, 0], dc


class TestActivate:
    def test_values(self):
        s, c = activate(np.array([0.0, 15.0, -3.0]), np.zeros((3, 3)))
        assert s[0] == 1.0 and s[1] == np.exp(10.0) and s[2] == np.exp(-3.0)
        assert np.all(c == 0.5)


class TestForward:
    def test_zero_weights_bias_only(self):
        p = FieldParams.create(TINY_FIELD, dtype=np.float64)
        for k in p.weights:
            p.weights[k][:] = 0
        p.weights["density1.b"][0] = 0.3
        p.weights["color2.b"][:] = [-1.0, 0.0, 2.0]
        out = forward_inference(p, *batch(7))
        assert np.all(out.sigma_pre == 0.3) and np.allclose(out.sigma, np.exp(0.3), rtol=1e-15)
        np.testing.assert_allclose(out.color, 1 / (1 + np.exp(-np.array([[-1.0, 0.0, 2.0]] * 7))), rtol=1e-15)

    def test_modes_bit_identical(self):
        p = FieldParams.create(seed=1)
        pts, dirs = batch(500, 1)
        a = forward_inference(p, pts, dirs)
        b, _ = forward_training(p, pts, dirs)
        for name in ("sigma_pre", "color_pre", "sigma", "color"):
            assert np.array_equal(getattr(a, name), getattr(b, name))

    def test_inference_retains_nothing(self):
        ledger = CostLedger()
        forward_inference(FieldParams.create(), *batch(2**12), ledger=ledger)
        assert ledger.graph_floats == 0 and ledger.peak_graph == 0
        assert ledger.macs["forward_inference"] == 2**12 * FieldConfig().forward_macs_per_sample

    def test_tape_footprint(self):
        cfg = FieldConfig()
        # position + hash features + density hidden + colour input + colour hiddens
        assert cfg.tape_floats_per_sample == 3 + 16 + 64 + (15 + 24) + 64 + 64 == 250
        ledger = CostLedger()
        _, tape = forward_training(FieldParams.create(), *batch(333), ledger=ledger)
        assert tape.float_count == 333 * 250 == ledger.graph_floats

    def test_independent_tapes(self):
        p = FieldParams.create()
        _, t1 = forward_training(p, *batch(5, 1))
        _, t2 = forward_training(p, *batch(5, 2))
        backward(t1, np.ones(5), np.ones((5, 3)))
        assert t1.consumed and not t2.consumed
        assert not np.array_equal(t1.positions, t2.positions)

    def test_outputs_in_range(self):
        out = forward_inference(FieldParams.create(seed=2), *batch(1000, 2))
        assert np.all(out.sigma >= 0) and np.all((out.color >= 0) & (out.color <= 1))
        s, c = activate(out.sigma_pre, out.color_pre)
        assert np.array_equal(s, out.sigma) and np.array_equal(c, out.color)

    def test_non_finite_input(self):
        pts, dirs = batch(3)
        pts[1, 2] = np.nan
        with pytest.raises(ValueError):
            forward_inference(FieldParams.create(), pts, dirs)

    def test_density_only_matches(self):
        p = FieldParams.create(seed=3)
        pts, dirs = batch(100, 3)
        ledger = CostLedger()
        np.testing.assert_array_equal(density_only(p, pts, ledger=ledger, chunk=33), forward_inference(p, pts, dirs).sigma)
        assert ledger.macs["occupancy"] == 100 * FieldConfig().density_macs_per_sample


class TestBackward:
    def test_zero_upstream(self, tiny_params):
        _, tape = forward_training(tiny_params, *batch(4))
        grads = backward(tape, np.zeros(4), np.zeros((4, 3)))
        assert set(grads) == set(tiny_params.tensors())
        assert all(not g.any() for g in grads.values())

    def test_consumed_once(self, tiny_params):
        _, tape = forward_training(tiny_params, *batch(2))
        backward(tape, np.ones(2), np.ones((2, 3)))
        with pytest.raises(RuntimeError):
            backward(tape, np.ones(2), np.ones((2, 3)))

    def test_shape_mismatch(self, tiny_params):
        _, tape = forward_training(tiny_params, *batch(2))
        with pytest.raises(ValueError):
            backward(tape, np.ones(3), np.ones((2, 3)))

    @pytest.mark.parametrize("seed", [0, 1, 2])
    def test_finite_differences_single_sample(self, tiny_params, seed):
        pts, dirs = batch(1, 10 + seed)
        rng = np.random.default_rng(seed)
        u, v = rng.normal(size=1), rng.normal(size=(1, 3))
        _, tape = forward_training(tiny_params, pts, dirs)
        grads = backward(tape, u, v)
        eps = 1e-6
        for name, arr in tiny_params.tensors().items():
            fd = np.zeros_like(arr)
            for i in np.ndindex(arr.shape):
                old = arr[i]
                arr[i] = old + eps
                up = probe_loss(tiny_params, pts, dirs, u, v)
                arr[i] = old - eps
                dn = probe_loss(tiny_params, pts, dirs, u, v)
                arr[i] = old
                fd[i] = (up - dn) / (2 * eps)
            assert rel_err(grads[name], fd) < 1e-4, name

    def test_adjoint_inner_product(self, tiny_params):
        rng = np.random.default_rng(20)
        pts, dirs = batch(16, 20)
        tangent = {k: rng.normal(size=v.shape) for k, v in tiny_params.tensors().items()}
        ds, dc = jvp(tiny_params, pts, dirs, tangent)
        gs, gc = rng.normal(size=16), rng.normal(size=(16, 3))
        _, tape = forward_training(tiny_params, pts, dirs)
        grads = backward(tape, gs, gc)
        lhs = np.sum(ds * gs) + np.sum(dc * gc)
        rhs = sum(np.sum(tangent[k] * grads[k]) for k in grads)
        assert abs(lhs - rhs) <= 1e-10 * max(1.0, abs(lhs))

    def test_masked_equivalence(self, tiny_params):
        rng = np.random.default_rng(30)
        pts, dirs = batch(40, 30)
        gs, gc = rng.normal(size=40), rng.normal(size=(40, 3))
        subset = np.sort(rng.choice(40, size=11, replace=False))
        _, tape = forward_training(tiny_params, pts[subset], dirs[subset])
        sub = backward(tape, gs[subset], gc[subset])
        mask = np.zeros(40, bool)
        mask[subset] = True
        _, tape = forward_training(tiny_params, pts, dirs)
        full = backward(tape, np.where(mask, gs, 0), np.where(mask[:, None], gc, 0))
        assert max(np.abs(sub[k] - full[k]).max() for k in sub) < 1e-9

    def test_single_sample_isolation(self, tiny_params):
        pts, dirs = batch(6, 31)
        gs, gc = np.zeros(6), np.zeros((6, 3))
        gs[2], gc[2] = 0.7, [0.1, -0.3, 0.2]
        _, tape = forward_training(tiny_params, pts[2:3], dirs[2:3])
        one = backward(tape, gs[2:3], gc[2:3])
        _, tape = forward_training(tiny_params, pts, dirs)
        full = backward(tape, gs, gc)
        assert max(np.abs(one[k] - full[k]).max() for k in one) < 1e-12

    def test_ledger_accounting(self):
        p = FieldParams.create()
        ledger = CostLedger()
        _, tape = forward_training(p, *batch(100), ledger=ledger)
        backward(tape, np.ones(100), np.ones((100, 3)), ledger=ledger)
        assert ledger.graph_floats == 0 and ledger.peak_graph == 100 * 250
        assert 1.8 <= ledger.backward_multiplier <= 2.2

    def test_mac_ratio_default_architecture(self):
        cfg = FieldConfig()
        assert cfg.forward_macs_per_sample == 256 + 16 * 64 + 64 * 16 + 39 * 64 + 64 * 64 + 64 * 3
        assert 1.8 <= cfg.backward_macs_per_sample / cfg.forward_macs_per_sample <= 2.2


class TestParams:
    def test_layer_shapes(self):
        p = FieldParams.create()
        dims = FieldConfig().layer_dims()
        assert dims == {"density0": (16, 64), "density1": (64, 16), "color0": (39, 64), "color1": (64, 64), "color2": (64, 3)}
        for name, (i, o) in dims.items():
            assert p.weights[f"{name}.w"].shape == (i, o) and p.weights[f"{name}.b"].shape == (o,)

    def test_checkpoint_round_trip(self, tmp_path):
        p = FieldParams.create(seed=5)
        p.save(tmp_path / "f.bin")
        q = FieldParams.load(tmp_path / "f.bin")
        assert q.config == p.config
        for k, v in p.tensors().items():
            assert np.array_equal(q.tensors()[k], v)

    def test_create_deterministic(self):
        a, b = FieldParams.create(seed=9), FieldParams.create(seed=9)
        assert all(np.array_equal(a.tensors()[k], b.tensors()[k]) for k in a.tensors())
