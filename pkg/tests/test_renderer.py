import numpy as np
import pytest

from conftest import rel_err, unit_dirs
from hardnerf.field import FieldOutput, activate, backward, forward_inference, forward_training
from hardnerf.renderer import backward_to_preactivations, composite, composite_samples, pixel_loss
from hardnerf.sampler import SampleBatch

BG = np.array([0.5, 0.5, 0.5])


def make_batch(counts, deltas, rng=None):
    rng = rng or np.random.default_rng(0)
    counts = np.asarray(counts)
    n = int(counts.sum())
    offsets = np.concatenate([[0], np.cumsum(counts)])
    ray_ids = np.repeat(np.arange(len(counts)), counts)
    t = np.concatenate([np.cumsum(np.full(c, 0.1)) for c in counts]) if n else np.zeros(0)
    return SampleBatch(rng.random((n, 3)), np.asarray(deltas, float), t, offsets, ray_ids, unit_dirs(n, rng))


def outputs_from(sigma_pre, color_pre):
    sigma_pre, color_pre = np.asarray(sigma_pre, float), np.asarray(color_pre, float)
    s, c = activate(sigma_pre, color_pre)
    return FieldOutput(sigma_pre, color_pre, s, c)


def loss_of(batch, sigma_pre, color_pre, gt):
    out = outputs_from(sigma_pre, color_pre)
    return pixel_loss(composite(batch, out, BG).color, gt)[0]


class TestComposite:
    def test_single_sample_closed_form(self):
        r = composite_samples([np.log(2)], [[1.0, 0, 0]], [1.0], [0, 1], BG)
        assert r.alpha[0] == pytest.approx(0.5, abs=1e-15) and r.weights[0] == pytest.approx(0.5, abs=1e-15)
        np.testing.assert_allclose(r.color[0], [0.5 + 0.25, 0.25, 0.25], atol=1e-15)

    def test_two_half_alphas(self):
        r = composite_samples([np.log(2)] * 2, np.zeros((2, 3)), [1.0, 1.0], [0, 2], BG)
        np.testing.assert_allclose(r.weights, [0.5, 0.25], atol=1e-15)
        assert r.opacity[0] == pytest.approx(0.75, abs=1e-15)

    def test_zero_density_is_background(self):
        r = composite_samples(np.zeros(5), np.random.default_rng(0).random((5, 3)), np.full(5, 0.1), [0, 2, 5], BG)
        assert not r.weights.any()
        np.testing.assert_array_equal(r.color, [BG, BG])

    def test_empty_ray(self):
        r = composite_samples(np.ones(2), np.ones((2, 3)), np.ones(2), [0, 0, 2], BG)
        np.testing.assert_array_equal(r.color[0], BG)

    def test_misaligned(self):
        with pytest.raises(ValueError):
            composite_samples(np.ones(3), np.ones((2, 3)), np.ones(3), [0, 3], BG)

    def test_invariants_random(self):
        rng = np.random.default_rng(1)
        counts = rng.integers(0, 40, size=50)
        n = counts.sum()
        offsets = np.concatenate([[0], np.cumsum(counts)])
        r = composite_samples(rng.exponential(5, n), rng.random((n, 3)), rng.uniform(0.01, 0.1, n), offsets, BG)
        assert np.all((r.alpha >= 0) & (r.alpha <= 1))
        for k in range(50):
            s, e = offsets[k], offsets[k + 1]
            T, a = r.transmittance[s:e], r.alpha[s:e]
            if e > s:
                assert T[0] == 1.0
                assert np.all(np.diff(T) <= 0)
                np.testing.assert_allclose(T[1:], T[:-1] * (1 - a[:-1]), atol=1e-6)
            assert 0 <= r.opacity[k] <= 1
            final = T[-1] * (1 - a[-1]) if e > s else 1.0
            assert abs(r.weights[s:e].sum() + final - 1) < 1e-5
        assert np.all(r.color >= 0) and np.all(r.color <= 1 + 1e-12)

    def test_matches_sequential_loop(self):
        rng = np.random.default_rng(2)
        sig, col, dl = rng.exponential(3, 12), rng.random((12, 3)), rng.uniform(0.05, 0.2, 12)
        r = composite_samples(sig, col, dl, [0, 12], BG)
        T, C = 1.0, np.zeros(3)
        for i in range(12):
            a = 1 - np.exp(-sig[i] * dl[i])
            C += T * a * col[i]
            T *= 1 - a
        np.testing.assert_allclose(r.color[0], C + T * BG, rtol=1e-12)

    def test_early_termination_small_effect(self):
        rng = np.random.default_rng(3)
        offsets = np.arange(0, 201 * 20, 20)
        n = offsets[-1]
        args = (rng.exponential(20, n), rng.random((n, 3)), np.full(n, 0.05), offsets, BG)
        full, cut = composite_samples(*args), composite_samples(*args, early_termination=1e-4)
        assert np.abs(full.color - cut.color).max() < 1e-3

    def test_dtype_preserved(self):
        r = composite_samples(np.ones(2, np.float32), np.ones((2, 3), np.float32), np.ones(2, np.float32), [0, 2], BG)
        assert r.color.dtype == np.float32 and r.weights.dtype == np.float32


class TestPixelLoss:
    def test_zero(self):
        x = np.random.default_rng(0).random((5, 3))
        assert pixel_loss(x, x)[0] == 0.0

    def test_single_ray_error(self):
        gt = np.zeros((8, 3))
        pred = gt.copy()
        pred[3, 0] = 0.1
        L, per = pixel_loss(pred, gt)
        assert per[3] == pytest.approx(0.01) and L == pytest.approx(0.01 / 8)

    def test_matches_double_loop(self):
        rng = np.random.default_rng(1)
        a, b = rng.random((30, 3)), rng.random((30, 3))
        total = 0.0
        per = []
        for i in range(30):
            s = 0.0
            for k in range(3):
                s += (a[i, k] - b[i, k]) ** 2
            per.append(s)
            total += s
        L, got = pixel_loss(a, b)
        np.testing.assert_allclose(got, per, rtol=1e-14)
        assert L == pytest.approx(total / 30, rel=1e-14)


class TestBackward:
    def test_zero_loss_ray_exact_zero(self):
        rng = np.random.default_rng(0)
        batch = make_batch([4, 3], np.full(7, 0.1), rng)
        out = outputs_from(rng.normal(size=7), rng.normal(size=(7, 3)))
        r = composite(batch, out, BG)
        gt = r.color.astype(float).copy()
        gt[1] += 0.1
        cache = backward_to_preactivations(batch, out, r, gt)
        assert not cache.sigma_pre[:4].any() and not cache.color_pre[:4].any()
        assert cache.sigma_pre[4:].any()

    def test_occluded_sample_no_colour_gradient(self):
        batch = make_batch([3], [0.1, 0.1, 0.1])
        out = outputs_from([10.0, 0.0, 1.0], np.zeros((3, 3)))  # first sample opaque: T=0 after it
        r = composite(batch, out, BG)
        assert r.transmittance[1] == 0.0
        cache = backward_to_preactivations(batch, out, r, np.ones((1, 3)))
        assert not cache.color_pre[1:].any()

    @pytest.mark.parametrize("seed", range(4))
    def test_finite_differences_three_samples(self, seed):
        rng = np.random.default_rng(seed)
        batch = make_batch([3], rng.uniform(0.05, 0.3, 3), rng)
        sp, cp = rng.normal(1.0, 1.0, 3), rng.normal(size=(3, 3))
        gt = rng.random((1, 3))
        out = outputs_from(sp, cp)
        cache = backward_to_preactivations(batch, out, composite(batch, out, BG), gt)
        eps = 1e-6
        fd_s = np.array([(loss_of(batch, sp + eps * e, cp, gt) - loss_of(batch, sp - eps * e, cp, gt)) / (2 * eps) for e in np.eye(3)])
        fd_c = np.zeros((3, 3))
        for i in range(3):
            for k in range(3):
                d = np.zeros((3, 3))
                d[i, k] = eps
                fd_c[i, k] = (loss_of(batch, sp, cp + d, gt) - loss_of(batch, sp, cp - d, gt)) / (2 * eps)
        assert rel_err(cache.sigma_pre, fd_s) < 1e-4
        assert rel_err(cache.color_pre, fd_c) < 1e-4

    def test_clamped_density_has_no_gradient(self):
        batch = make_batch([2], [0.01, 0.01])
        out = outputs_from([12.0, 0.0], np.zeros((2, 3)))
        cache = backward_to_preactivations(batch, out, composite(batch, out, BG), np.zeros((1, 3)))
        assert cache.sigma_pre[0] == 0.0

    def test_long_rays_linear_time_formula(self):
        # suffix-scan result against a direct O(n^2) expansion
        rng = np.random.default_rng(5)
        n = 25
        batch = make_batch([n], rng.uniform(0.01, 0.05, n), rng)
        out = outputs_from(rng.normal(2, 1, n), rng.normal(size=(n, 3)))
        r = composite(batch, out, BG)
        gt = rng.random((1, 3))
        cache = backward_to_preactivations(batch, out, r, gt)
        g = 2 * (r.color[0] - gt[0])
        ref = np.zeros(n)
        for i in range(n):
            dC = r.transmittance[i] * (1 - r.alpha[i]) * (out.color[i] - BG)
            for j in range(i + 1, n):
                dC -= r.weights[j] * (out.color[j] - BG)
            ref[i] = g @ dC * batch.deltas[i] * out.sigma[i]
        np.testing.assert_allclose(cache.sigma_pre, ref, rtol=1e-10, atol=1e-14)


def chain_loss(params, batch, gt):
    out = forward_inference(params, batch.positions, batch.view_dirs)
    return pixel_loss(composite(batch, out, BG).color, gt)[0]


def test_full_chain_finite_differences(tiny_params):
    rng = np.random.default_rng(7)
    batch = make_batch([5, 5], rng.uniform(0.05, 0.2, 10), rng)
    gt = rng.random((2, 3))
    out, tape = forward_training(tiny_params, batch.positions, batch.view_dirs)
    cache = backward_to_preactivations(batch, out, composite(batch, out, BG), gt)
    grads = backward(tape, cache.sigma_pre, cache.color_pre)
    eps = 1e-6
    for name, arr in tiny_params.tensors().items():
        fd = np.zeros_like(arr)
        for i in np.ndindex(arr.shape):
            old = arr[i]
            arr[i] = old + eps
            up = chain_loss(tiny_params, batch, gt)
            arr[i] = old - eps
            dn = chain_loss(tiny_params, batch, gt)
            arr[i] = old
            fd[i] = (up - dn) / (2 * eps)
        assert rel_err(grads[name], fd) < 1e-3, name


def test_cached_subset_matches_stopped_gradient_loss(tiny_params):
    """Gradients from cache[S] equal the derivative of the loss in which only
    the samples in S follow the parameters (others frozen at their value)."""
    rng = np.random.default_rng(8)
    batch = make_batch([4, 4], rng.uniform(0.05, 0.2, 8), rng)
    gt = rng.random((2, 3))
    S = np.array([1, 2, 6])
    out0 = forward_inference(tiny_params, batch.positions, batch.view_dirs)
    cache = backward_to_preactivations(batch, out0, composite(batch, out0, BG), gt)
    _, tape = forward_training(tiny_params, batch.positions[S], batch.view_dirs[S])
    grads = backward(tape, cache.sigma_pre[S], cache.color_pre[S])

    def loss_S():
        o = forward_inference(tiny_params, batch.positions[S], batch.view_dirs[S])
        sp, cp = out0.sigma_pre.copy(), out0.color_pre.copy()
        sp[S], cp[S] = o.sigma_pre, o.color_pre
        return loss_of(batch, sp, cp, gt)

    eps = 1e-6
    for name in ("density1.w", "color2.w", "hash"):
        arr = tiny_params.tensors()[name]
        fd = np.zeros_like(arr)
        for i in np.ndindex(arr.shape):
            old = arr[i]
            arr[i] = old + eps
            up = loss_S()
            arr[i] = old - eps
            dn = loss_S()
            arr[i] = old
            fd[i] = (up - dn) / (2 * eps)
        assert rel_err(grads[name], fd) < 1e-4, name
