import math

import numpy as np
import numpy.testing as npt
import pytest
from helpers import fd_logdet, grid_quadrature, randomize_flow

from flowcritic import autodiff as ad
from flowcritic.autodiff import Parameters, Tensor
from flowcritic.flows import AffineCoupling, build_nvp


def _hand_coupling():
    """Single coupling on D=2: dim 0 passes through, dim 1 -> 2*b + 3."""
    params = Parameters()
    layer = AffineCoupling(params, "c", pass_idx=[0], out_idx=[1],
                           hidden_width=4, rng=np.random.default_rng(0), dtype="f64")
    # constant heads: s = ln 2 (via the capped tanh), t = 3
    layer.Ws.data[:] = 0.0
    layer.bs.data[:] = math.atanh(math.log(2.0) / layer.scale_cap)
    layer.Wt.data[:] = 0.0
    layer.bt.data[:] = 3.0
    return layer


def test_build_counts_level1():
    model = build_nvp(1, 2, 8, seed=0)
    assert len(model.layers) == 7
    assert all(len(l.pass_idx) + len(l.out_idx) == 2 for l in model.layers)


def test_build_counts_level3_factoring():
    model = build_nvp(3, 8, 8, seed=0)
    assert len(model.layers) == 19
    # generation order: deepest level first; level 1 (all dims) last
    active = [sorted(np.concatenate([l.pass_idx, l.out_idx]).tolist())
              for l in model.layers]
    assert active[-7:] == [list(range(8))] * 7          # level 1 acts on all dims
    assert all(len(a) == 4 for a in active[6:12])       # level 2: 4 dims left
    assert all(len(a) == 2 for a in active[:6])         # level 3: 2 dims left
    assert active[6] == [1, 3, 5, 7]                    # even positions factored out


def test_build_rejects_too_small_d():
    with pytest.raises(ValueError, match="too small"):
        build_nvp(3, 2, 8, seed=0)


def test_identity_initialization():
    model = build_nvp(2, 4, 8, seed=1)
    z = np.random.default_rng(2).standard_normal((5, 4))
    z1, logdet = model.forward(z)
    npt.assert_array_equal(z1.data, z)
    npt.assert_array_equal(logdet.data, np.zeros(5))
    z0, logdet_inv = model.inverse(z)
    npt.assert_array_equal(z0.data, z)
    npt.assert_array_equal(logdet_inv.data, np.zeros(5))


def test_hand_coupling_forward_inverse():
    layer = _hand_coupling()
    x = np.array([[1.0, 2.0], [-0.5, 0.0]])
    y, logdet = layer.forward(Tensor(x))
    npt.assert_allclose(y.data, [[1.0, 7.0], [-0.5, 3.0]], rtol=1e-12)
    npt.assert_allclose(logdet.data, [math.log(2.0)] * 2, rtol=1e-12)
    back, logdet_inv = layer.inverse(y)
    npt.assert_allclose(back.data, x, rtol=0, atol=1e-14)
    npt.assert_allclose(logdet_inv.data, logdet.data, rtol=1e-12)
    # explicit inverse form: (a, (b-3)/2)
    z, _ = layer.inverse(Tensor(np.array([[1.0, 2.0]])))
    npt.assert_allclose(z.data, [[1.0, -0.5]], rtol=1e-12)


def test_logdet_matches_fd_determinant():
    model = randomize_flow(build_nvp(2, 4, 8, seed=3), seed=4)
    rng = np.random.default_rng(5)
    for _ in range(5):
        z = rng.standard_normal(4)
        _, logdet = model.forward(z[None, :])
        assert abs(float(logdet.data[0]) - fd_logdet(model, z)) < 1e-3


def test_roundtrip_double_and_single():
    for dtype, tol in (("f64", 1e-9), ("f32", 1e-4)):
        model = randomize_flow(build_nvp(3, 8, 16, seed=6, dtype=dtype), seed=7, scale=0.1)
        x = np.random.default_rng(8).standard_normal((32, 8)).astype(model.dtype)
        z0, ld_inv = model.inverse(x)
        back, ld_fwd = model.forward(z0)
        assert np.abs(back.data - x).max() < tol
        # the inverse reports the forward-direction log-det at the same point
        assert np.abs(ld_inv.data - ld_fwd.data).max() < (1e-9 if dtype == "f64" else 1e-3)


def test_logdet_additivity_exact():
    model = randomize_flow(build_nvp(2, 4, 8, seed=9), seed=10)
    x = Tensor(np.random.default_rng(11).standard_normal((3, 4)))
    total = None
    for layer in model.layers:
        x, ld = layer.forward(x)
        total = ld if total is None else total + ld
    _, logdet = model.forward(np.asarray(
        np.random.default_rng(11).standard_normal((3, 4))))
    npt.assert_array_equal(logdet.data, total.data)


def test_log_prob_identity_at_origin():
    model = build_nvp(1, 2, 8, seed=12)
    lp = model.log_prob(np.zeros((1, 2)))
    npt.assert_allclose(lp.data, [-math.log(2 * math.pi)], rtol=1e-12)


def test_eq1_consistency():
    # log_prob(forward(z0)) == prior(z0) - logdet within 1e-9 (double)
    model = randomize_flow(build_nvp(3, 8, 16, seed=13), seed=14, scale=0.1)
    z0 = np.random.default_rng(15).standard_normal((16, 8))
    z1, logdet = model.forward(z0)
    prior = -0.5 * (z0 ** 2).sum(axis=1) - 0.5 * 8 * math.log(2 * math.pi)
    npt.assert_allclose(model.log_prob(z1.data).data, prior - logdet.data,
                        rtol=0, atol=1e-9)


def test_mask_coverage():
    for levels, d in ((1, 2), (2, 4), (3, 8)):
        counts = build_nvp(levels, d, 8, seed=16).mask_coverage()
        assert counts.min() >= 1


def test_quadrature_normalization_identity_and_perturbed():
    model = build_nvp(1, 2, 8, seed=17)
    assert 0.95 <= grid_quadrature(model, cells=200) <= 1.05
    randomize_flow(model, seed=18, scale=0.1)
    assert 0.95 <= grid_quadrature(model, cells=200) <= 1.05


def test_sample_determinism_and_prior_passthrough():
    model = build_nvp(1, 2, 8, seed=19)
    x1, lp1 = model.sample(10_000, seed=20)
    x2, lp2 = model.sample(10_000, seed=20)
    npt.assert_array_equal(x1, x2)
    npt.assert_array_equal(lp1, lp2)
    assert np.all((x1.var(axis=0) > 0.9) & (x1.var(axis=0) < 1.1))


def test_sample_logprob_self_consistency():
    model = randomize_flow(build_nvp(2, 4, 8, seed=21), seed=22)
    x, lp = model.sample(64, seed=23)
    lp2 = model.log_prob(x).data
    npt.assert_allclose(lp, lp2, rtol=1e-6)


def test_partial_resample_identity_model():
    model = build_nvp(1, 4, 8, seed=24)
    x = np.random.default_rng(25).standard_normal((6, 4))
    out = model.partial_resample(x, "first", seed=26)
    npt.assert_array_equal(out[:, 2:], x[:, 2:])     # untouched half identical
    assert np.all(out[:, :2] != x[:, :2])            # resampled half all fresh
    out2 = model.partial_resample(x, "second", seed=26)
    npt.assert_array_equal(out2[:, :2], x[:, :2])


def test_resample_of_nothing_reconstructs_exactly():
    # degenerate half of size zero: inversion followed by regeneration
    model = randomize_flow(build_nvp(2, 4, 8, seed=27), seed=28)
    x = np.random.default_rng(29).standard_normal((5, 4))
    with ad.no_grad():
        z0, _ = model.inverse(x)
        back, _ = model.forward(z0)
    npt.assert_allclose(back.data, x, rtol=0, atol=1e-11)


def test_partial_resample_matches_fresh_samples_distribution():
    # on the model's own samples, a partially resampled latent is still prior
    # distributed, so mean log-density should match fresh samples (Welch t)
    from helpers import welch_t
    model = randomize_flow(build_nvp(2, 4, 8, seed=40), seed=41, scale=0.1)
    x, _ = model.sample(512, seed=42)
    for half in ("first", "second"):
        recon = model.partial_resample(x, half, seed=43)
        lp_recon = model.log_prob(recon).data
        lp_fresh = model.sample(512, seed=44)[1]
        assert abs(welch_t(lp_recon, lp_fresh)) < 2.576  # two-sided alpha=0.01


def test_nonfinite_forward_names_layer():
    model = build_nvp(1, 2, 8, seed=30)
    with pytest.raises(ad.NonFiniteError, match="coupling"):
        model.forward(np.array([[np.inf, 1.0]]))


def test_nll_grad_check_through_flow():
    model = randomize_flow(build_nvp(1, 2, 6, seed=31), seed=32, scale=0.3)
    x = np.random.default_rng(33).standard_normal((4, 2))
    name = "c03.W1"

    def loss(p):
        saved = model.params[name]
        model.params._slots[name] = p
        model.layers[3].W1 = p
        try:
            return -1.0 * model.log_prob(Tensor(x)).mean()
        finally:
            model.params._slots[name] = saved
            model.layers[3].W1 = saved

    err = ad.grad_check(loss, Tensor(model.params[name].data.copy()), eps=1e-5)
    assert err < 1e-4
