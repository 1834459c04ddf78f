"""Oracle and property tests for every objective term and the total."""

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from shapeswap import autodiff as ad
from shapeswap import losses
from shapeswap.data import extract_roi
from shapeswap.losses import (LossReport, LossTerms, LossWeights,
                              NonFiniteLossError, adversarial_loss_d,
                              adversarial_loss_g, cycle_consistency_loss,
                              gram_matrix, latent_reconstruction_loss,
                              masked_roi, perceptual_loss,
                              self_reconstruction_loss, symmetry_loss,
                              total_loss)
from shapeswap.perceptual import IdentityFeatureExtractor, RandomConvFeatureExtractor


def t(a):
    return ad.Tensor(np.asarray(a, dtype=np.float64))


# ---- latent reconstruction ----

def test_latent_reconstruction_zero_residual():
    c = np.random.default_rng(0).normal(size=(1, 4, 2, 2))
    s = np.random.default_rng(1).normal(size=(1, 8))
    out = latent_reconstruction_loss(t(c), t(s), None,
                                     lambda _: t(c), lambda _: t(s))
    assert float(out.data) == 0.0


def test_latent_reconstruction_hand_value():
    c = np.zeros((1, 4, 2, 2))
    s = np.zeros((1, 8))
    # content residual all ones, style residual zero -> mean-L1 sum = 1
    out = latent_reconstruction_loss(t(c), t(s), None,
                                     lambda _: t(c + 1.0), lambda _: t(s))
    assert float(out.data) == pytest.approx(1.0)


def test_latent_reconstruction_operand_symmetry():
    rng = np.random.default_rng(2)
    c, c2 = rng.normal(size=(1, 3, 2, 2)), rng.normal(size=(1, 3, 2, 2))
    s, s2 = rng.normal(size=(1, 8)), rng.normal(size=(1, 8))
    fwd = latent_reconstruction_loss(t(c), t(s), None, lambda _: t(c2), lambda _: t(s2))
    rev = latent_reconstruction_loss(t(c2), t(s2), None, lambda _: t(c), lambda _: t(s))
    assert float(fwd.data) == pytest.approx(float(rev.data))


def test_latent_reconstruction_shape_mismatch():
    with pytest.raises(ValueError):
        latent_reconstruction_loss(t(np.zeros((1, 3, 2, 2))), t(np.zeros((1, 8))),
                                   None, lambda _: t(np.zeros((1, 3, 2, 3))),
                                   lambda _: t(np.zeros((1, 8))))


# ---- pixel reconstruction losses ----

def test_self_reconstruction_values():
    x = np.random.default_rng(3).uniform(-1, 1, (2, 3, 4, 4))
    assert float(self_reconstruction_loss(t(x), t(x)).data) == 0.0
    assert float(self_reconstruction_loss(t(np.clip(x, -0.5, 0.5) + 0.5),
                                          t(np.clip(x, -0.5, 0.5)))
                 .data) == pytest.approx(0.5)


def test_cycle_values():
    x = np.random.default_rng(4).uniform(-1, 1, (1, 3, 4, 4))
    assert float(cycle_consistency_loss(t(x), t(x)).data) == 0.0
    assert float(cycle_consistency_loss(t(np.clip(x, -0.7, 0.7) + 0.25),
                                        t(np.clip(x, -0.7, 0.7)))
                 .data) == pytest.approx(0.25)


@settings(max_examples=25, deadline=None)
@given(st.integers(0, 10_000))
def test_pixel_losses_nonnegative(seed):
    rng = np.random.default_rng(seed)
    a, b = rng.uniform(-1, 1, (1, 3, 3, 3)), rng.uniform(-1, 1, (1, 3, 3, 3))
    assert float(self_reconstruction_loss(t(a), t(b)).data) >= 0.0
    assert float(cycle_consistency_loss(t(a), t(b)).data) >= 0.0


# ---- adversarial ----

def test_critic_objective_undecided_value():
    half = np.full((1, 1, 2, 2), 0.5)
    v = adversarial_loss_d(t(half), t(half))
    assert float(v.data) == pytest.approx(2.0 * np.log(0.5), abs=1e-12)


def test_critic_objective_perfect_separation():
    ones = np.ones((1, 1, 2, 2))
    zeros = np.zeros((1, 1, 2, 2))
    v = float(adversarial_loss_d(t(ones), t(zeros)).data)
    assert v == pytest.approx(0.0, abs=1e-5)
    # and it is the maximum over a sweep of confidences
    sweep = [float(adversarial_loss_d(t(np.full((1,), p)), t(np.full((1,), 1 - p))).data)
             for p in np.linspace(0.05, 0.95, 19)]
    assert v >= max(sweep)


def test_generator_loss_monotone_in_confidence():
    ps = np.linspace(0.05, 0.95, 10)
    vals = [float(adversarial_loss_g(t(np.full((1,), p))).data) for p in ps]
    assert all(a > b for a, b in zip(vals, vals[1:]))
    assert all(v >= 0 for v in vals)


# ---- gram ----

def test_gram_hand_case():
    f = np.ones((1, 2, 2))
    g = gram_matrix(t(f)).data
    np.testing.assert_allclose(g, [[1.0]])


def test_gram_orthogonal_supports():
    f = np.zeros((2, 2, 2))
    f[0, 0, :] = 1.0
    f[1, 1, :] = 2.0
    g = gram_matrix(t(f)).data
    assert g[0, 1] == 0.0 and g[1, 0] == 0.0


@settings(max_examples=25, deadline=None)
@given(st.integers(0, 10_000))
def test_gram_psd(seed):
    rng = np.random.default_rng(seed)
    f = rng.normal(size=(4, 3, 5))
    g = gram_matrix(t(f)).data
    np.testing.assert_allclose(g, g.T, atol=1e-12)
    assert np.min(np.linalg.eigvalsh(g)) >= -1e-12


def test_gram_rejects_bad_shapes():
    with pytest.raises(ValueError):
        gram_matrix(t(np.zeros((2, 2))))
    with pytest.raises(ValueError):
        gram_matrix(t(np.zeros((2, 0, 3))))


# ---- masked roi ----

def test_masked_roi_matches_numpy_twin():
    rng = np.random.default_rng(7)
    x = np.clip(rng.normal(0, 0.5, (2, 3, 12, 12)), -1, 1)
    m = np.zeros((2, 1, 12, 12))
    m[0, :, 2:9, 3:11] = 1.0
    m[1, :, 0:12, 0:12] = 1.0
    out = masked_roi(t(x), m, 8, 8).data
    ref = extract_roi(x, m, 8)
    np.testing.assert_allclose(out, ref, atol=1e-12)


def test_masked_roi_gradient_flows():
    x = ad.parameter(np.clip(np.random.default_rng(8).normal(0, 0.4, (1, 3, 8, 8)), -1, 1))
    m = np.zeros((1, 1, 8, 8))
    m[0, :, 2:7, 1:6] = 1.0
    ad.tmean(ad.square(masked_roi(x, m, 6, 6))).backward()
    assert np.any(x.grad[0, :, 2:7, 1:6] != 0)
    assert np.all(x.grad[0, :, m[0, 0] == 0] == 0)


# ---- perceptual ----

def _pixel_gram(img):
    f = img.reshape(img.shape[0], -1)
    return f @ f.T / img.size


def pixel_perceptual_oracle(x_recon, x, x_cross, x_ct, lam):
    """Straight-line recomputation for the identity extractor."""
    self_term = np.mean((x_recon - x) ** 2)
    cross_term = np.mean((x_cross - x_ct) ** 2)
    gram = np.mean([np.mean(np.abs(_pixel_gram(a) - _pixel_gram(b)))
                    for a, b in zip(x_cross, x_ct)])
    return self_term + cross_term + lam * gram


def test_perceptual_identity_extractor_oracle():
    rng = np.random.default_rng(9)
    shape = (4, 3, 8, 8)
    xs = [np.clip(rng.normal(0, 0.4, shape), -1, 1) for _ in range(4)]
    phi = IdentityFeatureExtractor()
    for lam in (0.0, 1.0, 2.5):
        got = float(perceptual_loss(t(xs[0]), t(xs[1]), t(xs[2]), t(xs[3]),
                                    phi, lambda_gram=lam).data)
        want = pixel_perceptual_oracle(*xs, lam)
        assert got == pytest.approx(want, rel=1e-10)


def test_perceptual_identical_inputs_zero():
    x = np.clip(np.random.default_rng(10).normal(0, 0.4, (1, 3, 16, 16)), -1, 1)
    phi = RandomConvFeatureExtractor(seed=0, base_channels=4, n_stages=3)
    v = float(perceptual_loss(t(x), t(x), t(x), t(x), phi).data)
    assert v == 0.0


def test_perceptual_gram_weight_removal_exact():
    rng = np.random.default_rng(11)
    xs = [np.clip(rng.normal(0, 0.4, (1, 3, 8, 8)), -1, 1) for _ in range(4)]
    phi = IdentityFeatureExtractor()
    with_gram = perceptual_loss(t(xs[0]), t(xs[1]), t(xs[2]), t(xs[3]), phi, 1.0)
    without = perceptual_loss(t(xs[0]), t(xs[1]), t(xs[2]), t(xs[3]), phi, 0.0)
    base = float(self_reconstruction_loss(t(0 * xs[0]), t(0 * xs[0])).data)  # 0
    assert float(without.data) == pytest.approx(
        np.mean((xs[0] - xs[1]) ** 2) + np.mean((xs[2] - xs[3]) ** 2) + base, rel=1e-12)
    assert float(with_gram.data) > float(without.data)


def test_perceptual_layer_count_mismatch():
    class Lying:
        n_layers = 5
        descriptor = "lying"

        def __call__(self, x):
            return [ad.as_tensor(x)]

    x = t(np.zeros((1, 3, 4, 4)))
    with pytest.raises(ValueError):
        perceptual_loss(x, x, x, x, Lying())


def test_extractor_roundtrip(tmp_path):
    phi = RandomConvFeatureExtractor(seed=3, base_channels=4, n_stages=3)
    path = tmp_path / "phi.npz"
    phi.save(path)
    phi2 = RandomConvFeatureExtractor.from_npz(path)
    x = np.clip(np.random.default_rng(0).normal(0, 0.3, (1, 3, 8, 8)), -1, 1)
    for a, b in zip(phi(t(x)), phi2(t(x))):
        np.testing.assert_array_equal(a.data, b.data)
    assert phi2.digest() == phi.digest()


# ---- symmetry ----

def test_symmetry_hand_case():
    x = np.array([1.0, 3.0]).reshape(1, 1, 1, 2)
    assert float(symmetry_loss(t(x)).data) == pytest.approx(2.0)


def test_symmetry_mirror_is_zero():
    rng = np.random.default_rng(12)
    half = rng.uniform(-1, 1, (1, 3, 4, 3))
    x = np.concatenate([half, half[..., ::-1]], axis=3)
    assert float(symmetry_loss(t(x)).data) == 0.0


@settings(max_examples=25, deadline=None)
@given(st.integers(0, 10_000))
def test_symmetry_flip_invariant(seed):
    x = np.random.default_rng(seed).uniform(-1, 1, (1, 2, 3, 6))
    a = float(symmetry_loss(t(x)).data)
    b = float(symmetry_loss(t(x[..., ::-1].copy())).data)
    assert a == pytest.approx(b, rel=1e-12)


def test_symmetry_odd_width_rejected():
    with pytest.raises(ValueError):
        symmetry_loss(t(np.zeros((1, 3, 4, 5))))


# ---- total / report ----

def _terms(rng):
    vals = rng.uniform(0.1, 2.0, 13)
    return LossTerms(*[t(np.asarray(v)) for v in vals])


def test_total_zero_weights_leaves_gan_terms():
    terms = _terms(np.random.default_rng(13))
    w = LossWeights(lambda_cc=0, lambda_sr=0, lambda_lr=0, lambda_p=0,
                    lambda_sym=0, lambda_gram=0)
    total, report = total_loss(terms, w)
    assert float(total.data) == pytest.approx(
        float(terms.gan_g_a.data) + float(terms.gan_g_b.data), rel=1e-12)
    assert report.total == float(total.data)


def test_total_weight_linearity():
    terms = _terms(np.random.default_rng(14))
    w1 = LossWeights()
    w2 = LossWeights(lambda_cc=2 * w1.lambda_cc)
    t1, _ = total_loss(terms, w1)
    t2, _ = total_loss(terms, w2)
    cc = float(terms.cc_a.data) + float(terms.cc_b.data)
    assert float(t2.data) - float(t1.data) == pytest.approx(w1.lambda_cc * cc, rel=1e-9)


def test_total_recomposition():
    terms = _terms(np.random.default_rng(15))
    w = LossWeights()
    total, report = total_loss(terms, w)
    assert report.recompute_total(w) == pytest.approx(report.total, rel=1e-6)


def test_total_zero_weight_bitwise_equals_omitted():
    terms = _terms(np.random.default_rng(16))
    dropped = LossTerms(**{**terms.__dict__, "sym_a": None})
    w = LossWeights(lambda_sym=0.0)
    with_term, _ = total_loss(terms, w)
    without, _ = total_loss(dropped, w)
    assert float(with_term.data) == float(without.data)


def test_total_missing_term_rejected():
    terms = _terms(np.random.default_rng(17))
    broken = LossTerms(**{**terms.__dict__, "cc_b": None})
    with pytest.raises(ValueError, match="cc_b"):
        total_loss(broken, LossWeights())


def test_total_non_finite_named():
    terms = _terms(np.random.default_rng(18))
    bad = LossTerms(**{**terms.__dict__, "sr_a": t(np.asarray(np.nan))})
    with pytest.raises(NonFiniteLossError, match="sr_a"):
        total_loss(bad, LossWeights())


def test_report_tsv_roundtrip():
    terms = _terms(np.random.default_rng(19))
    _, report = total_loss(terms, LossWeights())
    header = LossReport.tsv_header().split("\t")
    row = report.tsv_row().split("\t")
    assert len(header) == len(row) == len(LossReport.FIELDS)
    assert float(row[header.index("total")]) == pytest.approx(report.total, rel=1e-9)


def test_weights_validation():
    with pytest.raises(ValueError):
        LossWeights(lambda_cc=-1.0)
    with pytest.raises(ValueError):
        LossWeights(lambda_p=np.inf)


# ---- differentiability spot checks (full suite runs in acceptance) ----

def test_loss_gradients_match_finite_differences():
    rng = np.random.default_rng(20)
    x = np.clip(rng.normal(0, 0.4, (1, 3, 4, 4)), -0.9, 0.9)
    y = np.clip(rng.normal(0, 0.4, (1, 3, 4, 4)), -0.9, 0.9)

    def check(build, arrays, tol=1e-6):
        tensors = [ad.parameter(a) for a in arrays]
        out = build(*tensors)
        out.backward()
        analytic = [p.grad.copy() for p in tensors]
        numeric = ad.finite_difference_grad(
            lambda: build(*[ad.Tensor(a) for a in arrays]).data, arrays)
        for g_a, g_n in zip(analytic, numeric):
            err = np.abs(g_a - g_n) / np.maximum(np.maximum(np.abs(g_a), np.abs(g_n)), 1e-6)
            assert np.max(err) < tol

    check(lambda a, b: self_reconstruction_loss(a, b), [x, y], tol=1e-5)
    check(lambda a: symmetry_loss(a), [x], tol=1e-5)
    check(lambda a, b: perceptual_loss(a, b, a, b, IdentityFeatureExtractor()),
          [x, y], tol=1e-4)
    scores = rng.uniform(0.2, 0.8, (1, 1, 2, 2))
    check(lambda f: adversarial_loss_g(f), [scores], tol=1e-5)
    check(lambda r, f: adversarial_loss_d(r, f), [scores, 1.0 - scores], tol=1e-5)
