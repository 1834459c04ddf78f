"""Objective terms for two-stream training and their weighted combination.

Conventions: every L1/L2 distance is mean-reduced over all axes.  The
adversarial value for a discriminator is its objective (higher is better
for the critic); generators minimize the non-saturating mirror form.  Term
names carry an ``_a`` suffix for the stream whose source is a worn image
(its translation lands in the catalog domain) and ``_b`` for the stream
starting from a catalog image.
"""

import dataclasses

import numpy as np

from . import autodiff as ad
from .data import mask_bbox

# probability floor keeping log() finite on saturated critic outputs
LOG_EPS = 1e-7


class NonFiniteLossError(FloatingPointError):
    """A named loss term evaluated to NaN or infinity."""

    def __init__(self, term, value):
        super().__init__(f"loss term {term!r} is non-finite ({value!r})")
        self.term = term


@dataclasses.dataclass(frozen=True)
class LossWeights:
    """Multipliers of the total objective; 0 removes a term exactly."""

    lambda_cc: float = 10.0
    lambda_sr: float = 10.0
    lambda_lr: float = 1.0
    lambda_p: float = 1.0
    lambda_sym: float = 0.3
    lambda_gram: float = 1.0

    def __post_init__(self):
        for f in dataclasses.fields(self):
            v = getattr(self, f.name)
            if not np.isfinite(v) or v < 0:
                raise ValueError(f"{f.name} must be finite and >= 0, got {v!r}")

    def to_dict(self):
        return dataclasses.asdict(self)

    @classmethod
    def from_dict(cls, d):
        return cls(**d)


def _t(x):
    return ad.as_tensor(x)


def _same_shape(a, b, what):
    if a.shape != b.shape:
        raise ValueError(f"{what}: shape {a.shape} != {b.shape}")


def latent_reconstruction_loss(c_orig, s_orig, x_translated, encode_content,
                               encode_style):
    """Mean-L1 recovery of the source codes from the translated image.

    The encoders are domain-bound callables for the translated image's
    domain; both re-encoded codes must match the originals' shapes.
    """
    c_re = _t(encode_content(x_translated))
    s_re = _t(encode_style(x_translated))
    c_orig, s_orig = _t(c_orig), _t(s_orig)
    _same_shape(c_re, c_orig, "content codes")
    _same_shape(s_re, s_orig, "style codes")
    return ad.mean_abs(c_re - c_orig) + ad.mean_abs(s_re - s_orig)


def self_reconstruction_loss(x_recon, x):
    """Mean L1 between an image and its within-domain reconstruction."""
    x_recon, x = _t(x_recon), _t(x)
    _same_shape(x_recon, x, "self reconstruction")
    return ad.mean_abs(x_recon - x)


def cycle_consistency_loss(x_cycled, x):
    """Mean L1 between an image and its round trip through both streams."""
    x_cycled, x = _t(x_cycled), _t(x)
    _same_shape(x_cycled, x, "cycle")
    return ad.mean_abs(x_cycled - x)


def adversarial_loss_d(real_scores, fake_scores):
    """Critic objective E[log D(real)] + E[log(1 - D(fake))].

    Higher is better for the critic (0 at perfect separation, ~-1.386 at
    an undecided 0.5/0.5); the trainer ascends it by minimizing the
    negation.  Fake scores should come from detached samples.
    """
    r = ad.clip(_t(real_scores), LOG_EPS, 1.0 - LOG_EPS)
    f = ad.clip(_t(fake_scores), LOG_EPS, 1.0 - LOG_EPS)
    return ad.tmean(ad.log(r)) + ad.tmean(ad.log(1.0 - f))


def adversarial_loss_g(fake_scores):
    """Non-saturating generator loss -E[log D(fake)]; decreases as D is fooled."""
    f = ad.clip(_t(fake_scores), LOG_EPS, 1.0 - LOG_EPS)
    return -ad.tmean(ad.log(f))


def gram_matrix(features):
    """[C, H, W] feature array to its C x C Gram matrix / (C*H*W)."""
    f = _t(features)
    if f.ndim != 3:
        raise ValueError(f"gram_matrix expects [c, h, w], got shape {f.shape}")
    c, h, w = f.shape
    if c < 1 or h < 1 or w < 1:
        raise ValueError(f"degenerate feature array {f.shape}")
    flat = ad.reshape(f, (c, h * w))
    return ad.matmul(flat, ad.transpose2d(flat)) / float(c * h * w)


def _gram_batch_l1(fa, fb):
    """Mean |Gram(fa[n]) - Gram(fb[n])| averaged over the batch."""
    n = fa.shape[0]
    terms = []
    for i in range(n):
        ga = gram_matrix(ad.reshape(ad.batch_slice(fa, i), fa.shape[1:]))
        gb = gram_matrix(ad.reshape(ad.batch_slice(fb, i), fb.shape[1:]))
        terms.append(ad.mean_abs(ga - gb))
    total = terms[0]
    for t in terms[1:]:
        total = total + t
    return total / float(n)


def masked_roi(x, m, out_h, out_w):
    """Garment region of each sample at catalog resolution, differentiable.

    Background is zeroed by the mask, the mask bounding box is cropped, and
    the crop is bilinearly resized to (out_h, out_w).
    """
    xt = _t(x)
    ma = np.asarray(getattr(m, "data", m))
    if ma.shape[0] != xt.shape[0] or ma.shape[2:] != tuple(xt.shape[2:]):
        raise ValueError(f"mask shape {ma.shape} does not align with image {xt.shape}")
    gated = xt * ad.constant(ma.astype(xt.dtype))
    parts = []
    for n_idx in range(xt.shape[0]):
        r, c, h, w = mask_bbox(ma[n_idx, 0])
        one = ad.batch_slice(gated, n_idx) if xt.shape[0] > 1 else gated
        one = ad.crop2d(one, r, r + h, c, c + w)
        parts.append(ad.resize_bilinear(one, out_h, out_w))
    return ad.concat(parts, axis=0) if len(parts) > 1 else parts[0]


def perceptual_loss(x_recon, x, x_cross, x_cross_target, phi, lambda_gram=1.0):
    """Composed perceptual distance over a fixed extractor's feature maps.

    Sums, over extraction layers, the mean squared feature distance of the
    self reconstruction (x_recon vs x) and of the cross translation
    (x_cross vs x_cross_target), plus lambda_gram times the mean-L1 Gram
    difference of the cross pair.  The cross target is the garment region
    of the source image at the translation's resolution.
    """
    feats = [phi(img) for img in (x_recon, x, x_cross, x_cross_target)]
    for f in feats:
        if len(f) != phi.n_layers:
            raise ValueError(
                f"extractor {phi.descriptor!r} declared {phi.n_layers} layers "
                f"but produced {len(f)}")
    fr, fx, fc, ft = feats
    total = ad.mean_square(fr[0] - fx[0]) + ad.mean_square(fc[0] - ft[0])
    for l in range(1, phi.n_layers):
        total = total + ad.mean_square(fr[l] - fx[l])
        total = total + ad.mean_square(fc[l] - ft[l])
    if lambda_gram > 0:
        gram = _gram_batch_l1(fc[0], ft[0])
        for l in range(1, phi.n_layers):
            gram = gram + _gram_batch_l1(fc[l], ft[l])
        total = total + lambda_gram * gram
    return total


def symmetry_loss(x):
    """Mean L1 between an image batch and its horizontal mirror pairing.

    Columns w and W-(w-1) are paired once each, so a mirror-symmetric
    image scores 0.  Requires even width.
    """
    xt = _t(x)
    if xt.ndim != 4:
        raise ValueError(f"expected [n, c, h, w], got shape {xt.shape}")
    w = xt.shape[3]
    if w % 2:
        raise ValueError(f"symmetry pairing needs even width, got {w}")
    half = w // 2
    left = ad.crop2d(xt, 0, xt.shape[2], 0, half)
    mirrored = ad.crop2d(ad.flip_w(xt), 0, xt.shape[2], 0, half)
    return ad.mean_abs(left - mirrored)


# ---- composition ----

@dataclasses.dataclass
class LossTerms:
    """Scalar term tensors for one optimization step, both directions.

    ``p_a``/``p_b``/``sym_a`` may be None when their stage is disabled;
    they are then reported as 0 and excluded from the total.
    """

    gan_g_a: object
    gan_g_b: object
    gan_d_a: object
    gan_d_b: object
    lr_a: object
    lr_b: object
    sr_a: object
    sr_b: object
    cc_a: object
    cc_b: object
    p_a: object = None
    p_b: object = None
    sym_a: object = None


@dataclasses.dataclass
class LossReport:
    """Per-term floats plus the weighted total for one step's log line."""

    gan_g_a: float
    gan_g_b: float
    gan_d_a: float
    gan_d_b: float
    lr_a: float
    lr_b: float
    sr_a: float
    sr_b: float
    cc_a: float
    cc_b: float
    p_a: float
    p_b: float
    sym_a: float
    total: float

    FIELDS = ("gan_g_a", "gan_g_b", "gan_d_a", "gan_d_b", "lr_a", "lr_b",
              "sr_a", "sr_b", "cc_a", "cc_b", "p_a", "p_b", "sym_a", "total")

    @staticmethod
    def tsv_header():
        return "\t".join(LossReport.FIELDS)

    def tsv_row(self):
        return "\t".join(f"{getattr(self, f):.10g}" for f in self.FIELDS)

    def to_dict(self):
        return dataclasses.asdict(self)

    def recompute_total(self, weights):
        """The weighted combination rebuilt from the logged parts."""
        return (self.gan_g_a + self.gan_g_b
                + weights.lambda_lr * (self.lr_a + self.lr_b)
                + weights.lambda_sr * (self.sr_a + self.sr_b)
                + weights.lambda_cc * (self.cc_a + self.cc_b)
                + weights.lambda_p * (self.p_a + self.p_b)
                + weights.lambda_sym * self.sym_a)


def _scalar(v):
    if v is None:
        return 0.0
    return float(v.data) if isinstance(v, ad.Tensor) else float(v)


def total_loss(terms, weights):
    """Weighted generator objective and the matching report.

    The total is what the generator side descends: its adversarial terms
    plus every weighted reconstruction/perceptual/symmetry term.  Critic
    objectives ride along in the report only.  A zero weight skips its
    group entirely, so the sum is bit-identical to a build without the
    term; a needed-but-missing term is rejected.
    """
    required = [("gan_g_a", terms.gan_g_a), ("gan_g_b", terms.gan_g_b)]
    if weights.lambda_lr > 0:
        required += [("lr_a", terms.lr_a), ("lr_b", terms.lr_b)]
    if weights.lambda_sr > 0:
        required += [("sr_a", terms.sr_a), ("sr_b", terms.sr_b)]
    if weights.lambda_cc > 0:
        required += [("cc_a", terms.cc_a), ("cc_b", terms.cc_b)]
    if weights.lambda_sym > 0:
        required += [("sym_a", terms.sym_a)]
    for name, value in required:
        if value is None:
            raise ValueError(f"missing stream output for loss term {name!r}")
    # perceptual terms are optional as a pair: the stage may be disabled
    p_on = weights.lambda_p > 0 and terms.p_a is not None and terms.p_b is not None
    if weights.lambda_p > 0 and (terms.p_a is None) != (terms.p_b is None):
        raise ValueError("perceptual terms must be provided for both streams")

    for f in dataclasses.fields(LossTerms):
        v = getattr(terms, f.name)
        s = _scalar(v)
        if v is not None and not np.isfinite(s):
            raise NonFiniteLossError(f.name, s)

    total = _t(terms.gan_g_a) + _t(terms.gan_g_b)
    if weights.lambda_lr > 0:
        total = total + weights.lambda_lr * (_t(terms.lr_a) + _t(terms.lr_b))
    if weights.lambda_sr > 0:
        total = total + weights.lambda_sr * (_t(terms.sr_a) + _t(terms.sr_b))
    if weights.lambda_cc > 0:
        total = total + weights.lambda_cc * (_t(terms.cc_a) + _t(terms.cc_b))
    if p_on:
        total = total + weights.lambda_p * (_t(terms.p_a) + _t(terms.p_b))
    if weights.lambda_sym > 0:
        total = total + weights.lambda_sym * _t(terms.sym_a)

    report = LossReport(
        gan_g_a=_scalar(terms.gan_g_a), gan_g_b=_scalar(terms.gan_g_b),
        gan_d_a=_scalar(terms.gan_d_a), gan_d_b=_scalar(terms.gan_d_b),
        lr_a=_scalar(terms.lr_a), lr_b=_scalar(terms.lr_b),
        sr_a=_scalar(terms.sr_a), sr_b=_scalar(terms.sr_b),
        cc_a=_scalar(terms.cc_a), cc_b=_scalar(terms.cc_b),
        p_a=_scalar(terms.p_a), p_b=_scalar(terms.p_b),
        sym_a=_scalar(terms.sym_a), total=float(total.data))
    return total, report
