"""Two-stream garment translation model with content/style disentanglement.

One content encoder per domain, a style encoder shared across domains, and a
multilayer perceptron mapping style codes to the renormalization statistics
consumed by two decoders: ``take_off`` renders a worn garment as a flat
catalog image, ``try_on`` renders a catalog garment onto a person context by
resizing decoded features into the target mask's bounding box (the fit-in
stage) and blending with the context image.  A patch discriminator per
domain scores realism; the worn-domain discriminator additionally sees the
mask as an attention channel.

Masks are plain numpy arrays throughout (they are data, not parameters);
images may be numpy arrays or autodiff tensors so ops compose into a
differentiable training graph.
"""

import dataclasses

import numpy as np

from . import autodiff as ad
from . import container, contracts
from .data import mask_bbox, resize_mask_nearest
from .layers import AdainResBlock, Conv2d, ConvBlock, Linear, ResBlock, adain

TRY_ON = "try_on"
TAKE_OFF = "take_off"


@dataclasses.dataclass(frozen=True)
class ModelConfig:
    """Architecture hyperparameters; every subnet is sized from these."""

    image_size: int = 64
    base_channels: int = 64
    n_downsample: int = 2
    n_res_blocks: int = 4
    style_dim: int = 8
    style_n_downsample: int = 4
    mlp_hidden: int = 256
    disc_base_channels: int = 64
    disc_n_layers: int = 3
    use_mask_attention: bool = True
    use_fit_in: bool = True
    use_shared_style_encoder: bool = True
    dtype: str = "float64"
    seed: int = 0

    def __post_init__(self):
        for field in ("image_size", "base_channels", "n_res_blocks", "style_dim",
                      "mlp_hidden", "disc_base_channels", "disc_n_layers"):
            if getattr(self, field) < 1:
                raise ValueError(f"{field} must be positive")
        for n_down in (self.n_downsample, self.style_n_downsample, self.disc_n_layers):
            if self.image_size % (1 << n_down) != 0:
                raise ValueError(
                    f"image_size {self.image_size} not divisible by 2^{n_down}")
        if self.dtype not in ("float32", "float64"):
            raise ValueError(f"dtype must be float32 or float64, got {self.dtype!r}")

    @property
    def np_dtype(self):
        return np.dtype(self.dtype)

    @property
    def content_channels(self):
        return self.base_channels << self.n_downsample

    @property
    def content_size(self):
        return self.image_size >> self.n_downsample

    def to_dict(self):
        return dataclasses.asdict(self)

    @classmethod
    def from_dict(cls, d):
        return cls(**d)


@dataclasses.dataclass
class AdainParams:
    """Per-layer (gamma, beta) pairs emitted by the style MLP.

    ``target`` names the decoder these were sized for; both decoders share
    one layout, so the tag is what prevents cross-wiring them.
    """

    target: str
    layers: tuple  # ((gamma [N, C], beta [N, C]), ...)

    @property
    def n_values(self):
        return sum(2 * g.shape[1] for g, _ in self.layers)

    @property
    def channel_layout(self):
        return tuple(g.shape[1] for g, _ in self.layers)


def place_in_bbox(features, mask, out_h, out_w):
    """Resize each sample's feature map into its mask bounding box.

    The full map is bilinearly resized to the box extent and placed on a
    zero canvas of size (out_h, out_w) at the box location.  Differentiable
    in ``features``; the mask only steers geometry.
    """
    f = ad.as_tensor(features)
    ma = np.asarray(getattr(mask, "data", mask))
    parts = []
    for n in range(f.shape[0]):
        r, c, h, w = mask_bbox(ma[n, 0])
        if h < 1 or w < 1:
            raise ValueError(f"degenerate bounding box for sample {n}")
        one = ad.batch_slice(f, n) if f.shape[0] > 1 else f
        one = ad.resize_bilinear(one, h, w)
        one = ad.pad2d(one, (r, out_h - r - h, c, out_w - c - w))
        parts.append(one)
    return ad.concat(parts, axis=0) if len(parts) > 1 else parts[0]


class ContentEncoder:
    """Shared-space content encoder; optionally mask-gated for worn images."""

    def __init__(self, rng, in_ch, nf, n_down, n_res, dtype):
        # first block is norm-free: normalizing before the mask multiply
        # would leak background statistics into foreground features
        self.first = ConvBlock(rng, in_ch, nf, 7, 1, 3, norm=False,
                               activation="relu", dtype=dtype)
        self.downs = []
        c = nf
        for _ in range(n_down):
            self.downs.append(ConvBlock(rng, c, 2 * c, 4, 2, 1, norm=True,
                                        activation="relu", dtype=dtype))
            c *= 2
        self.res = [ResBlock(rng, c, dtype) for _ in range(n_res)]
        self.out_ch = c

    def __call__(self, x, m=None):
        if m is not None:
            mk = ad.constant(m)
            # zero the background ahead of the 7x7 receptive field so the
            # output provably depends on in-mask pixels only, then gate the
            # first block's features the same way
            x = x * mk
            h = self.first(x) * mk
        else:
            h = self.first(x)
        for d in self.downs:
            h = d(h)
        for r in self.res:
            h = r(h)
        return h

    def named_params(self, prefix):
        out = self.first.named_params(f"{prefix}.first")
        for i, d in enumerate(self.downs):
            out.update(d.named_params(f"{prefix}.down{i}"))
        for i, r in enumerate(self.res):
            out.update(r.named_params(f"{prefix}.res{i}"))
        return out


class StyleEncoder:
    """Stride-2 conv stack, global average pool, linear map to the code."""

    def __init__(self, rng, in_ch, nf, n_down, style_dim, dtype):
        self.convs = []
        c_in, c_out = in_ch, nf
        for _ in range(n_down):
            self.convs.append(ConvBlock(rng, c_in, c_out, 4, 2, 1, norm=False,
                                        activation="relu", dtype=dtype))
            c_in, c_out = c_out, min(2 * c_out, 4 * nf)
        self.fc = Linear(rng, c_in, style_dim, dtype)

    def __call__(self, x):
        h = x
        for conv in self.convs:
            h = conv(h)
        pooled = ad.tmean(h, axis=(2, 3))
        return self.fc(pooled)

    def named_params(self, prefix):
        out = {}
        for i, conv in enumerate(self.convs):
            out.update(conv.named_params(f"{prefix}.conv{i}"))
        out.update(self.fc.named_params(f"{prefix}.fc"))
        return out


class StyleMlp:
    """Two hidden layers; emits the flat (gamma, beta) vector for a decoder."""

    def __init__(self, rng, in_dim, hidden, out_dim, dtype):
        self.fc1 = Linear(rng, in_dim, hidden, dtype)
        self.fc2 = Linear(rng, hidden, hidden, dtype)
        self.fc3 = Linear(rng, hidden, out_dim, dtype)

    def __call__(self, s):
        h = ad.relu(self.fc1(s))
        h = ad.relu(self.fc2(h))
        return self.fc3(h)

    def named_params(self, prefix):
        return {**self.fc1.named_params(f"{prefix}.fc1"),
                **self.fc2.named_params(f"{prefix}.fc2"),
                **self.fc3.named_params(f"{prefix}.fc3")}


class DecoderCore:
    """Renormalized residual blocks followed by renormalized up-sampling."""

    def __init__(self, rng, ch, n_res, n_up, dtype):
        self.res = [AdainResBlock(rng, ch, dtype) for _ in range(n_res)]
        self.ups = []
        c = ch
        for _ in range(n_up):
            self.ups.append(Conv2d(rng, c, c // 2, 5, 1, 2, dtype))
            c //= 2
        self.out_ch = c
        self.adain_channels = tuple([ch] * (2 * len(self.res))
                                    + [u.w.shape[0] for u in self.ups])

    def __call__(self, h, layers):
        if len(layers) != len(self.adain_channels):
            raise ValueError(
                f"expected {len(self.adain_channels)} renormalization layers, "
                f"got {len(layers)}")
        it = iter(layers)
        for block in self.res:
            h = block(h, next(it), next(it))
        for up in self.ups:
            h = ad.relu(adain(up(ad.upsample_nearest2x(h)), *next(it)))
        return h

    def named_params(self, prefix):
        out = {}
        for i, r in enumerate(self.res):
            out.update(r.named_params(f"{prefix}.res{i}"))
        for i, u in enumerate(self.ups):
            out.update(u.named_params(f"{prefix}.up{i}"))
        return out


class TakeOffDecoder:
    """Decodes content + style statistics to a flat catalog image."""

    def __init__(self, rng, content_ch, n_res, n_up, out_ch, dtype):
        self.core = DecoderCore(rng, content_ch, n_res, n_up, dtype)
        self.final = Conv2d(rng, self.core.out_ch, out_ch, 7, 1, 3, dtype)

    def __call__(self, c, layers):
        return ad.tanh(self.final(self.core(c, layers)))

    def named_params(self, prefix):
        return {**self.core.named_params(f"{prefix}.core"),
                **self.final.named_params(f"{prefix}.final")}


class TryOnDecoder:
    """Decodes content + style onto a person context via fit-in placement."""

    def __init__(self, rng, content_ch, n_res, n_up, out_ch,
                 use_mask_attention, use_fit_in, dtype):
        self.use_mask_attention = use_mask_attention
        self.use_fit_in = use_fit_in
        in_ch = content_ch + (1 if use_mask_attention else 0)
        self.merge = ConvBlock(rng, in_ch, content_ch, 3, 1, 1, norm=False,
                               activation="relu", dtype=dtype)
        self.core = DecoderCore(rng, content_ch, n_res, n_up, dtype)
        self.fit_conv = None
        if use_fit_in:
            self.fit_conv = ConvBlock(rng, self.core.out_ch + out_ch,
                                      self.core.out_ch, 3, 1, 1, norm=False,
                                      activation="relu", dtype=dtype)
        self.final = Conv2d(rng, self.core.out_ch, out_ch, 7, 1, 3, dtype)

    def fit_in(self, features, m, context):
        placed = place_in_bbox(features, m, context.shape[2], context.shape[3])
        h = ad.concat([placed, ad.as_tensor(context)], axis=1)
        return self.fit_conv(h)

    def __call__(self, c, m, context, layers):
        h = c
        if self.use_mask_attention:
            m_small = resize_mask_nearest(m, c.shape[2], c.shape[3])
            h = ad.concat([h, ad.constant(m_small)], axis=1)
        h = self.merge(h)
        h = self.core(h, layers)
        if self.use_fit_in:
            h = self.fit_in(h, m, context)
        return ad.tanh(self.final(h))

    def named_params(self, prefix):
        out = self.merge.named_params(f"{prefix}.merge")
        out.update(self.core.named_params(f"{prefix}.core"))
        if self.fit_conv is not None:
            out.update(self.fit_conv.named_params(f"{prefix}.fit"))
        out.update(self.final.named_params(f"{prefix}.final"))
        return out


class PatchDiscriminator:
    """Stride-2 conv stack emitting a spatial map of realism probabilities."""

    def __init__(self, rng, in_ch, nf, n_layers, dtype):
        self.layers = []
        c_in, c_out = in_ch, nf
        for _ in range(n_layers):
            self.layers.append(ConvBlock(rng, c_in, c_out, 4, 2, 1, norm=False,
                                         activation="lrelu", dtype=dtype))
            c_in, c_out = c_out, min(2 * c_out, 8 * nf)
        self.score = Conv2d(rng, c_in, 1, 3, 1, 1, dtype)

    def __call__(self, x):
        h = x
        for layer in self.layers:
            h = layer(h)
        return ad.sigmoid(self.score(h))

    def named_params(self, prefix):
        out = {}
        for i, layer in enumerate(self.layers):
            out.update(layer.named_params(f"{prefix}.layer{i}"))
        out.update(self.score.named_params(f"{prefix}.score"))
        return out


class ShapeTransferModel:
    """The full two-stream model: encoders, style MLP, decoders, critics."""

    # fixed seed-stream slots so toggling an ablation flag never shifts the
    # initialization draws of unrelated subnets
    SUBNET_NAMES = ("enc_content_a", "enc_content_b", "enc_style", "enc_style_b",
                    "mlp", "dec_try_on", "dec_take_off", "disc_a", "disc_b")

    def __init__(self, config: ModelConfig):
        self.config = config
        dt = config.np_dtype
        children = np.random.SeedSequence(config.seed).spawn(len(self.SUBNET_NAMES))
        rngs = {name: np.random.default_rng(child)
                for name, child in zip(self.SUBNET_NAMES, children)}

        nf, nd, nr = config.base_channels, config.n_downsample, config.n_res_blocks
        self.enc_content_a = ContentEncoder(rngs["enc_content_a"], 3, nf, nd, nr, dt)
        self.enc_content_b = ContentEncoder(rngs["enc_content_b"], 3, nf, nd, nr, dt)
        self.enc_style = StyleEncoder(rngs["enc_style"], 3, nf,
                                      config.style_n_downsample, config.style_dim, dt)
        self.enc_style_b = None
        if not config.use_shared_style_encoder:
            self.enc_style_b = StyleEncoder(rngs["enc_style_b"], 3, nf,
                                            config.style_n_downsample,
                                            config.style_dim, dt)
        ch = config.content_channels
        self.dec_try_on = TryOnDecoder(rngs["dec_try_on"], ch, nr, nd, 3,
                                       config.use_mask_attention,
                                       config.use_fit_in, dt)
        self.dec_take_off = TakeOffDecoder(rngs["dec_take_off"], ch, nr, nd, 3, dt)
        if self.dec_try_on.core.adain_channels != self.dec_take_off.core.adain_channels:
            raise AssertionError("decoder renormalization layouts diverged")
        self._adain_channels = self.dec_take_off.core.adain_channels
        budget = 2 * sum(self._adain_channels)
        self.mlp = StyleMlp(rngs["mlp"], config.style_dim, config.mlp_hidden,
                            budget, dt)
        d_in_a = 4 if config.use_mask_attention else 3
        self.disc_a = PatchDiscriminator(rngs["disc_a"], d_in_a,
                                         config.disc_base_channels,
                                         config.disc_n_layers, dt)
        self.disc_b = PatchDiscriminator(rngs["disc_b"], 3,
                                         config.disc_base_channels,
                                         config.disc_n_layers, dt)

    # ---- input plumbing ----

    def _as_input(self, x):
        if isinstance(x, ad.Tensor):
            return x
        return ad.Tensor(np.asarray(x, dtype=self.config.np_dtype))

    def _mask_array(self, m):
        return np.asarray(getattr(m, "data", m), dtype=self.config.np_dtype)

    @property
    def adain_channel_layout(self):
        return self._adain_channels

    @property
    def supports_try_on(self):
        return self.config.use_fit_in

    # ---- core ops ----

    def encode_content_a(self, x, m, allow_empty=False):
        """Content code of a worn image; background is removed by the mask.

        ``allow_empty`` admits all-background masks (the annihilation case);
        by default they raise, since a worn image must contain the garment.
        """
        contracts.check_image_batch(x, "x")
        contracts.check_mask_batch(m, "m", allow_empty=allow_empty)
        contracts.check_aligned(x, m)
        return self.enc_content_a(self._as_input(x), self._mask_array(m))

    def encode_content_b(self, x):
        """Content code of a catalog image (no masking needed)."""
        contracts.check_image_batch(x, "x")
        return self.enc_content_b(self._as_input(x))

    def encode_style(self, x, domain="a"):
        """Style code in the shared style space.

        ``domain`` only matters when the shared-encoder flag is off; it then
        routes to the per-domain encoder.
        """
        contracts.check_image_batch(x, "x")
        if domain not in ("a", "b"):
            raise ValueError(f"unknown domain {domain!r}")
        enc = self.enc_style
        if self.enc_style_b is not None and domain == "b":
            enc = self.enc_style_b
        return enc(self._as_input(x))

    def style_code(self, x, m=None, domain="a"):
        """Style code of an image, masking the background first if m given."""
        if m is not None:
            contracts.check_aligned(x, m)
            x = self._as_input(x) * ad.constant(self._mask_array(m))
        return self.encode_style(x, domain)

    def style_to_adain_params(self, s, target):
        """Map a style code to per-layer renormalization statistics."""
        if target not in (TRY_ON, TAKE_OFF):
            raise ValueError(f"unknown decoder id {target!r}")
        st = s if isinstance(s, ad.Tensor) else self._as_input(s)
        contracts.check_style_codes(st.data, dim=self.config.style_dim)
        flat = self.mlp(st)
        layers = []
        off = 0
        for ch in self._adain_channels:
            gamma = ad.slice_cols(flat, off, off + ch)
            beta = ad.slice_cols(flat, off + ch, off + 2 * ch)
            off += 2 * ch
            layers.append((gamma, beta))
        return AdainParams(target=target, layers=tuple(layers))

    def _check_adain(self, a, target):
        if not isinstance(a, AdainParams) or a.target != target:
            got = getattr(a, "target", type(a).__name__)
            raise ValueError(f"adain params for {got!r} passed to the {target} decoder")
        if a.channel_layout != self._adain_channels:
            raise ValueError(
                f"adain layout {a.channel_layout} does not match decoder "
                f"layout {self._adain_channels}")

    def _check_content(self, c, name="c"):
        ct = c if isinstance(c, ad.Tensor) else self._as_input(c)
        if ct.ndim != 4 or ct.shape[1] != self.config.content_channels:
            raise ValueError(
                f"{name}: expected content code with {self.config.content_channels} "
                f"channels, got shape {ct.shape}")
        return ct

    def fit_in(self, features, m, context):
        """Place decoded features into the mask bbox and blend with context."""
        if not self.config.use_fit_in:
            raise ValueError("fit-in module is disabled in this configuration")
        contracts.check_image_batch(context, "context")
        contracts.check_mask_batch(m, "m")
        contracts.check_aligned(context, m)
        f = ad.as_tensor(features)
        if f.shape[1] != self.dec_try_on.core.out_ch:
            raise ValueError(
                f"features: expected {self.dec_try_on.core.out_ch} channels, "
                f"got {f.shape[1]}")
        return self.dec_try_on.fit_in(f, self._mask_array(m), self._as_input(context))

    def decode_try_on(self, c, m, context, a):
        """Render content onto the person context in the mask's shape."""
        self._check_adain(a, TRY_ON)
        contracts.check_image_batch(context, "context")
        contracts.check_mask_batch(m, "m")
        contracts.check_aligned(context, m)
        ct = self._check_content(c)
        if not (ct.shape[0] == context.shape[0] == m.shape[0]):
            raise ValueError("batch sizes of c, m, context differ")
        return self.dec_try_on(ct, self._mask_array(m), self._as_input(context),
                               a.layers)

    def decode_take_off(self, c, a):
        """Render content as a flat catalog image."""
        self._check_adain(a, TAKE_OFF)
        ct = self._check_content(c)
        return self.dec_take_off(ct, a.layers)

    def discriminate_a(self, x, m):
        """Realism score map for worn-domain images (mask as attention)."""
        contracts.check_image_batch(x, "x")
        contracts.check_mask_batch(m, "m", allow_empty=True)
        contracts.check_aligned(x, m)
        inp = self._as_input(x)
        if self.config.use_mask_attention:
            inp = ad.concat([inp, ad.constant(self._mask_array(m))], axis=1)
        return self.disc_a(inp)

    def discriminate_b(self, x):
        """Realism score map for catalog-domain images."""
        contracts.check_image_batch(x, "x")
        return self.disc_b(self._as_input(x))

    # ---- whole-image translation (inference) ----

    def take_off(self, x_a, m_a):
        """Worn image -> flat catalog image (numpy, no graph)."""
        with ad.no_grad():
            c = self.encode_content_a(x_a, m_a)
            s = self.style_code(x_a, m_a, domain="a")
            a = self.style_to_adain_params(s, TAKE_OFF)
            return self.decode_take_off(c, a).data

    def try_on(self, x_b, m, context, style_from=None):
        """Catalog image -> worn image in the target mask's shape (numpy)."""
        with ad.no_grad():
            c = self.encode_content_b(x_b)
            s = self.style_code(style_from if style_from is not None else x_b,
                                domain="b")
            a = self.style_to_adain_params(s, TRY_ON)
            return self.decode_try_on(c, m, context, a).data

    def reconstruct_a(self, x_a, m_a):
        """Worn image -> itself through the try-on decoder (numpy)."""
        xa = contracts.check_image_batch(x_a, "x_a")
        ma = contracts.check_mask_batch(m_a, "m_a")
        context = xa * (1.0 - ma)
        with ad.no_grad():
            c = self.encode_content_a(xa, ma)
            s = self.style_code(xa, ma, domain="a")
            a = self.style_to_adain_params(s, TRY_ON)
            return self.decode_try_on(c, ma, context, a).data

    def reconstruct_b(self, x_b):
        """Catalog image -> itself through the take-off decoder (numpy)."""
        with ad.no_grad():
            c = self.encode_content_b(x_b)
            s = self.style_code(x_b, domain="b")
            a = self.style_to_adain_params(s, TAKE_OFF)
            return self.decode_take_off(c, a).data

    # ---- parameters and persistence ----

    def _subnets(self):
        pairs = [("enc_content_a", self.enc_content_a),
                 ("enc_content_b", self.enc_content_b),
                 ("enc_style", self.enc_style)]
        if self.enc_style_b is not None:
            pairs.append(("enc_style_b", self.enc_style_b))
        pairs += [("mlp", self.mlp),
                  ("dec_try_on", self.dec_try_on),
                  ("dec_take_off", self.dec_take_off),
                  ("disc_a", self.disc_a),
                  ("disc_b", self.disc_b)]
        return pairs

    def named_parameters(self):
        """Flat {unique name: tensor} over every subnet, stable order."""
        out = {}
        for prefix, net in self._subnets():
            sub = net.named_params(prefix)
            overlap = out.keys() & sub.keys()
            if overlap:
                raise AssertionError(f"duplicate parameter names: {sorted(overlap)}")
            out.update(sub)
        return out

    def generator_parameters(self):
        """Parameters of everything except the discriminators."""
        return {n: t for n, t in self.named_parameters().items()
                if not n.startswith("disc_")}

    def discriminator_parameters(self):
        return {n: t for n, t in self.named_parameters().items()
                if n.startswith("disc_")}

    def param_count(self):
        return sum(t.data.size for t in self.named_parameters().values())

    def save(self, path):
        """Checkpoint: every named parameter plus the building config."""
        arrays = {name: t.data for name, t in self.named_parameters().items()}
        container.save_container(path, arrays,
                                 {"kind": "model", "config": self.config.to_dict()})

    @classmethod
    def load(cls, path):
        arrays, meta = container.load_container(path)
        if meta.get("kind") != "model":
            raise ValueError(f"{path}: container kind {meta.get('kind')!r} is not a model")
        model = cls(ModelConfig.from_dict(meta["config"]))
        params = model.named_parameters()
        missing = params.keys() - arrays.keys()
        extra = arrays.keys() - params.keys()
        if missing or extra:
            raise ValueError(
                f"{path}: parameter names do not match the stored config "
                f"(missing {sorted(missing)[:3]}, extra {sorted(extra)[:3]})")
        for name, t in params.items():
            stored = arrays[name]
            if stored.shape != t.data.shape or stored.dtype != t.data.dtype:
                raise ValueError(f"{path}: shape/dtype mismatch for {name}")
            t.data = stored.copy()
        return model
