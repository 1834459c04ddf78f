"""Synthetic garment dataset: generation, loading, sampling, mask geometry.

The generator draws flat garment silhouettes (catalog domain B) and the
same garments affinely warped onto a procedural person context (worn
domain A), with exact foreground masks.  Textures are evaluated
analytically at inverse-warped coordinates, so a worn image and its
catalog source show the same texture by construction.  Pairing information
is recorded in the manifest for evaluation only; the training sampler
never exposes it.

Dataset layout: ``domainA/``, ``domainA_masks/``, ``domainB/``,
``manifest.txt`` (tab-separated, commented header), ``gen_params.json``
(the per-item parameter log that lets tests regenerate any file).
"""

import dataclasses
import hashlib
import json
from pathlib import Path

import numpy as np
from PIL import Image

from . import autodiff as ad
from . import contracts

MANIFEST_NAME = "manifest.txt"
PARAMS_NAME = "gen_params.json"
TEXTURE_FAMILIES = ("stripes", "checks", "dots", "solid")

# the catalog rendering maps the garment frame [-1, 1]^2 to this fraction
# of the image size (half-extent), leaving margin for warped views
CANONICAL_RADIUS_FRAC = 0.32


# ---- mask geometry ----

def mask_bbox(mask):
    """Tight foreground bounding box of one mask plane.

    Accepts [h, w] or [1, h, w]; returns (row, col, height, width).
    An all-background mask has no box.
    """
    m = np.asarray(getattr(mask, "data", mask))
    if m.ndim == 3:
        if m.shape[0] != 1:
            raise ValueError(f"mask plane expected, got shape {m.shape}")
        m = m[0]
    if m.ndim != 2:
        raise ValueError(f"mask plane expected, got shape {m.shape}")
    rows = np.flatnonzero(m.any(axis=1))
    cols = np.flatnonzero(m.any(axis=0))
    if rows.size == 0:
        raise contracts.EmptyMaskError("mask has no foreground pixels")
    return (int(rows[0]), int(cols[0]),
            int(rows[-1]) - int(rows[0]) + 1, int(cols[-1]) - int(cols[0]) + 1)


def extract_roi(x, m, out_size):
    """Garment region of each image at a fixed resolution.

    Background is zeroed by the mask, the mask bounding box is cropped,
    and the crop is bilinearly resized to ``out_size`` (int or (h, w)).
    Returns a [batch, 3, oh, ow] array.
    """
    xa = contracts.check_image_batch(x)
    ma = contracts.check_mask_batch(m)
    contracts.check_aligned(xa, ma)
    oh, ow = (out_size, out_size) if np.isscalar(out_size) else tuple(out_size)
    out = np.empty((xa.shape[0], xa.shape[1], oh, ow), dtype=xa.dtype)
    for n in range(xa.shape[0]):
        r, c, h, w = mask_bbox(ma[n, 0])
        crop = xa[n, :, r:r + h, c:c + w] * ma[n, :, r:r + h, c:c + w]
        out[n] = ad.resize_bilinear(ad.Tensor(crop[None]), oh, ow).data[0]
    return out


def resize_mask_nearest(m, out_h, out_w):
    """Nearest-neighbour resize of a mask batch; preserves binarity exactly."""
    ma = np.asarray(getattr(m, "data", m))
    in_h, in_w = ma.shape[-2:]
    ri = np.minimum((np.arange(out_h) + 0.5) * (in_h / out_h), in_h - 1).astype(int)
    ci = np.minimum((np.arange(out_w) + 0.5) * (in_w / out_w), in_w - 1).astype(int)
    return np.ascontiguousarray(ma[..., ri[:, None], ci[None, :]])


# ---- dataset types ----

@dataclasses.dataclass(frozen=True)
class ContextVariation:
    """Affine warp ranges for worn views; must keep the garment in frame."""

    scale: tuple = (0.55, 0.8)
    rotation: tuple = (-20.0, 20.0)
    translation: tuple = (-0.08, 0.08)

    def __post_init__(self):
        for name in ("scale", "rotation", "translation"):
            lo, hi = getattr(self, name)
            if not (np.isfinite(lo) and np.isfinite(hi) and lo <= hi):
                raise ValueError(f"{name} range {lo, hi} is invalid")
        if self.scale[0] <= 0:
            raise ValueError("scale must stay positive")
        # worst-case support: rotated frame corner plus translation
        reach = self.scale[1] * CANONICAL_RADIUS_FRAC * np.sqrt(2.0)
        reach += max(abs(self.translation[0]), abs(self.translation[1]))
        if reach > 0.49:
            raise ValueError(
                f"warp ranges can push the garment out of frame (reach {reach:.3f})")

    def to_dict(self):
        return {"scale": list(self.scale), "rotation": list(self.rotation),
                "translation": list(self.translation)}

    @classmethod
    def from_dict(cls, d):
        return cls(scale=tuple(d["scale"]), rotation=tuple(d["rotation"]),
                   translation=tuple(d["translation"]))


@dataclasses.dataclass(frozen=True)
class SynthSpec:
    """Generator parameters; the digest of this spec stamps the manifest."""

    image_size: int = 64
    n_items: int = 16
    views_per_item: int = 3
    texture_families: tuple = TEXTURE_FAMILIES
    context_variation: ContextVariation = dataclasses.field(
        default_factory=ContextVariation)
    test_fraction: float = 0.25
    seed: int = 0

    def __post_init__(self):
        if self.n_items < 2:
            raise ValueError("n_items must be at least 2")
        if self.views_per_item < 1:
            raise ValueError("views_per_item must be at least 1")
        if self.image_size < 16:
            raise ValueError("image_size must be at least 16")
        bad = set(self.texture_families) - set(TEXTURE_FAMILIES)
        if bad or not self.texture_families:
            raise ValueError(f"texture_families must be a non-empty subset of "
                             f"{TEXTURE_FAMILIES}, got {self.texture_families}")
        if not 0.0 <= self.test_fraction < 1.0:
            raise ValueError("test_fraction must be in [0, 1)")

    def to_dict(self):
        d = dataclasses.asdict(self)
        d["texture_families"] = list(self.texture_families)
        d["context_variation"] = self.context_variation.to_dict()
        return d

    @classmethod
    def from_dict(cls, d):
        d = dict(d)
        d["texture_families"] = tuple(d["texture_families"])
        d["context_variation"] = ContextVariation.from_dict(d["context_variation"])
        return cls(**d)

    def digest(self):
        blob = json.dumps(self.to_dict(), sort_keys=True)
        return hashlib.sha256(blob.encode()).hexdigest()


@dataclasses.dataclass(frozen=True)
class Sample:
    id: str
    domain: str   # "A" | "B"
    split: str    # "train" | "test"
    image: str    # path relative to the dataset root
    mask: str     # "" for domain B
    pair_id: str


@dataclasses.dataclass
class DatasetManifest:
    root: Path
    spec_digest: str
    image_size: int
    samples: list

    def domain(self, domain, split=None):
        return [s for s in self.samples
                if s.domain == domain and (split is None or s.split == split)]

    def counts(self):
        out = {}
        for s in self.samples:
            key = f"{s.domain}/{s.split}"
            out[key] = out.get(key, 0) + 1
        return out


# ---- procedural rendering ----

def _draw_texture(family, tex, u, v):
    """Texture color at garment-frame coordinates; returns [..., 3] floats."""
    c1 = np.asarray(tex["color1"])
    c2 = np.asarray(tex["color2"])
    if family == "solid":
        return np.broadcast_to(c1, u.shape + (3,)).copy()
    period = tex["period"]
    phase = tex["phase"]
    if family == "stripes":
        angle = tex["angle"]
        w = u * np.cos(angle) + v * np.sin(angle)
        band = np.floor((w + phase) / period).astype(int) % 2
    elif family == "checks":
        band = (np.floor((u + phase) / period).astype(int)
                + np.floor((v + phase) / period).astype(int)) % 2
    elif family == "dots":
        du = np.mod(u + phase, period) - period / 2.0
        dv = np.mod(v + phase, period) - period / 2.0
        band = (du * du + dv * dv <= tex["dot_radius"] ** 2).astype(int)
    else:
        raise ValueError(f"unknown texture family {family!r}")
    return np.where(band[..., None] == 1, c1, c2)


def _silhouette(u, v, shape):
    """Boolean garment support in the [-1, 1]^2 frame (a boxy top)."""
    torso = (np.abs(u) <= shape["torso_w"]) & (v >= -0.85) & (v <= shape["bottom"])
    drop = np.clip((v + 0.85) / shape["sleeve_len"], 0.0, 1.0)
    sleeve_half = shape["torso_w"] + shape["sleeve_w"] * (1.0 - drop)
    sleeves = ((v >= -0.85) & (v <= -0.85 + shape["sleeve_len"])
               & (np.abs(u) <= sleeve_half))
    neck = ((u / shape["neck_w"]) ** 2
            + ((v + 0.85) / shape["neck_d"]) ** 2) <= 1.0
    return (torso | sleeves) & ~neck


def _frame_grid(size):
    ys, xs = np.mgrid[0:size, 0:size].astype(np.float64)
    return ys + 0.5, xs + 0.5


def _render_catalog(size, item):
    """Catalog image: centered garment on a plain background; floats [0, 1]."""
    ys, xs = _frame_grid(size)
    scale_px = CANONICAL_RADIUS_FRAC * size
    u = (xs - size / 2.0) / scale_px
    v = (ys - size / 2.0) / scale_px
    sil = _silhouette(u, v, item["shape"])
    tex = _draw_texture(item["family"], item["texture"], u, v)
    bg = np.asarray(item["bg_color"])
    return np.where(sil[..., None], tex, bg), sil


def _render_context(size, view):
    """Person context: head, torso, legs over a flat background."""
    ys, xs = _frame_grid(size)
    fy, fx = ys / size, xs / size
    img = np.broadcast_to(np.asarray(view["bg_color"]), (size, size, 3)).copy()
    dx = view["person_dx"]
    head = (fx - (0.5 + dx)) ** 2 + ((fy - 0.16) * 1.1) ** 2 <= 0.085 ** 2
    torso = (np.abs(fx - (0.5 + dx)) <= 0.17) & (fy >= 0.25) & (fy <= 0.64)
    legs = ((np.abs(fx - (0.5 + dx - 0.08)) <= 0.055)
            | (np.abs(fx - (0.5 + dx + 0.08)) <= 0.055)) & (fy > 0.64) & (fy <= 0.96)
    person = head | torso | legs
    img[person] = np.asarray(view["person_color"])
    return img


def _render_worn(size, item, view):
    """Worn image and its exact mask: warped garment over the context."""
    ctx = _render_context(size, view)
    ys, xs = _frame_grid(size)
    cy = size * (0.5 + view["translation"][1])
    cx = size * (0.5 + view["translation"][0])
    scale_px = view["scale"] * CANONICAL_RADIUS_FRAC * size
    th = np.deg2rad(view["rotation_deg"])
    dy, dx = ys - cy, xs - cx
    u = (np.cos(th) * dx + np.sin(th) * dy) / scale_px
    v = (-np.sin(th) * dx + np.cos(th) * dy) / scale_px
    sil = _silhouette(u, v, item["shape"])
    tex = _draw_texture(item["family"], item["texture"], u, v)
    img = np.where(sil[..., None], tex, ctx)
    return img, sil


def _distinct_colors(rng):
    c1 = rng.uniform(0.25, 1.0, 3)
    c2 = rng.uniform(0.0, 0.75, 3)
    while np.linalg.norm(c1 - c2) < 0.4:
        c2 = rng.uniform(0.0, 0.75, 3)
    return c1, c2


def _draw_item_params(spec, item_rng, view_rngs):
    """All randomness for one item, recorded for the parameter log."""
    family = spec.texture_families[item_rng.integers(len(spec.texture_families))]
    c1, c2 = _distinct_colors(item_rng)
    texture = {"color1": c1.tolist(), "color2": c2.tolist(),
               "period": float(item_rng.uniform(0.35, 0.7)),
               "phase": float(item_rng.uniform(0.0, 1.0)),
               "angle": float(item_rng.uniform(0.0, np.pi)),
               "dot_radius": float(item_rng.uniform(0.08, 0.16))}
    shape = {"torso_w": float(item_rng.uniform(0.38, 0.55)),
             "bottom": float(item_rng.uniform(0.72, 1.0)),
             "sleeve_len": float(item_rng.uniform(0.3, 0.9)),
             "sleeve_w": float(item_rng.uniform(0.18, 0.35)),
             "neck_w": float(item_rng.uniform(0.14, 0.26)),
             "neck_d": float(item_rng.uniform(0.1, 0.2))}
    bg = float(item_rng.uniform(0.85, 0.95))
    views = []
    cv = spec.context_variation
    for vr in view_rngs:
        person = vr.uniform(0.15, 0.45, 3)
        views.append({
            "scale": float(vr.uniform(*cv.scale)),
            "rotation_deg": float(vr.uniform(*cv.rotation)),
            "translation": [float(vr.uniform(*cv.translation)),
                            float(vr.uniform(*cv.translation))],
            "bg_color": vr.uniform(0.45, 0.9, 3).tolist(),
            "person_color": person.tolist(),
            "person_dx": float(vr.uniform(-0.03, 0.03)),
        })
    return {"family": family, "texture": texture, "shape": shape,
            "bg_color": [bg, bg, bg], "views": views}


def _to_png(img01):
    return np.rint(np.clip(img01, 0.0, 1.0) * 255.0).astype(np.uint8)


def _save_png(path, arr, mode):
    Image.fromarray(arr, mode).save(path, format="PNG")


def render_item(spec, item_params):
    """Deterministic re-rendering from logged parameters (test oracle hook)."""
    catalog, _ = _render_catalog(spec.image_size, item_params)
    worn = [_render_worn(spec.image_size, item_params, v)
            for v in item_params["views"]]
    return catalog, worn


def generate(spec, out_dir):
    """Write a full two-domain dataset; returns the loaded manifest."""
    root = Path(out_dir)
    for sub in ("domainA", "domainA_masks", "domainB"):
        (root / sub).mkdir(parents=True, exist_ok=True)

    children = np.random.SeedSequence(spec.seed).spawn(spec.n_items)
    n_test = int(round(spec.n_items * spec.test_fraction))
    rows = []
    params_log = {}
    for idx in range(spec.n_items):
        streams = children[idx].spawn(spec.views_per_item + 1)
        item_rng = np.random.default_rng(streams[0])
        view_rngs = [np.random.default_rng(s) for s in streams[1:]]
        item = _draw_item_params(spec, item_rng, view_rngs)
        pair_id = f"item{idx:04d}"
        params_log[pair_id] = item
        split = "test" if idx >= spec.n_items - n_test else "train"

        catalog, _ = _render_catalog(spec.image_size, item)
        b_rel = f"domainB/{pair_id}_cat.png"
        _save_png(root / b_rel, _to_png(catalog), "RGB")
        rows.append(Sample(f"{pair_id}_cat", "B", split, b_rel, "", pair_id))

        for view_idx, view in enumerate(item["views"]):
            worn, sil = _render_worn(spec.image_size, item, view)
            if not sil.any():
                raise AssertionError(f"{pair_id} view {view_idx}: empty garment mask")
            a_rel = f"domainA/{pair_id}_view{view_idx}.png"
            m_rel = f"domainA_masks/{pair_id}_view{view_idx}.png"
            _save_png(root / a_rel, _to_png(worn), "RGB")
            _save_png(root / m_rel, (sil * np.uint8(255)), "L")
            rows.append(Sample(f"{pair_id}_view{view_idx}", "A", split,
                               a_rel, m_rel, pair_id))

    digest = spec.digest()
    with open(root / PARAMS_NAME, "w") as fh:
        json.dump({"spec": spec.to_dict(), "spec_digest": digest,
                   "items": params_log}, fh, indent=1, sort_keys=True)
    with open(root / MANIFEST_NAME, "w") as fh:
        fh.write("# shapeswap dataset manifest v1\n")
        fh.write(f"# spec_digest={digest}\n")
        fh.write(f"# image_size={spec.image_size}\n")
        fh.write("id\tdomain\tsplit\timage\tmask\tpair_id\n")
        for s in rows:
            fh.write(f"{s.id}\t{s.domain}\t{s.split}\t{s.image}\t{s.mask}\t{s.pair_id}\n")
    return load(root / MANIFEST_NAME)


# ---- loading ----

def _load_image(path):
    arr = np.asarray(Image.open(path).convert("RGB"), dtype=np.float64)
    return arr / 127.5 - 1.0


def _load_mask(path):
    arr = np.asarray(Image.open(path).convert("L"))
    bad = ~np.isin(arr, (0, 255))
    if bad.any():
        raise ValueError(f"{path}: corrupt mask (non-binary value "
                         f"{int(arr[bad][0])})")
    return (arr == 255).astype(np.float64)


def load(manifest_path):
    """Parse and validate a manifest; file references must resolve."""
    path = Path(manifest_path)
    if path.is_dir():
        path = path / MANIFEST_NAME
    root = path.parent
    meta = {}
    rows = []
    header = None
    with open(path) as fh:
        for line in fh:
            line = line.rstrip("\n")
            if not line:
                continue
            if line.startswith("#"):
                if "=" in line:
                    k, v = line[1:].strip().split("=", 1)
                    meta[k.strip()] = v.strip()
                continue
            if header is None:
                header = line.split("\t")
                if header != ["id", "domain", "split", "image", "mask", "pair_id"]:
                    raise ValueError(f"{path}: unexpected manifest columns {header}")
                continue
            parts = line.split("\t")
            if len(parts) != 6:
                raise ValueError(f"{path}: malformed row {line!r}")
            rows.append(Sample(*parts))
    if header is None or not rows:
        raise ValueError(f"{path}: empty manifest")

    ids = [s.id for s in rows]
    if len(ids) != len(set(ids)):
        raise ValueError(f"{path}: duplicate sample ids")
    b_by_pair = {}
    for s in rows:
        if s.domain not in ("A", "B"):
            raise ValueError(f"{path}: sample {s.id} has unknown domain {s.domain!r}")
        if s.split not in ("train", "test"):
            raise ValueError(f"{path}: sample {s.id} has unknown split {s.split!r}")
        if not (root / s.image).is_file():
            raise ValueError(f"{path}: missing image file {s.image}")
        if s.domain == "B":
            if s.pair_id in b_by_pair:
                raise ValueError(f"{path}: pair id {s.pair_id} has two catalog samples")
            b_by_pair[s.pair_id] = s
    for s in rows:
        if s.domain == "A":
            if not s.mask:
                raise ValueError(f"{path}: worn sample {s.id} lacks a mask")
            if not (root / s.mask).is_file():
                raise ValueError(f"{path}: missing mask file {s.mask}")
            if s.pair_id not in b_by_pair:
                raise ValueError(f"{path}: sample {s.id} pair id {s.pair_id} "
                                 "does not resolve to a catalog sample")
    return DatasetManifest(root=root, spec_digest=meta.get("spec_digest", ""),
                           image_size=int(meta.get("image_size", 0)), samples=rows)


@dataclasses.dataclass
class DataStore:
    """In-memory arrays for one manifest (images in [-1, 1], masks binary)."""

    x_a: np.ndarray
    m_a: np.ndarray
    ids_a: list
    pair_a: list
    split_a: list
    x_b: np.ndarray
    ids_b: list
    pair_b: list
    split_b: list

    def subset(self, split):
        keep_a = [i for i, s in enumerate(self.split_a) if s == split]
        keep_b = [i for i, s in enumerate(self.split_b) if s == split]
        return DataStore(
            self.x_a[keep_a], self.m_a[keep_a],
            [self.ids_a[i] for i in keep_a], [self.pair_a[i] for i in keep_a],
            [split] * len(keep_a),
            self.x_b[keep_b], [self.ids_b[i] for i in keep_b],
            [self.pair_b[i] for i in keep_b], [split] * len(keep_b))

    @property
    def n_a(self):
        return self.x_a.shape[0]

    @property
    def n_b(self):
        return self.x_b.shape[0]


def load_arrays(manifest):
    """Materialize every sample of a manifest into a DataStore."""
    a_rows = manifest.domain("A")
    b_rows = manifest.domain("B")
    x_a = np.stack([_load_image(manifest.root / s.image) for s in a_rows])
    m_a = np.stack([_load_mask(manifest.root / s.mask) for s in a_rows])
    x_b = np.stack([_load_image(manifest.root / s.image) for s in b_rows])
    x_a = np.ascontiguousarray(x_a.transpose(0, 3, 1, 2))
    x_b = np.ascontiguousarray(x_b.transpose(0, 3, 1, 2))
    m_a = m_a[:, None, :, :]
    store = DataStore(
        x_a, m_a, [s.id for s in a_rows], [s.pair_id for s in a_rows],
        [s.split for s in a_rows],
        x_b, [s.id for s in b_rows], [s.pair_id for s in b_rows],
        [s.split for s in b_rows])
    contracts.check_image_batch(store.x_a, "domain A images")
    contracts.check_mask_batch(store.m_a, "domain A masks")
    contracts.check_image_batch(store.x_b, "domain B images")
    return store


@dataclasses.dataclass(frozen=True)
class UnpairedBatch:
    """A training batch; deliberately carries no pairing information."""

    x_a: np.ndarray
    m_a: np.ndarray
    x_b: np.ndarray


def sample_unpaired(store, batch, seed):
    """Independent uniform draws from each domain; pure in (store, seed)."""
    if store.n_a < 1 or store.n_b < 1:
        raise ValueError("store has an empty domain")
    rng = np.random.default_rng(seed)
    idx_a = rng.integers(0, store.n_a, size=batch)
    idx_b = rng.integers(0, store.n_b, size=batch)
    return UnpairedBatch(x_a=store.x_a[idx_a].copy(), m_a=store.m_a[idx_a].copy(),
                         x_b=store.x_b[idx_b].copy())
