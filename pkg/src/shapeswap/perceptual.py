"""Fixed feature extractors backing the perceptual loss and metric.

The default extractor is an untrained convolutional stack with a recorded
seed: deterministic, dependency-free, and held fixed during optimization.
Externally trained weights can be loaded from a checkpoint container to
stand in for a classifier backbone.  Extractors expose ``n_layers``, a
``descriptor`` string identifying the exact weights, and a call returning
one feature array per extraction point.
"""

import hashlib

import numpy as np

from . import autodiff as ad
from . import container
from .layers import he_normal


class IdentityFeatureExtractor:
    """Single-layer extractor returning the raw pixels.

    Reduces the perceptual loss to pixel MSE plus a pixel-Gram term, which
    is what the hand oracles in the test suite compute.
    """

    n_layers = 1
    descriptor = "identity"

    def __call__(self, x):
        return [ad.as_tensor(x)]


class RandomConvFeatureExtractor:
    """Untrained conv stack; features tap each stage's activation.

    Stages are conv(3x3, pad 1) + relu with 2x average pooling between
    stages, so feature maps cover five spatial scales by default.  Weights
    are constants: gradients flow through the probed image only.
    """

    def __init__(self, seed=0, base_channels=8, n_stages=5, dtype="float64"):
        if n_stages < 1:
            raise ValueError("n_stages must be positive")
        self.seed = int(seed)
        self.base_channels = int(base_channels)
        dt = np.dtype(dtype)
        rng = np.random.default_rng(self.seed)
        self.weights = []
        self.biases = []
        c_in = 3
        c_out = base_channels
        for _ in range(n_stages):
            fan_in = c_in * 9
            self.weights.append(he_normal(rng, (c_out, c_in, 3, 3), fan_in, dt))
            self.biases.append(np.zeros(c_out, dtype=dt))
            c_in, c_out = c_out, min(2 * c_out, 8 * base_channels)
        self._descriptor = (f"random-conv(seed={self.seed}, base={base_channels}, "
                            f"stages={n_stages}, digest={self.digest()[:8]})")

    @classmethod
    def from_arrays(cls, weights, biases, descriptor):
        """Build from externally trained weights (already validated)."""
        obj = cls.__new__(cls)
        obj.seed = None
        obj.base_channels = None
        obj.weights = [np.asarray(w) for w in weights]
        obj.biases = [np.asarray(b) for b in biases]
        for i, (w, b) in enumerate(zip(obj.weights, obj.biases)):
            if w.ndim != 4 or w.shape[2] != w.shape[3] or w.shape[2] % 2 == 0:
                raise ValueError(f"stage {i}: weights must be [out, in, k, k] with odd k")
            if b.shape != (w.shape[0],):
                raise ValueError(f"stage {i}: bias length {b.shape} != {w.shape[0]} filters")
            expect = 3 if i == 0 else obj.weights[i - 1].shape[0]
            if w.shape[1] != expect:
                raise ValueError(f"stage {i}: expected {expect} input channels, got {w.shape[1]}")
        if "digest=" in descriptor:
            obj._descriptor = descriptor
        else:
            obj._descriptor = f"{descriptor}(digest={obj.digest()[:8]})"
        return obj

    @property
    def n_layers(self):
        return len(self.weights)

    @property
    def descriptor(self):
        return self._descriptor

    def digest(self):
        h = hashlib.sha256()
        for w, b in zip(self.weights, self.biases):
            h.update(np.ascontiguousarray(w).tobytes())
            h.update(np.ascontiguousarray(b).tobytes())
        return h.hexdigest()

    def __call__(self, x):
        h = ad.as_tensor(x)
        if h.ndim != 4 or h.shape[1] != 3:
            raise ValueError(f"expected [n, 3, h, w] images, got shape {h.shape}")
        min_size = 1 << (self.n_layers - 1)
        if h.shape[2] % min_size or h.shape[3] % min_size:
            raise ValueError(
                f"spatial size {h.shape[2:]} not divisible by {min_size} "
                f"({self.n_layers} extraction stages)")
        feats = []
        for i, (w, b) in enumerate(zip(self.weights, self.biases)):
            pad = w.shape[2] // 2
            h = ad.relu(ad.conv2d(h, ad.constant(w), ad.constant(b), 1, pad))
            feats.append(h)
            if i < self.n_layers - 1:
                h = ad.avg_pool2x2(h)
        return feats

    def save(self, path):
        arrays = {}
        for i, (w, b) in enumerate(zip(self.weights, self.biases)):
            arrays[f"stage{i}.w"] = w
            arrays[f"stage{i}.b"] = b
        container.save_container(path, arrays, {"kind": "feature_extractor",
                                                "descriptor": self.descriptor})

    @classmethod
    def from_npz(cls, path):
        arrays, meta = container.load_container(path)
        if meta.get("kind") != "feature_extractor":
            raise ValueError(f"{path}: container kind {meta.get('kind')!r} "
                             "is not a feature extractor")
        n = len(arrays) // 2
        names = {f"stage{i}.{p}" for i in range(n) for p in ("w", "b")}
        if names != set(arrays):
            raise ValueError(f"{path}: unexpected array names {sorted(set(arrays) - names)}")
        weights = [arrays[f"stage{i}.w"] for i in range(n)]
        biases = [arrays[f"stage{i}.b"] for i in range(n)]
        return cls.from_arrays(weights, biases, meta.get("descriptor", "external"))
