"""Runtime validation of the array contracts shared across the package.

Images travel as float arrays shaped [batch, 3, height, width] with values
in [-1, 1]; masks are single-channel binary arrays aligned with an image
batch.  Every public op validates its inputs with these helpers so contract
violations fail loudly at the boundary instead of corrupting a result three
modules later.
"""

import numpy as np

# slack for round-trips through arithmetic that may overshoot the range
RANGE_TOL = 1e-6


class EmptyMaskError(ValueError):
    """A mask with no foreground pixels where one is required."""


def _as_array(x):
    # accepts plain arrays and autodiff tensors
    data = getattr(x, "data", x)
    return np.asarray(data)


def check_image_batch(x, name="image", channels=3):
    """Validate an image batch; returns the underlying numpy array."""
    a = _as_array(x)
    if a.ndim != 4:
        raise ValueError(f"{name}: expected 4 axes [batch, c, h, w], got shape {a.shape}")
    if a.shape[1] != channels:
        raise ValueError(f"{name}: expected {channels} channels, got {a.shape[1]}")
    if a.shape[0] < 1 or a.shape[2] < 1 or a.shape[3] < 1:
        raise ValueError(f"{name}: degenerate shape {a.shape}")
    if not np.issubdtype(a.dtype, np.floating):
        raise ValueError(f"{name}: expected float dtype, got {a.dtype}")
    if not np.all(np.isfinite(a)):
        raise ValueError(f"{name}: contains non-finite values")
    peak = float(np.max(np.abs(a))) if a.size else 0.0
    if peak > 1.0 + RANGE_TOL:
        raise ValueError(f"{name}: values out of range [-1, 1] (max |x| = {peak:.6g})")
    return a


def check_mask_batch(m, name="mask", allow_empty=False):
    """Validate a binary mask batch; returns the underlying numpy array."""
    a = _as_array(m)
    if a.ndim != 4:
        raise ValueError(f"{name}: expected 4 axes [batch, 1, h, w], got shape {a.shape}")
    if a.shape[1] != 1:
        raise ValueError(f"{name}: expected a single channel, got {a.shape[1]}")
    if not np.issubdtype(a.dtype, np.floating):
        raise ValueError(f"{name}: expected float dtype, got {a.dtype}")
    binary = (a == 0.0) | (a == 1.0)
    if not np.all(binary):
        bad = a[~binary].flat[0]
        raise ValueError(f"{name}: not binary (found value {bad!r})")
    if not allow_empty:
        fg = a.reshape(a.shape[0], -1).sum(axis=1)
        if np.any(fg == 0):
            idx = int(np.argmin(fg))
            raise EmptyMaskError(f"{name}: sample {idx} has no foreground pixels")
    return a


def check_aligned(x, m, x_name="image", m_name="mask"):
    """Require matching batch size and spatial extent between image and mask."""
    xa, ma = _as_array(x), _as_array(m)
    if xa.shape[0] != ma.shape[0]:
        raise ValueError(
            f"{m_name}: batch size {ma.shape[0]} does not match {x_name} batch {xa.shape[0]}"
        )
    if xa.shape[2:] != ma.shape[2:]:
        raise ValueError(
            f"{m_name}: spatial shape {ma.shape[2:]} does not match {x_name} {xa.shape[2:]}"
        )


def check_style_codes(s, name="style", dim=None):
    """Validate a [batch, style_dim] code array; returns the numpy array."""
    a = _as_array(s)
    if a.ndim != 2:
        raise ValueError(f"{name}: expected 2 axes [batch, dim], got shape {a.shape}")
    if dim is not None and a.shape[1] != dim:
        raise ValueError(f"{name}: expected dim {dim}, got {a.shape[1]}")
    if not np.all(np.isfinite(a)):
        raise ValueError(f"{name}: contains non-finite values")
    return a
