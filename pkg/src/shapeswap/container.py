"""Single-file npz container used for checkpoints and retrieval indexes.

Layout: one named array per entry plus a ``__meta__`` JSON string holding
``format_version``, a ``kind`` tag and arbitrary structured metadata.
Arrays round-trip bit-exactly (npz stores raw little-endian buffers).
"""

import hashlib
import json

import numpy as np

from . import CHECKPOINT_FORMAT_VERSION

_META_KEY = "__meta__"


def array_digest(arrays):
    """Order-independent sha256 over array names, dtypes, shapes and bytes."""
    h = hashlib.sha256()
    for name in sorted(arrays):
        a = np.ascontiguousarray(arrays[name])
        h.update(name.encode())
        h.update(str(a.dtype).encode())
        h.update(str(a.shape).encode())
        h.update(a.tobytes())
    return h.hexdigest()


def save_container(path, arrays, meta):
    """Write arrays + metadata to ``path`` (.npz)."""
    if _META_KEY in arrays:
        raise ValueError(f"array name {_META_KEY!r} is reserved")
    payload = dict(meta)
    payload.setdefault("format_version", CHECKPOINT_FORMAT_VERSION)
    payload["digest"] = array_digest(arrays)
    blob = np.asarray(json.dumps(payload, sort_keys=True))
    np.savez(path, **{_META_KEY: blob}, **arrays)


def load_container(path):
    """Read a container; returns (arrays dict, meta dict)."""
    with np.load(path, allow_pickle=False) as z:
        if _META_KEY not in z:
            raise ValueError(f"{path}: not a container file (missing metadata entry)")
        meta = json.loads(str(z[_META_KEY][()]))
        arrays = {k: z[k] for k in z.files if k != _META_KEY}
    version = meta.get("format_version")
    if version != CHECKPOINT_FORMAT_VERSION:
        raise ValueError(
            f"{path}: format version {version!r} not supported "
            f"(expected {CHECKPOINT_FORMAT_VERSION})"
        )
    digest = meta.get("digest")
    if digest is not None and digest != array_digest(arrays):
        raise ValueError(f"{path}: array digest mismatch, file is corrupt")
    return arrays, meta
