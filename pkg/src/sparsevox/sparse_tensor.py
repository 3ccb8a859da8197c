"""Batched coordinate-list sparse tensors.

Sites are kept sorted by a packed 64-bit key ``(batch, z, y, x)``; the
sorted key array doubles as the coordinate index (binary search), which
keeps ordering and lookup identical on every platform.
"""

from __future__ import annotations

import json
from dataclasses import dataclass
from pathlib import Path
from typing import Optional, Sequence

import numpy as np

from .sparsify import DEFAULT_RANGE, HuRange, VoxelSet, normalize_hu

_FIELD = 16
_BIAS = 1 << (_FIELD - 1)
COORD_LIMIT = _BIAS  # spatial coords must lie in [-2**15, 2**15)
BATCH_LIMIT = 1 << 15


class DuplicateCoordinate(ValueError):
    pass


def pack_keys(coords: np.ndarray) -> np.ndarray:
    """Pack (b, x, y, z) rows into int64 keys ordered like (b, z, y, x)."""
    c = np.asarray(coords, dtype=np.int64).reshape(-1, 4)
    if c.size:
        if c[:, 1:].min() < -COORD_LIMIT or c[:, 1:].max() >= COORD_LIMIT:
            raise ValueError("spatial coordinate outside the packable range [-32768, 32767]")
        if c[:, 0].min() < 0 or c[:, 0].max() >= BATCH_LIMIT:
            raise ValueError("batch id outside [0, 32767]")
    return (
        (c[:, 0] << 48)
        | ((c[:, 3] + _BIAS) << 32)
        | ((c[:, 2] + _BIAS) << 16)
        | (c[:, 1] + _BIAS)
    )


def offset_key_delta(offsets: np.ndarray) -> np.ndarray:
    """Key increment for spatial offsets (dx, dy, dz); valid while fields do not overflow."""
    o = np.asarray(offsets, dtype=np.int64).reshape(-1, 3)
    return (o[:, 2] << 32) + (o[:, 1] << 16) + o[:, 0]


class SparseTensor:
    """Immutable set of sites with one feature row each.

    Tensors derived with :meth:`with_feats` share coordinates and the kernel
    map cache, so convolutions over the same site set reuse their maps.
    """

    __slots__ = ("coords", "feats", "stride", "keys", "cache")

    def __init__(self, coords, feats, stride: int = 1, *, _keys=None, _cache=None):
        coords = np.ascontiguousarray(coords, dtype=np.int32).reshape(-1, 4)
        feats = np.asarray(feats)
        if feats.ndim == 1:
            feats = feats[:, None]
        if feats.shape[0] != coords.shape[0]:
            raise ValueError(f"{feats.shape[0]} feature rows for {coords.shape[0]} sites")
        if stride < 1:
            raise ValueError("stride must be positive")
        if _keys is None:
            if coords.shape[0] and np.any(coords[:, 1:] % stride):
                raise ValueError(f"coordinates are not multiples of stride {stride}")
            keys = pack_keys(coords)
            order = np.argsort(keys, kind="stable")
            keys = keys[order]
            dup = np.flatnonzero(keys[1:] == keys[:-1])
            if dup.size:
                bad = coords[order[dup[0]]]
                raise DuplicateCoordinate(f"duplicate site (b, x, y, z) = {tuple(int(v) for v in bad)}")
            if not np.array_equal(order, np.arange(order.size)):
                coords = coords[order]
                feats = feats[order]
            _keys = keys
        coords.setflags(write=False)
        _keys.setflags(write=False)
        self.coords = coords
        self.feats = feats
        self.stride = int(stride)
        self.keys = _keys
        self.cache = {} if _cache is None else _cache

    def __len__(self) -> int:
        return int(self.coords.shape[0])

    @property
    def channels(self) -> int:
        return int(self.feats.shape[1])

    @property
    def dtype(self):
        return self.feats.dtype

    def with_feats(self, feats) -> "SparseTensor":
        feats = np.asarray(feats)
        if feats.shape[0] != len(self):
            raise ValueError("feature rows must match site count")
        return SparseTensor(self.coords, feats, self.stride, _keys=self.keys, _cache=self.cache)

    def same_sites(self, other: "SparseTensor") -> bool:
        return self.keys is other.keys or np.array_equal(self.keys, other.keys)

    def lookup_keys(self, keys: np.ndarray) -> np.ndarray:
        """Row index for each packed key, -1 where absent."""
        keys = np.asarray(keys, dtype=np.int64)
        if len(self) == 0:
            return np.full(keys.shape, -1, dtype=np.int64)
        pos = np.searchsorted(self.keys, keys)
        pos_c = np.minimum(pos, len(self) - 1)
        return np.where(self.keys[pos_c] == keys, pos_c, -1)

    def lookup(self, coords) -> np.ndarray:
        return self.lookup_keys(pack_keys(coords))

    def batch_ids(self) -> np.ndarray:
        return self.coords[:, 0]

    def batch_size(self) -> int:
        return int(self.coords[:, 0].max()) + 1 if len(self) else 0

    def __repr__(self):
        return f"SparseTensor(sites={len(self)}, channels={self.channels}, stride={self.stride})"


def from_voxels(voxels: VoxelSet, batch_id: int = 0, hu_range: HuRange = HuRange(*DEFAULT_RANGE),
                dtype=np.float32) -> SparseTensor:
    """Stride-1 tensor with one normalized-HU channel.

    Site order matches ``voxels`` (both are z-major), so ``voxels.labels``
    stays aligned with the tensor rows.
    """
    n = len(voxels)
    coords = np.empty((n, 4), dtype=np.int32)
    coords[:, 0] = batch_id
    coords[:, 1:] = voxels.coords
    return SparseTensor(coords, normalize_hu(voxels.hu, hu_range, dtype)[:, None], 1)


@dataclass(frozen=True)
class QuantizationPolicy:
    factor: int = 3
    feature_rule: str = "mean"  # mean | first
    label_rule: str = "any_signal"  # any_signal | majority

    def __post_init__(self):
        if self.factor < 1:
            raise ValueError("quantization factor must be >= 1")
        if self.feature_rule not in ("mean", "first"):
            raise ValueError(f"unknown feature_rule {self.feature_rule!r}")
        if self.label_rule not in ("any_signal", "majority"):
            raise ValueError(f"unknown label_rule {self.label_rule!r}")


def quantize(t: SparseTensor, p: QuantizationPolicy = QuantizationPolicy(), labels=None) -> tuple:
    """Merge sites into ``factor``-sized cells anchored at floor(c / factor) * factor.

    ``any_signal`` yields binary labels (1 if any constituent is nonzero);
    ``majority`` keeps class ids, ties going to the lower id.
    """
    f = p.factor
    if t.stride not in (1, f):
        raise ValueError(f"cannot quantize a stride-{t.stride} tensor by {f}")
    cells = t.coords.copy()
    cells[:, 1:] = np.floor_divide(cells[:, 1:], f) * f
    keys = pack_keys(cells)
    # unique() returns cells in key order and the first constituent of each
    uniq, first, inverse = np.unique(keys, return_index=True, return_inverse=True)
    m = uniq.size
    out_coords = cells[first]
    if p.feature_rule == "mean":
        counts = np.bincount(inverse, minlength=m).astype(np.float64)
        acc = np.zeros((m, t.channels), dtype=np.float64)
        np.add.at(acc, inverse, t.feats.astype(np.float64))
        feats = (acc / counts[:, None]).astype(t.feats.dtype)
    else:
        feats = t.feats[first]
    out = SparseTensor(out_coords, feats, f, _keys=uniq)

    qlabels = None
    if labels is not None:
        labels = np.asarray(labels)
        if labels.shape[0] != len(t):
            raise ValueError("labels must align with tensor sites")
        if p.label_rule == "any_signal":
            qlabels = np.zeros(m, dtype=np.uint8)
            np.maximum.at(qlabels, inverse, (labels != 0).astype(np.uint8))
        else:
            n_cls = int(labels.max()) + 1 if labels.size else 1
            votes = np.zeros((m, n_cls), dtype=np.int64)
            np.add.at(votes, (inverse, labels.astype(np.int64)), 1)
            qlabels = votes.argmax(axis=1).astype(np.uint8)
    return out, qlabels


def upscale_coords(coords, factor: int) -> tuple:
    """Cell anchors at stride ``factor`` -> inclusive full-resolution ranges [c, c + factor - 1]."""
    lo = np.asarray(coords, dtype=np.int64)
    return lo, lo + (factor - 1)


def concat_batch(tensors: Sequence[SparseTensor]) -> SparseTensor:
    """Stack single-sample tensors, assigning batch ids 0..k-1 in order."""
    if not tensors:
        raise ValueError("nothing to concatenate")
    stride = tensors[0].stride
    parts = []
    for b, t in enumerate(tensors):
        if t.stride != stride:
            raise ValueError("all tensors must share a stride")
        c = t.coords.copy()
        c[:, 0] = b
        parts.append(c)
    feats = np.concatenate([t.feats for t in tensors], axis=0)
    return SparseTensor(np.concatenate(parts, axis=0), feats, stride)


# ---------------------------------------------------------------- serialization


def save_sparse(t: SparseTensor, path, labels: Optional[np.ndarray] = None) -> None:
    """JSON header plus little-endian payloads: ``*_coords.raw`` int32, ``*_feats.raw`` float32."""
    path = Path(path)
    stem = path.with_suffix("")
    header = {
        "sites": len(t),
        "channels": t.channels,
        "stride": t.stride,
        "coords": stem.name + "_coords.raw",
        "feats": stem.name + "_feats.raw",
        "byte_order": "little",
    }
    stem.with_name(header["coords"]).write_bytes(t.coords.astype("<i4").tobytes())
    stem.with_name(header["feats"]).write_bytes(t.feats.astype("<f4").tobytes())
    if labels is not None:
        header["labels"] = stem.name + "_labels.raw"
        stem.with_name(header["labels"]).write_bytes(np.asarray(labels, dtype=np.uint8).tobytes())
    path.with_suffix(".json").write_text(json.dumps(header, indent=2))


def load_sparse(path) -> tuple:
    path = Path(path).with_suffix(".json")
    header = json.loads(path.read_text())
    n, c = header["sites"], header["channels"]
    coords = np.frombuffer(path.with_name(header["coords"]).read_bytes(), dtype="<i4").reshape(n, 4)
    feats = np.frombuffer(path.with_name(header["feats"]).read_bytes(), dtype="<f4").reshape(n, c)
    labels = None
    if "labels" in header:
        labels = np.frombuffer(path.with_name(header["labels"]).read_bytes(), dtype=np.uint8).copy()
    return SparseTensor(coords.astype(np.int32), feats.astype(np.float32), header["stride"]), labels
