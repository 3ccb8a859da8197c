"""Regions of interest from quantized predictions, margin expansion, cropping, crop scoring."""

from __future__ import annotations

import json
from dataclasses import dataclass
from typing import Iterable, Sequence

import numpy as np

from .volume_io import HU_MIN, DenseVolume


class EmptyRoiError(ValueError):
    pass


@dataclass
class RoiSpec:
    """Inclusive full-resolution bounds: one (x0, x1, y0, y1) rectangle per slice in z_range."""

    z_range: tuple
    rects: dict
    dims: tuple
    margin: int = 0
    factor: int = 1

    def __post_init__(self):
        z0, z1 = (int(v) for v in self.z_range)
        if z0 > z1:
            raise ValueError(f"empty z range {self.z_range}")
        self.z_range = (z0, z1)
        self.dims = tuple(int(d) for d in self.dims)
        self.rects = {int(z): tuple(int(v) for v in r) for z, r in self.rects.items()}
        for z in range(z0, z1 + 1):
            if z not in self.rects:
                raise ValueError(f"slice {z} in z range has no rectangle")
            x0, x1, y0, y1 = self.rects[z]
            if x0 > x1 or y0 > y1:
                raise ValueError(f"degenerate rectangle {self.rects[z]} at slice {z}")

    def rect_array(self) -> np.ndarray:
        """(n_slices, 4) array of rectangles for z0..z1."""
        z0, z1 = self.z_range
        return np.array([self.rects[z] for z in range(z0, z1 + 1)], dtype=np.int64).reshape(-1, 4)

    def to_json(self) -> str:
        return json.dumps({
            "z_range": list(self.z_range),
            "rects": {str(z): list(r) for z, r in sorted(self.rects.items())},
            "margin": self.margin,
            "factor": self.factor,
            "dims": list(self.dims),
        }, indent=1)

    @classmethod
    def from_json(cls, text: str) -> "RoiSpec":
        d = json.loads(text)
        return cls(tuple(d["z_range"]), d["rects"], tuple(d["dims"]), d.get("margin", 0), d.get("factor", 1))


def full_volume_roi(dims) -> RoiSpec:
    nx, ny, nz = dims
    return RoiSpec((0, nz - 1), {z: (0, nx - 1, 0, ny - 1) for z in range(nz)}, dims)


def extract_roi(coords, pred, factor: int, dims, margin: int = 0) -> RoiSpec:
    """Per-slice bounding rectangles of predicted-signal cells, upscaled to full resolution.

    ``coords`` are cell anchors (x, y, z) or (b, x, y, z) at stride ``factor``.
    Slices inside the z range without any predicted cell get the global
    bounding rectangle.
    """
    coords = np.asarray(coords, dtype=np.int64)
    if coords.ndim == 2 and coords.shape[1] == 4:
        coords = coords[:, 1:]
    coords = coords.reshape(-1, 3)
    pred = np.asarray(pred)
    if pred.shape[0] != coords.shape[0]:
        raise ValueError("one prediction per cell required")
    dims = tuple(int(d) for d in dims)
    hi_lim = np.asarray(dims) - 1
    cells = coords[pred != 0]
    # cells lying wholly outside the volume cover no voxel
    cells = cells[np.all((cells <= hi_lim) & (cells + factor - 1 >= 0), axis=1)]
    if cells.size == 0:
        raise EmptyRoiError("no predicted signal: cannot derive a region of interest")
    lo = np.clip(cells, 0, hi_lim)
    hi = np.clip(cells + factor - 1, 0, hi_lim)
    z0, z1 = int(lo[:, 2].min()), int(hi[:, 2].max())
    n = z1 - z0 + 1

    big = np.iinfo(np.int64).max
    xmin = np.full(n, big)
    ymin = np.full(n, big)
    xmax = np.full(n, -1)
    ymax = np.full(n, -1)
    for dz in range(factor):
        z = lo[:, 2] + dz
        ok = z <= hi[:, 2]
        zi = z[ok] - z0
        np.minimum.at(xmin, zi, lo[ok, 0])
        np.minimum.at(ymin, zi, lo[ok, 1])
        np.maximum.at(xmax, zi, hi[ok, 0])
        np.maximum.at(ymax, zi, hi[ok, 1])
    glob = (int(lo[:, 0].min()), int(hi[:, 0].max()), int(lo[:, 1].min()), int(hi[:, 1].max()))
    rects = {}
    for i in range(n):
        rects[z0 + i] = glob if xmax[i] < 0 else (int(xmin[i]), int(xmax[i]), int(ymin[i]), int(ymax[i]))
    roi = RoiSpec((z0, z1), rects, dims, 0, factor)
    return expand_roi(roi, margin) if margin else roi


def expand_roi(roi: RoiSpec, margin: int) -> RoiSpec:
    """Grow every bound by ``margin`` voxels (x, y) and slices (z), clamped to the volume.

    Slices added below/above the z range take the rectangle of the nearest
    original end slice, grown by the same margin.
    """
    if margin < 0:
        raise ValueError("margin must be non-negative")
    nx, ny, nz = roi.dims
    z0, z1 = roi.z_range
    nz0, nz1 = max(0, z0 - margin), min(nz - 1, z1 + margin)
    rects = {}
    for z in range(nz0, nz1 + 1):
        x0, x1, y0, y1 = roi.rects[min(max(z, z0), z1)]
        rects[z] = (max(0, x0 - margin), min(nx - 1, x1 + margin), max(0, y0 - margin), min(ny - 1, y1 + margin))
    return RoiSpec((nz0, nz1), rects, roi.dims, roi.margin + margin, roi.factor)


def roi_mask(roi: RoiSpec, dims=None) -> np.ndarray:
    dims = tuple(dims or roi.dims)
    mask = np.zeros(dims, dtype=bool)
    z0, z1 = roi.z_range
    for z in range(z0, min(z1, dims[2] - 1) + 1):
        x0, x1, y0, y1 = roi.rects[z]
        mask[x0:x1 + 1, y0:y1 + 1, z] = True
    return mask


def crop(v: DenseVolume, roi: RoiSpec, sentinel: int = HU_MIN) -> DenseVolume:
    """Keep slices in the z range and, per slice, its rectangle; the rest becomes ``sentinel``.

    The output is trimmed to the union of rectangles; ``offset`` records where
    its [0, 0, 0] voxel sits in the original grid.
    """
    if tuple(roi.dims) != v.dims:
        raise ValueError(f"ROI dims {roi.dims} do not match volume dims {v.dims}")
    r = roi.rect_array()
    z0, z1 = roi.z_range
    X0, X1, Y0, Y1 = int(r[:, 0].min()), int(r[:, 1].max()), int(r[:, 2].min()), int(r[:, 3].max())
    shape = (X1 - X0 + 1, Y1 - Y0 + 1, z1 - z0 + 1)
    hu = np.full(shape, sentinel, dtype=np.int16)
    lab = np.zeros(shape, dtype=np.uint8) if v.labels is not None else None
    for i, (x0, x1, y0, y1) in enumerate(r):
        sl = (slice(x0 - X0, x1 - X0 + 1), slice(y0 - Y0, y1 - Y0 + 1), i)
        src = (slice(x0, x1 + 1), slice(y0, y1 + 1), z0 + i)
        hu[sl] = v.intensities[src]
        if lab is not None:
            lab[sl] = v.labels[src]
    offset = tuple(o + d for o, d in zip(v.offset, (X0, Y0, z0)))
    return DenseVolume(hu, v.spacing, lab, offset)


@dataclass
class CropStats:
    margin: int
    signal_kept_2d: float
    background_removed_2d: float
    signal_kept_slices: float
    background_removed_slices: float

    def __post_init__(self):
        for name in ("signal_kept_2d", "background_removed_2d", "signal_kept_slices", "background_removed_slices"):
            val = getattr(self, name)
            if not (np.isnan(val) or 0.0 <= val <= 1.0):
                raise ValueError(f"{name}={val} outside [0, 1]")


def _frac(num: int, den: int) -> float:
    return num / den if den else float("nan")


def crop_stats(roi: RoiSpec, truth, margins: Iterable[int] = range(11)) -> list:
    """Signal kept / background removed for ``roi`` grown by each margin.

    Voxel basis counts voxels inside the grown ROI; slice basis counts whole
    slices (a slice is signal if it holds any truth-signal voxel). Fractions
    with an empty denominator are NaN.
    """
    truth = np.asarray(truth) != 0
    if truth.shape != tuple(roi.dims):
        raise ValueError("truth labels must be at full resolution with the ROI's dims")
    n_sig = int(truth.sum())
    n_bkg = truth.size - n_sig
    sig_slices = truth.any(axis=(0, 1))
    n_sig_sl = int(sig_slices.sum())
    n_bkg_sl = sig_slices.size - n_sig_sl
    out = []
    for m in margins:
        grown = expand_roi(roi, m)
        mask = roi_mask(grown)
        in_z = np.zeros(truth.shape[2], dtype=bool)
        in_z[grown.z_range[0]:grown.z_range[1] + 1] = True
        out.append(CropStats(
            int(m),
            _frac(int((truth & mask).sum()), n_sig),
            _frac(int((~truth & ~mask).sum()), n_bkg),
            _frac(int((sig_slices & in_z).sum()), n_sig_sl),
            _frac(int((~sig_slices & ~in_z).sum()), n_bkg_sl),
        ))
    return out


def average_crop_stats(per_case: Sequence[Sequence[CropStats]]) -> list:
    """Mean over cases per margin, ignoring NaN entries."""
    if not per_case:
        return []
    rows = []
    for stats in zip(*per_case):
        vals = np.array([[s.signal_kept_2d, s.background_removed_2d, s.signal_kept_slices,
                          s.background_removed_slices] for s in stats])
        with np.errstate(invalid="ignore"):
            mean = [float(np.nanmean(col)) if np.isfinite(col).any() else float("nan") for col in vals.T]
        rows.append(CropStats(stats[0].margin, *mean))
    return rows


TABLE3_COLUMNS = ["margin", "signal_kept_2d", "background_removed_2d", "signal_kept_slices",
                  "background_removed_slices"]
