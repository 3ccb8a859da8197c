"""HU-range sparsification and budget-constrained range search.

Histograms are kept at 1 HU resolution so that counts for any inclusive
range are exact; ``step`` only controls which endpoints the optimizer may
choose (multiples of ``step``, plus the two domain extremes).
"""

from __future__ import annotations

import json
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass
from typing import Iterable, Optional, Sequence

import numpy as np
from scipy.stats import binomtest

from .volume_io import HU_MAX, HU_MIN, DenseVolume

DEFAULT_RANGE = (-30, 350)
DEFAULT_STEP = 10


class InfeasibleBudget(ValueError):
    def __init__(self, budget: int, minimal: int):
        self.budget = budget
        self.minimal = minimal
        super().__init__(
            f"no HU range keeps <= {budget} voxels; the smallest achievable count is {minimal}"
        )


@dataclass(frozen=True)
class HuRange:
    lo: int
    hi: int

    def __post_init__(self):
        if self.lo > self.hi:
            raise ValueError(f"empty HU range [{self.lo}, {self.hi}]")

    @classmethod
    def parse(cls, text: str) -> "HuRange":
        lo, hi = text.split(":")
        return cls(int(lo), int(hi))

    def __str__(self):
        return f"{self.lo}:{self.hi}"


@dataclass(frozen=True, eq=False)
class VoxelSet:
    """Voxels surviving a threshold, ordered lexicographically by (z, y, x)."""

    coords: np.ndarray  # (N, 3) int32 x, y, z
    hu: np.ndarray  # (N,) int16
    labels: Optional[np.ndarray]  # (N,) uint8
    dims: tuple

    def __len__(self):
        return int(self.coords.shape[0])


def apply_range(v: DenseVolume, r: HuRange) -> VoxelSet:
    # transpose to (z, y, x) so nonzero() yields z-major order
    keep_t = (v.intensities >= r.lo) & (v.intensities <= r.hi)
    zyx = np.nonzero(keep_t.transpose(2, 1, 0))
    coords = np.stack(zyx[::-1], axis=1).astype(np.int32) if zyx[0].size else np.zeros((0, 3), np.int32)
    x, y, z = coords.T
    hu = v.intensities[x, y, z]
    labels = v.labels[x, y, z] if v.labels is not None else None
    return VoxelSet(coords, hu, labels, v.dims)


@dataclass
class HuHistogram:
    """Per-case, per-HU voxel counts split into signal (label != 0) and background."""

    signal_counts: np.ndarray  # (n_cases, n_values) int64
    background_counts: np.ndarray
    hu_min: int = HU_MIN
    step: int = DEFAULT_STEP

    def __post_init__(self):
        self.signal_counts = np.atleast_2d(np.asarray(self.signal_counts, dtype=np.int64))
        self.background_counts = np.atleast_2d(np.asarray(self.background_counts, dtype=np.int64))
        if self.signal_counts.shape != self.background_counts.shape:
            raise ValueError("signal/background count shapes differ")
        if (self.signal_counts < 0).any() or (self.background_counts < 0).any():
            raise ValueError("histogram counts must be non-negative")

    @property
    def n_values(self) -> int:
        return self.signal_counts.shape[1]

    @property
    def hu_max(self) -> int:
        return self.hu_min + self.n_values - 1

    @property
    def n_cases(self) -> int:
        return self.signal_counts.shape[0]

    @property
    def signal(self) -> np.ndarray:
        return self.signal_counts.sum(axis=0)

    @property
    def background(self) -> np.ndarray:
        return self.background_counts.sum(axis=0)

    def merge(self, other: "HuHistogram") -> "HuHistogram":
        if (self.hu_min, self.n_values) != (other.hu_min, other.n_values):
            raise ValueError("cannot merge histograms over different HU domains")
        return HuHistogram(
            np.vstack([self.signal_counts, other.signal_counts]),
            np.vstack([self.background_counts, other.background_counts]),
            self.hu_min,
            self.step,
        )

    def grid(self) -> np.ndarray:
        """Candidate range endpoints: multiples of ``step`` inside the domain plus its extremes."""
        first = -(-self.hu_min // self.step) * self.step
        pts = np.arange(first, self.hu_max + 1, self.step, dtype=np.int64)
        return np.unique(np.concatenate([[self.hu_min], pts, [self.hu_max]]))

    def to_json(self) -> str:
        return json.dumps({
            "hu_min": self.hu_min,
            "step": self.step,
            "signal_counts": self.signal_counts.tolist(),
            "background_counts": self.background_counts.tolist(),
        })

    @classmethod
    def from_json(cls, text: str) -> "HuHistogram":
        d = json.loads(text)
        return cls(d["signal_counts"], d["background_counts"], d["hu_min"], d["step"])


def _volume_counts(v: DenseVolume) -> tuple:
    if v.labels is None:
        raise ValueError("histogram requires labelled volumes")
    idx = v.intensities.ravel().astype(np.int64) - HU_MIN
    sig = v.labels.ravel() != 0
    n = HU_MAX - HU_MIN + 1
    return (np.bincount(idx[sig], minlength=n), np.bincount(idx[~sig], minlength=n))


def histogram(volumes: Iterable[DenseVolume], step: int = DEFAULT_STEP, threads: int = 1) -> HuHistogram:
    volumes = list(volumes)
    if threads > 1:
        with ThreadPoolExecutor(threads) as pool:
            counts = list(pool.map(_volume_counts, volumes))
    else:
        counts = [_volume_counts(v) for v in volumes]
    n = HU_MAX - HU_MIN + 1
    sig = np.array([c[0] for c in counts], dtype=np.int64).reshape(-1, n)
    bkg = np.array([c[1] for c in counts], dtype=np.int64).reshape(-1, n)
    return HuHistogram(sig, bkg, HU_MIN, step)


@dataclass
class SparsificationStats:
    signal_loss: float
    background_removed: float
    voxels_kept: int
    signal_lost: int = 0
    signal_total: int = 0
    background_removed_count: int = 0
    background_total: int = 0

    def __post_init__(self):
        for name in ("signal_loss", "background_removed"):
            if not 0.0 <= getattr(self, name) <= 1.0:
                raise ValueError(f"{name} outside [0, 1]")

    def intervals(self, confidence: float = 0.95) -> dict:
        """Wilson score intervals for both fractions."""
        return {
            "signal_loss": wilson_interval(self.signal_lost, self.signal_total, confidence),
            "background_removed": wilson_interval(
                self.background_removed_count, self.background_total, confidence
            ),
        }


def wilson_interval(k: int, n: int, confidence: float = 0.95) -> tuple:
    if n == 0:
        return (0.0, 1.0)
    ci = binomtest(int(k), int(n)).proportion_ci(confidence, method="wilson")
    return (float(ci.low), float(ci.high))


def _cum(counts: np.ndarray) -> np.ndarray:
    # cum[..., i] = sum of counts[..., :i]
    c = np.cumsum(counts, axis=-1)
    return np.concatenate([np.zeros(c.shape[:-1] + (1,), dtype=c.dtype), c], axis=-1)


def range_stats(h: HuHistogram, r: HuRange) -> SparsificationStats:
    lo = max(r.lo, h.hu_min) - h.hu_min
    hi = min(r.hi, h.hu_max) - h.hu_min
    sig, bkg = h.signal, h.background
    s_tot, b_tot = int(sig.sum()), int(bkg.sum())
    s_in = int(sig[lo:hi + 1].sum()) if hi >= lo else 0
    b_in = int(bkg[lo:hi + 1].sum()) if hi >= lo else 0
    return SparsificationStats(
        signal_loss=(s_tot - s_in) / s_tot if s_tot else 0.0,
        background_removed=(b_tot - b_in) / b_tot if b_tot else 0.0,
        voxels_kept=s_in + b_in,
        signal_lost=s_tot - s_in,
        signal_total=s_tot,
        background_removed_count=b_tot - b_in,
        background_total=b_tot,
    )


def optimize_range(h: HuHistogram, budget: int, per_case: bool = False) -> tuple:
    """Range on the endpoint grid with least signal loss keeping <= ``budget`` voxels.

    ``budget`` bounds the corpus total, or every single case when ``per_case``.
    Ties: more background removed, then narrower range, then lower ``lo``.
    """
    if budget <= 0:
        raise ValueError("budget must be positive")
    g = h.grid()
    lo_i = g - h.hu_min  # value index of lo (inclusive)
    hi_i = g - h.hu_min + 1  # exclusive end
    cs_sig, cs_bkg = _cum(h.signal), _cum(h.background)
    kept_sig = cs_sig[hi_i][None, :] - cs_sig[lo_i][:, None]
    kept_bkg = cs_bkg[hi_i][None, :] - cs_bkg[lo_i][:, None]
    valid = g[None, :] >= g[:, None]
    if per_case:
        load = np.zeros_like(kept_sig)
        for case in h.signal_counts + h.background_counts:
            cs = _cum(case)
            np.maximum(load, cs[hi_i][None, :] - cs[lo_i][:, None], out=load)
    else:
        load = kept_sig + kept_bkg
    feasible = valid & (load <= budget)
    if not feasible.any():
        raise InfeasibleBudget(budget, int(load[valid].min()))
    ii, jj = np.nonzero(feasible)
    lost = int(h.signal.sum()) - kept_sig[ii, jj]
    removed = int(h.background.sum()) - kept_bkg[ii, jj]
    width = g[jj] - g[ii]
    # lexsort: last key is primary
    best = np.lexsort((g[ii], width, -removed, lost))[0]
    r = HuRange(int(g[ii[best]]), int(g[jj[best]]))
    return r, range_stats(h, r)


def cumulative_curves(h: HuHistogram) -> dict:
    """Fraction of each class removed by a min threshold t (HU < t) and a max threshold t (HU > t).

    Curves are sampled at every HU value in the domain plus one step past
    the top, so the min curve runs 0 -> 1 and the max curve 1 -> 0.
    """
    sig, bkg = h.signal, h.background
    if sig.sum() + bkg.sum() == 0:
        raise ValueError("empty histogram")
    thresholds = np.arange(h.hu_min, h.hu_max + 2)
    out = {"thresholds": thresholds}
    for name, counts in (("signal", sig), ("background", bkg)):
        total = counts.sum()
        below = _cum(counts)  # below[i] = count with HU < hu_min + i
        frac_min = below / total if total else np.zeros(below.shape)
        # HU > t  <=>  total - count(HU <= t) = total - below[i + 1]
        above = total - np.concatenate([below[1:], [total]])
        frac_max = above / total if total else np.zeros(above.shape)
        out[f"{name}_min"] = frac_min
        out[f"{name}_max"] = frac_max
    return out


def corpus_reduction(h: HuHistogram, r: HuRange) -> dict:
    """Voxel-count reduction factor, pooled over the corpus and as a per-case median."""
    totals = h.signal_counts + h.background_counts
    lo = max(r.lo, h.hu_min) - h.hu_min
    hi = min(r.hi, h.hu_max) - h.hu_min
    kept = totals[:, lo:hi + 1].sum(axis=1)
    all_ = totals.sum(axis=1)
    with np.errstate(divide="ignore", invalid="ignore"):
        per_case = np.where(kept > 0, all_ / np.maximum(kept, 1), np.inf)
    return {
        "pooled": float(all_.sum() / kept.sum()) if kept.sum() else float("inf"),
        "per_case_median": float(np.median(per_case)) if per_case.size else float("nan"),
    }


def normalize_hu(hu: np.ndarray, r: HuRange = HuRange(*DEFAULT_RANGE), dtype=np.float32) -> np.ndarray:
    """Clamp to the active range and map affinely onto [0, 1]."""
    hu = np.clip(np.asarray(hu, dtype=np.float64), r.lo, r.hi)
    span = r.hi - r.lo
    if span == 0:
        return np.zeros(hu.shape, dtype=dtype)
    return ((hu - r.lo) / span).astype(dtype)


TABLE1_COLUMNS = [
    "max_voxels", "min_hu", "max_hu",
    "signal_loss_pct", "signal_loss_ci_lo", "signal_loss_ci_hi",
    "bkg_loss_pct", "bkg_loss_ci_lo", "bkg_loss_ci_hi",
    "ci_method",
]


def table1_rows(h: HuHistogram, budgets: Sequence[int], per_case: bool = False) -> list:
    rows = []
    for budget in budgets:
        r, st = optimize_range(h, budget, per_case=per_case)
        ci = st.intervals()
        rows.append({
            "max_voxels": int(budget),
            "min_hu": r.lo,
            "max_hu": r.hi,
            "signal_loss_pct": 100 * st.signal_loss,
            "signal_loss_ci_lo": 100 * ci["signal_loss"][0],
            "signal_loss_ci_hi": 100 * ci["signal_loss"][1],
            "bkg_loss_pct": 100 * st.background_removed,
            "bkg_loss_ci_lo": 100 * ci["background_removed"][0],
            "bkg_loss_ci_hi": 100 * ci["background_removed"][1],
            "ci_method": "wilson",
        })
    return rows


def parse_budget(text: str) -> int:
    """'64M' -> 64_000_000, '1500k' -> 1_500_000, '42' -> 42."""
    text = text.strip()
    mult = {"k": 10**3, "K": 10**3, "m": 10**6, "M": 10**6, "g": 10**9, "G": 10**9}
    if text and text[-1] in mult:
        return int(float(text[:-1]) * mult[text[-1]])
    return int(text)
