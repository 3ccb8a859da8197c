"""Dense CT volumes: NIfTI-1 / raw I/O and synthetic phantoms.

Arrays are indexed ``[x, y, z]``. On disk both formats store voxels
x-fastest (Fortran order), which is also the NIfTI convention.
"""

from __future__ import annotations

import json
from dataclasses import asdict, dataclass, field
from pathlib import Path
from typing import Optional, Sequence

import numpy as np

HU_MIN = -1024
HU_MAX = 3071

_RAW_DTYPES = {"int16": np.int16, "uint8": np.uint8, "float32": np.float32}


class VolumeFormatError(ValueError):
    """Malformed or unsupported file header."""

    def __init__(self, field_name: str, message: str, path=None):
        self.field = field_name
        self.path = path
        where = f" in {path}" if path is not None else ""
        super().__init__(f"header field {field_name!r}{where}: {message}")


class AlignmentError(ValueError):
    """Image and label grids do not line up."""


@dataclass(frozen=True, eq=False)
class DenseVolume:
    intensities: np.ndarray
    spacing: tuple = (1.0, 1.0, 1.0)
    labels: Optional[np.ndarray] = None
    # position of voxel [0,0,0] in the grid this volume was cropped from
    offset: tuple = (0, 0, 0)

    def __post_init__(self):
        hu = np.ascontiguousarray(self.intensities, dtype=np.int16)
        if hu.ndim != 3:
            raise ValueError(f"intensities must be 3-D, got shape {hu.shape}")
        spacing = tuple(float(s) for s in self.spacing)
        if len(spacing) != 3 or not all(s > 0 for s in spacing):
            raise ValueError(f"spacing must be 3 positive values, got {self.spacing}")
        hu.setflags(write=False)
        object.__setattr__(self, "intensities", hu)
        object.__setattr__(self, "spacing", spacing)
        object.__setattr__(self, "offset", tuple(int(o) for o in self.offset))
        if self.labels is not None:
            lab = np.ascontiguousarray(self.labels, dtype=np.uint8)
            if lab.shape != hu.shape:
                raise AlignmentError(
                    f"labels shape {lab.shape} != intensities shape {hu.shape}"
                )
            lab.setflags(write=False)
            object.__setattr__(self, "labels", lab)

    @property
    def dims(self) -> tuple:
        return tuple(int(d) for d in self.intensities.shape)

    def __eq__(self, other):
        if not isinstance(other, DenseVolume):
            return NotImplemented
        if (self.labels is None) != (other.labels is None):
            return False
        return (
            self.spacing == other.spacing
            and self.offset == other.offset
            and np.array_equal(self.intensities, other.intensities)
            and (self.labels is None or np.array_equal(self.labels, other.labels))
        )

    __hash__ = None


def clamp_hu(values) -> np.ndarray:
    """Round and clamp arbitrary numeric data into the 12-bit CT range as int16."""
    arr = np.asarray(values)
    if arr.dtype.kind == "f":
        arr = np.rint(arr)
    return np.clip(arr, HU_MIN, HU_MAX).astype(np.int16)


def detect_format(path) -> str:
    name = Path(path).name.lower()
    if name.endswith(".nii") or name.endswith(".nii.gz"):
        return "nifti"
    if name.endswith(".raw") or name.endswith(".json"):
        return "raw"
    raise ValueError(f"cannot infer volume format from {path!s}")


def _split_name(path: Path) -> tuple:
    name = path.name
    for ext in (".nii.gz", ".nii", ".raw", ".json"):
        if name.lower().endswith(ext):
            return name[: -len(ext)], name[-len(ext):]
    return path.stem, path.suffix


def seg_path(path) -> Path:
    """Sibling path holding the segmentation for ``path`` (``_seg`` suffix)."""
    path = Path(path)
    stem, ext = _split_name(path)
    return path.with_name(f"{stem}_seg{ext}")


# ---------------------------------------------------------------- raw format


def _raw_paths(path: Path) -> tuple:
    stem, _ = _split_name(path)
    return path.with_name(stem + ".json"), path.with_name(stem + ".raw")


def _write_raw(array: np.ndarray, path: Path, spacing, offset, dtype: str) -> None:
    header_path, payload_path = _raw_paths(path)
    header = {
        "dims": [int(d) for d in array.shape],
        "spacing": [float(s) for s in spacing],
        "offset": [int(o) for o in offset],
        "dtype": dtype,
        "byte_order": "little",
    }
    data = np.asarray(array, dtype=np.dtype(_RAW_DTYPES[dtype]).newbyteorder("<"))
    try:
        payload_path.write_bytes(data.tobytes(order="F"))
        header_path.write_text(json.dumps(header, indent=2))
    except OSError as exc:
        raise OSError(f"failed to write raw volume {path}: {exc}") from exc


def _read_raw(path: Path) -> tuple:
    header_path, payload_path = _raw_paths(path)
    try:
        header = json.loads(header_path.read_text())
    except json.JSONDecodeError as exc:
        raise VolumeFormatError("<json>", str(exc), header_path) from exc
    for key in ("dims", "spacing", "dtype"):
        if key not in header:
            raise VolumeFormatError(key, "missing", header_path)
    dims = header["dims"]
    if len(dims) != 3 or any(int(d) < 0 for d in dims):
        raise VolumeFormatError("dims", f"expected 3 non-negative ints, got {dims}", header_path)
    if header["dtype"] not in _RAW_DTYPES:
        raise VolumeFormatError("dtype", f"unsupported {header['dtype']!r}", header_path)
    if header.get("byte_order", "little") != "little":
        raise VolumeFormatError("byte_order", "only 'little' is supported", header_path)
    spacing = header["spacing"]
    if len(spacing) != 3 or not all(float(s) > 0 for s in spacing):
        raise VolumeFormatError("spacing", f"must be 3 positive values, got {spacing}", header_path)
    dtype = np.dtype(_RAW_DTYPES[header["dtype"]]).newbyteorder("<")
    payload = payload_path.read_bytes()
    expected = int(np.prod(dims)) * dtype.itemsize
    if len(payload) != expected:
        raise VolumeFormatError(
            "dims", f"payload has {len(payload)} bytes, header implies {expected}", payload_path
        )
    data = np.frombuffer(payload, dtype=dtype).reshape(dims, order="F")
    return data, tuple(spacing), tuple(header.get("offset", (0, 0, 0)))


# ---------------------------------------------------------------- nifti


_NIFTI_WRITE_DTYPES = {"int16": np.int16, "uint8": np.uint8, "float32": np.float32}


def _read_nifti(path: Path) -> tuple:
    import nibabel as nib

    try:
        img = nib.load(str(path))
    except Exception as exc:  # nibabel raises a zoo of types for bad headers
        raise VolumeFormatError("<header>", str(exc), path) from exc
    if not isinstance(img, (nib.Nifti1Image, nib.Nifti1Pair)):
        raise VolumeFormatError("sizeof_hdr", "not a NIfTI-1 image", path)
    hdr = img.header
    dtype = hdr.get_data_dtype()
    if dtype.kind not in "iuf":
        raise VolumeFormatError("datatype", f"unsupported data type {dtype}", path)
    shape = img.shape
    if len(shape) == 4 and shape[3] == 1:
        shape = shape[:3]
    if len(shape) != 3:
        raise VolumeFormatError("dim", f"expected a 3-D volume, got shape {img.shape}", path)
    zooms = tuple(float(z) for z in hdr.get_zooms()[:3])
    if not all(z > 0 for z in zooms):
        raise VolumeFormatError("pixdim", f"non-positive voxel spacing {zooms}", path)
    data = np.asanyarray(img.dataobj).reshape(shape)
    return data, zooms


def _write_nifti(array: np.ndarray, path: Path, spacing, dtype: str) -> None:
    import nibabel as nib

    data = np.asarray(array, dtype=_NIFTI_WRITE_DTYPES[dtype])
    img = nib.Nifti1Image(data, np.diag([*spacing, 1.0]))
    img.header.set_data_dtype(_NIFTI_WRITE_DTYPES[dtype])
    img.header.set_zooms(tuple(spacing))
    try:
        nib.save(img, str(path))
    except OSError as exc:
        raise OSError(f"failed to write NIfTI volume {path}: {exc}") from exc


# ---------------------------------------------------------------- public I/O


def load_volume(path, format: Optional[str] = None, labels_path=None, with_labels: bool = True) -> DenseVolume:
    """Load a volume, clamping intensities to [-1024, 3071].

    Labels come from ``labels_path`` if given, else from the ``_seg`` sibling
    when it exists (and ``with_labels`` is set).
    """
    path = Path(path)
    fmt = format or detect_format(path)
    offset = (0, 0, 0)
    if fmt == "raw":
        data, spacing, offset = _read_raw(path)
    elif fmt == "nifti":
        data, spacing = _read_nifti(path)
    else:
        raise ValueError(f"unknown format {fmt!r}")

    labels = None
    if labels_path is None and with_labels:
        candidate = seg_path(path)
        if (_raw_paths(candidate)[0] if fmt == "raw" else candidate).exists():
            labels_path = candidate
    if labels_path is not None:
        labels_path = Path(labels_path)
        lfmt = detect_format(labels_path)
        lab = _read_raw(labels_path)[0] if lfmt == "raw" else _read_nifti(labels_path)[0]
        if lab.shape != data.shape:
            raise AlignmentError(
                f"label dims {lab.shape} ({labels_path}) != image dims {data.shape} ({path})"
            )
        labels = np.rint(lab).astype(np.uint8) if lab.dtype.kind == "f" else lab.astype(np.uint8)
    return DenseVolume(clamp_hu(data), spacing, labels, offset)


def save_volume(v: DenseVolume, path, format: Optional[str] = None) -> None:
    path = Path(path)
    fmt = format or detect_format(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    if fmt == "raw":
        _write_raw(v.intensities, path, v.spacing, v.offset, "int16")
        if v.labels is not None:
            _write_raw(v.labels, seg_path(path), v.spacing, v.offset, "uint8")
    elif fmt == "nifti":
        _write_nifti(v.intensities, path, v.spacing, "int16")
        if v.labels is not None:
            _write_nifti(v.labels, seg_path(path), v.spacing, "uint8")
    else:
        raise ValueError(f"unknown format {fmt!r}")


def find_volumes(root) -> list:
    """Image files under ``root`` (segmentation siblings excluded), sorted by name."""
    root = Path(root)
    found = []
    for p in sorted(root.iterdir()):
        stem, ext = _split_name(p)
        if stem.endswith("_seg") or ext.lower() not in (".nii", ".nii.gz", ".json"):
            continue
        if ext.lower() == ".json" and not p.with_name(stem + ".raw").exists():
            continue
        found.append(p)
    return found


# ---------------------------------------------------------------- phantoms


@dataclass
class Organ:
    center: tuple
    radii: tuple
    hu_mean: float
    hu_std: float
    class_id: int = 1


@dataclass
class PhantomSpec:
    dims: tuple
    background_mean: float = 40.0
    background_std: float = 25.0
    organs: list = field(default_factory=list)
    clutter_fraction: float = 0.0
    seed: int = 0
    spacing: tuple = (1.0, 1.0, 1.0)

    def __post_init__(self):
        self.organs = [o if isinstance(o, Organ) else Organ(**o) for o in self.organs]
        if not 0.0 <= self.clutter_fraction <= 1.0:
            raise ValueError("clutter_fraction must be in [0, 1]")
        for o in self.organs:
            if o.class_id not in (1, 2, 3):
                raise ValueError(f"organ class id must be 1, 2 or 3, got {o.class_id}")
            for c, d in zip(o.center, self.dims):
                if not 0 <= c <= d - 1:
                    raise ValueError(f"organ center {o.center} outside dims {self.dims}")

    def to_json(self) -> str:
        return json.dumps(asdict(self), indent=2)

    @classmethod
    def from_json(cls, text: str) -> "PhantomSpec":
        return cls(**json.loads(text))


def ellipsoid_mask(dims: Sequence[int], center, radii) -> np.ndarray:
    """Boolean mask of voxels with sum(((p - c) / r)^2) <= 1."""
    grids = np.meshgrid(*(np.arange(d, dtype=np.float64) for d in dims), indexing="ij")
    acc = np.zeros(tuple(dims), dtype=np.float64)
    for g, c, r in zip(grids, center, radii):
        acc += ((g - c) / r) ** 2
    return acc <= 1.0


def _truncated(rng, mean, std, size) -> np.ndarray:
    # support is mean +/- 3 std so every sample is attributable to its source
    return np.clip(rng.normal(mean, std, size), mean - 3 * std, mean + 3 * std)


def organ_support(organ: Organ) -> tuple:
    lo = max(HU_MIN, int(np.rint(organ.hu_mean - 3 * organ.hu_std)))
    hi = min(HU_MAX, int(np.rint(organ.hu_mean + 3 * organ.hu_std)))
    return lo, hi


def generate_phantom(spec: PhantomSpec) -> DenseVolume:
    """Synthesize a labelled volume. Overlapping organs: the later one wins."""
    rng = np.random.default_rng(spec.seed)
    dims = tuple(int(d) for d in spec.dims)
    n = int(np.prod(dims))
    hu = _truncated(rng, spec.background_mean, spec.background_std, n).reshape(dims)
    labels = np.zeros(dims, dtype=np.uint8)
    organ_any = np.zeros(dims, dtype=bool)
    for organ in spec.organs:
        mask = ellipsoid_mask(dims, organ.center, organ.radii)
        hu[mask] = _truncated(rng, organ.hu_mean, organ.hu_std, int(mask.sum()))
        labels[mask] = organ.class_id
        organ_any |= mask

    if spec.clutter_fraction > 0:
        free = np.flatnonzero(~organ_any.ravel())
        pick = rng.random(free.size) < spec.clutter_fraction
        chosen = free[pick]
        bone = rng.random(chosen.size) < 0.5
        values = np.where(
            bone,
            rng.integers(501, HU_MAX + 1, chosen.size),
            rng.integers(HU_MIN, -200, chosen.size),
        )
        flat = hu.reshape(-1)
        flat[chosen] = values
    return DenseVolume(clamp_hu(hu), spec.spacing, labels)


def kidney_phantom_spec(dims=(32, 32, 32), seed: int = 0, clutter_fraction: float = 0.5,
                        kidney_radii=(3.0, 4.0, 5.0), tumour: bool = True) -> PhantomSpec:
    """Random two-kidney layout (optionally with a tumour on one of them).

    Kidneys are bright (contrast-enhanced), tumours darker but still inside
    the default sparsification band; the background is soft tissue with
    air/bone clutter.
    """
    rng = np.random.default_rng(seed)
    dims = tuple(int(d) for d in dims)
    nx, ny, nz = dims
    organs = []
    base_r = np.asarray(kidney_radii, dtype=float)
    for side in (0.3, 0.7):
        r = base_r * rng.uniform(0.85, 1.15, 3)
        c = (
            side * nx + rng.uniform(-0.05, 0.05) * nx,
            0.5 * ny + rng.uniform(-0.1, 0.1) * ny,
            0.5 * nz + rng.uniform(-0.15, 0.15) * nz,
        )
        c = tuple(float(np.clip(ci, ri, d - 1 - ri)) for ci, ri, d in zip(c, r, dims))
        organs.append(Organ(c, tuple(r), float(rng.uniform(170, 210)), 20.0, 1))
    if tumour:
        host = organs[int(rng.integers(2))]
        direction = rng.normal(size=3)
        direction /= np.linalg.norm(direction)
        c = np.asarray(host.center) + direction * np.asarray(host.radii) * 0.8
        c = np.clip(c, 0, np.asarray(dims) - 1)
        r = base_r.min() * rng.uniform(0.5, 0.8)
        organs.append(Organ(tuple(float(v) for v in c), (r, r, r), float(rng.uniform(110, 140)), 15.0, 2))
    return PhantomSpec(dims, 40.0, 25.0, organs, clutter_fraction, seed)
