"""Volume files, random crops and a synthetic multi-modal tumor phantom.

SSFV layout (all integers little-endian)::

    b"SSFV1"  u8 kind  u32 C  u32 H  u32 W  u32 D  payload

``kind`` 0 is a float64 image, 1 is a uint8 label map (C = 1).  The payload is
row-major with channel outermost, then h, w, d.
"""
from __future__ import annotations

import struct
from dataclasses import dataclass
from pathlib import Path

import numpy as np

MAGIC = b"SSFV1"
KIND_IMAGE = 0
KIND_LABELS = 1
NUM_LABELS = 4  # background, NCR, ED, ET
MODALITIES = ("T1", "T1c", "T2", "FLAIR")

_HEADER = struct.Struct("<B4I")
_MASK64 = (1 << 64) - 1


@dataclass
class Case:
    image: np.ndarray   # (4, H, W, D) float64
    labels: np.ndarray  # (H, W, D) uint8
    case_id: str = "case"

    def __post_init__(self):
        if self.image.ndim != 4 or self.image.shape[1:] != self.labels.shape:
            raise ValueError(f"image {self.image.shape} and labels {self.labels.shape} disagree")


class FormatError(ValueError):
    pass


# ---------------------------------------------------------------------------
# files

def write_volume(path, array, kind: int) -> None:
    array = np.asarray(array)
    if kind == KIND_LABELS:
        array = array.reshape((1,) + array.shape[-3:]).astype(np.uint8)
        dtype = "u1"
    else:
        dtype = "<f8"
    if array.ndim != 4:
        raise ValueError(f"expected (C, H, W, D), got {array.shape}")
    with open(path, "wb") as fh:
        fh.write(MAGIC)
        fh.write(_HEADER.pack(kind, *array.shape))
        fh.write(np.ascontiguousarray(array, dtype=dtype).tobytes())


def read_volume(path):
    """Returns ``(kind, array)``; label arrays come back as (H, W, D) uint8."""
    data = Path(path).read_bytes()
    if data[:len(MAGIC)] != MAGIC:
        raise FormatError(f"{path}: bad magic {data[:len(MAGIC)]!r}")
    pos = len(MAGIC)
    if len(data) < pos + _HEADER.size:
        raise FormatError(f"{path}: truncated header")
    kind, *shape = _HEADER.unpack_from(data, pos)
    pos += _HEADER.size
    if kind not in (KIND_IMAGE, KIND_LABELS):
        raise FormatError(f"{path}: unknown kind {kind}")
    itemsize = 8 if kind == KIND_IMAGE else 1
    count = int(np.prod(shape, dtype=np.int64))
    if len(data) - pos != count * itemsize:
        raise FormatError(f"{path}: payload has {len(data) - pos} bytes, expected {count * itemsize} "
                          f"(truncated payload)")
    if kind == KIND_IMAGE:
        return kind, np.frombuffer(data, dtype="<f8", offset=pos).reshape(shape).astype(np.float64)
    labels = np.frombuffer(data, dtype=np.uint8, offset=pos).reshape(shape[1:]).copy()
    bad = np.flatnonzero(labels >= NUM_LABELS)
    if bad.size:
        raise FormatError(f"{path}: label value {labels.reshape(-1)[bad[0]]} at voxel index {bad[0]} "
                          f"(allowed 0..{NUM_LABELS - 1})")
    return kind, labels


def case_paths(directory, case_id):
    directory = Path(directory)
    return directory / f"{case_id}_image.ssfv", directory / f"{case_id}_labels.ssfv"


def save_case(case: Case, directory) -> tuple:
    directory = Path(directory)
    directory.mkdir(parents=True, exist_ok=True)
    img_path, lab_path = case_paths(directory, case.case_id)
    write_volume(img_path, case.image, KIND_IMAGE)
    write_volume(lab_path, case.labels, KIND_LABELS)
    return img_path, lab_path


def load_case(directory, case_id) -> Case:
    img_path, lab_path = case_paths(directory, case_id)
    kind, image = read_volume(img_path)
    if kind != KIND_IMAGE:
        raise FormatError(f"{img_path}: expected an image volume")
    kind, labels = read_volume(lab_path)
    if kind != KIND_LABELS:
        raise FormatError(f"{lab_path}: expected a label volume")
    return Case(image, labels, case_id)


def list_cases(directory) -> list:
    return sorted(p.name[:-len("_image.ssfv")] for p in Path(directory).glob("*_image.ssfv"))


# ---------------------------------------------------------------------------
# cropping

class SplitMix64:
    """SplitMix64 generator (Steele, Lea & Flood); pinned so crops reproduce anywhere."""

    def __init__(self, seed: int):
        self.state = seed & _MASK64

    def next(self) -> int:
        self.state = (self.state + 0x9E3779B97F4A7C15) & _MASK64
        z = self.state
        z = ((z ^ (z >> 30)) * 0xBF58476D1CE4E5B9) & _MASK64
        z = ((z ^ (z >> 27)) * 0x94D049BB133111EB) & _MASK64
        return z ^ (z >> 31)

    def below(self, n: int) -> int:
        """Integer in [0, n) by modulo reduction of one 64-bit draw."""
        return self.next() % n


def crop_origin(extents, size, seed: int) -> tuple:
    extents = tuple(int(e) for e in extents)
    size = tuple(int(s) for s in size)
    if len(size) != 3 or any(s < 1 or s > e for s, e in zip(size, extents)):
        raise ValueError(f"crop size {size} does not fit extents {extents}")
    rng = SplitMix64(seed)
    return tuple(rng.below(e - s + 1) for e, s in zip(extents, size))


def random_crop(case: Case, size, seed: int) -> Case:
    h0, w0, d0 = crop_origin(case.labels.shape, size, seed)
    h, w, d = size
    region = (slice(h0, h0 + h), slice(w0, w0 + w), slice(d0, d0 + d))
    return Case(case.image[(slice(None),) + region].copy(), case.labels[region].copy(), case.case_id)


# ---------------------------------------------------------------------------
# synthetic phantom

# mean intensity per (modality, tissue); tissue order: background, NCR, ED, ET
_INTENSITY = np.array([
    [1.00, 0.40, 0.80, 0.70],   # T1: dark core
    [1.00, 0.50, 0.90, 1.90],   # T1c: bright enhancing rim
    [0.60, 1.50, 1.70, 1.20],   # T2: bright edema and core
    [0.50, 1.00, 1.80, 1.40],   # FLAIR: brightest edema
])

NOISE_SIGMA = 0.1
# edema radius as a fraction of the grid; ET and NCR radii as fractions of it
ED_RADIUS = 0.36
ET_SCALE = 0.72
NCR_SCALE = 0.42


def synth_case(seed: int, extents=(16, 16, 16), case_id: str | None = None) -> Case:
    """Nested-ellipsoid tumor: NCR core inside an ET rim inside an ED shell.

    Radii scale with the grid; the center and axis ratios are drawn from
    ``seed``.  Every label class is present by construction.
    """
    extents = tuple(int(e) for e in extents)
    if len(extents) != 3 or min(extents) < 12:
        raise ValueError(f"synthetic cases need extents >= 12 per axis, got {extents}")
    rng = np.random.default_rng(seed)
    ext = np.array(extents, dtype=np.float64)
    r_ed = ED_RADIUS * ext * rng.uniform(0.9, 1.1, size=3)
    margin = r_ed + 0.5
    center = np.array([rng.uniform(m, e - 1 - m) for m, e in zip(margin, ext)])
    grid = np.stack(np.meshgrid(*(np.arange(e) for e in extents), indexing="ij"), axis=-1)
    rel = grid - center

    def inside(scale):
        return np.sum((rel / (r_ed * scale)) ** 2, axis=-1) <= 1.0

    labels = np.zeros(extents, dtype=np.uint8)
    labels[inside(1.0)] = 2
    labels[inside(ET_SCALE)] = 3
    labels[inside(NCR_SCALE)] = 1
    present = set(np.unique(labels).tolist())
    if present != {0, 1, 2, 3}:
        raise ValueError(f"phantom on {extents} lost classes {sorted({0, 1, 2, 3} - present)}")

    image = _INTENSITY[:, labels] + rng.normal(0.0, NOISE_SIGMA, size=(4,) + extents)
    return Case(image, labels, case_id or f"synth{seed:04d}")
