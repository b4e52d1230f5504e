"""Synthetic non-IID site data: blob images, 70/10/20 splits, NSEG container.

Each simulated site draws cases from its own intensity/morphology regime so
that sites are deliberately non-IID. Images are float64 in memory but every
generated intensity is exactly representable in float32, which makes the
on-disk container round trip bitwise lossless.
"""

from __future__ import annotations

import struct
from dataclasses import dataclass, replace

import numpy as np

from .numerics import RngStream

__all__ = [
    "SiteSpec",
    "Case",
    "generate_site",
    "split_cases",
    "save_dataset",
    "load_dataset",
    "DatasetFormatError",
    "default_benchmark_specs",
]

NSEG_MAGIC = b"NSEG"
NSEG_VERSION = 1


@dataclass(frozen=True)
class SiteSpec:
    """Generation recipe for one site's local dataset.

    ``bg_mean``/``fg_mean`` are the background level and the foreground peak
    level; their difference is the site's nominal contrast. Blobs are radial
    bumps added on top of the background, labels mark the blob supports.
    """

    site_id: int
    n_cases: int
    height: int = 32
    width: int = 32
    blob_count_range: tuple[int, int] = (1, 3)
    blob_radius_range: tuple[float, float] = (3.0, 6.0)
    bg_mean: float = 0.35
    bg_std: float = 0.06
    fg_mean: float = 0.80
    fg_std: float = 0.05
    noise_std: float = 0.03
    num_classes: int = 2

    def __post_init__(self):
        if self.n_cases < 5:
            raise ValueError("n_cases must be >= 5 so the 70/10/20 split is nonempty")
        if self.bg_std <= 0 or self.fg_std <= 0:
            raise ValueError("intensity stds must be positive")
        if self.num_classes < 2:
            raise ValueError("need at least 2 classes")
        lo, hi = self.blob_count_range
        if lo < 0 or hi < lo:
            raise ValueError("bad blob_count_range")
        rlo, rhi = self.blob_radius_range
        if rlo <= 0 or rhi < rlo:
            raise ValueError("bad blob_radius_range")


@dataclass(frozen=True)
class Case:
    """One image/label pair; ``labels`` values lie in [0, num_classes)."""

    case_id: int
    image: np.ndarray  # (H, W) float64
    labels: np.ndarray  # (H, W) uint8
    num_classes: int

    def __post_init__(self):
        if self.image.shape != self.labels.shape:
            raise ValueError("image/label shape mismatch")


def generate_site(spec: SiteSpec, rng: RngStream) -> list[Case]:
    """Generate ``spec.n_cases`` cases; deterministic given the stream."""
    h, w = spec.height, spec.width
    if spec.blob_radius_range[1] >= min(h, w) / 2:
        raise ValueError("blob radius too large for the grid")
    yy, xx = np.mgrid[0:h, 0:w].astype(np.float64)
    cases = []
    for cid in range(spec.n_cases):
        image = rng.normals(h * w, spec.bg_mean, spec.bg_std).reshape(h, w)
        labels = np.zeros((h, w), dtype=np.uint8)
        bump = np.zeros((h, w))
        k = rng.int_range(*spec.blob_count_range)
        for b in range(k):
            radius = spec.blob_radius_range[0] + rng.next_uniform() * (
                spec.blob_radius_range[1] - spec.blob_radius_range[0]
            )
            margin = radius
            cy = margin + rng.next_uniform() * (h - 1 - 2 * margin)
            cx = margin + rng.next_uniform() * (w - 1 - 2 * margin)
            peak = float(rng.normals(1, spec.fg_mean, spec.fg_std)[0])
            cls = 1 + (b % (spec.num_classes - 1))
            # Foreground classes beyond the first get progressively brighter
            # so a per-voxel classifier can separate them.
            amp = (peak - spec.bg_mean) * (1.0 + 0.25 * (cls - 1))
            d2 = (yy - cy) ** 2 + (xx - cx) ** 2
            bump = np.maximum(bump, amp * np.exp(-d2 / (2.0 * radius**2)))
            labels[d2 <= radius**2] = cls
        image = image + bump + rng.normals(h * w, 0.0, spec.noise_std).reshape(h, w)
        # Snap to float32 grid so the on-disk round trip is exact.
        image = image.astype(np.float32).astype(np.float64)
        cases.append(Case(cid, image, labels, spec.num_classes))
    return cases


def split_cases(cases: list[Case], rng: RngStream) -> tuple[list[Case], list[Case], list[Case]]:
    """Shuffle and partition into train/val/test at the 70/10/20 ratios.

    Sizes: train = floor(0.7 n), val = ceil(0.1 n) (so never empty),
    test = the remainder; e.g. 14 cases split 9/2/3 and 10 split 7/1/2.
    """
    n = len(cases)
    if n < 5:
        raise ValueError("need at least 5 cases to split")
    order = rng.shuffled(cases)
    n_train = int(np.floor(0.7 * n))
    n_val = max(1, int(np.ceil(0.1 * n)))
    train = order[:n_train]
    val = order[n_train : n_train + n_val]
    test = order[n_train + n_val :]
    return train, val, test


class DatasetFormatError(ValueError):
    """Malformed NSEG container; ``offset`` is the failing byte position."""

    def __init__(self, message: str, offset: int):
        super().__init__(f"{message} (at offset {offset})")
        self.offset = offset


def save_dataset(path, cases: list[Case]):
    """Write cases in the NSEG v1 container (little-endian, no padding)."""
    blob = bytearray()
    blob += NSEG_MAGIC
    blob += struct.pack("<II", NSEG_VERSION, len(cases))
    for case in cases:
        h, w = case.image.shape
        blob += struct.pack("<IHHB", case.case_id, h, w, case.num_classes)
        blob += case.image.astype("<f4").tobytes()
        blob += case.labels.astype("<u1").tobytes()
    with open(path, "wb") as fh:
        fh.write(bytes(blob))


def load_dataset(path) -> list[Case]:
    """Read an NSEG v1 file; raises ``DatasetFormatError`` on any defect."""
    with open(path, "rb") as fh:
        raw = fh.read()

    pos = 0

    def take(n: int, what: str) -> bytes:
        nonlocal pos
        if pos + n > len(raw):
            raise DatasetFormatError(f"truncated {what}", pos)
        chunk = raw[pos : pos + n]
        pos += n
        return chunk

    if take(4, "magic") != NSEG_MAGIC:
        raise DatasetFormatError("bad magic", 0)
    (version,) = struct.unpack("<I", take(4, "version"))
    if version != NSEG_VERSION:
        raise DatasetFormatError(f"unsupported version {version}", 4)
    (count,) = struct.unpack("<I", take(4, "case count"))
    cases = []
    for _ in range(count):
        case_id, h, w, c = struct.unpack("<IHHB", take(9, "case header"))
        if c < 2:
            raise DatasetFormatError("case has fewer than 2 classes", pos - 1)
        image = (
            np.frombuffer(take(4 * h * w, "intensities"), dtype="<f4")
            .reshape(h, w)
            .astype(np.float64)
        )
        labels = np.frombuffer(take(h * w, "labels"), dtype="<u1").reshape(h, w).copy()
        if labels.max(initial=0) >= c:
            raise DatasetFormatError("label out of class range", pos - h * w)
        cases.append(Case(case_id, image, labels, c))
    if pos != len(raw):
        raise DatasetFormatError("trailing bytes after last case", pos)
    return cases


def default_benchmark_specs() -> list[SiteSpec]:
    """The 6-site desk benchmark: heterogeneous sizes, intensities, morphology.

    Small sites are included on purpose; they are the ones that stand to gain
    from exchanging models with better-trained peers.
    """
    base = SiteSpec(site_id=0, n_cases=40)
    return [
        replace(base, site_id=0, n_cases=40, bg_mean=0.30, fg_mean=0.75,
                blob_count_range=(1, 3), blob_radius_range=(3.0, 6.0)),
        replace(base, site_id=1, n_cases=30, bg_mean=0.45, fg_mean=0.90,
                blob_count_range=(1, 2), blob_radius_range=(4.0, 8.0)),
        replace(base, site_id=2, n_cases=30, bg_mean=0.25, fg_mean=0.60,
                blob_count_range=(2, 4), blob_radius_range=(2.5, 5.0)),
        replace(base, site_id=3, n_cases=20, bg_mean=0.55, fg_mean=1.00,
                blob_count_range=(1, 3), blob_radius_range=(3.0, 7.0)),
        replace(base, site_id=4, n_cases=12, bg_mean=0.35, fg_mean=0.80,
                blob_count_range=(0, 2), blob_radius_range=(3.0, 6.0)),
        replace(base, site_id=5, n_cases=8, bg_mean=0.40, fg_mean=0.70,
                blob_count_range=(1, 2), blob_radius_range=(4.5, 7.5)),
    ]
