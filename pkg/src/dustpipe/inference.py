"""Full-scene sliding inference producing per-pixel dust-probability maps.

Every interior pixel (at least half a patch away from each edge) gets the
eval-mode network output for the patch centered on it; the border band where
no full patch fits is a NaN sentinel rather than fabricated padding.  Each
pixel is computed independently of how pixels are grouped into batches, so
maps are bitwise identical for any batch size and worker count.

Map container layout (little-endian):

    b"DMP1" | u32 H | u32 W | H*W f32 row-major (NaN sentinel preserved)

An 8-bit ASCII PGM rendering (NaN -> 0, else round(v * 255)) is available
for eyeballing results without image libraries.
"""

from __future__ import annotations

import os
import struct
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from .errors import (
    BadMagicError,
    EmptyDatasetError,
    ShapeMismatchError,
    TruncatedFileError,
)
from .granule_io import Granule, LabelMap, normalize_label_values
from .model3d import ModelParams, predict
from .training import MetricsReport, compute_metrics

MAP_MAGIC = b"DMP1"
THREADS_ENV = "DUSTPIPE_THREADS"


@dataclass
class DetectionMap:
    """Dust probability per pixel; NaN marks the half-patch border band."""

    values: np.ndarray  # (H, W) float32

    @property
    def height(self) -> int:
        return self.values.shape[0]

    @property
    def width(self) -> int:
        return self.values.shape[1]


def worker_count() -> int:
    """Worker cap from the environment; 0 or unset means one per CPU."""
    raw = os.environ.get(THREADS_ENV, "0")
    try:
        n = int(raw)
    except ValueError:
        raise ValueError(f"{THREADS_ENV}={raw!r} is not an integer") from None
    if n < 0:
        raise ValueError(f"{THREADS_ENV} must be >= 0")
    return n if n > 0 else (os.cpu_count() or 1)


def infer_scene(params: ModelParams, granule: Granule,
                patch_size: int | None = None,
                batch_size: int = 256) -> DetectionMap:
    """Slide the model over every interior pixel of a preprocessed granule.

    The granule must be finite in [0, 1] with the channel count the
    checkpoint was trained on.  Pixels are processed in chunks of
    ``batch_size`` (possibly across threads), but each prediction is
    computed per-sample, so the result does not depend on either knob.
    """
    cfg = params.config
    p = cfg.patch_size if patch_size is None else patch_size
    if p != cfg.patch_size:
        raise ShapeMismatchError(
            f"patch size {p} does not match checkpoint patch size {cfg.patch_size}"
        )
    data = granule.data
    if data.shape[0] != cfg.in_depth:
        raise ShapeMismatchError(
            f"granule has {data.shape[0]} channels, checkpoint expects {cfg.in_depth}"
        )
    if not np.isfinite(data).all():
        raise ValueError("granule contains non-finite values; run preprocessing first")
    if data.min() < 0.0 or data.max() > 1.0:
        raise ValueError("granule values outside [0, 1]; run preprocessing first")
    if batch_size < 1:
        raise ValueError("batch_size must be >= 1")

    h = p // 2
    height, width = data.shape[1], data.shape[2]
    out = np.full((height, width), np.nan, dtype=np.float32)
    if height < p or width < p:
        return DetectionMap(out)

    yy, xx = np.meshgrid(np.arange(h, height - h), np.arange(h, width - h),
                         indexing="ij")
    ys = yy.ravel()
    xs = xx.ravel()
    offs = np.arange(-h, h + 1)

    def run_chunk(start: int) -> None:
        cy = ys[start:start + batch_size]
        cx = xs[start:start + batch_size]
        win = data[:, (cy[:, None, None] + offs[None, :, None]),
                      (cx[:, None, None] + offs[None, None, :])]
        patches = np.ascontiguousarray(win.transpose(1, 0, 2, 3))
        out[cy, cx] = predict(params, patches)

    starts = range(0, len(ys), batch_size)
    n_workers = min(worker_count(), len(starts))
    if n_workers > 1:
        with ThreadPoolExecutor(max_workers=n_workers) as pool:
            # chunks write disjoint pixels, so concurrent writes never collide
            list(pool.map(run_chunk, starts))
    else:
        for start in starts:
            run_chunk(start)
    return DetectionMap(out)


def write_map(dmap: DetectionMap, path: str | Path) -> None:
    values = np.ascontiguousarray(dmap.values, dtype="<f4")
    if values.ndim != 2:
        raise ShapeMismatchError(f"detection map must be 2-D, got {values.shape}")
    with open(path, "wb") as f:
        f.write(MAP_MAGIC)
        f.write(struct.pack("<II", values.shape[0], values.shape[1]))
        f.write(values.tobytes())


def read_map(path: str | Path) -> DetectionMap:
    with open(path, "rb") as f:
        head = f.read(12)
        if head[:4] != MAP_MAGIC:
            raise BadMagicError(f"{path}: expected magic {MAP_MAGIC!r}, found {head[:4]!r}")
        if len(head) != 12:
            raise TruncatedFileError(f"{path}: header truncated")
        h, w = struct.unpack("<II", head[4:])
        actual = os.fstat(f.fileno()).st_size
        expected = 12 + 4 * h * w
        if actual != expected:
            raise TruncatedFileError(f"{path}: header declares {expected} bytes, file has {actual}")
        values = np.fromfile(f, dtype="<f4", count=h * w).reshape(h, w)
    return DetectionMap(values.view(np.float32))


def write_pgm(dmap: DetectionMap, path: str | Path) -> None:
    """ASCII PGM rendering: NaN -> 0, finite v -> round(v * 255)."""
    values = dmap.values
    grey = np.where(np.isfinite(values), np.rint(values * 255.0), 0.0)
    grey = grey.astype(np.int64)
    lines = [f"P2\n{values.shape[1]} {values.shape[0]}\n255\n"]
    for row in grey:
        lines.append(" ".join(str(v) for v in row) + "\n")
    with open(path, "w", encoding="ascii") as f:
        f.writelines(lines)


@dataclass
class ScoreReport:
    """Detection-map quality overall and split by label-edge proximity.

    Boundary pixels are those whose label-gradient magnitude exceeds the
    threshold (plume edges); the rest are core.  Pixels with an undefined
    gradient (NaN neighbors) count as core.  A band's report is None when
    the band is empty.
    """

    overall: MetricsReport
    boundary: MetricsReport | None
    core: MetricsReport | None
    gradient_threshold: float

    def to_dict(self) -> dict:
        return {
            "overall": self.overall.to_dict(),
            "boundary": self.boundary.to_dict() if self.boundary else None,
            "core": self.core.to_dict() if self.core else None,
            "gradient_threshold": self.gradient_threshold,
        }


def score_map(dmap: DetectionMap, labels: LabelMap, alpha: float = 1.0,
              gradient_threshold: float = 0.05) -> ScoreReport:
    """Metrics over pixels where both the map and the labels are finite."""
    if dmap.values.shape != labels.values.shape:
        raise ShapeMismatchError(
            f"map {dmap.values.shape} vs labels {labels.values.shape}"
        )
    truth = normalize_label_values(labels.values)
    valid = np.isfinite(dmap.values) & np.isfinite(truth)
    if not valid.any():
        raise EmptyDatasetError("no overlapping finite pixels between map and labels")

    overall = compute_metrics(dmap.values[valid], truth[valid], alpha)
    gy, gx = np.gradient(truth.astype(np.float64))
    with np.errstate(invalid="ignore"):
        edge = np.hypot(gy, gx) > gradient_threshold
    boundary_mask = valid & edge
    core_mask = valid & ~edge
    boundary = (compute_metrics(dmap.values[boundary_mask], truth[boundary_mask], alpha)
                if boundary_mask.any() else None)
    core = (compute_metrics(dmap.values[core_mask], truth[core_mask], alpha)
            if core_mask.any() else None)
    return ScoreReport(overall=overall, boundary=boundary, core=core,
                       gradient_threshold=gradient_threshold)
