"""Flat binary containers for radiance granules and label maps, plus a
synthetic dataset generator.

On-disk layouts (all little-endian):

    granule  b"DGR1" | u32 H | u32 W | u32 C | C*H*W f32, band-major
             (C planes, each H x W row-major; payload starts at byte 16)
    labels   b"DLB1" | u32 H | u32 W | H*W f32, row-major
             (payload starts at byte 12)

NaN payloads round-trip bit-exactly.  Readers report a wrong magic and a
header/payload size mismatch as distinct errors.  A dataset manifest is a
UTF-8 JSON file ``{"entries": [{"granule": ..., "labels": ...}]}`` whose
entry order defines the folder index ``f``.
"""

from __future__ import annotations

import json
import mmap
import os
import struct
from dataclasses import dataclass, field, replace
from pathlib import Path

import numpy as np

from .errors import BadMagicError, FormatError, TruncatedFileError

GRANULE_MAGIC = b"DGR1"
LABELS_MAGIC = b"DLB1"
GRANULE_HEADER_BYTES = 16
LABELS_HEADER_BYTES = 12

_U32_MAX = 2**32 - 1


@dataclass
class Granule:
    """An H x W x C radiance volume stored band-major as a (C, H, W) array.

    Values are float32; NaN encodes missing samples.  Raw granules carry
    arbitrary radiance units; preprocessed granules are finite in [0, 1].
    """

    data: np.ndarray  # (C, H, W) float32

    @property
    def channels(self) -> int:
        return self.data.shape[0]

    @property
    def height(self) -> int:
        return self.data.shape[1]

    @property
    def width(self) -> int:
        return self.data.shape[2]

    def validate(self) -> None:
        if self.data.ndim != 3:
            raise FormatError(f"granule data must be (C, H, W), got shape {self.data.shape}")
        if self.data.dtype != np.float32:
            raise FormatError(f"granule data must be float32, got {self.data.dtype}")
        if min(self.data.shape) < 1:
            raise FormatError(f"granule dims must all be >= 1, got {self.data.shape}")


@dataclass
class LabelMap:
    """Per-pixel dust intensity in [0, 1]; NaN marks unlabeled pixels."""

    values: np.ndarray  # (H, W) float32

    @property
    def height(self) -> int:
        return self.values.shape[0]

    @property
    def width(self) -> int:
        return self.values.shape[1]

    def validate(self) -> None:
        if self.values.ndim != 2:
            raise FormatError(f"label map must be (H, W), got shape {self.values.shape}")
        if self.values.dtype != np.float32:
            raise FormatError(f"label map must be float32, got {self.values.dtype}")
        if min(self.values.shape) < 1:
            raise FormatError(f"label dims must all be >= 1, got {self.values.shape}")


@dataclass
class ManifestEntry:
    granule: Path
    labels: Path


@dataclass
class DatasetManifest:
    """Ordered granule/label pairs; list position is the folder index f."""

    entries: list[ManifestEntry] = field(default_factory=list)

    def __len__(self) -> int:
        return len(self.entries)

    def __iter__(self):
        return iter(self.entries)

    @classmethod
    def load(cls, path: str | Path) -> "DatasetManifest":
        path = Path(path)
        with open(path, "r", encoding="utf-8") as f:
            raw = json.load(f)
        if not isinstance(raw, dict) or "entries" not in raw:
            raise FormatError(f"{path}: manifest must be an object with an 'entries' list")
        base = path.parent
        entries = []
        for e in raw["entries"]:
            g = Path(e["granule"])
            l = Path(e["labels"])
            # relative paths resolve against the manifest's directory
            entries.append(ManifestEntry(
                granule=g if g.is_absolute() else base / g,
                labels=l if l.is_absolute() else base / l,
            ))
        if not entries:
            raise FormatError(f"{path}: manifest has no entries")
        return cls(entries)

    def save(self, path: str | Path) -> None:
        path = Path(path)
        base = path.parent.resolve()
        recs = []
        for e in self.entries:
            recs.append({
                "granule": _portable_path(e.granule, base),
                "labels": _portable_path(e.labels, base),
            })
        with open(path, "w", encoding="utf-8") as f:
            json.dump({"entries": recs}, f, indent=2)
            f.write("\n")


def _portable_path(p: Path, base: Path) -> str:
    p = Path(p).resolve()
    try:
        return os.path.relpath(p, base)
    except ValueError:
        return str(p)


def _check_u32(name: str, value: int) -> None:
    if not 1 <= value <= _U32_MAX:
        raise FormatError(f"{name}={value} outside the supported u32 range [1, {_U32_MAX}]")


def write_granule(granule: Granule, path: str | Path) -> None:
    """Write a granule container; round-trips bit-exactly through read_granule."""
    granule.validate()
    c, h, w = granule.data.shape
    for name, v in (("H", h), ("W", w), ("C", c)):
        _check_u32(name, v)
    data = np.ascontiguousarray(granule.data, dtype="<f4")
    with open(path, "wb") as f:
        f.write(GRANULE_MAGIC)
        f.write(struct.pack("<III", h, w, c))
        f.write(data.tobytes())


def _read_exact_header(f, path, magic: bytes, n_fields: int) -> tuple[int, ...]:
    head = f.read(4 + 4 * n_fields)
    if head[:4] != magic:
        raise BadMagicError(f"{path}: expected magic {magic!r}, found {head[:4]!r}")
    if len(head) != 4 + 4 * n_fields:
        raise TruncatedFileError(f"{path}: header truncated ({len(head)} bytes)")
    return struct.unpack("<" + "I" * n_fields, head[4:])


def read_granule(path: str | Path, use_mmap: bool = False) -> Granule:
    """Read a granule container, either fully loaded or memory-mapped.

    Both access modes expose element-wise identical values; the mapped mode
    pages in file regions lazily and returns a read-only array.
    """
    if use_mmap:
        arr, _ = open_granule_mmap(path)
        return Granule(arr)
    with open(path, "rb") as f:
        h, w, c = _read_exact_header(f, path, GRANULE_MAGIC, 3)
        _validate_payload_size(path, f, GRANULE_HEADER_BYTES, h * w * c)
        data = np.fromfile(f, dtype="<f4", count=h * w * c).reshape(c, h, w)
    g = Granule(data.view(np.float32))
    g.validate()
    return g


def open_granule_mmap(path: str | Path) -> tuple[np.ndarray, mmap.mmap]:
    """Memory-map a granule payload; returns the (C, H, W) view and the map.

    The caller may hold the mmap handle to release resident pages
    (``handle.madvise(mmap.MADV_DONTNEED)``) without invalidating the view.
    """
    with open(path, "rb") as f:
        h, w, c = _read_exact_header(f, path, GRANULE_MAGIC, 3)
        _validate_payload_size(path, f, GRANULE_HEADER_BYTES, h * w * c)
        mm = mmap.mmap(f.fileno(), 0, access=mmap.ACCESS_READ)
    arr = np.frombuffer(mm, dtype="<f4", count=h * w * c, offset=GRANULE_HEADER_BYTES)
    return arr.reshape(c, h, w).view(np.float32), mm


def _validate_payload_size(path, f, header_bytes: int, n_values: int) -> None:
    actual = os.fstat(f.fileno()).st_size
    expected = header_bytes + 4 * n_values
    if actual != expected:
        raise TruncatedFileError(
            f"{path}: header declares {expected} bytes, file has {actual}"
        )


def write_labels(labels: LabelMap, path: str | Path) -> None:
    labels.validate()
    h, w = labels.values.shape
    for name, v in (("H", h), ("W", w)):
        _check_u32(name, v)
    data = np.ascontiguousarray(labels.values, dtype="<f4")
    with open(path, "wb") as f:
        f.write(LABELS_MAGIC)
        f.write(struct.pack("<II", h, w))
        f.write(data.tobytes())


def read_labels(path: str | Path) -> LabelMap:
    """Read a label container verbatim (no normalization; NaN preserved)."""
    with open(path, "rb") as f:
        h, w = _read_exact_header(f, path, LABELS_MAGIC, 2)
        _validate_payload_size(path, f, LABELS_HEADER_BYTES, h * w)
        data = np.fromfile(f, dtype="<f4", count=h * w).reshape(h, w)
    lm = LabelMap(data.view(np.float32))
    lm.validate()
    return lm


def normalize_label_values(values: np.ndarray) -> np.ndarray:
    """Min-max normalize finite label values per file into [0, 1].

    NaN passes through.  A constant map collapses to all zeros, mirroring the
    degenerate-band rule used for radiance normalization.  Maps that already
    span [0, 1] are returned unchanged by construction of the affine map.
    """
    values = np.asarray(values, dtype=np.float32)
    finite = np.isfinite(values)
    if not finite.any():
        return values.copy()
    lo = values[finite].min()
    hi = values[finite].max()
    out = values.copy()
    if hi > lo:
        out[finite] = (values[finite] - lo) / (hi - lo)
    else:
        out[finite] = 0.0
    return out


# ---------------------------------------------------------------------------
# Synthetic dataset generation
# ---------------------------------------------------------------------------


@dataclass(frozen=True)
class SyntheticConfig:
    """Shape/intensity knobs for planted dust plumes.

    ``amplitude`` is the radiance shift applied to the affected channels at
    label intensity 1; separability against ``noise_sigma`` is what makes a
    fixture learnable.  ``nan_fraction`` plants per-entry NaN holes across
    the whole volume; ``label_density`` keeps only that fraction of label
    pixels finite (1.0 = fully labeled).
    """

    min_plumes: int = 0
    max_plumes: int = 3
    amplitude: float = 0.5
    noise_sigma: float = 0.02
    peak_low: float = 0.7
    peak_high: float = 1.0
    profile_exponent: float = 0.5  # <1 flattens plume cores, sharpens edges
    nan_fraction: float = 0.05
    label_density: float = 1.0
    channel_stride: int = 3  # every k-th channel reacts to dust

    def affected_channels(self, channels: int) -> np.ndarray:
        return np.arange(0, channels, self.channel_stride)


def generate_synthetic_dataset(
    out_dir: str | Path,
    seed: int,
    count: int,
    height: int,
    width: int,
    channels: int = 38,
    config: SyntheticConfig | None = None,
    patch_size: int = 5,
) -> DatasetManifest:
    """Emit ``count`` granule/label pairs with planted elliptical plumes.

    Each granule is a per-channel background (base level + gentle gradient +
    Gaussian noise) where the affected channels are shifted by
    ``amplitude * intensity``; the label map equals the normalized intensity
    field in [0, 1] (zero when the amplitude is zero).  Deterministic for a
    fixed argument tuple.  Writes ``manifest.json`` into ``out_dir``.
    """
    cfg = config or SyntheticConfig()
    if count < 1:
        raise ValueError("count must be >= 1")
    half = patch_size // 2
    if height < 2 * half + 1 or width < 2 * half + 1:
        raise ValueError(
            f"granule {height}x{width} too small for patch size {patch_size}"
        )
    out_dir = Path(out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)

    entries = []
    for i in range(count):
        rng = np.random.default_rng((int(seed), int(i)))
        data, labels = _synthesize_granule(rng, height, width, channels, cfg)
        gpath = out_dir / f"granule_{i:04d}.dgr"
        lpath = out_dir / f"labels_{i:04d}.dlb"
        write_granule(Granule(data), gpath)
        write_labels(LabelMap(labels), lpath)
        entries.append(ManifestEntry(granule=gpath, labels=lpath))

    manifest = DatasetManifest(entries)
    manifest.save(out_dir / "manifest.json")
    return manifest


def _synthesize_granule(rng, height, width, channels, cfg: SyntheticConfig):
    yy, xx = np.meshgrid(np.arange(height, dtype=np.float64),
                         np.arange(width, dtype=np.float64), indexing="ij")

    base = rng.uniform(0.2, 0.8, size=channels)
    grad_y = rng.uniform(-0.1, 0.1, size=channels) / max(height, 1)
    grad_x = rng.uniform(-0.1, 0.1, size=channels) / max(width, 1)
    data = (
        base[:, None, None]
        + grad_y[:, None, None] * yy[None]
        + grad_x[:, None, None] * xx[None]
        + rng.normal(0.0, cfg.noise_sigma, size=(channels, height, width))
    )

    intensity = np.zeros((height, width), dtype=np.float64)
    n_plumes = int(rng.integers(cfg.min_plumes, cfg.max_plumes + 1))
    for _ in range(n_plumes):
        cy = rng.uniform(0.15 * height, 0.85 * height)
        cx = rng.uniform(0.15 * width, 0.85 * width)
        ay = rng.uniform(0.12 * height, 0.35 * height)
        ax = rng.uniform(0.12 * width, 0.35 * width)
        theta = rng.uniform(0.0, np.pi)
        peak = rng.uniform(cfg.peak_low, cfg.peak_high)
        u = (yy - cy) * np.cos(theta) + (xx - cx) * np.sin(theta)
        v = -(yy - cy) * np.sin(theta) + (xx - cx) * np.cos(theta)
        r2 = (u / ay) ** 2 + (v / ax) ** 2
        bump = peak * np.clip(1.0 - r2, 0.0, None) ** cfg.profile_exponent
        intensity = np.maximum(intensity, bump)

    if cfg.amplitude > 0.0:
        affected = cfg.affected_channels(channels)
        data[affected] += cfg.amplitude * intensity[None]
        labels = np.clip(intensity, 0.0, 1.0)
    else:
        labels = np.zeros_like(intensity)

    labels = labels.astype(np.float32)
    if cfg.label_density < 1.0:
        drop = rng.random((height, width)) >= cfg.label_density
        labels[drop] = np.nan

    data = data.astype(np.float32)
    if cfg.nan_fraction > 0.0:
        holes = rng.random((channels, height, width)) < cfg.nan_fraction
        data[holes] = np.nan

    return data, labels


def with_config(cfg: SyntheticConfig, **kwargs) -> SyntheticConfig:
    """Return a copy of ``cfg`` with the given fields replaced."""
    return replace(cfg, **kwargs)
