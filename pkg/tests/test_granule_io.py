"""Container formats: exact byte layouts, round trips, distinct error
reporting, and the synthetic generator's contracts."""

import hashlib
import struct
from pathlib import Path

import numpy as np
import pytest

from dustpipe.errors import BadMagicError, FormatError, TruncatedFileError
from dustpipe.granule_io import (
    DatasetManifest,
    Granule,
    LabelMap,
    SyntheticConfig,
    generate_synthetic_dataset,
    normalize_label_values,
    open_granule_mmap,
    read_granule,
    read_labels,
    write_granule,
    write_labels,
)


def make_granule(data):
    return Granule(np.asarray(data, dtype=np.float32))


class TestGranuleContainer:
    def test_single_value_file_layout(self, tmp_path):
        path = tmp_path / "g.dgr"
        write_granule(make_granule([[[0.5]]]), path)
        raw = path.read_bytes()
        assert len(raw) == 20  # 4 magic + 12 header + 4 data
        assert raw[:4] == b"DGR1"
        assert struct.unpack("<III", raw[4:16]) == (1, 1, 1)
        assert struct.unpack("<f", raw[16:]) == (0.5,)

    def test_payload_size_formula(self, tmp_path):
        # formula checked against a real file, then applied at archive scale
        data = np.zeros((3, 4, 5), dtype=np.float32)
        path = tmp_path / "g.dgr"
        write_granule(Granule(data), path)
        assert path.stat().st_size == 16 + 4 * 3 * 4 * 5
        assert 2030 * 1354 * 38 * 4 == 417_790_240  # full-size granule payload

    def test_roundtrip_bit_exact_with_nan_payloads(self, tmp_path):
        data = np.random.default_rng(0).uniform(-5, 5, size=(3, 4, 5)).astype(np.float32)
        # plant a non-default quiet-NaN bit pattern
        data.view(np.uint32)[0, 0, 0] = 0x7FC00001
        data[1, 2, 3] = np.nan
        path = tmp_path / "g.dgr"
        write_granule(Granule(data), path)
        back = read_granule(path)
        assert back.data.shape == (3, 4, 5)
        assert back.data.tobytes() == data.tobytes()

    def test_bad_magic_reported_distinctly(self, tmp_path):
        path = tmp_path / "bad.dgr"
        path.write_bytes(b"XXXX" + struct.pack("<III", 1, 1, 1) + b"\x00" * 4)
        with pytest.raises(BadMagicError):
            read_granule(path)

    def test_truncated_payload_reported_distinctly(self, tmp_path):
        path = tmp_path / "short.dgr"
        # header claims 2x2x1 (4 floats) but only 3 are present
        path.write_bytes(b"DGR1" + struct.pack("<III", 2, 2, 1) + b"\x00" * 12)
        with pytest.raises(TruncatedFileError):
            read_granule(path)

    def test_oversize_payload_is_an_error(self, tmp_path):
        path = tmp_path / "long.dgr"
        path.write_bytes(b"DGR1" + struct.pack("<III", 1, 1, 1) + b"\x00" * 8)
        with pytest.raises(TruncatedFileError):
            read_granule(path)

    def test_mmap_matches_full_load(self, tmp_path):
        data = np.random.default_rng(1).uniform(0, 1, size=(4, 6, 7)).astype(np.float32)
        data[2, 3, 4] = np.nan
        path = tmp_path / "g.dgr"
        write_granule(Granule(data), path)
        full = read_granule(path)
        mapped = read_granule(path, use_mmap=True)
        assert full.data.tobytes() == mapped.data.tobytes()
        arr, handle = open_granule_mmap(path)
        assert arr.tobytes() == full.data.tobytes()
        del arr
        handle.close()

    def test_invalid_dims_rejected(self, tmp_path):
        with pytest.raises(FormatError):
            write_granule(Granule(np.zeros((0, 2, 2), dtype=np.float32)),
                          tmp_path / "g.dgr")
        path = tmp_path / "zero.dgr"
        path.write_bytes(b"DGR1" + struct.pack("<III", 0, 1, 1))
        with pytest.raises(FormatError):
            read_granule(path)


class TestLabelContainer:
    def test_roundtrip_with_center_nan(self, tmp_path):
        vals = np.arange(9, dtype=np.float32).reshape(3, 3) / 10.0
        vals[1, 1] = np.nan
        path = tmp_path / "l.dlb"
        write_labels(LabelMap(vals), path)
        back = read_labels(path)
        assert back.values.tobytes() == vals.tobytes()
        assert np.isnan(back.values[1, 1])

    def test_known_values_roundtrip(self, tmp_path):
        vals = np.array([[0.0, 0.25], [0.5, 1.0]], dtype=np.float32)
        path = tmp_path / "l.dlb"
        write_labels(LabelMap(vals), path)
        assert np.array_equal(read_labels(path).values, vals)
        assert path.stat().st_size == 12 + 4 * 4

    def test_header_payload_mismatch(self, tmp_path):
        path = tmp_path / "l.dlb"
        path.write_bytes(b"DLB1" + struct.pack("<II", 2, 2) + b"\x00" * 8)
        with pytest.raises(TruncatedFileError):
            read_labels(path)

    def test_bad_magic(self, tmp_path):
        path = tmp_path / "l.dlb"
        path.write_bytes(b"NOPE" + struct.pack("<II", 1, 1) + b"\x00" * 4)
        with pytest.raises(BadMagicError):
            read_labels(path)


class TestLabelNormalization:
    def test_spanning_map_unchanged(self):
        vals = np.array([[0.0, 0.25], [0.5, 1.0]], dtype=np.float32)
        assert np.array_equal(normalize_label_values(vals), vals)

    def test_out_of_range_rescaled(self):
        vals = np.array([[2.0, 4.0], [6.0, np.nan]], dtype=np.float32)
        out = normalize_label_values(vals)
        assert np.allclose(out[np.isfinite(out)], [0.0, 0.5, 1.0])
        assert np.isnan(out[1, 1])

    def test_constant_map_collapses_to_zero(self):
        vals = np.full((2, 2), 7.0, dtype=np.float32)
        assert np.array_equal(normalize_label_values(vals), np.zeros((2, 2), np.float32))

    def test_all_nan_passthrough(self):
        vals = np.full((2, 2), np.nan, dtype=np.float32)
        assert np.isnan(normalize_label_values(vals)).all()


class TestManifest:
    def test_order_defines_folder_index(self, tmp_path):
        m = generate_synthetic_dataset(tmp_path, seed=0, count=3, height=8,
                                       width=8, channels=4)
        loaded = DatasetManifest.load(tmp_path / "manifest.json")
        assert len(loaded) == 3
        for a, b in zip(m, loaded):
            assert Path(a.granule).resolve() == Path(b.granule).resolve()
            assert Path(a.labels).resolve() == Path(b.labels).resolve()

    def test_relative_paths_resolve_against_manifest_dir(self, tmp_path):
        generate_synthetic_dataset(tmp_path / "d", seed=0, count=1, height=8,
                                   width=8, channels=4)
        loaded = DatasetManifest.load(tmp_path / "d" / "manifest.json")
        assert read_granule(loaded.entries[0].granule).channels == 4

    def test_empty_manifest_rejected(self, tmp_path):
        path = tmp_path / "m.json"
        path.write_text('{"entries": []}')
        with pytest.raises(FormatError):
            DatasetManifest.load(path)


def _tree_digest(root: Path) -> str:
    digest = hashlib.sha256()
    for p in sorted(root.rglob("*")):
        if p.is_file():
            digest.update(p.name.encode())
            digest.update(p.read_bytes())
    return digest.hexdigest()


class TestSyntheticGenerator:
    def test_same_seed_byte_identical(self, tmp_path):
        generate_synthetic_dataset(tmp_path / "a", seed=7, count=3, height=12,
                                   width=10, channels=6)
        generate_synthetic_dataset(tmp_path / "b", seed=7, count=3, height=12,
                                   width=10, channels=6)
        assert _tree_digest(tmp_path / "a") == _tree_digest(tmp_path / "b")
        generate_synthetic_dataset(tmp_path / "c", seed=8, count=3, height=12,
                                   width=10, channels=6)
        assert _tree_digest(tmp_path / "a") != _tree_digest(tmp_path / "c")

    def test_zero_amplitude_means_zero_labels(self, tmp_path):
        cfg = SyntheticConfig(min_plumes=2, max_plumes=3, amplitude=0.0,
                              nan_fraction=0.0)
        m = generate_synthetic_dataset(tmp_path, seed=1, count=2, height=10,
                                       width=10, channels=4, config=cfg)
        for e in m:
            assert (read_labels(e.labels).values == 0.0).all()

    def test_nan_fraction_within_binomial_tolerance(self, tmp_path):
        h, w, c, frac = 32, 32, 12, 0.05
        cfg = SyntheticConfig(nan_fraction=frac)
        m = generate_synthetic_dataset(tmp_path, seed=5, count=3, height=h,
                                       width=w, channels=c, config=cfg)
        n = h * w * c
        sigma = np.sqrt(n * frac * (1 - frac))
        for e in m:
            holes = int(np.isnan(read_granule(e.granule).data).sum())
            assert abs(holes - n * frac) <= 3 * sigma

    def test_label_density_thins_labels(self, tmp_path):
        cfg = SyntheticConfig(label_density=0.25, nan_fraction=0.0)
        m = generate_synthetic_dataset(tmp_path, seed=2, count=1, height=40,
                                       width=40, channels=4, config=cfg)
        vals = read_labels(m.entries[0].labels).values
        frac = np.isfinite(vals).mean()
        assert 0.15 < frac < 0.35

    def test_degenerate_geometry_rejected(self, tmp_path):
        with pytest.raises(ValueError):
            generate_synthetic_dataset(tmp_path, seed=0, count=1, height=3,
                                       width=10, channels=4, patch_size=5)
        with pytest.raises(ValueError):
            generate_synthetic_dataset(tmp_path, seed=0, count=0, height=10,
                                       width=10, channels=4)

    def test_labels_lie_in_unit_interval(self, tmp_path):
        m = generate_synthetic_dataset(tmp_path, seed=3, count=2, height=16,
                                       width=16, channels=4)
        for e in m:
            vals = read_labels(e.labels).values
            finite = vals[np.isfinite(vals)]
            assert (finite >= 0.0).all() and (finite <= 1.0).all()
