"""Shared fixtures: small datasets and the recorded desk-scale training run."""

import shutil
import time
from pathlib import Path

import pytest

from dustpipe.granule_io import (
    DatasetManifest,
    ManifestEntry,
    SyntheticConfig,
    generate_synthetic_dataset,
    read_granule,
    write_granule,
)
from dustpipe.preprocess import PreprocessConfig, preprocess_pipeline
from dustpipe.training import LossConfig, TrainConfig, train


def preprocess_manifest(manifest, out_dir: Path, seed: int = 9) -> DatasetManifest:
    """Normalize + impute every granule; labels copied untouched."""
    out_dir.mkdir(parents=True, exist_ok=True)
    entries = []
    for f, entry in enumerate(manifest):
        granule = preprocess_pipeline(
            read_granule(entry.granule), PreprocessConfig(rng_seed=seed), folder_index=f
        )
        gpath = out_dir / Path(entry.granule).name
        lpath = out_dir / Path(entry.labels).name
        write_granule(granule, gpath)
        shutil.copyfile(entry.labels, lpath)
        entries.append(ManifestEntry(granule=gpath, labels=lpath))
    out = DatasetManifest(entries)
    out.save(out_dir / "manifest.json")
    return out


# Recorded pilot configuration for the desk-scale learning check: a strongly
# separable synthetic fixture (plume channel shift 0.8 = 40x the noise sigma)
# and the stock optimizer settings with batch size 128.
DESK_SYNTH = SyntheticConfig(min_plumes=1, max_plumes=3, amplitude=0.8,
                             noise_sigma=0.02, nan_fraction=0.05)
DESK_TRAIN_CFG = dict(batch_size=128, seed=0)


@pytest.fixture(scope="session")
def desk_run(tmp_path_factory):
    """Full desk-scale run: synth -> preprocess -> train; shared by the
    learning acceptance check and the trained-model map tests."""
    root = tmp_path_factory.mktemp("desk_run")
    m_train = generate_synthetic_dataset(root / "train", seed=1, count=7,
                                         height=30, width=30, channels=38,
                                         config=DESK_SYNTH)
    m_val = generate_synthetic_dataset(root / "val", seed=2, count=2,
                                       height=24, width=24, channels=38,
                                       config=DESK_SYNTH)
    m_test = generate_synthetic_dataset(root / "test", seed=3, count=2,
                                        height=30, width=30, channels=38,
                                        config=DESK_SYNTH)
    p_train = preprocess_manifest(m_train, root / "ptrain")
    p_val = preprocess_manifest(m_val, root / "pval")
    p_test = preprocess_manifest(m_test, root / "ptest")

    t0 = time.perf_counter()
    result = train(p_train, p_val, root / "run",
                   train_cfg=TrainConfig(**DESK_TRAIN_CFG),
                   loss_cfg=LossConfig(alpha=1.0))
    elapsed = time.perf_counter() - t0
    return {
        "root": root,
        "train": p_train,
        "val": p_val,
        "test": p_test,
        "result": result,
        "train_seconds": elapsed,
    }


@pytest.fixture(scope="session")
def bench_datasets(tmp_path_factory):
    """Small/large manifests (4x payload ratio) with sparse labels for the
    memory and throughput benchmarks."""
    root = tmp_path_factory.mktemp("bench_data")
    cfg = SyntheticConfig(min_plumes=1, max_plumes=2, amplitude=0.5,
                          nan_fraction=0.0, label_density=0.02)
    generate_synthetic_dataset(root / "small", seed=11, count=8,
                               height=204, width=204, channels=38, config=cfg)
    generate_synthetic_dataset(root / "large", seed=12, count=32,
                               height=204, width=204, channels=38, config=cfg)
    return {
        "small": root / "small" / "manifest.json",
        "large": root / "large" / "manifest.json",
    }
