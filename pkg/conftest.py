"""
Shared pytest fixtures: tiny model configs, synthetic corpora and run storage
"""

import os

import numpy as np
import pytest
import torch

import msio
from chem import Spectrum
from config import ModelConfig, PreprocessConfig, SynthParams, TrainConfig
from logger import detach_storage
from storage import Storage


def pytest_collection_modifyitems(config, items):
    if os.environ.get("IMPNOVO_RUN_SLOW") == "1":
        return
    skip = pytest.mark.skip(reason="desk-scale run; set IMPNOVO_RUN_SLOW=1")
    for item in items:
        if "slow" in item.keywords:
            item.add_marker(skip)


@pytest.fixture(autouse=True)
def _detached_logger():
    yield
    detach_storage()


@pytest.fixture
def tiny_model_cfg() -> ModelConfig:
    return ModelConfig(
        d=16,
        encoder_layers=1,
        decoder_layers=1,
        imputer_layers=1,
        heads=2,
        ffn_width=32,
        n_queries=8,
        max_len=20,
        dropout=0.0,
    )


@pytest.fixture
def tiny_train_cfg() -> TrainConfig:
    return TrainConfig(
        batch_size=4,
        epochs=2,
        warmup_steps=2,
        peak_lr=1e-3,
        label_smoothing=0.0,
        val_max_psms=4,
    )


@pytest.fixture
def small_synth() -> SynthParams:
    return SynthParams(n_psms=20, min_length=4, max_length=8, noise_peaks=(2, 5))


@pytest.fixture
def small_split(small_synth):
    return msio.synth_dataset(small_synth, seed=3)


@pytest.fixture
def prepared_psms(small_split):
    return msio.prepare(small_split.train, PreprocessConfig())


@pytest.fixture
def storage(tmp_path) -> Storage:
    return Storage(tmp_path / "run")


@pytest.fixture
def rng():
    return np.random.default_rng(1234)


@pytest.fixture
def simple_spectrum() -> Spectrum:
    return Spectrum(
        mz=np.array([98.06004, 148.06044, 300.0]),
        intensity=np.array([1.0, 0.5, 0.25]),
        precursor_mz=500.0,
        precursor_charge=2,
    )


@pytest.fixture(autouse=True)
def _seeded_torch():
    torch.manual_seed(0)
    yield
