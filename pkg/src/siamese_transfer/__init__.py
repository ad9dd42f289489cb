"""Siamese-network transfer learning for few-shot emotion classification."""

from .data_pipeline import EMOTIONS, Dataset, Sample, SynthConfig, load_csv, synth_generate
from .protocols import (
    ExperimentConfig,
    ExperimentResult,
    Model,
    TrainConfig,
    classify,
    fine_tune,
    run_experiment,
    run_idt,
    select_adopted,
    train_oodt,
    uar,
)
from .siamese_model import SiameseParams, distance_loss, init_siamese, similarity

__version__ = "0.1.0"
