"""Diversity-gated test-time adaptation with a numpy autodiff core."""

from .adaptation import METHODS, AdaptationConfig, Session, StepOutcome, datta_step, tent_step
from .datagen import Domain, ScenarioSpec, SourceTask, apply_corruption, build_stream, gen_source
from .diversity import DiversityCache, DiversityGate, discrepancy_angles, diversity_score
from .harness import (Checkpoint, ExperimentRecord, TrainConfig, load_checkpoint, run_experiment,
                      save_checkpoint, train_source, write_report)
from .model import Model, ModelSpec
from .normalizers import BNLayerState, BatchStats, NormConfig, normalize

__version__ = "0.1.0"
