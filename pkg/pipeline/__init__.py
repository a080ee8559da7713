"""SEAL stage pipeline: protect, simulate-offender, train-detectors, audit, experiments."""

from pipeline.protect import run_protect
from pipeline.offender import run_simulate_offender
from pipeline.detectors import run_train_detectors
from pipeline.audit import run_audit
from pipeline.experiments import EXPERIMENTS, run_experiment

__all__ = [
    "run_protect",
    "run_simulate_offender",
    "run_train_detectors",
    "run_audit",
    "run_experiment",
    "EXPERIMENTS",
]
