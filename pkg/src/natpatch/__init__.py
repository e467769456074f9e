"""Diffusion-guided natural adversarial patches for image-text retrieval."""

from .attack import AttackConfig, AttackResult, run_attack, score_loss, tv_loss
from .data import DatasetManifest, generate_toy_corpus, ingest_manifest
from .diffusion import DiffusionSchedule, NoisePredictor, build_schedule, ddim_step, forward_noise, purify
from .placement import Placement, compose, select_center, upsample_map
from .retrieval import ScoreMatrix, attack_success_rate, recall_at_n
from .runner import run_ablation, run_experiment

__version__ = "0.1.0"

__all__ = [
    "AttackConfig",
    "AttackResult",
    "DatasetManifest",
    "DiffusionSchedule",
    "NoisePredictor",
    "Placement",
    "ScoreMatrix",
    "attack_success_rate",
    "build_schedule",
    "compose",
    "ddim_step",
    "forward_noise",
    "generate_toy_corpus",
    "ingest_manifest",
    "purify",
    "recall_at_n",
    "run_ablation",
    "run_attack",
    "run_experiment",
    "score_loss",
    "select_center",
    "tv_loss",
    "upsample_map",
]
