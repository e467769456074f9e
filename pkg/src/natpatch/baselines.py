"""Ablation baselines sharing :func:`natpatch.attack.run_attack`'s loop."""

from __future__ import annotations

from .attack import AttackConfig, AttackResult, run_attack


def baseline_random_location(model, predictor, image, matched_ids, text_pool, seed_patch,
                             config: AttackConfig) -> AttackResult:
    """Diffusion-guided attack with a uniformly drawn (seeded) patch center."""
    return run_attack(model, predictor, image, matched_ids, text_pool, seed_patch,
                      config.with_(placement="random"))


def baseline_direct_pixel(model, predictor, image, matched_ids, text_pool, seed_patch,
                          config: AttackConfig) -> AttackResult:
    """Optimize the patch pixels directly, no purification; pixels stay in [0, clip_max]."""
    return run_attack(model, predictor, image, matched_ids, text_pool, seed_patch,
                      config.with_(optimizer="direct"))
