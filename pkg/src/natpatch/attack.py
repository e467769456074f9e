"""Diffusion-guided adversarial patch optimization against a retrieval surrogate."""

from __future__ import annotations

import time
from dataclasses import dataclass, field, replace
from typing import Any

import torch
import torch.nn.functional as F

from .diffusion import NoisePredictor, ScheduleSpec, purify
from .placement import (
    Placement,
    compose,
    make_mask,
    patch_side_for,
    random_placement,
    select_center,
    upsample_map,
)
from .surrogate import cross_attention_map
from .tokenizer import TextBatch

PLACEMENTS = ("attention", "random")
OPTIMIZERS = ("diffusion", "direct")


class NonFiniteLossError(RuntimeError):
    pass


@dataclass(frozen=True)
class AttackConfig:
    max_iterations: int = 300
    learning_rate: float = 0.5
    lambda_tv: float = 0.1
    top_k: int = 15
    clip_max: float = 1.0
    patch_ratio: float = 0.15
    schedule: ScheduleSpec = field(default_factory=ScheduleSpec)
    success_at: int = 10
    margin_floor: float = 1.0
    seed: int = 0
    placement: str = "attention"
    optimizer: str = "diffusion"
    recompute_placement: bool = False
    noise_std: float = 0.0

    def __post_init__(self):
        if self.max_iterations < 1:
            raise ValueError("max_iterations must be positive")
        if self.learning_rate < 0:
            raise ValueError("learning_rate must be non-negative")
        if self.lambda_tv < 0:
            raise ValueError("lambda_tv must be non-negative")
        if self.top_k < 1:
            raise ValueError("top_k must be at least 1")
        if not 0 < self.clip_max <= 1:
            raise ValueError("clip_max must lie in (0, 1]")
        if not 0 < self.patch_ratio <= 1:
            raise ValueError("patch_ratio must lie in (0, 1]")
        if self.placement not in PLACEMENTS:
            raise ValueError(f"placement must be one of {PLACEMENTS}")
        if self.optimizer not in OPTIMIZERS:
            raise ValueError(f"optimizer must be one of {OPTIMIZERS}")
        if isinstance(self.schedule, dict):
            object.__setattr__(self, "schedule", ScheduleSpec.from_dict(self.schedule))

    def to_dict(self) -> dict[str, Any]:
        out = {k: getattr(self, k) for k in self.__dataclass_fields__}
        out["schedule"] = self.schedule.to_dict()
        return out

    @classmethod
    def from_dict(cls, doc: dict[str, Any]) -> "AttackConfig":
        unknown = set(doc) - set(cls.__dataclass_fields__)
        if unknown:
            raise ValueError(f"unknown attack config keys: {sorted(unknown)}")
        return cls(**doc)

    def with_(self, **changes) -> "AttackConfig":
        return replace(self, **changes)


@dataclass
class AttackResult:
    final_patch: torch.Tensor
    perturbation: torch.Tensor
    placement: Placement
    iterations_used: int
    loss_trace: list[float]
    success: dict[int, bool]
    matched_rank: int
    adversarial_image: torch.Tensor
    final_scores: torch.Tensor
    wall_time: float
    score_trace: list[float] = field(default_factory=list)
    tv_trace: list[float] = field(default_factory=list)

    @property
    def succeeded(self) -> bool:
        return bool(self.success.get(max(self.success), False))


# --------------------------------------------------------------------------
# loss terms


def clip_perturbed(values: torch.Tensor, tau: float) -> torch.Tensor:
    """Clamp every entry into [0, tau]."""
    return values.clamp(0.0, tau)


def _descending_order(scores: torch.Tensor) -> torch.Tensor:
    # stable sort keeps the smaller index first among equal scores
    return torch.sort(scores.detach(), descending=True, stable=True).indices


def matched_rank(scores: torch.Tensor, matched_ids) -> int:
    """1-based rank of the best-ranked matched text."""
    order = _descending_order(scores).tolist()
    matched = set(int(i) for i in matched_ids)
    return next(r for r, i in enumerate(order, start=1) if i in matched)


def score_loss(scores: torch.Tensor, matched_ids, top_k: int, margin_floor: float = 1.0) -> torch.Tensor:
    """Best matched score minus worst unmatched score among the top-k texts.

    If no matched text is left in the top-k the loss saturates at
    ``-margin_floor``. If the top-k holds only matched texts, the strongest
    unmatched text outside it stands in for the unmatched set.
    """
    n = scores.shape[-1]
    if n == 0:
        raise ValueError("no texts to score")
    if top_k > n:
        raise ValueError(f"top_k={top_k} exceeds the pool of {n} texts")
    matched = set(int(i) for i in matched_ids)
    if not matched:
        raise ValueError("matched_ids must be non-empty")
    if len(matched) >= n:
        raise ValueError("pool has no unmatched text")
    order = _descending_order(scores).tolist()
    top = order[:top_k]
    s1 = [i for i in top if i in matched]
    s2 = [i for i in top if i not in matched]
    if not s1:
        return scores.new_tensor(-float(margin_floor))
    if not s2:
        s2 = [next(i for i in order[top_k:] if i not in matched)]
    return scores[s1].max() - scores[s2].min()


def tv_loss(patch: torch.Tensor) -> torch.Tensor:
    """Root of summed squared neighbour differences, divided by the pixel count.

    Accepts ``(C, s, s)`` or ``(s, s)``; channels are summed inside the root.
    """
    p = patch if patch.dim() == 3 else patch.unsqueeze(0)
    dv = p[:, :-1, :] - p[:, 1:, :]
    dh = p[:, :, :-1] - p[:, :, 1:]
    total = dv.pow(2).sum() + dh.pow(2).sum()
    n_pixels = p.shape[-1] * p.shape[-2]
    if float(total.detach()) == 0.0:
        return total * 0.0
    return total.sqrt() / n_pixels


def total_loss(score_part, tv_part, lambda_tv: float):
    if lambda_tv < 0:
        raise ValueError("lambda_tv must be non-negative")
    return score_part + lambda_tv * tv_part


# --------------------------------------------------------------------------
# attack loop


def make_seed_patch(source: torch.Tensor, side: int) -> torch.Tensor:
    """Resize a real image to a ``(3, side, side)`` seed patch."""
    x = F.interpolate(source.unsqueeze(0), size=(side, side), mode="bilinear", align_corners=False, antialias=True)
    return x[0].clamp(0, 1)


def attention_placement(model, image: torch.Tensor, texts: TextBatch, patch_side: int) -> Placement:
    """Center the patch on the peak of the caption-averaged, upsampled attention map."""
    maps = [cross_attention_map(model, image, texts.select([j])).raw for j in range(len(texts))]
    raw = torch.stack(maps).mean(0)
    h, w = image.shape[-2:]
    return select_center(upsample_map(raw, h, w), patch_side)


@dataclass
class Evaluation:
    loss: torch.Tensor
    score_part: torch.Tensor
    tv_part: torch.Tensor
    patch: torch.Tensor
    adversarial: torch.Tensor
    scores: torch.Tensor


class PatchObjective:
    """Maps the free variable to the full loss for one image.

    The free variable is the perturbation on the seed (diffusion optimizer)
    or the patch pixels themselves (direct optimizer).
    """

    def __init__(self, model, predictor, image, matched, text_pool, seed_patch, config, placement, z,
                 noise_gen: torch.Generator | None = None):
        self.direct = config.optimizer == "direct"
        if not self.direct and predictor is None:
            raise ValueError("the diffusion optimizer needs a noise predictor")
        self.predictor = predictor
        self.image = image
        self.matched = matched
        self.seed = seed_patch
        self.config = config
        self.schedule = config.schedule.build()
        self.z = z
        self.noise_gen = noise_gen
        self.scorer = model.make_scorer(text_pool)
        self.set_placement(placement)

    def set_placement(self, placement: Placement) -> None:
        self.placement = placement
        self.mask = make_mask(placement)

    def patch(self, var: torch.Tensor) -> torch.Tensor:
        if self.direct:
            return var
        return purify(self.seed, var, self.z, self.predictor, self.schedule).final_patch

    def __call__(self, var: torch.Tensor) -> Evaluation:
        cfg = self.config
        patch = self.patch(var)
        adv = compose(self.image, patch, self.mask, self.placement)
        scored = adv
        if cfg.noise_std > 0:
            noise = torch.randn(adv.shape, generator=self.noise_gen, dtype=adv.dtype)
            scored = (adv + cfg.noise_std * noise).clamp(0, 1)
        scores = self.scorer(scored)[0]
        ls = score_loss(scores, self.matched, cfg.top_k, cfg.margin_floor)
        lt = tv_loss(patch)
        return Evaluation(total_loss(ls, lt, cfg.lambda_tv), ls, lt, patch, adv, scores)


def run_attack(
    model,
    predictor: NoisePredictor | None,
    image: torch.Tensor,
    matched_ids,
    text_pool: TextBatch,
    seed_patch: torch.Tensor,
    config: AttackConfig,
) -> AttackResult:
    """Optimize a patch that pushes every matched caption out of the top ranks.

    Each iteration purifies ``seed + perturbation`` (or uses the patch pixels
    directly when ``config.optimizer == "direct"``), pastes it at the chosen
    placement, scores the result against ``text_pool`` and takes one plain
    gradient step. ``seed + perturbation`` is kept inside [0, clip_max].
    The loop stops as soon as no matched caption is within the top
    ``config.success_at``.
    """
    start = time.perf_counter()
    matched = sorted(set(int(i) for i in matched_ids))
    if not matched:
        raise ValueError("matched_ids must be non-empty")
    if config.top_k > len(text_pool):
        raise ValueError(f"top_k={config.top_k} exceeds the pool of {len(text_pool)} texts")
    h, w = image.shape[-2:]
    side = patch_side_for(config.patch_ratio, h, w)
    if seed_patch.shape != (image.shape[0], side, side):
        raise ValueError(f"seed patch must be {(image.shape[0], side, side)}, got {tuple(seed_patch.shape)}")

    seed = seed_patch.detach().clone()
    image = image.detach().clone()
    gen = torch.Generator().manual_seed(config.seed)
    z = torch.randn(seed.shape, generator=gen, dtype=seed.dtype)
    place_gen = torch.Generator().manual_seed(config.seed + 1)
    noise_gen = torch.Generator().manual_seed(config.seed + 2)

    matched_texts = text_pool.select(matched)
    if config.placement == "random":
        placement = random_placement(h, w, side, place_gen)
    else:
        placement = attention_placement(model, image, matched_texts, side)
    objective = PatchObjective(model, predictor, image, matched, text_pool, seed, config, placement, z, noise_gen)
    direct = objective.direct

    param = clip_perturbed(seed, config.clip_max) - (0 if direct else seed)
    loss_trace: list[float] = []
    score_trace: list[float] = []
    tv_trace: list[float] = []
    rank = 0
    ev = None
    for it in range(config.max_iterations):
        if config.recompute_placement and ev is not None and config.placement == "attention":
            objective.set_placement(attention_placement(model, ev.adversarial.detach(), matched_texts, side))
        var = param.clone().requires_grad_(True)
        ev = objective(var)
        if not torch.isfinite(ev.loss):
            raise NonFiniteLossError(f"non-finite loss at iteration {it}")
        loss_trace.append(float(ev.loss.detach()))
        score_trace.append(float(ev.score_part.detach()))
        tv_trace.append(float(ev.tv_part.detach()))
        rank = matched_rank(ev.scores, matched)
        if rank > config.success_at or it + 1 == config.max_iterations:
            break
        grad = None
        if ev.loss.requires_grad:
            (grad,) = torch.autograd.grad(ev.loss, var, allow_unused=True)
        if grad is None:
            grad = torch.zeros_like(param)
        if direct:
            param = clip_perturbed(param - config.learning_rate * grad, config.clip_max)
        else:
            param = clip_perturbed(seed + param - config.learning_rate * grad, config.clip_max) - seed

    return AttackResult(
        final_patch=ev.patch.detach().clone(),
        perturbation=(param - seed) if direct else param.detach().clone(),
        placement=objective.placement,
        iterations_used=len(loss_trace),
        loss_trace=loss_trace,
        success={n: rank > n for n in (1, 5, 10)},
        matched_rank=rank,
        adversarial_image=ev.adversarial.detach().clone(),
        final_scores=ev.scores.detach().clone(),
        wall_time=time.perf_counter() - start,
        score_trace=score_trace,
        tv_trace=tv_trace,
    )
