"""Forward noising, deterministic DDIM steps and patch purification.

Timesteps are 1-indexed (t = 1..T). ``alpha_bar(0)`` is defined as 1 so that a
step down to t_prev = 0 is a full denoise.

Patches are ``(3, s, s)`` float tensors with values in [0, 1].
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field
from pathlib import Path
from typing import Any, Callable

import numpy as np
import torch
import torch.nn as nn
import torch.nn.functional as F


class ScheduleError(ValueError):
    pass


class PredictorMismatchError(ValueError):
    pass


# --------------------------------------------------------------------------
# schedule


def _alphas_for_curve(total_steps: int, name: str, params: dict[str, Any]) -> np.ndarray:
    if name == "linear":
        start = float(params.get("start", 1e-4))
        end = float(params.get("end", 0.02))
        betas = np.linspace(start, end, total_steps, dtype=np.float64)
        return 1.0 - betas
    if name == "cosine":
        s = float(params.get("s", 0.008))
        steps = np.arange(total_steps + 1, dtype=np.float64)
        f = np.cos((steps / total_steps + s) / (1 + s) * math.pi / 2) ** 2
        abar = f / f[0]
        betas = np.clip(1.0 - abar[1:] / abar[:-1], 0.0, 0.999)
        return 1.0 - betas
    if name == "constant_alpha":
        return np.full(total_steps, float(params["alpha"]), dtype=np.float64)
    if name == "explicit":
        alphas = np.asarray(params["alphas"], dtype=np.float64)
        if alphas.shape != (total_steps,):
            raise ScheduleError(f"explicit curve needs {total_steps} alphas, got {alphas.shape}")
        return alphas
    raise ScheduleError(f"unknown beta curve {name!r}; expected linear, cosine, constant_alpha or explicit")


@dataclass(frozen=True)
class ScheduleSpec:
    """Serializable description of a diffusion schedule."""

    total_steps: int = 1000
    beta_curve: dict[str, Any] = field(
        default_factory=lambda: {"name": "linear", "params": {"start": 1e-4, "end": 0.02}}
    )
    respaced_stride: int = 100
    entry_timestep: int = 200

    def __post_init__(self):
        if isinstance(self.beta_curve, str):
            object.__setattr__(self, "beta_curve", {"name": self.beta_curve, "params": {}})

    def to_dict(self) -> dict[str, Any]:
        return {
            "total_steps": self.total_steps,
            "beta_curve": {"name": self.beta_curve["name"], "params": dict(self.beta_curve.get("params", {}))},
            "respaced_stride": self.respaced_stride,
            "entry_timestep": self.entry_timestep,
        }

    @classmethod
    def from_dict(cls, doc: dict[str, Any]) -> "ScheduleSpec":
        known = {"total_steps", "beta_curve", "respaced_stride", "entry_timestep"}
        unknown = set(doc) - known
        if unknown:
            raise ScheduleError(f"unknown schedule keys: {sorted(unknown)}")
        return cls(**doc)

    def build(self) -> "DiffusionSchedule":
        return build_schedule(
            self.total_steps, self.beta_curve, self.respaced_stride, self.entry_timestep
        )


@dataclass(frozen=True, eq=False)
class DiffusionSchedule:
    total_steps: int
    alphas: np.ndarray
    alpha_bars: np.ndarray
    respaced_stride: int
    entry_timestep: int

    def alpha_bar(self, t: int) -> float:
        if t == 0:
            return 1.0
        if not 1 <= t <= self.total_steps:
            raise ScheduleError(f"timestep {t} outside [0, {self.total_steps}]")
        return float(self.alpha_bars[t - 1])

    def ladder(self) -> list[int]:
        """Timesteps at which a DDIM step is taken, from the entry timestep down."""
        out = []
        t = self.entry_timestep
        while True:
            out.append(t)
            t -= self.respaced_stride
            if t < self.respaced_stride:
                break
        return out


def build_schedule(
    total_steps: int,
    beta_curve: dict[str, Any] | str = "linear",
    respaced_stride: int = 100,
    entry_timestep: int = 200,
) -> DiffusionSchedule:
    if total_steps < 1:
        raise ScheduleError("total_steps must be positive")
    if respaced_stride < 1:
        raise ScheduleError("respaced_stride must be positive")
    if not 1 <= entry_timestep <= total_steps:
        raise ScheduleError(f"entry_timestep {entry_timestep} not in [1, {total_steps}]")
    if respaced_stride > entry_timestep:
        raise ScheduleError(
            f"respaced_stride {respaced_stride} exceeds entry_timestep {entry_timestep}"
        )
    if isinstance(beta_curve, str):
        beta_curve = {"name": beta_curve, "params": {}}
    alphas = _alphas_for_curve(total_steps, beta_curve["name"], beta_curve.get("params", {}))
    if np.any(alphas <= 0) or np.any(alphas > 1):
        raise ScheduleError("alphas must lie in (0, 1]")
    alpha_bars = np.empty_like(alphas)
    acc = 1.0
    for i, a in enumerate(alphas):
        acc = acc * a
        alpha_bars[i] = acc
    if np.any(np.diff(alpha_bars) >= 0):
        raise ScheduleError("cumulative alphas must be strictly decreasing")
    alphas.setflags(write=False)
    alpha_bars.setflags(write=False)
    return DiffusionSchedule(total_steps, alphas, alpha_bars, respaced_stride, entry_timestep)


# --------------------------------------------------------------------------
# predictors


@dataclass(frozen=True)
class PredictorDescriptor:
    name: str
    spatial_size: int | None = None  # None: any size (fully convolutional)
    channels: int = 3

    def to_dict(self) -> dict[str, Any]:
        return {"name": self.name, "spatial_size": self.spatial_size, "channels": self.channels}


class NoisePredictor:
    """Wraps an epsilon-prediction callable ``fn(x_t, t) -> eps``.

    ``x_t`` is ``(B, C, s, s)``; ``t`` an integer timestep. When
    ``differentiable`` is False, purification routes gradients straight
    through the chain instead of through the network.
    """

    def __init__(
        self,
        fn: Callable[[torch.Tensor, int], torch.Tensor],
        descriptor: PredictorDescriptor,
        differentiable: bool = True,
    ):
        self.fn = fn
        self.descriptor = descriptor
        self.differentiable = differentiable

    def __call__(self, x_t: torch.Tensor, t: int) -> torch.Tensor:
        squeeze = x_t.dim() == 3
        x = x_t.unsqueeze(0) if squeeze else x_t
        eps = self.fn(x, t)
        if eps.shape != x.shape:
            raise PredictorMismatchError(
                f"predictor returned shape {tuple(eps.shape)} for input {tuple(x.shape)}"
            )
        return eps.squeeze(0) if squeeze else eps

    def check_patch(self, patch: torch.Tensor) -> None:
        c, h, w = patch.shape[-3:]
        d = self.descriptor
        if c != d.channels:
            raise PredictorMismatchError(f"predictor expects {d.channels} channels, patch has {c}")
        if d.spatial_size is not None and (h, w) != (d.spatial_size, d.spatial_size):
            raise PredictorMismatchError(
                f"predictor {d.name!r} expects {d.spatial_size}x{d.spatial_size} patches, got {h}x{w}"
            )


def _timestep_embedding(t: torch.Tensor, dim: int, total_steps: int) -> torch.Tensor:
    half = dim // 2
    freqs = torch.exp(-math.log(10000.0) * torch.arange(half, dtype=t.dtype, device=t.device) / half)
    args = (t / total_steps * 1000.0)[:, None] * freqs[None]
    return torch.cat([torch.sin(args), torch.cos(args)], dim=-1)


class ToyDenoiser(nn.Module):
    """Small fully convolutional epsilon predictor with timestep modulation."""

    def __init__(self, channels: int = 3, width: int = 32, total_steps: int = 1000, emb_dim: int = 32):
        super().__init__()
        self.total_steps = total_steps
        self.emb_dim = emb_dim
        self.time_mlp = nn.Sequential(nn.Linear(emb_dim, width), nn.SiLU(), nn.Linear(width, 2 * width))
        self.conv_in = nn.Conv2d(channels, width, 3, padding=1, padding_mode="replicate")
        self.conv_mid = nn.Conv2d(width, width, 3, padding=1, padding_mode="replicate")
        self.conv_mid2 = nn.Conv2d(width, width, 3, padding=1, padding_mode="replicate")
        self.conv_out = nn.Conv2d(width, channels, 3, padding=1, padding_mode="replicate")

    def forward(self, x: torch.Tensor, t: int | torch.Tensor) -> torch.Tensor:
        if not torch.is_tensor(t):
            t = torch.full((x.shape[0],), float(t), dtype=x.dtype)
        t = t.to(x.dtype).reshape(-1).expand(x.shape[0])
        scale, shift = self.time_mlp(_timestep_embedding(t, self.emb_dim, self.total_steps)).chunk(2, -1)
        h = self.conv_in(x)
        h = F.silu(h * (1 + scale[:, :, None, None]) + shift[:, :, None, None])
        h = F.silu(self.conv_mid(h)) + h
        h = F.silu(self.conv_mid2(h)) + h
        return self.conv_out(h)


def toy_predictor(net: ToyDenoiser, name: str = "toy-denoiser") -> NoisePredictor:
    return NoisePredictor(net, PredictorDescriptor(name=name, spatial_size=None, channels=3))


# --------------------------------------------------------------------------
# core operators


def forward_noise(x0: torch.Tensor, t: int, z: torch.Tensor, schedule: DiffusionSchedule) -> torch.Tensor:
    """Jump from clean ``x0`` straight to timestep ``t`` with fixed noise ``z``."""
    if x0.shape != z.shape:
        raise ValueError(f"noise shape {tuple(z.shape)} does not match input {tuple(x0.shape)}")
    if not 1 <= t <= schedule.total_steps:
        raise ScheduleError(f"timestep {t} outside [1, {schedule.total_steps}]")
    abar = schedule.alpha_bar(t)
    return math.sqrt(abar) * x0 + math.sqrt(1.0 - abar) * z


def ddim_step(
    x_t: torch.Tensor,
    t: int,
    t_prev: int,
    predictor: NoisePredictor | Callable[[torch.Tensor, int], torch.Tensor],
    schedule: DiffusionSchedule,
) -> torch.Tensor:
    """One deterministic (eta = 0) DDIM update from ``t`` to ``t_prev``."""
    if t_prev >= t:
        raise ScheduleError(f"t_prev ({t_prev}) must be smaller than t ({t})")
    abar_t = schedule.alpha_bar(t)
    abar_prev = schedule.alpha_bar(t_prev)
    eps = predictor(x_t, t)
    x0_hat = (x_t - math.sqrt(1.0 - abar_t) * eps) / math.sqrt(abar_t)
    return math.sqrt(abar_prev) * x0_hat + math.sqrt(1.0 - abar_prev) * eps


@dataclass
class PurifyResult:
    final_patch: torch.Tensor
    timesteps_visited: list[int]
    trajectory: list[torch.Tensor] | None = None


class _StraightThrough(torch.autograd.Function):
    @staticmethod
    def forward(ctx, inp, out):  # noqa: D401
        return out.clone()

    @staticmethod
    def backward(ctx, grad):
        return grad, None


def purify(
    seed: torch.Tensor,
    perturbation: torch.Tensor,
    z: torch.Tensor,
    predictor: NoisePredictor,
    schedule: DiffusionSchedule,
    keep_trajectory: bool = False,
) -> PurifyResult:
    """Noise ``seed + perturbation`` to the entry timestep, then walk the DDIM ladder.

    The chain stops once the current timestep drops below the stride; the
    state there is clamped to [0, 1] and returned.
    """
    if seed.shape != perturbation.shape:
        raise ValueError(
            f"seed {tuple(seed.shape)} and perturbation {tuple(perturbation.shape)} differ in shape"
        )
    if isinstance(predictor, NoisePredictor):
        predictor.check_patch(seed)
    x_in = seed + perturbation
    differentiable = getattr(predictor, "differentiable", True)

    def chain(x_start: torch.Tensor) -> tuple[torch.Tensor, list[int], list[torch.Tensor]]:
        t = schedule.entry_timestep
        x = forward_noise(x_start, t, z, schedule)
        visited = [t]
        traj = [x.detach().clone()] if keep_trajectory else []
        while t >= schedule.respaced_stride:
            t_prev = t - schedule.respaced_stride
            x = ddim_step(x, t, t_prev, predictor, schedule)
            t = t_prev
            visited.append(t)
            if keep_trajectory:
                traj.append(x.detach().clone())
        return x, visited, traj

    if differentiable:
        x, visited, traj = chain(x_in)
    else:
        with torch.no_grad():
            x, visited, traj = chain(x_in.detach())
        x = _StraightThrough.apply(x_in, x)
    return PurifyResult(
        final_patch=x.clamp(0.0, 1.0),
        timesteps_visited=visited,
        trajectory=traj if keep_trajectory else None,
    )


# --------------------------------------------------------------------------
# training and persistence


def train_toy_denoiser(
    images: torch.Tensor,
    schedule: DiffusionSchedule,
    steps: int = 1500,
    batch_size: int = 64,
    sizes: tuple[int, int] = (3, 16),
    lr: float = 2e-3,
    seed: int = 0,
    width: int = 32,
) -> ToyDenoiser:
    """Fit a :class:`ToyDenoiser` on patches cut and resized from ``images``.

    ``images`` is ``(N, 3, H, W)`` in [0, 1]. Each batch uses one patch side
    drawn from ``sizes`` (inclusive) so the net sees every scale it will
    purify at.
    """
    gen = torch.Generator().manual_seed(seed)
    with torch.random.fork_rng(devices=[]):
        torch.manual_seed(seed)
        net = ToyDenoiser(channels=images.shape[1], width=width, total_steps=schedule.total_steps)
    opt = torch.optim.Adam(net.parameters(), lr=lr)
    sched = torch.optim.lr_scheduler.CosineAnnealingLR(opt, steps)
    abars = torch.tensor(schedule.alpha_bars, dtype=torch.float32)
    n, _, h, w = images.shape
    for _ in range(steps):
        side = int(torch.randint(sizes[0], sizes[1] + 1, (1,), generator=gen))
        idx = torch.randint(0, n, (batch_size,), generator=gen)
        crop = int(torch.randint(side, h + 1, (1,), generator=gen))
        top = torch.randint(0, h - crop + 1, (batch_size,), generator=gen)
        left = torch.randint(0, w - crop + 1, (batch_size,), generator=gen)
        crops = torch.stack(
            [images[i, :, a : a + crop, b : b + crop] for i, a, b in zip(idx.tolist(), top.tolist(), left.tolist())]
        )
        x0 = F.interpolate(crops, size=(side, side), mode="bilinear", align_corners=False, antialias=True)
        t = torch.randint(1, schedule.total_steps + 1, (batch_size,), generator=gen)
        noise = torch.randn(x0.shape, generator=gen)
        ab = abars[t - 1][:, None, None, None]
        xt = ab.sqrt() * x0 + (1 - ab).sqrt() * noise
        loss = F.mse_loss(net(xt, t.float()), noise)
        opt.zero_grad()
        loss.backward()
        opt.step()
        sched.step()
    net.eval()
    for p in net.parameters():
        p.requires_grad_(False)
    return net


def save_denoiser(net: ToyDenoiser, path: str | Path, name: str = "toy-denoiser") -> None:
    archive = {
        "kind": "natpatch.denoiser",
        "descriptor": PredictorDescriptor(name=name).to_dict(),
        "config": {
            "channels": net.conv_in.in_channels,
            "width": net.conv_in.out_channels,
            "total_steps": net.total_steps,
            "emb_dim": net.emb_dim,
        },
        "state_dict": net.state_dict(),
    }
    torch.save(archive, str(path))


def load_denoiser(path: str | Path) -> NoisePredictor:
    archive = torch.load(str(path), map_location="cpu", weights_only=True)
    if archive.get("kind") != "natpatch.denoiser":
        raise ValueError(f"{path} is not a denoiser archive")
    net = ToyDenoiser(**archive["config"])
    net.load_state_dict(archive["state_dict"])
    net.eval()
    for p in net.parameters():
        p.requires_grad_(False)
    desc = PredictorDescriptor(**archive["descriptor"])
    return NoisePredictor(net, desc)
