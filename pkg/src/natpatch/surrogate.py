"""Vision-language surrogate models: scoring, cross-attention maps, toy training.

Any object exposing ``descriptor``, ``vocab``, ``make_scorer(texts)`` and
``attention_weights(image, text)`` (or ``pseudo_attention``) can stand in for
the toy model; external checkpoints plug in through :func:`register_adapter`.
"""

from __future__ import annotations

import math
from dataclasses import asdict, dataclass
from pathlib import Path
from typing import Any, Callable

import torch
import torch.nn as nn
import torch.nn.functional as F

from .data import DatasetManifest
from .tokenizer import TextBatch, Vocabulary


class ModelContractError(RuntimeError):
    pass


class NoFusionBlockError(ModelContractError):
    pass


class TrainingFloorError(RuntimeError):
    pass


@dataclass(frozen=True)
class ModelDescriptor:
    name: str = "toy-vlp"
    image_size: int = 64
    patch_px: int = 8
    d_model: int = 64
    num_heads: int = 4
    image_layers: int = 2
    text_layers: int = 1
    ff_dim: int = 128
    vocab_size: int = 0
    max_length: int = 8
    fusion: bool = True

    @property
    def grid_size(self) -> int:
        return self.image_size // self.patch_px


@dataclass
class AttentionMap:
    raw: torch.Tensor  # (g, g), non-negative
    source: str

    def __post_init__(self):
        if not torch.isfinite(self.raw).all() or (self.raw < 0).any():
            raise ModelContractError("attention map must be finite and non-negative")


def attention_weights(q: torch.Tensor, k: torch.Tensor, scale: float | None = None) -> torch.Tensor:
    """Row-wise softmax of ``q @ k^T / sqrt(d)`` over the key axis."""
    scale = math.sqrt(q.shape[-1]) if scale is None else scale
    return torch.softmax(q @ k.transpose(-1, -2) / scale, dim=-1)


class CrossAttention(nn.Module):
    """Text queries attend over image keys/values; returns output and weights."""

    def __init__(self, d_model: int, num_heads: int):
        super().__init__()
        if d_model % num_heads:
            raise ValueError("d_model must be divisible by num_heads")
        self.h = num_heads
        self.dh = d_model // num_heads
        self.q = nn.Linear(d_model, d_model)
        self.k = nn.Linear(d_model, d_model)
        self.v = nn.Linear(d_model, d_model)
        self.o = nn.Linear(d_model, d_model)

    def _split(self, x: torch.Tensor) -> torch.Tensor:
        return x.reshape(*x.shape[:-1], self.h, self.dh).transpose(-2, -3)

    def forward(self, text: torch.Tensor, image: torch.Tensor) -> tuple[torch.Tensor, torch.Tensor]:
        """All-pairs attention.

        ``text`` is (T, L, d), ``image`` is (B, G, d). Returns outputs of shape
        (B, T, L, d) and weights of shape (B, T, h, L, G).
        """
        n_txt, n_tok, _ = text.shape
        n_img = image.shape[0]
        # flatten every text token of every caption into one query axis per head
        q = self._split(self.q(text)).permute(1, 0, 2, 3).reshape(self.h, n_txt * n_tok, self.dh)
        k = self._split(self.k(image))  # B h G dh
        v = self._split(self.v(image))
        w = torch.softmax(q.unsqueeze(0) @ k.transpose(-1, -2) / math.sqrt(self.dh), dim=-1)  # B h TL G
        out = (w @ v).reshape(n_img, self.h, n_txt, n_tok, self.dh).permute(0, 2, 3, 1, 4)
        out = out.reshape(n_img, n_txt, n_tok, self.h * self.dh)
        w = w.reshape(n_img, self.h, n_txt, n_tok, -1).transpose(1, 2)
        return self.o(out), w


class ToyVLP(nn.Module):
    """Patch-embedding image transformer, small text transformer, one cross-attention fusion block."""

    def __init__(self, descriptor: ModelDescriptor, vocab: Vocabulary):
        super().__init__()
        d = descriptor.d_model
        self.descriptor = descriptor
        self.vocab = vocab
        g = descriptor.grid_size
        self.patch_embed = nn.Conv2d(3, d, descriptor.patch_px, stride=descriptor.patch_px)
        self.img_pos = nn.Parameter(torch.randn(1, g * g, d) * 0.02)
        self.img_enc = nn.ModuleList(
            nn.TransformerEncoderLayer(d, descriptor.num_heads, descriptor.ff_dim, dropout=0.0,
                                       batch_first=True, norm_first=True)
            for _ in range(descriptor.image_layers)
        )
        self.img_norm = nn.LayerNorm(d)
        self.tok_embed = nn.Embedding(descriptor.vocab_size, d, padding_idx=0)
        self.txt_pos = nn.Parameter(torch.randn(1, descriptor.max_length, d) * 0.02)
        self.txt_enc = nn.ModuleList(
            nn.TransformerEncoderLayer(d, descriptor.num_heads, descriptor.ff_dim, dropout=0.0,
                                       batch_first=True, norm_first=True)
            for _ in range(descriptor.text_layers)
        )
        self.txt_norm = nn.LayerNorm(d)
        if descriptor.fusion:
            self.cross = CrossAttention(d, descriptor.num_heads)
            self.fuse_norm = nn.LayerNorm(d)
            self.fuse_ff = nn.Sequential(nn.LayerNorm(d), nn.Linear(d, descriptor.ff_dim), nn.GELU(),
                                         nn.Linear(descriptor.ff_dim, d))
            self.head = nn.Sequential(nn.LayerNorm(d), nn.Linear(d, descriptor.ff_dim), nn.GELU(),
                                      nn.Linear(descriptor.ff_dim, 1))
        else:
            self.img_proj = nn.Linear(d, d)
            self.txt_proj = nn.Linear(d, d)
            self.logit_scale = nn.Parameter(torch.tensor(math.log(10.0)))

    # -- encoders --------------------------------------------------------

    def encode_image(self, images: torch.Tensor) -> torch.Tensor:
        if images.dim() == 3:
            images = images.unsqueeze(0)
        size = self.descriptor.image_size
        if images.shape[-3:] != (3, size, size):
            raise ValueError(f"expected images of shape (3, {size}, {size}), got {tuple(images.shape[-3:])}")
        x = self.patch_embed(images).flatten(2).transpose(1, 2) + self.img_pos
        for layer in self.img_enc:
            x = layer(x)
        return self.img_norm(x)

    def encode_text(self, texts: TextBatch) -> tuple[torch.Tensor, torch.Tensor]:
        if texts.vocab_size != self.descriptor.vocab_size:
            raise ValueError("text batch was tokenized with a different vocabulary")
        ids = texts.token_ids[:, : self.descriptor.max_length]
        pad = texts.padding_mask[:, : self.descriptor.max_length]
        x = self.tok_embed(ids) + self.txt_pos[:, : ids.shape[1]]
        for layer in self.txt_enc:
            x = layer(x, src_key_padding_mask=pad)
        return self.txt_norm(x), pad

    # -- scoring ---------------------------------------------------------

    def _score_encoded(self, img: torch.Tensor, txt: torch.Tensor, pad: torch.Tensor) -> torch.Tensor:
        valid = (~pad).to(img.dtype)
        if self.descriptor.fusion:
            attended, _ = self.cross(txt, img)  # B T L d
            fused = self.fuse_norm(txt.unsqueeze(0) + attended)
            fused = fused + self.fuse_ff(fused)
            pooled = (fused * valid[None, :, :, None]).sum(2) / valid.sum(1)[None, :, None]
            return self.head(pooled).squeeze(-1)
        v = F.normalize(self.img_proj(img.mean(1)), dim=-1)
        t_pool = (txt * valid[..., None]).sum(1) / valid.sum(1, keepdim=True)
        t = F.normalize(self.txt_proj(t_pool), dim=-1)
        return self.logit_scale.exp() * v @ t.T

    def make_scorer(self, texts: TextBatch) -> Callable[[torch.Tensor], torch.Tensor]:
        txt, pad = self.encode_text(texts)

        def scorer(images: torch.Tensor) -> torch.Tensor:
            return self._score_encoded(self.encode_image(images), txt, pad)

        return scorer

    def forward(self, images: torch.Tensor, texts: TextBatch) -> torch.Tensor:
        return self.make_scorer(texts)(images)

    # -- attention -------------------------------------------------------

    def attention_weights(self, image: torch.Tensor, text: TextBatch) -> torch.Tensor:
        """Cross-attention weights (heads, L_valid, G) for one image and one caption."""
        if not self.descriptor.fusion:
            raise NoFusionBlockError(f"{self.descriptor.name} has no cross-attention block")
        img = self.encode_image(image)
        txt, pad = self.encode_text(text.select([0]))
        _, w = self.cross(txt, img)
        n = int((~pad[0]).sum())
        return w[0, 0, :, :n, :]

    def pseudo_attention(self, image: torch.Tensor, text: TextBatch) -> torch.Tensor:
        """Softmax over visual tokens of token-embedding . pooled-text / sqrt(d); shape (1, 1, G)."""
        img = self.encode_image(image)[0]
        txt, pad = self.encode_text(text.select([0]))
        valid = (~pad[0]).to(txt.dtype)
        pooled = (txt[0] * valid[:, None]).sum(0) / valid.sum()
        return attention_weights(pooled[None, None, :], img[None], scale=math.sqrt(self.descriptor.d_model))


# --------------------------------------------------------------------------
# public operations


def _as_batch(images) -> torch.Tensor:
    if isinstance(images, (list, tuple)):
        if not images:
            raise ValueError("no images to score")
        return torch.stack(list(images))
    if images.dim() == 3:
        return images.unsqueeze(0)
    return images


def score_pairs(model, images, texts: TextBatch) -> torch.Tensor:
    """Score matrix (num_images, num_texts); differentiable in the image pixels."""
    batch = _as_batch(images)
    if batch.shape[0] == 0 or len(texts) == 0:
        raise ValueError("score_pairs needs at least one image and one text")
    return model.make_scorer(texts)(batch)


def cross_attention_map(model, image: torch.Tensor, text: TextBatch, allow_pseudo: bool = True) -> AttentionMap:
    """Text-to-image attention reduced to a (g, g) map.

    Weights are averaged over heads and then over the caption's text tokens.
    Models without a fusion block fall back to pseudo-attention when allowed.
    """
    g = model.descriptor.grid_size
    with torch.no_grad():
        if getattr(model.descriptor, "fusion", True):
            w = model.attention_weights(image, text)
            source = "cross-attention:last-layer:mean-heads:mean-text-tokens"
        elif allow_pseudo:
            w = model.pseudo_attention(image, text)
            source = "pseudo-attention:visual-tokens-dot-pooled-text"
        else:
            raise NoFusionBlockError(
                f"{model.descriptor.name} has no cross-attention block and pseudo-attention is disabled"
            )
    rows = w.sum(-1)
    if not torch.allclose(rows, torch.ones_like(rows), atol=1e-5):
        raise ModelContractError("attention rows do not sum to one")
    return AttentionMap(raw=w.mean(dim=0).mean(dim=0).reshape(g, g).clone(), source=source)


# --------------------------------------------------------------------------
# toy training


@dataclass
class ToyTrainConfig:
    steps: int = 600
    lr: float = 3e-3
    weight_decay: float = 0.01
    max_shift: int = 6
    noise_std: float = 0.03
    heldout_views: int = 2
    recall_floor: float = 0.9
    eval_every: int = 100
    d_model: int = 64
    num_heads: int = 4
    image_layers: int = 2
    text_layers: int = 1
    ff_dim: int = 128
    patch_px: int = 8
    max_length: int = 8
    fusion: bool = True

    @classmethod
    def from_dict(cls, doc: dict[str, Any]) -> "ToyTrainConfig":
        unknown = set(doc) - set(cls.__dataclass_fields__)
        if unknown:
            raise ValueError(f"unknown training keys: {sorted(unknown)}")
        return cls(**doc)


def _augment(images: torch.Tensor, gen: torch.Generator, max_shift: int, noise_std: float) -> torch.Tensor:
    n, _, h, w = images.shape
    if max_shift:
        padded = F.pad(images, (max_shift,) * 4, mode="replicate")
        offs = torch.randint(0, 2 * max_shift + 1, (n, 2), generator=gen).tolist()
        images = torch.stack([padded[i, :, a : a + h, b : b + w] for i, (a, b) in enumerate(offs)])
    if noise_std:
        images = images + noise_std * torch.randn(images.shape, generator=gen)
    return images.clamp(0, 1)


def _text_targets(manifest: DatasetManifest) -> tuple[list[str], torch.Tensor]:
    captions, owner = [], []
    for i, rec in enumerate(manifest.records):
        for c in rec.captions:
            captions.append(c)
            owner.append(i)
    return captions, torch.tensor(owner)


def _retrieval_r1(scores: torch.Tensor, owner: torch.Tensor) -> float:
    best = scores.argmax(dim=1)
    return float((owner[best] == torch.arange(scores.shape[0])).float().mean())


def train_toy_model(manifest: DatasetManifest, config: ToyTrainConfig | None = None, seed: int = 0) -> ToyVLP:
    """Train the toy model on augmented views of the manifest images.

    The held-out split is a set of augmented views drawn from an independent
    seed; training fails if its image-to-text R@1 stays below the floor.
    """
    config = config or ToyTrainConfig()
    if len(manifest.records) < 2:
        raise ValueError("training needs at least 2 images")
    images = manifest.load_images()
    captions, owner = _text_targets(manifest)
    vocab = Vocabulary.from_captions(captions)
    desc = ModelDescriptor(
        image_size=images.shape[-1], patch_px=config.patch_px, d_model=config.d_model,
        num_heads=config.num_heads, image_layers=config.image_layers, text_layers=config.text_layers,
        ff_dim=config.ff_dim, vocab_size=len(vocab), max_length=config.max_length, fusion=config.fusion,
        name="toy-vlp" if config.fusion else "toy-dual",
    )
    if images.shape[-1] != images.shape[-2] or images.shape[-1] % config.patch_px:
        raise ValueError("toy model needs square images whose side is a multiple of patch_px")
    texts = vocab.encode(captions, config.max_length)
    n_img = images.shape[0]
    pos = torch.zeros(n_img, len(captions), dtype=torch.bool)
    pos[owner, torch.arange(len(captions))] = True

    with torch.random.fork_rng(devices=[]):
        torch.manual_seed(seed)
        model = ToyVLP(desc, vocab)
    gen = torch.Generator().manual_seed(seed)
    opt = torch.optim.AdamW(model.parameters(), lr=config.lr, weight_decay=config.weight_decay)
    if config.steps >= 30:
        sched = torch.optim.lr_scheduler.OneCycleLR(opt, max_lr=config.lr, total_steps=config.steps, pct_start=0.1)
    else:  # too short for a warm-up phase
        sched = torch.optim.lr_scheduler.LambdaLR(opt, lambda _: 1.0)

    hgen = torch.Generator().manual_seed(seed + 7919)
    heldout = torch.cat([_augment(images, hgen, config.max_shift, config.noise_std) for _ in range(config.heldout_views)])
    held_owner = torch.arange(n_img).repeat(config.heldout_views)
    history = []

    def evaluate() -> dict[str, float]:
        model.eval()
        with torch.no_grad():
            scorer = model.make_scorer(texts)
            s_held = scorer(heldout)
            s_clean = scorer(images)
        hit_held = pos[held_owner, s_held.argmax(1)].float().mean()
        hit_clean = pos[torch.arange(n_img), s_clean.argmax(1)].float().mean()
        model.train()
        return {"heldout_r1": float(hit_held), "clean_r1": float(hit_clean)}

    model.train()
    for step in range(config.steps):
        batch = _augment(images, gen, config.max_shift, config.noise_std)
        s = model(batch, texts)
        # image->text: all matched captions are positives
        tr = -(torch.logsumexp(s.masked_fill(~pos, -1e4), 1) - torch.logsumexp(s, 1)).mean()
        ir = F.cross_entropy(s.T, owner)
        loss = tr + ir
        opt.zero_grad()
        loss.backward()
        opt.step()
        sched.step()
        if (step + 1) % config.eval_every == 0 or step + 1 == config.steps:
            history.append({"step": step + 1, "loss": float(loss.detach()), **evaluate()})

    model.eval()
    for p in model.parameters():
        p.requires_grad_(False)
    final = history[-1]
    model.training_report = {"history": history, **final, "seed": seed, "config": asdict(config)}
    if final["heldout_r1"] < config.recall_floor:
        raise TrainingFloorError(
            f"held-out R@1 {final['heldout_r1']:.3f} below floor {config.recall_floor} after {config.steps} steps"
        )
    return model


# --------------------------------------------------------------------------
# persistence and adapters


def save_toy_model(model: ToyVLP, path: str | Path) -> None:
    torch.save(
        {
            "kind": "natpatch.toy_vlp",
            "descriptor": asdict(model.descriptor),
            "vocab": list(model.vocab.tokens),
            "state_dict": model.state_dict(),
        },
        str(path),
    )


def load_toy_model(path: str | Path) -> ToyVLP:
    archive = torch.load(str(path), map_location="cpu", weights_only=True)
    if archive.get("kind") != "natpatch.toy_vlp":
        raise ModelContractError(f"{path} is not a toy model archive")
    model = ToyVLP(ModelDescriptor(**archive["descriptor"]), Vocabulary(archive["vocab"]))
    model.load_state_dict(archive["state_dict"])
    model.eval()
    for p in model.parameters():
        p.requires_grad_(False)
    return model


ADAPTERS: dict[str, Callable[[dict[str, Any]], Any]] = {
    "toy": lambda spec: load_toy_model(spec["checkpoint"]),
}


def register_adapter(name: str, factory: Callable[[dict[str, Any]], Any]) -> None:
    ADAPTERS[name] = factory


def probe_model(model) -> None:
    """Self-test a surrogate: finite scores and well-formed attention."""
    desc = model.descriptor
    image = torch.full((3, desc.image_size, desc.image_size), 0.5)
    word = next((t for t in model.vocab.tokens[3:]), "probe")
    text = model.vocab.encode([word], desc.max_length)
    with torch.no_grad():
        s = score_pairs(model, [image], text)
    if s.shape != (1, 1) or not torch.isfinite(s).all():
        raise ModelContractError(f"probe produced an invalid score: {s}")
    cross_attention_map(model, image, text)


def load_external_model(spec: dict[str, Any]):
    name = spec.get("adapter")
    if name not in ADAPTERS:
        raise KeyError(f"unknown adapter {name!r}; available: {', '.join(sorted(ADAPTERS))}")
    try:
        model = ADAPTERS[name](spec)
    except (OSError, RuntimeError, KeyError) as exc:
        if isinstance(exc, ModelContractError):
            raise
        raise ModelContractError(f"adapter {name!r} failed to load {spec.get('checkpoint')!r}: {exc}") from exc
    probe_model(model)
    return model
