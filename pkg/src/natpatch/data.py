"""Dataset manifests and the synthetic shapes corpus.

A manifest is a line-delimited JSON file, one record per line::

    {"id": "toy-000", "image": "images/toy-000.png", "captions": ["a red circle on white"]}

Image paths are resolved relative to the manifest's directory. A record may
carry ``"split"`` (train/val/test, default test). A line of the form
``{"_meta": {...}}`` holds manifest-level metadata such as provenance.
"""

from __future__ import annotations

import itertools
import json
import os
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np
import torch
from PIL import Image, ImageDraw

SPLITS = ("train", "val", "test")


class ManifestError(ValueError):
    pass


@dataclass(frozen=True)
class ManifestRecord:
    id: str
    image: Path
    captions: tuple[str, ...]
    split: str = "test"


@dataclass
class DatasetManifest:
    records: list[ManifestRecord]
    path: Path | None = None
    provenance: str = ""
    meta: dict = field(default_factory=dict)

    def __len__(self) -> int:
        return len(self.records)

    def split(self, name: str) -> list[ManifestRecord]:
        return [r for r in self.records if r.split == name]

    def load_images(self, records: list[ManifestRecord] | None = None) -> torch.Tensor:
        return torch.stack([load_image(r.image) for r in (records or self.records)])

    def captions(self) -> list[str]:
        return [c for r in self.records for c in r.captions]


def load_image(path: str | Path) -> torch.Tensor:
    """Read an RGB image as a ``(3, H, W)`` float tensor in [0, 1]."""
    with Image.open(path) as im:
        arr = np.asarray(im.convert("RGB"), dtype=np.float32) / 255.0
    return torch.from_numpy(arr.copy()).permute(2, 0, 1).contiguous()


def save_image(tensor: torch.Tensor, path: str | Path) -> None:
    """Write a ``(3, H, W)`` tensor in [0, 1] as a lossless 8-bit PNG."""
    arr = tensor.detach().clamp(0, 1).permute(1, 2, 0).cpu().numpy()
    arr = np.round(arr * 255.0).astype(np.uint8)
    Image.fromarray(arr, mode="RGB").save(path, format="PNG")


def ingest_manifest(path: str | Path) -> DatasetManifest:
    path = Path(path)
    if not path.is_file():
        raise ManifestError(f"manifest not found: {path}")
    root = path.parent
    records: list[ManifestRecord] = []
    seen: set[str] = set()
    meta: dict = {}
    with open(path, encoding="utf-8") as fh:
        for lineno, line in enumerate(fh, start=1):
            if not line.strip():
                continue
            try:
                doc = json.loads(line)
            except json.JSONDecodeError as exc:
                raise ManifestError(f"{path}:{lineno}: invalid JSON ({exc.msg})") from None
            if not isinstance(doc, dict):
                raise ManifestError(f"{path}:{lineno}: record must be an object")
            if "_meta" in doc:
                meta.update(doc["_meta"])
                continue
            missing = {"id", "image", "captions"} - set(doc)
            if missing:
                raise ManifestError(f"{path}:{lineno}: missing fields {sorted(missing)}")
            rid = str(doc["id"])
            captions = doc["captions"]
            if not isinstance(captions, list) or not captions or not all(
                isinstance(c, str) and c.strip() for c in captions
            ):
                raise ManifestError(f"{path}:{lineno}: record {rid!r} has an empty caption list")
            if rid in seen:
                raise ManifestError(f"{path}:{lineno}: duplicate id {rid!r}")
            split = doc.get("split", "test")
            if split not in SPLITS:
                raise ManifestError(f"{path}:{lineno}: record {rid!r} has unknown split {split!r}")
            image = (root / doc["image"]).resolve()
            if not image.is_file():
                raise ManifestError(f"{path}:{lineno}: image for {rid!r} not found: {image}")
            seen.add(rid)
            records.append(ManifestRecord(rid, image, tuple(captions), split))
    if not records:
        raise ManifestError(f"{path}: no records")
    return DatasetManifest(records, path=path, provenance=str(meta.get("provenance", "")), meta=meta)


# --------------------------------------------------------------------------
# synthetic shapes corpus

COLORS = {
    "red": (220, 30, 30),
    "green": (30, 170, 40),
    "blue": (30, 60, 220),
    "yellow": (240, 210, 20),
    "cyan": (20, 200, 210),
    "magenta": (210, 40, 200),
    "orange": (245, 130, 20),
    "purple": (110, 40, 150),
}
SHAPES = ("circle", "square", "triangle", "cross")
BACKGROUNDS = {"white": (245, 245, 245), "black": (15, 15, 15)}
MAX_TOY_COUNT = len(COLORS) * len(SHAPES) * len(BACKGROUNDS)


def _draw_shape(draw: ImageDraw.ImageDraw, shape: str, cx: float, cy: float, r: float, fill) -> None:
    if shape == "circle":
        draw.ellipse([cx - r, cy - r, cx + r, cy + r], fill=fill)
    elif shape == "square":
        q = r * 0.85
        draw.rectangle([cx - q, cy - q, cx + q, cy + q], fill=fill)
    elif shape == "triangle":
        draw.polygon([(cx, cy - r), (cx - r, cy + r * 0.8), (cx + r, cy + r * 0.8)], fill=fill)
    elif shape == "cross":
        w = r * 0.35
        draw.rectangle([cx - r, cy - w, cx + r, cy + w], fill=fill)
        draw.rectangle([cx - w, cy - r, cx + w, cy + r], fill=fill)
    else:
        raise ValueError(shape)


def render_shape(color: str, shape: str, background: str, size: int, cx: float, cy: float, r: float) -> Image.Image:
    im = Image.new("RGB", (size, size), BACKGROUNDS[background])
    _draw_shape(ImageDraw.Draw(im), shape, cx, cy, r, COLORS[color])
    return im


def generate_toy_corpus(out_dir: str | Path, count: int = 64, seed: int = 0, image_size: int = 64) -> DatasetManifest:
    """Render ``count`` shape images with unique template captions and write a manifest.

    Output is byte-identical for identical arguments.
    """
    if count < 4:
        raise ValueError(f"toy corpus needs at least 4 images, got {count}")
    if count > MAX_TOY_COUNT:
        raise ValueError(f"toy corpus supports at most {MAX_TOY_COUNT} images, got {count}")
    out_dir = Path(out_dir)
    try:
        (out_dir / "images").mkdir(parents=True, exist_ok=True)
    except OSError as exc:
        raise OSError(f"cannot create corpus directory {out_dir}: {exc}") from exc
    if not os.access(out_dir, os.W_OK):
        raise OSError(f"corpus directory not writable: {out_dir}")

    rng = np.random.default_rng(seed)
    combos = list(itertools.product(COLORS, SHAPES, BACKGROUNDS))
    order = rng.permutation(len(combos))[:count]
    lines = [json.dumps({"_meta": {"provenance": f"synthetic shapes corpus, seed={seed}", "image_size": image_size}})]
    for i, k in enumerate(order):
        color, shape, bg = combos[k]
        r = float(rng.uniform(0.16, 0.24) * image_size)
        cx = float(rng.uniform(r + 2, image_size - r - 2))
        cy = float(rng.uniform(r + 2, image_size - r - 2))
        rid = f"toy-{i:03d}"
        rel = f"images/{rid}.png"
        render_shape(color, shape, bg, image_size, cx, cy, r).save(out_dir / rel, format="PNG")
        lines.append(json.dumps({"id": rid, "image": rel, "captions": [f"a {color} {shape} on {bg}"], "split": "test"}))
    (out_dir / "manifest.jsonl").write_text("\n".join(lines) + "\n", encoding="utf-8")
    return ingest_manifest(out_dir / "manifest.jsonl")
