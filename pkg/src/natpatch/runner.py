"""Batch attack experiments, ablations and result persistence."""

from __future__ import annotations

import hashlib
import json
import logging
import threading
from concurrent.futures import ThreadPoolExecutor
from dataclasses import asdict, dataclass
from datetime import datetime, timezone
from pathlib import Path
from typing import Any

import numpy as np
import torch

from .attack import AttackConfig, AttackResult, make_seed_patch, run_attack
from .data import DatasetManifest, save_image
from .diffusion import NoisePredictor, load_denoiser, toy_predictor, train_toy_denoiser
from .placement import patch_side_for
from .retrieval import RECALL_LEVELS, ScoreMatrix, build_report, render_table, report_row
from .surrogate import ToyTrainConfig, load_external_model, train_toy_model

log = logging.getLogger(__name__)

ABLATIONS = ("topk", "size", "location")


class ExperimentError(RuntimeError):
    pass


def example_seed(global_seed: int, example_id: str) -> int:
    digest = hashlib.sha256(f"{global_seed}:{example_id}".encode()).digest()
    return int.from_bytes(digest[:4], "big") & 0x7FFFFFFF


def config_hash(doc: dict[str, Any]) -> str:
    blob = json.dumps(doc, sort_keys=True, separators=(",", ":"))
    return hashlib.sha256(blob.encode()).hexdigest()[:16]


def method_label(config: AttackConfig) -> str:
    return f"{config.optimizer}/{config.placement}"


@dataclass
class RunRecord:
    example_id: str
    method: str
    config_hash: str
    iterations_used: int
    success: dict[str, bool]
    matched_rank: int
    final_loss: float
    final_score_loss: float
    final_tv: float
    placement: dict[str, int]
    patch_path: str
    adversarial_path: str
    started_at: str
    finished_at: str
    wall_time: float

    def to_dict(self) -> dict[str, Any]:
        return asdict(self)


class _Sink:
    """Serialized line-delimited JSON writer shared by workers."""

    def __init__(self, path: Path):
        self.path = path
        self.lock = threading.Lock()

    def write(self, doc: dict[str, Any]) -> None:
        with self.lock, open(self.path, "a", encoding="utf-8") as fh:
            fh.write(json.dumps(doc, sort_keys=True) + "\n")


def _now() -> str:
    return datetime.now(timezone.utc).isoformat(timespec="milliseconds")


# --------------------------------------------------------------------------
# component resolution


def resolve_model(spec, manifest: DatasetManifest):
    """Accept a model object, an adapter spec ``{"adapter", "checkpoint"}``,
    or ``{"train": {...}, "seed": n}`` to train the toy model."""
    if hasattr(spec, "make_scorer"):
        return spec
    if "adapter" in spec:
        return load_external_model(spec)
    if "train" in spec:
        return train_toy_model(manifest, ToyTrainConfig.from_dict(spec["train"] or {}), seed=int(spec.get("seed", 0)))
    raise ValueError(f"cannot resolve model spec {spec!r}")


def resolve_predictor(spec, manifest: DatasetManifest, config: AttackConfig) -> NoisePredictor | None:
    if spec is None or isinstance(spec, NoisePredictor):
        return spec
    if "checkpoint" in spec:
        return load_denoiser(spec["checkpoint"])
    if "train" in spec:
        net = train_toy_denoiser(manifest.load_images(), config.schedule.build(), seed=int(spec.get("seed", 0)),
                                 **(spec["train"] or {}))
        return toy_predictor(net)
    raise ValueError(f"cannot resolve predictor spec {spec!r}")


# --------------------------------------------------------------------------
# experiments


def _pool(manifest: DatasetManifest, model):
    captions, owner = [], []
    for i, rec in enumerate(manifest.records):
        for c in rec.captions:
            captions.append(c)
            owner.append(i)
    texts = model.vocab.encode(captions, model.descriptor.max_length)
    return texts, np.asarray(owner)


def clean_score_matrix(model, images: torch.Tensor, texts, owner) -> ScoreMatrix:
    with torch.no_grad():
        scorer = model.make_scorer(texts)
        rows = [scorer(images[i : i + 32]) for i in range(0, images.shape[0], 32)]
    return ScoreMatrix(torch.cat(rows).double().numpy(), owner)


def eval_records(manifest: DatasetManifest, num_examples: int | None) -> list[int]:
    idx = [i for i, r in enumerate(manifest.records) if r.split == "test"] or list(range(len(manifest)))
    return idx if num_examples is None else idx[:num_examples]


def _seed_source(seed: int, index: int, n: int) -> int:
    other = int(np.random.default_rng(seed).integers(n - 1))
    return other + (other >= index)


def run_experiment(
    manifest: DatasetManifest,
    model,
    config: AttackConfig,
    output_dir: str | Path,
    predictor=None,
    num_examples: int | None = 20,
    workers: int = 1,
) -> dict[str, Any]:
    """Attack the evaluation split and write records, patches and the summary.

    Writes ``records.jsonl``, ``patches/*.png``, ``adversarial/*.png``,
    ``summary.csv`` and ``summary.json`` under ``output_dir``. A failure
    appends a record to ``errors.jsonl`` and raises :class:`ExperimentError`;
    files already written are kept.
    """
    out = Path(output_dir)
    (out / "patches").mkdir(parents=True, exist_ok=True)
    (out / "adversarial").mkdir(exist_ok=True)
    errors = _Sink(out / "errors.jsonl")
    try:
        model = resolve_model(model, manifest)
        predictor = resolve_predictor(predictor, manifest, config)
        images = manifest.load_images()
        texts, owner = _pool(manifest, model)
        clean = clean_score_matrix(model, images, texts, owner)
    except Exception as exc:
        errors.write({"stage": "setup", "type": type(exc).__name__, "error": str(exc), "at": _now()})
        raise ExperimentError(f"setup failed: {exc}") from exc

    chash = config_hash(config.to_dict())
    method = method_label(config)
    targets = eval_records(manifest, num_examples)
    records_path = out / "records.jsonl"
    records_path.write_text("", encoding="utf-8")
    sink = _Sink(records_path)
    side = patch_side_for(config.patch_ratio, *images.shape[-2:])
    n_img = images.shape[0]
    scorer = model.make_scorer(texts)

    def attack_one(index: int) -> tuple[int, AttackResult, np.ndarray]:
        rec = manifest.records[index]
        started = _now()
        try:
            seed = example_seed(config.seed, rec.id)
            seed_patch = make_seed_patch(images[_seed_source(seed, index, n_img)], side)
            matched = np.flatnonzero(owner == index).tolist()
            result = run_attack(model, predictor, images[index], matched, texts, seed_patch, config.with_(seed=seed))
            with torch.no_grad():
                row = scorer(result.adversarial_image)[0].double().numpy()
            patch_rel = f"patches/{rec.id}.png"
            adv_rel = f"adversarial/{rec.id}.png"
            save_image(result.final_patch, out / patch_rel)
            save_image(result.adversarial_image, out / adv_rel)
        except Exception as exc:
            errors.write({"stage": "attack", "example_id": rec.id, "type": type(exc).__name__,
                          "error": str(exc), "at": _now()})
            raise ExperimentError(f"attack on {rec.id} failed: {exc}") from exc
        sink.write(RunRecord(
            example_id=rec.id, method=method, config_hash=chash,
            iterations_used=result.iterations_used,
            success={str(k): v for k, v in result.success.items()},
            matched_rank=result.matched_rank,
            final_loss=result.loss_trace[-1], final_score_loss=result.score_trace[-1],
            final_tv=result.tv_trace[-1], placement=result.placement.to_dict(),
            patch_path=patch_rel, adversarial_path=adv_rel,
            started_at=started, finished_at=_now(), wall_time=result.wall_time,
        ).to_dict())
        log.info("%s: %d iterations, rank %d", rec.id, result.iterations_used, result.matched_rank)
        return index, result, row

    if workers > 1:
        with ThreadPoolExecutor(max_workers=workers) as pool:
            outcomes = list(pool.map(attack_one, targets))
    else:
        outcomes = [attack_one(i) for i in targets]

    attacked = clean.with_rows({i: row for i, _, row in outcomes})
    report = build_report(clean, attacked, targets)
    results = [r for _, r, _ in outcomes]
    summary = {
        "method": method,
        "config": config.to_dict(),
        "config_hash": chash,
        "num_examples": len(targets),
        "example_ids": [manifest.records[i].id for i in targets],
        "report": report.to_dict(),
        "mean_iterations": float(np.mean([r.iterations_used for r in results])) if results else float("nan"),
        "mean_tv": float(np.mean([r.tv_trace[-1] for r in results])) if results else float("nan"),
        "success_rate": {str(n): float(np.mean([r.success[n] for r in results])) if results else float("nan")
                         for n in RECALL_LEVELS},
    }
    (out / "summary.csv").write_text(render_table([report_row(method, report)]), encoding="utf-8")
    (out / "summary.json").write_text(json.dumps(summary, sort_keys=True, indent=2) + "\n", encoding="utf-8")
    return summary


# --------------------------------------------------------------------------
# ablations


DEFAULT_GRIDS = {
    "topk": [5, 10, 15],
    "size": [0.05, 0.1, 0.15, 0.2],
    "location": ["attention", "random"],
}


@dataclass
class AblationResult:
    kind: str
    metric: str
    rows: list[tuple[str, float]]
    summaries: dict[str, dict[str, Any]]

    def to_csv(self) -> str:
        lines = [f"value,{self.metric}"] + [f"{v},{m:.6f}" for v, m in self.rows]
        return "\n".join(lines) + "\n"


def run_ablation(
    kind: str,
    grid: list | None,
    base_config: AttackConfig,
    manifest: DatasetManifest,
    output_dir: str | Path,
    model,
    predictor=None,
    num_examples: int | None = 20,
    workers: int = 1,
) -> AblationResult:
    """Re-run the batch for each grid value with everything else held fixed.

    ``topk`` and ``size`` report image-to-text ASR at the success level;
    ``location`` runs every placement in the grid for both optimizers and
    reports mean iterations.
    """
    if kind not in ABLATIONS:
        raise ValueError(f"unknown ablation {kind!r}; expected one of {ABLATIONS}")
    grid = list(DEFAULT_GRIDS[kind] if grid is None else grid)
    if not grid:
        raise ValueError("ablation grid is empty")
    out = Path(output_dir)
    model = resolve_model(model, manifest)
    predictor = resolve_predictor(predictor, manifest, base_config)

    runs: list[tuple[str, AttackConfig]] = []
    if kind == "topk":
        runs = [(str(int(k)), base_config.with_(top_k=int(k))) for k in grid]
    elif kind == "size":
        runs = [(f"{float(r):g}", base_config.with_(patch_ratio=float(r))) for r in grid]
    else:
        runs = [(f"{opt}/{pl}", base_config.with_(optimizer=opt, placement=str(pl)))
                for opt in ("diffusion", "direct") for pl in grid]

    level = base_config.success_at if base_config.success_at in RECALL_LEVELS else 10
    metric = "mean_iterations" if kind == "location" else f"asr_TR_R@{level}"
    rows, summaries = [], {}
    for label, cfg in runs:
        sub = out / kind / label.replace("/", "-")
        summary = run_experiment(manifest, model, cfg, sub, predictor=predictor,
                                 num_examples=num_examples, workers=workers)
        summaries[label] = summary
        value = summary["mean_iterations"] if kind == "location" else summary["report"]["asr"]["TR"][str(level)]
        rows.append((label, float(value)))
    result = AblationResult(kind, metric, rows, summaries)
    (out / f"ablation_{kind}.csv").write_text(result.to_csv(), encoding="utf-8")
    return result
