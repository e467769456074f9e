"""Recall@N, attack success rate and ASR table rendering.

TR ranks texts for each image query; IR ranks images for each text query.
Ties are broken toward the smaller index.
"""

from __future__ import annotations

import csv
import io
import json
import math
from dataclasses import dataclass, field
from importlib import resources

import numpy as np

DIRECTIONS = ("TR", "IR")
RECALL_LEVELS = (1, 5, 10)
TABLE_COLUMNS = ["method"] + [f"{d}_R@{n}" for d in DIRECTIONS for n in RECALL_LEVELS]


@dataclass
class ScoreMatrix:
    scores: np.ndarray  # (num_images, num_texts)
    text_owner: np.ndarray  # (num_texts,) image index that each text belongs to

    def __post_init__(self):
        self.scores = np.asarray(self.scores, dtype=np.float64)
        self.text_owner = np.asarray(self.text_owner, dtype=np.int64)
        n_img, n_txt = self.scores.shape
        if self.text_owner.shape != (n_txt,):
            raise ValueError("text_owner must map every text column to an image")
        if not np.all(np.isfinite(self.scores)):
            raise ValueError("scores must be finite")
        if n_txt and (self.text_owner.min() < 0 or self.text_owner.max() >= n_img):
            raise ValueError("text_owner refers to a missing image")
        missing = set(range(n_img)) - set(self.text_owner.tolist())
        if missing:
            raise ValueError(f"images without a matched text: {sorted(missing)[:5]}")

    @property
    def shape(self) -> tuple[int, int]:
        return self.scores.shape

    def matched_texts(self, image: int) -> np.ndarray:
        return np.flatnonzero(self.text_owner == image)

    def with_rows(self, rows: dict[int, np.ndarray]) -> "ScoreMatrix":
        """Copy with the given image rows replaced (e.g. by attacked scores)."""
        s = self.scores.copy()
        for i, row in rows.items():
            s[i] = row
        return ScoreMatrix(s, self.text_owner.copy())


def _ranks_desc(values: np.ndarray) -> np.ndarray:
    """1-based rank of every entry along the last axis, ties to the smaller index."""
    order = np.argsort(-values, axis=-1, kind="stable")
    ranks = np.empty_like(order)
    ranks[np.arange(values.shape[0])[:, None], order] = np.arange(1, values.shape[-1] + 1)
    return ranks


def best_ranks(scores: ScoreMatrix, direction: str) -> np.ndarray:
    """Rank of the best-placed ground-truth item for every query."""
    if direction == "TR":
        ranks = _ranks_desc(scores.scores)
        n_img = scores.shape[0]
        out = np.full(n_img, np.iinfo(np.int64).max)
        for j, i in enumerate(scores.text_owner):
            out[i] = min(out[i], ranks[i, j])
        return out
    if direction == "IR":
        ranks = _ranks_desc(scores.scores.T)
        return ranks[np.arange(scores.shape[1]), scores.text_owner]
    raise ValueError(f"direction must be TR or IR, got {direction!r}")


def recall_at_n(scores: ScoreMatrix, direction: str, n: int) -> tuple[float, np.ndarray]:
    pool = scores.shape[1] if direction == "TR" else scores.shape[0]
    if not 1 <= n <= pool:
        raise ValueError(f"n={n} out of range for a pool of {pool}")
    hits = best_ranks(scores, direction) <= n
    return float(hits.mean()), hits


def attack_success_rate(
    clean: ScoreMatrix,
    attacked: ScoreMatrix,
    direction: str,
    n: int,
    queries: np.ndarray | None = None,
) -> float:
    """Fraction of clean hits at ``n`` that become misses after the attack.

    ``queries`` optionally restricts the query set (image indices for TR,
    text indices for IR). Returns NaN when no query is a clean hit.
    """
    if clean.shape != attacked.shape or not np.array_equal(clean.text_owner, attacked.text_owner):
        raise ValueError("clean and attacked matrices must share shape and ground truth")
    _, clean_hits = recall_at_n(clean, direction, n)
    _, adv_hits = recall_at_n(attacked, direction, n)
    sel = np.ones_like(clean_hits) if queries is None else np.zeros_like(clean_hits)
    if queries is not None:
        sel[np.asarray(queries, dtype=np.int64)] = True
    base = clean_hits & sel
    if not base.any():
        return math.nan
    return float((base & ~adv_hits).sum() / base.sum())


@dataclass
class RetrievalReport:
    clean_recall: dict[str, dict[int, float]] = field(default_factory=dict)
    asr: dict[str, dict[int, float]] = field(default_factory=dict)
    clean_correct: dict[str, dict[int, int]] = field(default_factory=dict)
    broken: dict[str, dict[int, int]] = field(default_factory=dict)

    def to_dict(self) -> dict:
        def conv(d):
            return {k: {str(n): v for n, v in sub.items()} for k, sub in d.items()}

        return {
            "clean_recall": conv(self.clean_recall),
            "asr": conv(self.asr),
            "clean_correct": conv(self.clean_correct),
            "broken": conv(self.broken),
        }


def build_report(clean: ScoreMatrix, attacked: ScoreMatrix, attacked_images) -> RetrievalReport:
    """Clean recall over the whole pool; ASR over queries touched by the attack."""
    attacked_images = np.asarray(sorted(attacked_images), dtype=np.int64)
    queries = {
        "TR": attacked_images,
        "IR": np.flatnonzero(np.isin(clean.text_owner, attacked_images)),
    }
    rep = RetrievalReport()
    for d in DIRECTIONS:
        rep.clean_recall[d], rep.asr[d], rep.clean_correct[d], rep.broken[d] = {}, {}, {}, {}
        for n in RECALL_LEVELS:
            pool = clean.shape[1] if d == "TR" else clean.shape[0]
            if n > pool:
                continue
            rate, hits = recall_at_n(clean, d, n)
            _, adv_hits = recall_at_n(attacked, d, n)
            sel = np.zeros_like(hits)
            sel[queries[d]] = True
            rep.clean_recall[d][n] = rate
            rep.clean_correct[d][n] = int((hits & sel).sum())
            rep.broken[d][n] = int((hits & sel & ~adv_hits).sum())
            rep.asr[d][n] = attack_success_rate(clean, attacked, d, n, queries[d])
    return rep


# --------------------------------------------------------------------------
# tables


def format_rate(pct: float) -> str:
    return "nan" if pct is None or (isinstance(pct, float) and math.isnan(pct)) else f"{pct:.2f}"


def report_row(method: str, report: RetrievalReport) -> list[str]:
    row = [method]
    for d in DIRECTIONS:
        for n in RECALL_LEVELS:
            v = report.asr.get(d, {}).get(n)
            row.append(format_rate(None if v is None else 100.0 * v))
    return row


def render_table(rows: list[list[str]]) -> str:
    buf = io.StringIO()
    writer = csv.writer(buf, lineterminator="\n")
    writer.writerow(TABLE_COLUMNS)
    for r in rows:
        if len(r) != len(TABLE_COLUMNS):
            raise ValueError(f"row {r[0]!r} has {len(r)} cells, expected {len(TABLE_COLUMNS)}")
        writer.writerow(r)
    return buf.getvalue()


def reference_table() -> dict:
    """Published retrieval ASR numbers (percent) shipped as reference data."""
    text = resources.files("natpatch").joinpath("reference/published_asr.json").read_text(encoding="utf-8")
    return json.loads(text)


def render_reference(model: str, dataset: str) -> str:
    ref = reference_table()
    try:
        block = ref["results"][model][dataset]
    except KeyError:
        raise KeyError(f"no reference rows for {model}/{dataset}") from None
    rows = [[method] + [format_rate(v) for v in vals["TR"] + vals["IR"]] for method, vals in block.items()]
    return render_table(rows)
