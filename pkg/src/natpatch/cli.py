"""``natpatch`` command line.

Exit codes: 0 on success, 1 on usage or configuration errors, 2 when a
run fails at runtime. Relative output paths resolve under
``$NATPATCH_OUTPUT_ROOT`` (default ``./runs``).
"""

from __future__ import annotations

import argparse
import json
import logging
import os
import sys
from pathlib import Path
from typing import Any

import yaml

OUTPUT_ROOT_ENV = "NATPATCH_OUTPUT_ROOT"
SCHEDULE_KEYS = ("total_steps", "beta_curve", "respaced_stride", "entry_timestep")

log = logging.getLogger("natpatch")


class UsageError(Exception):
    pass


class _Parser(argparse.ArgumentParser):
    def error(self, message: str):
        self.print_usage(sys.stderr)
        raise UsageError(message)


def output_root() -> Path:
    return Path(os.environ.get(OUTPUT_ROOT_ENV, "runs"))


def resolve_out(path: str | None, default: str) -> Path:
    p = Path(path or default)
    return p if p.is_absolute() else output_root() / p


# --------------------------------------------------------------------------
# configuration


def _parse_value(text: str) -> Any:
    return yaml.safe_load(text)


def load_config_doc(path: str | None, overrides: list[str] | None = None) -> dict[str, Any]:
    """Read a YAML/JSON key-value file and apply ``key=value`` overrides.

    Schedule fields may sit at the top level or under ``schedule:``.
    """
    doc: dict[str, Any] = {}
    if path:
        try:
            loaded = yaml.safe_load(Path(path).read_text(encoding="utf-8"))
        except OSError as exc:
            raise UsageError(f"cannot read config {path}: {exc}") from exc
        except yaml.YAMLError as exc:
            raise UsageError(f"config {path} is not valid YAML/JSON: {exc}") from exc
        if loaded is None:
            loaded = {}
        if not isinstance(loaded, dict):
            raise UsageError(f"config {path} must be a mapping")
        doc.update(loaded)
    for item in overrides or []:
        key, sep, value = item.partition("=")
        if not sep or not key:
            raise UsageError(f"override {item!r} is not key=value")
        doc[key.strip()] = _parse_value(value)
    schedule = dict(doc.pop("schedule", None) or {})
    for key in SCHEDULE_KEYS:
        if key in doc:
            schedule[key] = doc.pop(key)
    if schedule:
        doc["schedule"] = schedule
    return doc


def attack_config(args):
    from .attack import AttackConfig

    doc = load_config_doc(args.config, args.set)
    try:
        return AttackConfig.from_dict(doc)
    except (TypeError, ValueError) as exc:
        raise UsageError(f"invalid attack config: {exc}") from exc


# --------------------------------------------------------------------------
# commands


def cmd_gen_corpus(args) -> int:
    from .data import generate_toy_corpus

    out = resolve_out(args.out, "corpus")
    manifest = generate_toy_corpus(out, count=args.count, seed=args.seed, image_size=args.image_size)
    print(f"wrote {len(manifest)} images to {manifest.path}")
    return 0


def cmd_train_toy(args) -> int:
    from .data import ingest_manifest
    from .diffusion import ScheduleSpec, save_denoiser, train_toy_denoiser
    from .surrogate import ToyTrainConfig, save_toy_model, train_toy_model

    doc = load_config_doc(args.config, args.set)
    model_doc = dict(doc.pop("model", None) or {})
    den_doc = dict(doc.pop("denoiser", None) or {})
    sched_doc = doc.pop("schedule", None) or {}
    if doc:
        raise UsageError(f"unknown training config keys: {sorted(doc)}")
    if args.steps is not None:
        model_doc["steps"] = args.steps
    if args.denoiser_steps is not None:
        den_doc["steps"] = args.denoiser_steps
    try:
        train_cfg = ToyTrainConfig.from_dict(model_doc)
        schedule = ScheduleSpec.from_dict(sched_doc).build()
    except (TypeError, ValueError) as exc:
        raise UsageError(str(exc)) from exc

    manifest = ingest_manifest(args.manifest)
    out = resolve_out(args.out, "toy")
    out.mkdir(parents=True, exist_ok=True)
    model = train_toy_model(manifest, train_cfg, seed=args.seed)
    save_toy_model(model, out / "model.pt")
    report = dict(model.training_report)
    if not args.no_denoiser:
        net = train_toy_denoiser(manifest.load_images(), schedule, seed=args.seed, **den_doc)
        save_denoiser(net, out / "denoiser.pt")
        report["denoiser"] = {"steps": den_doc.get("steps", 1500)}
    (out / "training.json").write_text(json.dumps(report, sort_keys=True, indent=2) + "\n", encoding="utf-8")
    print(f"held-out R@1 {report['heldout_r1']:.3f}, clean R@1 {report['clean_r1']:.3f}; saved to {out}")
    return 0


def _components(args):
    from .data import ingest_manifest
    from .diffusion import load_denoiser
    from .surrogate import load_external_model

    manifest = ingest_manifest(args.manifest)
    model = load_external_model({"adapter": args.adapter, "checkpoint": args.model})
    predictor = load_denoiser(args.denoiser) if getattr(args, "denoiser", None) else None
    return manifest, model, predictor


def cmd_attack(args) -> int:
    from .runner import run_experiment

    config = attack_config(args)
    manifest, model, predictor = _components(args)
    if predictor is None and config.optimizer == "diffusion":
        raise UsageError("--denoiser is required for the diffusion optimizer")
    out = resolve_out(args.out, "attack")
    summary = run_experiment(manifest, model, config, out, predictor=predictor,
                             num_examples=args.num_examples, workers=args.workers)
    print((out / "summary.csv").read_text(encoding="utf-8"), end="")
    log.info("mean iterations %.1f", summary["mean_iterations"])
    return 0


def cmd_eval(args) -> int:
    from .retrieval import DIRECTIONS, RECALL_LEVELS, recall_at_n
    from .runner import _pool, clean_score_matrix

    manifest, model, _ = _components(args)
    texts, owner = _pool(manifest, model)
    clean = clean_score_matrix(model, manifest.load_images(), texts, owner)
    recall = {d: {str(n): recall_at_n(clean, d, n)[0] for n in RECALL_LEVELS
                  if n <= (clean.shape[1] if d == "TR" else clean.shape[0])} for d in DIRECTIONS}
    text = json.dumps({"clean_recall": recall}, sort_keys=True, indent=2) + "\n"
    if args.out:
        out = resolve_out(args.out, "eval")
        out.mkdir(parents=True, exist_ok=True)
        (out / "eval.json").write_text(text, encoding="utf-8")
    print(text, end="")
    return 0


def _parse_grid(kind: str, text: str | None) -> list | None:
    if text is None:
        return None
    items = [s.strip() for s in text.split(",") if s.strip()]
    if not items:
        raise UsageError("--grid is empty")
    try:
        if kind == "topk":
            return [int(s) for s in items]
        if kind == "size":
            return [float(s) for s in items]
    except ValueError as exc:
        raise UsageError(f"bad --grid value: {exc}") from exc
    return items


def cmd_ablate(args) -> int:
    from .runner import run_ablation

    config = attack_config(args)
    grid = _parse_grid(args.kind, args.grid)
    manifest, model, predictor = _components(args)
    if predictor is None:
        raise UsageError("--denoiser is required for ablations")
    out = resolve_out(args.out, f"ablate-{args.kind}")
    result = run_ablation(args.kind, grid, config, manifest, out, model, predictor=predictor,
                          num_examples=args.num_examples, workers=args.workers)
    print(result.to_csv(), end="")
    return 0


def cmd_report(args) -> int:
    from .retrieval import TABLE_COLUMNS, render_reference, render_table

    if args.reference:
        text = render_reference(args.model, args.dataset)
    else:
        if not args.runs:
            raise UsageError("give run directories or --reference")
        rows = []
        for run in args.runs:
            lines = (Path(run) / "summary.csv").read_text(encoding="utf-8").splitlines()
            if not lines or lines[0].split(",") != TABLE_COLUMNS:
                raise ValueError(f"{run}/summary.csv has an unexpected header")
            rows.extend(line.split(",") for line in lines[1:] if line)
        text = render_table(rows)
    if args.out:
        out = resolve_out(args.out, "report.csv")
        out.parent.mkdir(parents=True, exist_ok=True)
        out.write_text(text, encoding="utf-8")
    print(text, end="")
    return 0


# --------------------------------------------------------------------------
# parser


def _add_components(p, denoiser: bool = True) -> None:
    p.add_argument("--manifest", required=True, help="line-delimited dataset manifest")
    p.add_argument("--model", required=True, help="model checkpoint")
    p.add_argument("--adapter", default="toy", help="model adapter name (default: toy)")
    if denoiser:
        p.add_argument("--denoiser", help="denoiser checkpoint")


def _add_run_opts(p) -> None:
    p.add_argument("--config", help="YAML/JSON attack config")
    p.add_argument("--set", action="append", metavar="KEY=VALUE", help="override one config field")
    p.add_argument("--out", help="output directory")
    p.add_argument("--num-examples", type=int, default=20)
    p.add_argument("--workers", type=int, default=1)


def build_parser() -> argparse.ArgumentParser:
    parser = _Parser(prog="natpatch", description="Natural-looking adversarial patches against image-text retrieval.")
    parser.add_argument("-v", "--verbose", action="store_true")
    sub = parser.add_subparsers(dest="command", required=True, parser_class=_Parser)

    p = sub.add_parser("gen-corpus", help="render the toy shapes corpus")
    p.add_argument("--out")
    p.add_argument("--count", type=int, default=64)
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--image-size", type=int, default=64)
    p.set_defaults(func=cmd_gen_corpus)

    p = sub.add_parser("train-toy", help="train the toy retrieval model and denoiser")
    p.add_argument("--manifest", required=True)
    p.add_argument("--out")
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--config", help="YAML/JSON with optional model:, denoiser: and schedule: sections")
    p.add_argument("--set", action="append", metavar="KEY=VALUE")
    p.add_argument("--steps", type=int)
    p.add_argument("--denoiser-steps", type=int)
    p.add_argument("--no-denoiser", action="store_true")
    p.set_defaults(func=cmd_train_toy)

    p = sub.add_parser("attack", help="attack a batch and write records and summary")
    _add_components(p)
    _add_run_opts(p)
    p.set_defaults(func=cmd_attack)

    p = sub.add_parser("eval", help="clean retrieval recall")
    _add_components(p, denoiser=False)
    p.add_argument("--out")
    p.set_defaults(func=cmd_eval)

    p = sub.add_parser("ablate", help="run one ablation sweep")
    p.add_argument("kind", choices=["topk", "size", "location"])
    p.add_argument("--grid", help="comma-separated values")
    _add_components(p)
    _add_run_opts(p)
    p.set_defaults(func=cmd_ablate)

    p = sub.add_parser("report", help="merge run summaries or print reference rows")
    p.add_argument("runs", nargs="*", help="run directories holding summary.csv")
    p.add_argument("--reference", action="store_true")
    p.add_argument("--model", default="ALBEF")
    p.add_argument("--dataset", default="MSCOCO")
    p.add_argument("--out")
    p.set_defaults(func=cmd_report)
    return parser


def main(argv: list[str] | None = None) -> int:
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except UsageError as exc:
        print(f"natpatch: error: {exc}", file=sys.stderr)
        return 1
    except SystemExit as exc:  # --help
        return int(exc.code or 0)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s")
    try:
        return args.func(args)
    except UsageError as exc:
        print(f"natpatch: error: {exc}", file=sys.stderr)
        return 1
    except Exception as exc:
        log.debug("runtime failure", exc_info=True)
        print(f"natpatch: {type(exc).__name__}: {exc}", file=sys.stderr)
        return 2


if __name__ == "__main__":
    sys.exit(main())
