import json

import pytest
import torch

from natpatch.attack import AttackConfig, make_seed_patch, run_attack
from natpatch.retrieval import TABLE_COLUMNS
from natpatch.runner import (
    ExperimentError,
    config_hash,
    eval_records,
    example_seed,
    run_ablation,
    run_experiment,
)

FAST = AttackConfig(max_iterations=3, top_k=20, learning_rate=0.5)


def snapshot(directory):
    return {p.relative_to(directory): p.read_bytes() for p in sorted(directory.rglob("*")) if p.is_file()}


class TestSeeds:
    def test_example_seed_stable_and_distinct(self):
        assert example_seed(0, "toy-000") == example_seed(0, "toy-000")
        assert example_seed(0, "toy-000") != example_seed(0, "toy-001")
        assert example_seed(0, "toy-000") != example_seed(1, "toy-000")

    def test_config_hash_ignores_key_order(self):
        doc = FAST.to_dict()
        reordered = dict(reversed(list(doc.items())))
        reordered["schedule"] = dict(reversed(list(doc["schedule"].items())))
        assert config_hash(doc) == config_hash(reordered)
        assert config_hash(doc) != config_hash(FAST.with_(top_k=5).to_dict())


class TestRunAttack:
    def setup_inputs(self, model, corpus, i=0):
        images = corpus.load_images()
        texts = model.vocab.encode(corpus.captions(), model.descriptor.max_length)
        return images[i], texts, make_seed_patch(images[i + 1], 10)

    def test_zero_lr_keeps_perturbation(self, small_model, small_predictor, corpus):
        img, texts, seed = self.setup_inputs(small_model, corpus)
        cfg = AttackConfig(max_iterations=4, learning_rate=0.0, top_k=20)
        r = run_attack(small_model, small_predictor, img, [0], texts, seed, cfg)
        assert torch.equal(r.perturbation, torch.zeros_like(seed))
        assert len(set(r.loss_trace)) == 1
        assert r.iterations_used == len(r.loss_trace) <= 4

    def test_deterministic_and_pure(self, small_model, small_predictor, corpus):
        img, texts, seed = self.setup_inputs(small_model, corpus)
        img0, seed0 = img.clone(), seed.clone()
        a = run_attack(small_model, small_predictor, img, [0], texts, seed, FAST)
        b = run_attack(small_model, small_predictor, img, [0], texts, seed, FAST)
        assert a.loss_trace == b.loss_trace
        assert torch.equal(a.final_patch, b.final_patch)
        assert torch.equal(img, img0) and torch.equal(seed, seed0)

    def test_clip_invariant(self, small_model, small_predictor, corpus):
        img, texts, seed = self.setup_inputs(small_model, corpus)
        cfg = FAST.with_(learning_rate=50.0, clip_max=0.8, max_iterations=5)
        r = run_attack(small_model, small_predictor, img, [0], texts, seed, cfg)
        total = seed + r.perturbation
        assert total.min() >= 0 and total.max() <= 0.8 + 1e-6

    @pytest.mark.parametrize("placement,optimizer", [("random", "diffusion"), ("attention", "direct")])
    def test_variants_run(self, small_model, small_predictor, corpus, placement, optimizer):
        img, texts, seed = self.setup_inputs(small_model, corpus)
        r = run_attack(small_model, small_predictor, img, [0], texts, seed,
                       FAST.with_(placement=placement, optimizer=optimizer))
        assert r.final_patch.shape == seed.shape and 0 <= r.final_patch.min() <= r.final_patch.max() <= 1

    def test_top_k_beyond_pool(self, small_model, small_predictor, corpus):
        img, texts, seed = self.setup_inputs(small_model, corpus)
        with pytest.raises(ValueError):
            run_attack(small_model, small_predictor, img, [0], texts, seed, FAST.with_(top_k=65))

    def test_recompute_and_noise_flags(self, small_model, small_predictor, corpus):
        img, texts, seed = self.setup_inputs(small_model, corpus)
        cfg = FAST.with_(recompute_placement=True, noise_std=0.02)
        a = run_attack(small_model, small_predictor, img, [0], texts, seed, cfg)
        b = run_attack(small_model, small_predictor, img, [0], texts, seed, cfg)
        assert a.loss_trace == b.loss_trace


class TestRunExperiment:
    def test_outputs_and_schema(self, small_model, small_predictor, corpus, tmp_path):
        before = snapshot(corpus.path.parent)
        summary = run_experiment(corpus, small_model, FAST, tmp_path, predictor=small_predictor, num_examples=3)
        assert snapshot(corpus.path.parent) == before
        lines = (tmp_path / "summary.csv").read_text().splitlines()
        assert lines[0].split(",") == TABLE_COLUMNS
        assert len(lines) == 2 and lines[1].startswith("diffusion/attention,")
        assert all(cell != "" for cell in lines[1].split(","))
        records = [json.loads(line) for line in (tmp_path / "records.jsonl").read_text().splitlines()]
        assert [r["example_id"] for r in records] == ["toy-000", "toy-001", "toy-002"]
        for r in records:
            assert (tmp_path / r["patch_path"]).is_file() and (tmp_path / r["adversarial_path"]).is_file()
            assert r["config_hash"] == summary["config_hash"]
            assert set(r["success"]) == {"1", "5", "10"}
        doc = json.loads((tmp_path / "summary.json").read_text())
        assert set(doc["report"]["asr"]) == {"TR", "IR"}
        assert set(doc["report"]["asr"]["TR"]) == {"1", "5", "10"}

    def test_rerun_identical(self, small_model, small_predictor, corpus, tmp_path):
        for name in ("a", "b"):
            run_experiment(corpus, small_model, FAST, tmp_path / name, predictor=small_predictor, num_examples=2)
        for f in ("summary.csv", "summary.json"):
            assert (tmp_path / "a" / f).read_bytes() == (tmp_path / "b" / f).read_bytes()

    def test_workers_match_serial(self, small_model, small_predictor, corpus, tmp_path):
        run_experiment(corpus, small_model, FAST, tmp_path / "s", predictor=small_predictor, num_examples=3)
        run_experiment(corpus, small_model, FAST, tmp_path / "p", predictor=small_predictor, num_examples=3, workers=2)
        assert (tmp_path / "s/summary.csv").read_bytes() == (tmp_path / "p/summary.csv").read_bytes()

    def test_failure_writes_error_record(self, small_model, corpus, tmp_path):
        with pytest.raises(ExperimentError):
            run_experiment(corpus, small_model, FAST, tmp_path, predictor=None, num_examples=2)
        err = [json.loads(line) for line in (tmp_path / "errors.jsonl").read_text().splitlines()]
        assert err[0]["stage"] == "attack" and err[0]["example_id"] == "toy-000"

    def test_setup_failure(self, corpus, tmp_path):
        with pytest.raises(ExperimentError):
            run_experiment(corpus, {"adapter": "toy", "checkpoint": str(tmp_path / "none.pt")}, FAST, tmp_path)
        assert json.loads((tmp_path / "errors.jsonl").read_text())["stage"] == "setup"

    def test_eval_split(self, corpus):
        assert eval_records(corpus, 20) == list(range(20))
        assert len(eval_records(corpus, None)) == 64


class TestAblation:
    def test_location_table(self, small_model, small_predictor, corpus, tmp_path):
        r = run_ablation("location", None, FAST, corpus, tmp_path, small_model, small_predictor, num_examples=2)
        assert [v for v, _ in r.rows] == ["diffusion/attention", "diffusion/random", "direct/attention", "direct/random"]
        lines = (tmp_path / "ablation_location.csv").read_text().splitlines()
        assert lines[0] == "value,mean_iterations" and len(lines) == 5

    def test_topk_table(self, small_model, small_predictor, corpus, tmp_path):
        r = run_ablation("topk", [5, 10], FAST, corpus, tmp_path, small_model, small_predictor, num_examples=2)
        assert r.metric == "asr_TR_R@10"
        assert (tmp_path / "ablation_topk.csv").read_text().splitlines()[1].startswith("5,")

    @pytest.mark.parametrize("kind,grid", [("colour", [1]), ("size", [])])
    def test_bad_requests(self, small_model, small_predictor, corpus, tmp_path, kind, grid):
        with pytest.raises(ValueError):
            run_ablation(kind, grid, FAST, corpus, tmp_path, small_model, small_predictor)
