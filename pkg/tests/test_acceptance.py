"""Acceptance criteria, one test per criterion, each reporting PASS or FAIL."""

import json
import math
import time

import numpy as np
import pytest

from groundgen.cli import main
from groundgen.decoding import (
    CONSTRAINED_FULL_KB,
    CONSTRAINED_RETRIEVED,
    UNCONSTRAINED,
    DecodeConfig,
    Predictor,
    constrained_decode,
)
from groundgen.encoders import ToyEncoder
from groundgen.kb import QueryRecord
from groundgen.losses import infonce_loss, masked_lm_loss
from groundgen.pipeline import run_experiment, ungrounded_count
from groundgen.sampler import BatchSampler, HardNegativeGroups, SamplerConfig, entity_frequencies
from groundgen.scorer import ToyScorer, ToyScorerParams
from groundgen.synth import SynthConfig
from groundgen.tokenizer import encode
from groundgen.training import TrainConfig, loss_and_grads
from groundgen.trie import allowed_next, build_trie
from groundgen.vindex import VectorIndex, build_index, topk

from acceptance_log import criterion
from builders import random_setup
from helpers import central_difference, max_rel_error, unit_rows
from oracles import allowed_by_scan, reachable_prefixes, topk_by_full_sort
from published_hm import hm_cases
from scorers import RandomScorer

# retrieval width for the desk-scale experiment; 300 would exceed the 200-entity KB
EXPERIMENT_K = 2
SEED = 20240917


@pytest.fixture(scope="module")
def experiment():
    return run_experiment(SynthConfig(), TrainConfig(), k=EXPERIMENT_K)


def test_criterion_1_harmonic_means():
    with criterion(1, "harmonic-mean reproduction within 0.3") as notes:
        start = time.perf_counter()
        cases = hm_cases()
        worst = max(cases, key=lambda c: abs(c[1] - c[2]))
        notes.append(f"{len(cases)} cells, worst {worst[0]} off by {abs(worst[1] - worst[2]):.3f}")
        assert all(abs(c - p) <= 0.3 for _, c, p in cases)
        assert time.perf_counter() - start < 1.0


def _random_trie(rng, n):
    alphabet = list("abcdef ") + ["é", "中"]
    names = set()
    while len(names) < n:
        names.add("".join(rng.choice(alphabet, size=int(rng.integers(1, 8)))))
    names = sorted(names)
    return names, build_trie([(f"E{i}", encode(s)) for i, s in enumerate(names)])


def test_criterion_2_grounding(experiment):
    with criterion(2, "constrained output always grounded") as notes:
        rng = np.random.default_rng(SEED)
        start = time.perf_counter()
        hits = 0
        for trial in range(1000):
            names, trie = _random_trie(rng, int(rng.integers(1, 15)))
            cfg = DecodeConfig(beam_width=int(rng.integers(1, 4)))
            out = constrained_decode(RandomScorer(float(rng.uniform(0.1, 10))), trial, trie, cfg)
            hits += out.identifier in names
        elapsed = time.perf_counter() - start
        preds = experiment.predictions[CONSTRAINED_RETRIEVED]
        kb = experiment.fixture.kb
        grounded = sum(
            1 for p in preds
            if p.grounded and p.identifier in {kb.identifier(i) for i in p.retrieved_ids}
            and all(kb.identifier(e) == p.identifier for e in p.entity_ids)
        )
        notes.append(f"random {hits}/1000 in {elapsed:.1f}s, fixture {grounded}/{len(preds)}")
        assert hits == 1000 and grounded == len(preds) and elapsed < 30


def test_criterion_3_oracles():
    with criterion(3, "trie and top-k match brute-force oracles exactly") as notes:
        rng = np.random.default_rng(SEED + 3)
        start = time.perf_counter()
        prefixes = 0
        for _ in range(200):
            names, trie = _random_trie(rng, int(rng.integers(1, 40)))
            seqs = [encode(s) for s in names]
            for prefix in reachable_prefixes(seqs):
                prefixes += 1
                assert allowed_next(trie, prefix) == allowed_by_scan(seqs, prefix)
        for _ in range(1000):
            n, d = int(rng.integers(1, 501)), int(rng.integers(1, 33))
            m = unit_rows(rng, n, d).astype(np.float32)
            for _ in range(int(rng.integers(0, 4))):
                m[int(rng.integers(n))] = m[int(rng.integers(n))]
            ids = [f"Q{int(x)}" for x in rng.permutation(10 * n)[:n]]
            q = m[int(rng.integers(n))].astype(np.float64) if rng.random() < 0.3 else unit_rows(rng, 1, d)[0]
            q = q / np.linalg.norm(q)
            k = int(rng.integers(1, n + 5))
            got = topk(VectorIndex(ids, m), q, k, precise=True)
            want = topk_by_full_sort(ids, m, q, k)
            assert got.ids == [i for i, _ in want]
            assert np.allclose(got.scores, [s for _, s in want], rtol=0, atol=1e-12)
        elapsed = time.perf_counter() - start
        notes.append(f"{prefixes} prefixes over 200 sets, 1000 top-k instances, {elapsed:.1f}s")
        assert elapsed < 60


def test_criterion_4_gradients():
    with criterion(4, "analytic gradients match central differences") as notes:
        rng = np.random.default_rng(SEED + 4)
        start = time.perf_counter()
        worst = 0.0
        for _ in range(20):
            n, d = int(rng.integers(1, 33)), int(rng.integers(1, 17))
            Q, E = unit_rows(rng, n, d), unit_rows(rng, n, d)
            lt = float(rng.uniform(math.log(0.05), 0.0))
            _, g = infonce_loss(Q, E, lt)
            f = lambda: infonce_loss(Q, E, lt)[0]  # noqa: E731
            worst = max(worst, max_rel_error(g["Q"], central_difference(f, Q)),
                        max_rel_error(g["E"], central_difference(f, E)))
            T, V = int(rng.integers(1, 21)), int(rng.integers(2, 300))
            logits = rng.standard_normal((T, V)) * 2
            targets = rng.integers(0, V, size=T)
            mask = rng.random(T) < 0.6
            mask[int(rng.integers(T))] = True
            _, gl = masked_lm_loss(logits, targets, mask)
            entries = [int(i) for i in rng.choice(logits.size, size=min(200, logits.size), replace=False)]
            num = central_difference(lambda: masked_lm_loss(logits, targets, mask)[0], logits, entries)
            worst = max(worst, max_rel_error(gl["logits"], num))

            kb, qs, scorer, encoder, temp, batch = random_setup(rng)
            report = loss_and_grads(scorer, encoder, batch, temp, 1.0)
            total = lambda: loss_and_grads(scorer, encoder, batch, temp, 1.0).total  # noqa: E731
            for name in ToyScorerParams.NAMES:
                arr = getattr(scorer, name)
                entries = [int(i) for i in rng.choice(arr.size, size=min(20, arr.size), replace=False)]
                worst = max(worst, max_rel_error(report.grads[f"scorer.{name}"], central_difference(total, arr, entries)))
            arr = encoder.proj_img
            worst = max(worst, max_rel_error(report.grads["encoder.proj_img"], central_difference(total, arr)))
        elapsed = time.perf_counter() - start
        notes.append(f"60 instances, worst relative error {worst:.2e}, {elapsed:.1f}s")
        assert worst < 1e-5 and elapsed < 60


def test_criterion_5_analytic_values():
    with criterion(5, "closed-form loss values") as notes:
        Q = np.tile([1.0, 0.0], (4, 1))
        E = np.tile([0.0, 1.0], (4, 1))
        a = infonce_loss(Q, E, math.log(0.07))[0]
        b = masked_lm_loss(np.zeros((9, 260)), np.arange(9), np.ones(9, dtype=bool))[0]
        c = infonce_loss(unit_rows(np.random.default_rng(1), 1, 5), unit_rows(np.random.default_rng(2), 1, 5), 0.0)[0]
        notes.append(f"ln4 err {abs(a - math.log(4)):.1e}, ln260 err {abs(b - math.log(260)):.1e}, N=1 {c}")
        assert abs(a - math.log(4)) <= 1e-9
        assert abs(b - math.log(260)) <= 1e-9
        assert c == 0.0


def test_criterion_6_sampler():
    with criterion(6, "sampler never conflicts, preserves frequencies, reproducible") as notes:
        qs = [QueryRecord(f"q{i}", "?", (0.0,), f"E{i % 500:03d}") for i in range(1000)]
        sampler = BatchSampler(qs, None, SamplerConfig(batch_size=32, p_hard=0.0, seed=6))
        counts: dict[str, int] = {}
        conflicts = 0
        for _ in range(10_000):
            plan = sampler.sample()
            conflicts += len(set(plan.entity_ids)) != 32
            for e in plan.entity_ids:
                counts[e] = counts.get(e, 0) + 1
        per_query = 10_000 * 32 / len(qs)
        freq = entity_frequencies(qs)
        dev = max(abs(counts.get(e, 0) - per_query * c) / (per_query * c) for e, c in freq.items())
        cfg = SamplerConfig(batch_size=32, p_hard=0.5, seed=9)
        groups = HardNegativeGroups("vision-hard", {f"g{j}": [f"E{i:03d}" for i in range(j, 500, 25)] for j in range(25)})
        s1, s2 = BatchSampler(qs, groups, cfg), BatchSampler(qs, groups, cfg)
        same = json.dumps([s1.sample().to_json() for _ in range(500)]) == json.dumps(
            [s2.sample().to_json() for _ in range(500)]
        )
        notes.append(f"{conflicts} conflicting of 10000, max frequency deviation {dev:.3f}, reproducible={same}")
        assert conflicts == 0 and dev < 0.2 and same


def test_criterion_7_end_to_end(experiment):
    with criterion(7, "synthetic experiment: loss drop, constrained beats unconstrained, recall") as notes:
        c = experiment.reports[CONSTRAINED_RETRIEVED].split_acc
        u = experiment.reports[UNCONSTRAINED].split_acc
        r = experiment.recall
        notes.append(
            f"loss drop {experiment.loss_drop:.4f}; constrained seen {c['seen']:.4f} unseen {c['unseen']:.4f}; "
            f"unconstrained seen {u['seen']:.4f} unseen {u['unseen']:.4f}; "
            f"recall@10 {r[10]:.4f} recall@50 {r[50]:.4f}; {experiment.seconds:.0f}s"
        )
        assert experiment.loss_drop >= 0.9
        assert c["seen"] > u["seen"] and c["unseen"] > u["unseen"]
        assert r[50] >= r[10]
        assert experiment.seconds < 300


def test_criterion_8_ablation_modes(experiment):
    with criterion(8, "k>=n equals full-KB mode; unconstrained hallucinates on unseen") as notes:
        fx = experiment.fixture
        index = build_index(fx.kb, ToyEncoder(experiment.training.encoder))
        scorer = ToyScorer(experiment.training.scorer)
        wide = Predictor(scorer, index, fx.kb, k=len(fx.kb)).predict_all(fx.eval)
        full = Predictor(scorer, index, fx.kb, k=len(fx.kb), config=DecodeConfig(mode=CONSTRAINED_FULL_KB)).predict_all(fx.eval)
        a = "\n".join(json.dumps(p.to_json()) for p in wide)
        b = "\n".join(json.dumps(p.to_json()) for p in full)
        unseen = {q.query_id for q in fx.eval if q.split_tag == "unseen"}
        free = [p for p in experiment.predictions[UNCONSTRAINED] if p.query_id in unseen]
        n_free = ungrounded_count(free)
        notes.append(f"byte-identical={a == b}, ungrounded unconstrained on unseen {n_free}/{len(free)}")
        assert a == b
        assert n_free >= 1


def _cli_pipeline(d, jobs):
    steps = ["--steps", "300"]
    assert main(["synth", "--out-dir", str(d)]) == 0
    assert main(["build-index", "--kb", f"{d}/entities.jsonl", "--out", f"{d}/index.bin", "--jobs", str(jobs)]) == 0
    assert main(["train-toy", "--kb", f"{d}/entities.jsonl", "--queries", f"{d}/train.jsonl",
                 "--out", f"{d}/params.bin", *steps]) == 0
    assert main(["decode", "--index", f"{d}/index.bin", "--kb", f"{d}/entities.jsonl", "--queries",
                 f"{d}/eval.jsonl", "--scorer", f"{d}/params.bin", "--out", f"{d}/preds.jsonl",
                 "--jobs", str(jobs)]) == 0
    assert main(["eval", "--preds", f"{d}/preds.jsonl", "--queries", f"{d}/eval.jsonl",
                 "--kb", f"{d}/entities.jsonl", "--out", f"{d}/report.json"]) == 0


def test_criterion_9_determinism(tmp_path):
    with criterion(9, "pipeline byte-identical across runs and --jobs") as notes:
        names = ["entities.jsonl", "train.jsonl", "eval.jsonl", "index.bin", "params.bin", "preds.jsonl", "report.json"]
        runs = {}
        for label, jobs in (("a", 1), ("b", 4), ("c", 4)):
            _cli_pipeline(tmp_path / label, jobs)
            runs[label] = {n: (tmp_path / label / n).read_bytes() for n in names}
        diff = [n for n in names if not runs["a"][n] == runs["b"][n] == runs["c"][n]]
        notes.append("3 runs (jobs 1, 4, 4), " + (f"differing: {diff}" if diff else "all files identical"))
        assert not diff
