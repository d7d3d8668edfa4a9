"""Acceptance criteria 1-10; each test records one PASS/FAIL line.

Run ``pytest tests/test_acceptance.py -s`` to see the lines inline, or look at
the "acceptance criteria" section of the pytest terminal summary.
"""
import time

import numpy as np
import pytest

from graph_sampling.cli import main
from graph_sampling.data import SyntheticConfig, build_index, generate_synthetic, generate_train_test
from graph_sampling.evaluation import evaluate, evaluate_embeddings, make_split
from graph_sampling.loss import LossConfig, batch_hard_triplet, brute_force_triplet_oracle
from graph_sampling.metric import RerankConfig, mask_diagonal, pairwise_distance, rerank
from graph_sampling.model import EmbeddingModel
from graph_sampling.samplers import SamplerConfig, build_class_graph, gs_epoch_plan
from graph_sampling.trainer import TrainConfig, clip_gradient, loss_and_grad, train

from acceptance_log import record
from oracles import definition_eval, draw_smooth_case, finite_difference, relative_error

# Reference synthetic world for the comparative criteria.  Class structure lives
# in the first 8 of 32 coordinates; the remaining 24 carry only noise.
REFERENCE_DATA = dict(num_classes=64, num_groups=8, ambient_dim=32, samples_per_class_min=6,
                      samples_per_class_max=6, group_center_scale=4.0, class_center_scale=1.0,
                      within_class_sigma=0.5, signal_dim=8)
REFERENCE_TEST_CLASSES = 64
REFERENCE_QUERIES_PER_CLASS = 2
# lr was tuned once on seeds 0-4 and is shared by both samplers
REFERENCE_TRAIN = dict(lr=0.01, total_epochs=15, decay_epoch=10, clip=8.0,
                       loss=LossConfig(16.0), sampler=SamplerConfig(16, 2), match_gs_iters=True,
                       embed_dim=16)
REFERENCE_EVAL_EVERY = 4
SEEDS = range(5)


def reference_world(seed):
    train_set, test_set = generate_train_test(SyntheticConfig(seed=seed, **REFERENCE_DATA),
                                              REFERENCE_TEST_CLASSES)
    return train_set, make_split(test_set, REFERENCE_QUERIES_PER_CLASS, seed)


def test_c01_sampler_structure():
    rng = np.random.default_rng(2024)
    t0 = time.perf_counter()
    violations = 0
    configs = 0
    while configs < 50:
        C = int(rng.integers(8, 129))
        K = int(rng.choice([2, 3, 4]))
        B = int(rng.choice([16, 32, 64]))
        if B // K > C:
            continue
        configs += 1
        cfg = SamplerConfig(B, K)
        index = build_index(np.repeat(np.arange(C), rng.integers(1, 7, size=C)))
        emb = rng.standard_normal((C, 8))
        dist = rerank(pairwise_distance(emb, emb), RerankConfig().capped(C))
        graph = build_class_graph(mask_diagonal(dist), cfg.P)
        plan = gs_epoch_plan(graph, index, cfg, seed=int(rng.integers(2**31)))
        if len(plan) != C:
            violations += 1
            continue
        try:
            plan.check(index, cfg.P, K)
        except Exception:
            violations += 1
            continue
        centers = plan.classes[:, 0]
        if sorted(centers.tolist()) != list(range(C)):
            violations += 1
        for b, c in enumerate(centers):
            want = {int(c)} | set(graph.neighbors[c].tolist())
            violations += set(plan.classes[b].tolist()) != want
    elapsed = time.perf_counter() - t0
    ok = violations == 0 and elapsed < 10
    record(1, "sampler structure", ok,
           f"{configs} configs, {violations} violations, {elapsed:.2f}s (< 10s)")
    assert ok


def _graph_oracle(dist, P):
    rows = []
    for c, row in enumerate(dist):
        order = [j for j in np.argsort(row, kind="stable") if j != c]
        rows.append(order[:P - 1])
    return np.array(rows)


def test_c02_graph_oracle():
    rng = np.random.default_rng(7)
    mismatches = 0
    for trial in range(1000):
        C = int(rng.integers(2, 51))
        raw = rng.random((C, C))
        if trial % 3 == 0:
            raw = np.round(raw * 4)  # heavy ties
        dist = mask_diagonal(raw)
        P = int(rng.integers(2, C + 1))
        mismatches += not np.array_equal(build_class_graph(dist, P).neighbors,
                                         _graph_oracle(dist, P))
    record(2, "graph oracle", mismatches == 0, f"1000 matrices, {mismatches} mismatches")
    assert mismatches == 0


def test_c03_loss_oracle():
    rng = np.random.default_rng(11)
    mismatches = 0
    for trial in range(1000):
        labels = rng.permutation(np.repeat(np.arange(4), 2))
        sim = rng.normal(scale=3, size=(8, 8))
        if trial % 4 == 0:
            sim = np.round(sim)
        cfg = LossConfig(float(rng.uniform(-2, 6)))
        a = batch_hard_triplet(sim, labels, cfg)
        b = brute_force_triplet_oracle(sim, labels, cfg)
        same = (a.value == b.value and np.array_equal(a.grad_similarity, b.grad_similarity)
                and a.active_count == b.active_count)
        mismatches += not same
    record(3, "loss oracle", mismatches == 0, f"1000 batches, {mismatches} mismatches (exact)")
    assert mismatches == 0


def test_c04_gradient_check():
    rng = np.random.default_rng(5)
    kinds = [("linear", False, False, "euclidean"), ("linear", True, False, "euclidean"),
             ("linear", False, True, "euclidean"), ("linear", False, False, "cosine"),
             ("mlp1", False, False, "euclidean"), ("mlp1", True, True, "euclidean"),
             ("mlp1", True, False, "cosine")]
    worst = 0.0
    for case in range(20):
        kind, bias, l2, metric = kinds[case % len(kinds)]
        margin = 0.5 if (l2 or metric == "cosine") else 2.0

        def make(r):
            m = EmbeddingModel.initialize(kind, 5, 3, hidden=6, bias=bias, l2_normalize=l2,
                                          seed=int(r.integers(2**31)))
            if bias:
                m.params[:] += r.normal(size=m.num_params) * 0.1
            return m

        model, x, labels = draw_smooth_case(make, 5, 8, 2, metric, margin, rng)
        _, g = loss_and_grad(model, x, labels, metric, LossConfig(margin))
        worst = max(worst, relative_error(g, finite_difference(model, x, labels, metric,
                                                               margin)))
    ok = worst <= 1e-4
    record(4, "gradient check", ok, f"20 cases, max relative error {worst:.2e} (<= 1e-4)")
    assert ok


def test_c05_clipping():
    rng = np.random.default_rng(3)
    T = TrainConfig().clip
    bad = 0
    for _ in range(1000):
        g = rng.standard_normal(int(rng.integers(1, 200))) * 10.0 ** rng.uniform(-3, 4)
        out = clip_gradient(g, T)
        n_in, n_out = np.linalg.norm(g), np.linalg.norm(out)
        bad += n_out > T + 1e-9
        if n_in > T:
            cos = float(out @ g) / (n_out * n_in)
            bad += abs(n_out - T) > 1e-9 or abs(cos - 1) > 1e-9
    record(5, "clipping", bad == 0, f"1000 gradients at T={T}, {bad} violations")
    assert bad == 0


def test_c06_evaluation_oracle():
    rng = np.random.default_rng(13)
    worst = 0.0
    perfect_ok = True
    for trial in range(200):
        C = int(rng.integers(2, 6))
        nq, ng = int(rng.integers(1, 11)), int(rng.integers(C, 31))
        qe, ge = rng.standard_normal((nq, 3)), rng.standard_normal((ng, 3))
        gl = np.concatenate([np.arange(C), rng.integers(0, C, ng - C)])
        ql = rng.integers(0, C, nq)
        rep = evaluate_embeddings(qe, ql, ge, gl)
        r1, m, aps = definition_eval(qe, ql, ge, gl)
        worst = max(worst, abs(rep.rank1 - r1), abs(rep.map - m),
                    float(np.max(np.abs(rep.ap - aps))))
        # perfect ranking: class c lives near 10 * e_c
        centers = np.eye(C, 3 * C)[:, :max(3, C)] * 10.0
        pq = centers[ql] + rng.normal(scale=0.01, size=(nq, centers.shape[1]))
        pg = centers[gl] + rng.normal(scale=0.01, size=(ng, centers.shape[1]))
        prep = evaluate_embeddings(pq, ql, pg, gl)
        perfect_ok &= prep.rank1 == 1.0 and prep.map == 1.0
    ok = worst <= 1e-12 and perfect_ok
    record(6, "evaluation oracle", ok,
           f"200 instances, max deviation {worst:.1e} (<= 1e-12), perfect cases exact: "
           f"{perfect_ok}")
    assert ok


def test_c07_informativeness():
    t0 = time.perf_counter()
    wins = 0
    details = []
    for seed in SEEDS:
        train_set, _ = reference_world(seed)
        cfg = TrainConfig(seed=seed, **{**REFERENCE_TRAIN, "total_epochs": 1, "decay_epoch": 1})
        fracs = {}
        for kind in ("gs", "pk"):
            # both runs start from cfg.make_model, i.e. the same untrained weights
            _, log = train(train_set, cfg, kind)
            fracs[kind] = log.epoch_active_fraction(0)
        wins += fracs["gs"] > fracs["pk"]
        details.append(f"{fracs['gs']:.3f}/{fracs['pk']:.3f}")
    elapsed = time.perf_counter() - t0
    ok = wins >= 4 and elapsed < 60
    record(7, "informativeness", ok,
           f"GS active fraction > PK in {wins}/5 seeds (gs/pk {', '.join(details)}), "
           f"{elapsed:.1f}s (< 60s)")
    assert ok


def test_c08_convergence():
    t0 = time.perf_counter()
    macc_wins = faster = 0
    details = []
    for seed in SEEDS:
        train_set, split = reference_world(seed)
        cfg = TrainConfig(seed=seed, **REFERENCE_TRAIN)
        runs = {}
        for kind in ("gs", "pk"):
            model, log = train(train_set, cfg, kind, eval_split=split,
                               eval_every=REFERENCE_EVAL_EVERY)
            runs[kind] = (evaluate(model, split, cfg.metric), log)
        target = runs["pk"][0].map
        steps_gs = runs["gs"][1].steps_to_map(target)
        steps_pk = runs["pk"][1].steps_to_map(target)
        macc_wins += runs["gs"][0].macc >= runs["pk"][0].macc
        faster += steps_gs is not None and steps_gs < steps_pk
        details.append(f"seed {seed}: mAcc {runs['gs'][0].macc:.3f}/{runs['pk'][0].macc:.3f}, "
                       f"steps {steps_gs}/{steps_pk}")
    elapsed = time.perf_counter() - t0
    ok = macc_wins >= 4 and faster >= 4 and elapsed < 300
    record(8, "convergence", ok,
           f"GS mAcc >= PK in {macc_wins}/5, GS faster to PK's final mAP in {faster}/5, "
           f"{elapsed:.1f}s (< 300s) [{'; '.join(details)}]")
    assert ok


def test_c09_epoch_cost():
    # a one-hidden-layer embedding stands in for a backbone so an optimizer step is
    # not dominated by interpreter overhead
    fs = generate_synthetic(SyntheticConfig(num_classes=1000, num_groups=50, ambient_dim=512,
                                            samples_per_class_min=4, samples_per_class_max=4,
                                            seed=0))
    cfg = TrainConfig(seed=0, total_epochs=1, decay_epoch=1, embed_dim=128, model_kind="mlp1",
                      hidden_dim=512, metric="euclidean", rerank=RerankConfig())
    _, log = train(fs, cfg, "gs")
    epoch, iters, plan_s, train_s, _ = log.epochs[0]
    ratio = plan_s / train_s
    ok = iters == 1000 and ratio < 0.10
    record(9, "epoch cost", ok,
           f"plan {plan_s:.3f}s vs train {train_s:.3f}s over {iters} steps: "
           f"{100 * ratio:.1f}% (< 10%)")
    assert ok


def test_c10_determinism(tmp_path):
    data = tmp_path / "train.csv"
    assert main(["gen", "--classes", "32", "--groups", "4", "--seed", "3", "-o", str(data)]) == 0
    blobs = []
    for name in ("a", "b"):
        out = tmp_path / name
        assert main(["train", "--train", str(data), "--sampler", "gs", "--seed", "3",
                     "--batch-size", "16", "--epochs", "3", "--decay-epoch", "2",
                     "-o", str(out)]) == 0
        blobs.append((out / "metrics.csv").read_bytes())
    ok = blobs[0] == blobs[1] and len(blobs[0]) > 0
    record(10, "determinism", ok,
           f"two train runs, metrics CSVs byte-identical: {blobs[0] == blobs[1]} "
           f"({len(blobs[0])} bytes)")
    assert ok


if __name__ == "__main__":
    raise SystemExit(pytest.main([__file__, "-q"]))
