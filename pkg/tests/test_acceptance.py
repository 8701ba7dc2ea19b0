"""Acceptance suite: one test per criterion, each printing a PASS/FAIL line.

The continual-learning runs use the desk regime (pretext backbone, lr 3e-3,
10 epochs per task) on the default synthetic curriculum.
"""
import math

import numpy as np
import pytest
import torch

from doublemix.audio import splice, synth_clip
from doublemix.bench import CorpusSpec, build_task_stream, check_stream
from doublemix.estimators import DoubleMixture
from doublemix.experiment import (ExperimentConfig, learner_params, objective_gradient_check,
                                  run_seed)
from doublemix.losses import (agem_project, data_loss, distillation_kl, ewc_penalty, lwf_loss,
                              total_loss)
from doublemix.metrics import avg_accuracy
from doublemix.model import MoELayer, Router, moe_forward, route
from doublemix.numerics import tensor

SEEDS = (1, 2, 3)
DESK_LR = 3e-3
CL_METHODS = ("ft", "er", "agem", "ewc", "lwf", "double_mixture")


def report(capsys, number, ok, detail):
    with capsys.disabled():
        print(f"\nCRITERION {number}: {'PASS' if ok else 'FAIL'} | {detail}")


def desk_run(method, seed, combined_mode="none"):
    cfg = ExperimentConfig(method=method, seeds=[seed], train={"initial_lr": DESK_LR},
                           corpus={"combined_mode": combined_mode})
    return run_seed(cfg, seed)


# 1 -------------------------------------------------------------------------

def test_criterion_1_metric_oracle(capsys):
    a = avg_accuracy([81.00, 76.85, 67.87, 69.38, 66.52])
    b = avg_accuracy([85.00, 70.00, 72.10, 69.40, 68.82])
    ok = abs(a - 72.32) <= 0.01 and abs(b - 73.06) <= 0.01
    report(capsys, 1, ok, f"avg_acc rows -> {a:.4f}, {b:.4f} (want 72.32, 73.06 +/-0.01)")
    assert ok


# 2 -------------------------------------------------------------------------

def _router(columns):
    r = Router(len(columns[0]))
    for c in columns:
        r.add_column()
        with torch.no_grad():
            r.columns[-1].copy_(tensor(c))
    return r


def test_criterion_2_formula_units(capsys):
    rng = np.random.default_rng(0)
    checks = {}

    layer = MoELayer(8, 3)
    layer.add_expert(0, torch.Generator().manual_seed(0))
    H = tensor(rng.normal(size=(5, 8)))
    checks["zero-init identity"] = torch.equal(layer.experts[0](H), H)

    alpha, _ = route(_router([[1.0, 0.0], [2.0, 0.0], [3.0, 0.0]]), tensor([[1.0, 0.0]]))
    oracle = np.exp([1.0, 2.0, 3.0]) / np.exp([1.0, 2.0, 3.0]).sum()
    checks["softmax oracle"] = np.allclose(alpha.detach().numpy(), oracle, atol=1e-4, rtol=0)
    sums = []
    for _ in range(50):
        cols = rng.normal(scale=5.0, size=(int(rng.integers(1, 7)), 4)).tolist()
        a, _ = route(_router(cols), tensor(rng.normal(size=(3, 4))))
        sums.append(abs(a.sum().item() - 1.0))
    checks["weights sum to 1"] = max(sums) < 1e-9

    layer = MoELayer(4, 2)
    gen = torch.Generator().manual_seed(2)
    layer.add_expert(0, gen)
    layer.add_expert(1, gen)
    with torch.no_grad():
        for e in layer.experts:
            e.w_up.copy_(tensor(rng.normal(size=(2, 4))))
        layer.router.columns[1][0] = math.log(3.0)
    H = tensor([[2.0, 1.0, -1.0, 0.5], [0.0, -1.0, 1.0, -0.5]])
    E1, E2 = (layer.experts[i](H).detach().numpy() for i in (0, 1))
    direct = [[0.25 * E1[i][j] + 0.75 * E2[i][j] for j in range(4)] for i in range(2)]
    checks["weighted sum"] = np.max(np.abs(moe_forward(layer, H).detach().numpy() - direct)) < 1e-12

    checks["data loss"] = data_loss(2.0, 1.0, 0.5) == 1.5
    checks["total loss"] = total_loss(1.5, 0.2, 0.1) == 1.5 + 0.1 * 0.2

    ok = all(checks.values())
    report(capsys, 2, ok, ", ".join(f"{k}={'ok' if v else 'BAD'}" for k, v in checks.items()))
    assert ok


# 3 -------------------------------------------------------------------------

def test_criterion_3_gradient_check(capsys):
    errors = [objective_gradient_check(seed, epsilon=1e-4) for seed in range(5)]
    ok = max(errors) < 1e-4
    report(capsys, 3, ok, "max rel err per seed " + ", ".join(f"{e:.2e}" for e in errors)
           + " (want < 1e-4)")
    assert ok


# 4 -------------------------------------------------------------------------

@pytest.fixture(scope="module")
def single_event_runs():
    return {(m, s): desk_run(m, s) for s in SEEDS for m in CL_METHODS + ("mtl",)}


def test_criterion_4_forgetting_ordering(capsys, single_event_runs):
    runs = single_event_runs
    fgt = {m: float(np.mean([runs[m, s].avg_forgetting for s in SEEDS])) for m in CL_METHODS}
    mtl_wins = sum(
        all(runs["mtl", s].avg_acc >= runs[m, s].avg_acc for m in CL_METHODS) for s in SEEDS)
    order = fgt["double_mixture"] < fgt["er"] < fgt["ft"]
    margin = fgt["double_mixture"] <= fgt["ft"] - 0.10
    ok = order and margin and mtl_wins >= 2
    detail = ("mean forgetting " + ", ".join(f"{m}={v:.3f}" for m, v in fgt.items())
              + f"; DM<ER<FT={order}; DM<=FT-10pp={margin}; MTL best in {mtl_wins}/3 seeds")
    report(capsys, 4, ok, detail)
    assert ok


# 5 -------------------------------------------------------------------------

ABLATIONS = ("double_mixture", "double_mixture_no_experts", "double_mixture_no_memory")


@pytest.fixture(scope="module")
def splice_runs():
    return {(m, s): desk_run(m, s, "splice") for s in SEEDS for m in ABLATIONS}


def test_criterion_5_ablation_ordering(capsys, splice_runs):
    comb = {m: float(np.mean([splice_runs[m, s].combined_acc for s in SEEDS])) for m in ABLATIONS}
    full = comb["double_mixture"]
    ok = full > comb["double_mixture_no_experts"] and full > comb["double_mixture_no_memory"]
    report(capsys, 5, ok,
           "mean combined-event acc " + ", ".join(f"{m}={v:.3f}" for m, v in comb.items()))
    assert ok


# 6 -------------------------------------------------------------------------

def test_criterion_6_benchmark_properties(capsys):
    rng = np.random.default_rng(6)
    additive = 0
    for i in range(1000):
        a = synth_clip(semantic=int(rng.integers(6)), duration_s=float(rng.uniform(0.5, 2.0)),
                       seed=2 * i)
        b = synth_clip(acoustic=int(rng.integers(3)), duration_s=float(rng.uniform(0.5, 2.0)),
                       seed=2 * i + 1)
        s = splice(a, b)
        additive += len(s.samples) == len(a.samples) + len(b.samples)
    spliced = build_task_stream(CorpusSpec(combined_mode="splice"))
    overlaid = build_task_stream(CorpusSpec(combined_mode="overlay"))
    mean_dur = {name: np.mean([c.duration_s for t in st.combined_tasks for c in t.test])
                for name, st in (("splice", spliced), ("overlay", overlaid))}
    violations = 0
    for seed in SEEDS:
        stream = build_task_stream(CorpusSpec(combined_mode="splice", seed=seed))
        cfg = ExperimentConfig(method="double_mixture", corpus={"combined_mode": "splice"})
        params = {**learner_params(cfg, seed, stream), "epochs": 1, "backbone": None}
        dm = DoubleMixture(**params).fit(stream)
        forbidden = stream.forbidden_pairs()
        pairs = [(e.clip.semantic.class_id, e.clip.acoustic.class_id) for e in dm.memory_.mixed()]
        assert pairs, "no mixed samples were built"
        violations += sum(p in forbidden for p in pairs)
    ok = additive == 1000 and mean_dur["splice"] > mean_dur["overlay"] and violations == 0
    report(capsys, 6, ok, f"additive {additive}/1000; mean duration splice {mean_dur['splice']:.2f}s "
           f"vs overlay {mean_dur['overlay']:.2f}s; memory pairing violations {violations}")
    assert ok


# 7 -------------------------------------------------------------------------

def manifest_problems(rows, task_ids, tag):
    """Train-label disjointness and cumulative-test coverage from manifest records alone."""
    def labels(task_id, split):
        return {(k, c) for r in rows if r["task_id"] == task_id and r["split"] == split
                for k, c in zip(r["kinds"], r["class_ids"])}
    out, seen, tested = [], set(), set()
    for task_id in task_ids:
        train = labels(task_id, "train")
        if train & seen:
            out.append(f"{tag}: task {task_id} reuses {train & seen}")
        seen |= train
        tested |= labels(task_id, "test")
        if not seen <= tested:
            out.append(f"{tag}: cumulative test after task {task_id} misses {seen - tested}")
    return out


def test_criterion_7_protocol_invariants(capsys):
    problems = []
    for mode in ("none", "splice", "overlay"):
        for seed in SEEDS:
            stream = build_task_stream(CorpusSpec(combined_mode=mode, seed=seed))
            try:
                check_stream(stream)
            except ValueError as exc:
                problems.append(f"{mode}/{seed}: {exc}")
            rows = stream.manifest()
            problems += manifest_problems(rows, stream.task_ids, f"{mode}/{seed}")

    stream = build_task_stream(CorpusSpec(clips_per_class=12, seed=4))
    params = dict(epochs=2, random_state=4)
    learner = DoubleMixture(**params)
    enc, frozen = None, []
    for task in stream.tasks:
        learner.partial_fit(task.train, task.task_id, val=task.val)
        enc = enc or learner.model_.encoder_checksum()
        frozen.append([p.detach().clone() for b in learner.model_.blocks
                       for p in b.moe.experts[0].parameters()])
    checksum_ok = learner.model_.encoder_checksum() == enc
    experts_ok = all(torch.equal(a, b) for snap in frozen[1:] for a, b in zip(frozen[0], snap))
    twin = DoubleMixture(**params).fit(stream)
    rerun_ok = twin.model_.parameter_checksum() == learner.model_.parameter_checksum()
    ok = not problems and checksum_ok and experts_ok and rerun_ok
    report(capsys, 7, ok, f"stream problems {len(problems)}; encoder checksum stable {checksum_ok}; "
           f"frozen experts identical {experts_ok}; rerun bit-exact {rerun_ok}")
    assert ok, problems[:5]


# 8 -------------------------------------------------------------------------

def test_criterion_8_baseline_oracles(capsys):
    rng = np.random.default_rng(8)
    worst, fired = 0.0, 0
    for _ in range(100):
        g, ref = tensor(rng.normal(size=20)), tensor(rng.normal(size=20))
        if torch.dot(g, ref) < 0:
            fired += 1
            worst = max(worst, abs(torch.dot(agem_project(g, ref), ref).item()))
    agem_ok = fired > 0 and worst < 1e-10
    p = [tensor([1.0, -2.0])]
    ewc_zero = ewc_penalty(p, [tensor([3.0, 4.0])], p).item() == 0.0
    ewc_half = ewc_penalty([tensor([2.0])], [tensor([1.0])], [tensor([1.0])], strength=1.0).item() == 0.5
    z = tensor(rng.normal(size=(4, 5)))
    lwf_zero = distillation_kl(z, z.clone()).item() == pytest.approx(0.0, abs=1e-15)
    lwf_zero = lwf_zero and lwf_loss(z, z.clone(), tensor(0.7)).item() == pytest.approx(0.7, abs=1e-15)
    ok = agem_ok and ewc_zero and ewc_half and lwf_zero
    report(capsys, 8, ok, f"A-GEM fired {fired}/100 max |g'.g_ref| {worst:.1e}; EWC zero {ewc_zero}, "
           f"0.5-case {ewc_half}; LwF zero {lwf_zero}")
    assert ok
