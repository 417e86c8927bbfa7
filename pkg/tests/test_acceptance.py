"""Acceptance suite: one test and one PASS/FAIL verdict line per criterion.

Run alone with ``pytest tests/test_acceptance.py -v`` (or ``python3
tests/test_acceptance.py``); the verdicts are printed in the terminal summary.
Criteria 6 and 7 train models from scratch and take several minutes each.
"""
import csv
import io
import math
import zlib
from pathlib import Path

import numpy as np
import pytest

import gradcheck
from conftest import VERDICTS
from constructions import planted_model, random_model, random_pair, signal_pair
from sparselab import autodiff as ad
from sparselab.attention import (
    GateField,
    GateMode,
    dense_attn,
    expected_edges,
    fused_sparse_attn,
    gate_probs,
    naive_sparse_attn,
    sample_gates,
    sparse_attn,
)
from sparselab.autodiff import Tensor
from sparselab.circuits import (
    Ablation,
    Granularity,
    Scope,
    brute_force_min_circuit,
    circuit_summary,
    components,
    explained_curve,
    logit_diff,
    mean_cache,
    rank_components,
)
from sparselab.cli import main
from sparselab.model import ModelConfig, forward, init_model, logits_of, transplant_dense_to_sparse
from sparselab.tasks import get_task
from sparselab.training import GecoState, TrainConfig, dual_update, evaluate, pretrain_dense, sparse_posttrain
from test_autodiff import BINARY, rng_cases, unary_cases, weighted_sum


def verdict(n: int, title: str, ok: bool, detail: str) -> None:
    line = f"[{'PASS' if ok else 'FAIL'}] {n}. {title}: {detail}"
    VERDICTS.append(line)
    print(line)
    assert ok, line


# -- 1 -------------------------------------------------------------------------------------
def test_1_gate_identity():
    rng = np.random.default_rng(101)
    worst = 0.0
    for _ in range(100):
        h, t, d = rng.integers(1, 5), rng.integers(1, 33), rng.integers(1, 17)
        q, k, v = (Tensor(rng.normal(scale=rng.uniform(0.1, 3), size=(h, t, d))) for _ in range(3))
        field = sample_gates(gate_probs(q, k, rng.normal(scale=5)), GateMode.ALL_OPEN)
        worst = max(worst, float(np.abs(sparse_attn(q, k, v, field).data - dense_attn(q, k, v).data).max()))
    cfg = ModelConfig(n_layers=2, n_heads=2, d_model=16, d_ff=32, vocab_size=20, max_seq=12)
    model_worst, min_prob = 0.0, 1.0
    for seed in range(5):
        # weights at a trained-model scale: the +20 bias dominates q.k
        m = random_model(cfg, seed, scale=0.1)
        toks = np.random.default_rng(seed).integers(0, 20, size=(4, 12))
        open_ = transplant_dense_to_sparse(m, gate_bias=20.0)
        model_worst = max(model_worst, float(np.abs(logits_of(open_, toks) - logits_of(m, toks)).max()))
        with ad.no_grad():
            fields = forward(open_, toks).gate_fields
        min_prob = min(min_prob, min(float(f.probs.data[..., f.valid_mask].min()) for f in fields))
    verdict(1, "gate identity", worst < 1e-12 and model_worst < 1e-9,
            f"attention max err {worst:.2e} (< 1e-12), transplant +20 logit err {model_worst:.2e} (< 1e-9, "
            f"smallest open probability {min_prob:.8f})")


# -- 2 -------------------------------------------------------------------------------------
def _primitive_errors():
    errs = {}
    for name, (fn, make) in unary_cases().items():
        worst = 0.0
        for rng in rng_cases(zlib.crc32(name.encode()) % 1000):
            x = make(rng)
            w = rng.normal(size=fn(Tensor(x)).shape)
            worst = max(worst, gradcheck.check(lambda a: weighted_sum(fn(a), w), [x]))
        errs[name] = worst
    for name, (fn, sa, sb) in BINARY.items():
        worst = 0.0
        for rng in rng_cases(zlib.crc32(name.encode()) % 1000):
            a = rng.normal(size=sa)
            b = rng.uniform(0.5, 2.0, size=sb) if name == "div" else rng.normal(size=sb)
            w = rng.normal(size=fn(Tensor(a), Tensor(b)).shape)
            worst = max(worst, gradcheck.check(lambda x, y: weighted_sum(fn(x, y), w), [a, b]))
        errs[name] = worst
    worst = 0.0
    for rng in rng_cases(21):
        x, g, b, w = rng.normal(size=(3, 8)), rng.normal(size=8), rng.normal(size=8), rng.normal(size=(3, 8))
        worst = max(worst, gradcheck.check(lambda x_, g_, b_: weighted_sum(ad.layernorm(x_, g_, b_), w), [x, g, b]))
    errs["layernorm"] = worst
    worst = 0.0
    for rng in rng_cases(22):
        z, t = rng.normal(scale=2, size=(4, 5)), rng.integers(0, 5, size=4)
        worst = max(worst, gradcheck.check(lambda a: ad.cross_entropy(a, t), [z]))
    errs["cross_entropy"] = worst
    worst = 0.0
    for rng in rng_cases(23):
        table, ids, w = rng.normal(size=(7, 4)), rng.integers(0, 7, size=(2, 5)), rng.normal(size=(2, 5, 4))
        worst = max(worst, gradcheck.check(lambda a: weighted_sum(ad.embedding(a, ids), w), [table]))
    errs["embedding"] = worst
    return errs


def _sparse_model_errors(n=20):
    cfg = ModelConfig(n_layers=2, n_heads=2, d_model=4, d_ff=6, vocab_size=5, max_seq=4, attention_mode="sparse")
    errs, seed = [], 0
    while len(errs) < n:
        m = random_model(cfg, 1000 + seed, scale=0.4)
        rng = np.random.default_rng(2000 + seed)
        seed += 1
        x, y = rng.integers(0, 5, size=(2, 4)), rng.integers(0, 5, size=8)
        with ad.no_grad():
            probs = np.concatenate([f.probs.data.ravel() for f in forward(m, x).gate_fields])
        if np.abs(probs - 0.5).min() < 1e-3:
            continue  # a thresholded gate would flip inside the difference step

        def loss():
            out = forward(m, x, GateMode.DETERMINISTIC)
            edges = sum((expected_edges(f) for f in out.gate_fields), Tensor(0.0))
            return ad.cross_entropy(out.logits.reshape(-1, 5), y) + edges * 0.05

        errs.append(max(gradcheck.check_params(loss, m.params).values()))
    return errs


def test_2_gradient_correctness():
    prim = _primitive_errors()
    model = _sparse_model_errors()
    worst_name = max(prim, key=prim.get)
    ok = max(prim.values()) < 1e-5 and max(model) < 1e-5
    verdict(2, "gradient correctness", ok,
            f"{len(prim)} primitives x 20 instances, worst {worst_name} {prim[worst_name]:.2e}; "
            f"full sparse model x {len(model)}, worst {max(model):.2e} (< 1e-5)")


# -- 3 -------------------------------------------------------------------------------------
def test_3_expected_edges_unbiased():
    rng = np.random.default_rng(303)
    n, chunk = 100_000, 10_000
    worst_z = 0.0
    for _ in range(10):
        h, t, d = rng.integers(1, 4), rng.integers(2, 9), rng.integers(1, 6)
        q, k = (Tensor(rng.normal(scale=0.8, size=(h, t, d))) for _ in range(2))
        field = gate_probs(q, k, rng.normal())
        target = expected_edges(field).item()
        p = field.probs.data
        sigma = math.sqrt((p * (1 - p)).sum() / n)
        for mode in (GateMode.SAMPLED_TRAIN, GateMode.SAMPLED_EVAL):
            total = 0.0
            for _ in range(n // chunk):
                big = GateField(Tensor(np.broadcast_to(field.logits.data, (chunk,) + p.shape)),
                                Tensor(np.broadcast_to(p, (chunk,) + p.shape)), field.valid_mask, field.bias)
                total += sample_gates(big, mode, rng=rng).sample.data.sum()
            worst_z = max(worst_z, abs(total / n - target) / sigma)
    verdict(3, "expected edges unbiased", worst_z <= 3.0,
            f"10 fields x 2 samplers x 1e5 draws, worst deviation {worst_z:.2f} sigma (<= 3)")


# -- 4 -------------------------------------------------------------------------------------
def test_4_dual_dynamics():
    rng = np.random.default_rng(404)
    sign_ok, worst = True, 0.0
    for _ in range(2000):
        g = GecoState(nu=rng.normal(scale=2), tau=rng.uniform(0, 4), dual_lr=rng.uniform(0.001, 1))
        ce = g.tau if rng.random() < 0.05 else rng.uniform(0, 4)
        lam = g.lam
        dual_update(g, ce)
        sign_ok &= np.sign(g.lam - lam) == np.sign(ce - g.tau)
        worst = max(worst, abs(g.lam - lam * math.exp(g.dual_lr * (ce - g.tau))) / max(1.0, lam))
    g = GecoState(nu=0.0, tau=1.0, dual_lr=0.1)
    dual_update(g, 1.5)
    hand = abs(g.lam - math.exp(0.05))
    verdict(4, "dual dynamics", bool(sign_ok) and worst < 1e-12 and hand < 1e-12,
            f"sign(dlambda) == sign(ce - tau) on 2000 updates: {bool(sign_ok)}; "
            f"multiplicative identity err {worst:.1e}, hand case err {hand:.1e} (< 1e-12)")


# -- 5 -------------------------------------------------------------------------------------
def test_5_fused_kernel():
    rng = np.random.default_rng(505)
    worst_out, worst_edges = 0.0, 0.0
    for case in range(50):
        h, t, d = rng.integers(1, 4), rng.integers(1, 40), rng.integers(1, 17)
        q, k, v = (rng.normal(scale=1.5, size=(h, t, d)) for _ in range(3))
        bias, mode = rng.normal(), list(GateMode)[case % 4]
        seed = int(rng.integers(1 << 30))
        ref, _ = naive_sparse_attn(q, k, v, bias, mode, np.random.default_rng(seed))
        exact = expected_edges(gate_probs(Tensor(q), Tensor(k), bias)).item()
        for tile in (1, 4, 16, max(int(t), 16) + 1):
            out, e = fused_sparse_attn(q, k, v, bias, tile, mode, np.random.default_rng(seed))
            worst_out = max(worst_out, float(np.abs(out - ref).max()))
            worst_edges = max(worst_edges, abs(e - exact) / max(abs(exact), 1e-300))
    verdict(5, "fused kernel equivalence", worst_out < 1e-10 and worst_edges < 1e-10,
            f"50 cases x tiles {{1, 4, 16, >seq}}: output err {worst_out:.2e}, "
            f"edge accumulator rel err {worst_edges:.2e} (< 1e-10)")


# -- 6 -------------------------------------------------------------------------------------
ADDITION_MODEL = dict(n_layers=4, n_heads=1, d_model=64, d_ff=256)
DENSE_TRAIN = dict(batch_size=64, lr=3e-3, warmup_steps=100, min_lr=3e-4, eval_every=250)
SPARSE_TRAIN = dict(batch_size=64, lr=1e-3, warmup_steps=50, min_lr=1e-4, eval_every=250, dual_lr=0.05)


def train_pair(task, model_kw, dense_steps, sparse_steps, tau_margin=0.02, seed=0):
    cfg = ModelConfig(**model_kw, vocab_size=task.vocab_size, max_seq=task.seq_len)
    dense = init_model(cfg, np.random.default_rng([seed, 0]))
    dense, _ = pretrain_dense(dense, task, TrainConfig(steps=dense_steps, seed=seed, **DENSE_TRAIN))
    sparse, geco, rows, info = sparse_posttrain(
        dense, task, TrainConfig(steps=sparse_steps, seed=seed, tau_margin=tau_margin, **SPARSE_TRAIN))
    return dense, sparse, geco, info


def test_6_addition_reproduction():
    task = get_task("addition")
    dense, sparse, geco, info = train_pair(task, ADDITION_MODEL, 1500, 1000)
    held = task.eval_batch(1000)
    d, s = evaluate(dense, *held), evaluate(sparse, *held)
    tau = info["tau"]
    ok = (d["exact_match"] >= 0.99 and s["ce"] <= tau + 0.03
          and s["active_edge_fraction"] < 0.5 and s["exact_match"] >= 0.95)
    verdict(6, "addition toy reproduction", ok,
            f"dense exact {d['exact_match']:.3f} (>= 0.99); sparse ce {s['ce']:.4f} vs tau {tau:.4f} (<= tau + 0.03), "
            f"final ema ce {geco.ce_ema:.4f}, active edges {s['active_edge_fraction']:.3f} (< 0.5), "
            f"exact {s['exact_match']:.3f} (>= 0.95)")


# -- 7 -------------------------------------------------------------------------------------
CIRCUIT_MODEL = dict(n_layers=2, n_heads=4, d_model=64, d_ff=256)
CIRCUIT_STEPS = {"copy": (1500, 1000), "ioi": (1500, 3000)}
N_PAIRS = 16


def best_k90(model, task, pairs, refs, granularity):
    """Smallest mean-curve k90 over the zero and mean freezing modes."""
    mean = mean_cache(model, refs)
    found = {}
    for abl in (Ablation.ZERO, Ablation.MEAN):
        s = circuit_summary(model, pairs, granularity, abl, Scope.SINGLE, mean)
        found[abl.value] = s.k90 if s.k90 is not None else s.n_components + 1
    best = min(found, key=found.get)
    return found[best], best


@pytest.fixture(scope="module")
def circuit_models():
    """Dense and sparse 2-layer, 4-head models for the copy and IOI tasks."""
    out = {}
    for name in ("copy", "ioi"):
        task = get_task(name)
        dense, sparse, _, _ = train_pair(task, CIRCUIT_MODEL, *CIRCUIT_STEPS[name])
        out[name] = (task, dense, sparse)
    return out


def test_7_circuit_shrinkage(circuit_models):
    details, ok, strict = [], True, False
    for name, (task, dense, sparse) in circuit_models.items():
        pairs = [task.pair(np.random.default_rng([0, 5, i])) for i in range(N_PAIRS)]
        refs = task.sample_batch(np.random.default_rng([4242, 0]), 64)[0]
        for gran in (Granularity.HEAD, Granularity.EDGE):
            kd, ad_ = best_k90(dense, task, pairs, refs, gran)
            ks, as_ = best_k90(sparse, task, pairs, refs, gran)
            ok &= ks <= kd
            strict |= gran is Granularity.EDGE and ks < kd
            details.append(f"{name} {gran.value} dense {kd} ({ad_}) sparse {ks} ({as_})")
    verdict(7, "circuit shrinkage", ok and strict,
            "; ".join(details) + f"; strict edge shrinkage on some task: {strict}")


def test_trained_copy_model_prefers_the_copied_letter(circuit_models):
    task, dense, _ = circuit_models["copy"]
    rng = np.random.default_rng(777)
    lds = [logit_diff(dense, task.pair(rng)) for _ in range(200)]
    assert np.mean(np.array(lds) > 0) >= 0.95


# -- 8 -------------------------------------------------------------------------------------
def _random_construction(seed):
    rng = np.random.default_rng([808, seed])
    sparse = bool(rng.integers(2))
    if rng.integers(3) == 0:
        gran, seq = Granularity.EDGE, 5
        cfg = ModelConfig(n_layers=1, n_heads=1, d_model=4, d_ff=8, vocab_size=12, max_seq=seq)
    else:
        gran, seq = Granularity.HEAD, 6
        layers, heads = [(1, 8), (2, 4), (4, 4), (2, 8), (4, 2), (3, 5)][rng.integers(6)]
        cfg = ModelConfig(n_layers=layers, n_heads=heads, d_model=2 * heads, d_ff=8, vocab_size=12, max_seq=seq)
    if sparse:
        cfg = ModelConfig(**{**cfg.__dict__, "attention_mode": "sparse", "gate_bias": 1.0})
    m = random_model(cfg, 8000 + seed)
    pair = random_pair(rng, seq, n_changed=2)
    abl = list(Ablation)[rng.integers(3)]
    mean = mean_cache(m, rng.integers(0, 12, size=(16, seq)))
    return m, pair, gran, abl, mean, seq


def test_8_patching_oracle():
    sound, tried, seed = 0, 0, 0
    while tried < 50:
        m, pair, gran, abl, mean, seq = _random_construction(seed)
        seed += 1
        res = explained_curve(m, pair, rank_components(m, [pair], gran), abl, mean)
        if res.degenerate:
            continue
        comps = components(m, seq, gran)
        assert len(comps) <= 16
        exact = brute_force_min_circuit(m, pair, comps, abl, mean)
        tried += 1
        sound += res.k90 >= len(exact)
    first = 0
    for i in range(20):
        heads = 2 + i % 3
        planted = i % heads
        m = planted_model(500 + i, n_heads=heads, planted=planted, sparse=i % 2 == 1)
        pair = signal_pair(m, np.random.default_rng(600 + i), 6, head=planted)
        first += rank_components(m, [pair], "head")[0][0].head == planted
    verdict(8, "patching oracle soundness", sound == 50 and first == 20,
            f"greedy k90 >= brute-force size in {sound}/50 constructions; planted head ranked first in {first}/20")


# -- 9 -------------------------------------------------------------------------------------
def _cli_session(root: Path, monkeypatch):
    monkeypatch.chdir(root)
    tiny = ["--layers", "2", "--heads", "2", "--d-model", "16", "--d-ff", "32", "--steps", "20",
            "--warmup-steps", "2", "--eval-every", "10", "--eval-size", "100", "--batch-size", "16"]
    small = ["--steps", "10", "--warmup-steps", "2", "--eval-every", "5", "--eval-size", "100", "--batch-size", "16"]
    commands = [
        ["pretrain", "--task", "addition", "--seed", "7", *tiny, "--out", "add_dense"],
        ["sparsify", "--from", "add_dense/model.ckpt", "--tau-margin", "0.02", *small, "--out", "add_sparse"],
        ["pretrain", "--task", "copy", "--length", "4", *tiny, "--out", "copy_dense"],
        ["sparsify", "--from", "copy_dense/model.ckpt", "--tau", "5.0", *small, "--out", "copy_sparse"],
        ["eval", "--model", "add_sparse/model.ckpt", "--out", "eval_det"],
        ["eval", "--model", "add_sparse/model.ckpt", "--mode", "sampled_eval", "--seed", "3", "--out", "eval_smp"],
        ["circuits", "--model", "copy_sparse/model.ckpt", "--granularity", "both", "--ablation", "all",
         "--pairs", "2", "--compare", "copy_dense/model.ckpt", "--out", "circ_single"],
        ["circuits", "--model", "copy_dense/model.ckpt", "--scope", "global", "--pairs", "3", "--out", "circ_global"],
        ["bench", "--seqs", "16,64", "--tiles", "4,16", "--mode", "sampled_train", "--seed", "5", "--out", "bench"],
        ["repro-toy", "--dense", "add_dense/model.ckpt", "--sparse", "add_sparse/model.ckpt", "--out", "toy"],
    ]
    for argv in commands:
        assert main(argv) == 0, argv
    return {c[0] for c in commands}


def _outputs(root: Path) -> dict[str, bytes]:
    files = {}
    for p in sorted(root.rglob("*")):
        if not p.is_file():
            continue
        data = p.read_bytes()
        if p.name == "bench.csv":  # wall time is the only nondeterministic field
            rows = list(csv.DictReader(io.StringIO(data.decode())))
            data = repr([{k: v for k, v in r.items() if k != "wall_ms"} for r in rows]).encode()
        files[str(p.relative_to(root))] = data
    return files


def test_9_cli_determinism(tmp_path, monkeypatch):
    a, b = tmp_path / "a", tmp_path / "b"
    a.mkdir(), b.mkdir()
    cmds = _cli_session(a, monkeypatch)
    _cli_session(b, monkeypatch)
    fa, fb = _outputs(a), _outputs(b)
    differing = sorted(k for k in fa.keys() | fb.keys() if fa.get(k) != fb.get(k))
    verdict(9, "CLI determinism", not differing and len(cmds) == 6,
            f"{len(fa)} output files from {len(cmds)} commands compared byte-for-byte; "
            f"differing: {differing or 'none'}")


if __name__ == "__main__":
    raise SystemExit(pytest.main([__file__, "-v"]))
