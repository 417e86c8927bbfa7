"""Command-line entry point: ``sparselab <command> [options]``.

Every command writes into a fresh run directory holding a ``config.txt``
snapshot of the resolved settings. Settings may also come from a
``--config`` file of ``key=value`` lines; unknown keys are an error.
The default output root is ``$SPARSELAB_RUNS`` (or ``./runs``).
"""
from __future__ import annotations

import argparse
import json
import logging
import os
import sys
import warnings
from pathlib import Path
from typing import Optional

import numpy as np

from .attention import GateMode, run_benchmark
from .circuits import (
    Ablation,
    CircuitResult,
    DeterminismError,
    Granularity,
    Scope,
    explained_curve,
    first_reaching,
    heatmap_svg,
    mean_cache,
    rank_components,
    ragged,
)
from .model import CheckpointError, ModelConfig, forward, init_model, load_checkpoint, save_checkpoint
from .tasks import ADDITION_LEN, VOCAB, addition_split, carries, encode_addition, get_task, TASK_NAMES
from .training import TrainConfig, evaluate, pretrain_dense, sparse_posttrain, write_metrics

log = logging.getLogger("sparselab")

RUNS_ENV = "SPARSELAB_RUNS"
# Checked after --config is merged, so a config file may supply them.
REQUIRED = {"pretrain": ["task"], "sparsify": ["src"], "eval": ["model"], "circuits": ["model"],
            "repro-toy": ["dense", "sparse"]}
MEAN_REF_SEED = 4242
MEAN_REF_SIZE = 64


class UsageError(Exception):
    """Bad configuration supplied by the user."""


# -- config files and run directories ---------------------------------------------------
def read_config_file(path) -> dict[str, str]:
    out = {}
    for n, line in enumerate(Path(path).read_text().splitlines(), 1):
        line = line.strip()
        if not line or line.startswith("#"):
            continue
        key, sep, val = line.partition("=")
        if not sep:
            raise UsageError(f"{path}:{n}: expected key=value, got {line!r}")
        out[key.strip().replace("-", "_")] = val.strip()
    return out


def apply_config_file(parser: argparse.ArgumentParser, args: argparse.Namespace, argv: list[str]) -> None:
    """Fill options not given on the command line from ``args.config``."""
    if not args.config:
        return
    known = {a.dest: a for a in parser._actions if a.dest not in ("help", "config", "command")}
    given = {a.dest for a in parser._actions for s in a.option_strings
             if any(tok == s or tok.startswith(s + "=") for tok in argv)}
    for key, raw in read_config_file(args.config).items():
        if key == "command":
            continue
        if key not in known:
            raise UsageError(f"unknown config key {key!r} in {args.config}")
        if key in given:
            continue
        action = known[key]
        try:
            val = None if raw in ("", "None") else (action.type(raw) if action.type else raw)
        except (TypeError, ValueError) as e:
            raise UsageError(f"bad value for {key}: {raw!r} ({e})") from None
        if action.choices is not None and val is not None and val not in action.choices:
            raise UsageError(f"bad value for {key}: {raw!r} (choose from {sorted(action.choices)})")
        setattr(args, key, val)


def snapshot(args: argparse.Namespace) -> str:
    d = {k: v for k, v in vars(args).items() if k not in ("config", "func")}
    return "".join(f"{k}={'' if v is None else v}\n" for k, v in sorted(d.items()))


def default_out(command: str) -> str:
    return str(Path(os.environ.get(RUNS_ENV, "runs")) / command)


def make_run_dir(path) -> Path:
    """Create ``path``; if it exists, create ``path-1``, ``path-2``, ... instead."""
    base = Path(path)
    candidate, n = base, 0
    while True:
        try:
            candidate.mkdir(parents=True, exist_ok=False)
            return candidate
        except FileExistsError:
            n += 1
            candidate = base.with_name(f"{base.name}-{n}")


def start_run(args: argparse.Namespace) -> Path:
    run = make_run_dir(args.out or default_out(args.command))
    (run / "config.txt").write_text(snapshot(args))
    return run


def read_run_config(ckpt_path) -> dict[str, str]:
    cfg = Path(ckpt_path).parent / "config.txt"
    return read_config_file(cfg) if cfg.exists() else {}


def resolve_task(task: Optional[str], length: Optional[int], ckpt_path):
    """Task from the flag, falling back to the config snapshot beside the checkpoint."""
    saved = read_run_config(ckpt_path)
    name = task or saved.get("task")
    if not name:
        raise UsageError("task unknown: pass --task")
    if name not in TASK_NAMES:
        raise UsageError(f"unknown task {name!r}")
    if length is None and saved.get("length"):
        length = int(saved["length"])
    return get_task(name, **({"length": length} if name == "copy" and length else {}))


def load_model(path, **kw):
    if not Path(path).is_file():
        raise UsageError(f"checkpoint not found: {path}")
    return load_checkpoint(path, **kw)


def _dump(obj) -> str:
    return json.dumps(obj, indent=1, sort_keys=True) + "\n"


# -- commands ----------------------------------------------------------------------------
def cmd_pretrain(args) -> int:
    task = get_task(args.task, **({"length": args.length} if args.task == "copy" else {}))
    mcfg = ModelConfig(n_layers=args.layers, n_heads=args.heads, d_model=args.d_model, d_ff=args.d_ff,
                       vocab_size=task.vocab_size, max_seq=task.seq_len)
    tcfg = TrainConfig(steps=args.steps, batch_size=args.batch_size, lr=args.lr,
                       warmup_steps=args.warmup_steps, min_lr=args.min_lr,
                       weight_decay=args.weight_decay, seed=args.seed,
                       eval_every=args.eval_every, eval_size=args.eval_size)
    run = start_run(args)
    model = init_model(mcfg, np.random.default_rng([args.seed, 0]))
    model, rows = pretrain_dense(model, task, tcfg)
    save_checkpoint(model, run / "model.ckpt")
    write_metrics(rows, run / "metrics.csv")
    ev = evaluate(model, *task.eval_batch(args.eval_size))
    print(f"dense ce {ev['ce']:.6f} exact_match {ev['exact_match']:.4f} -> {run}")
    return 0


def cmd_sparsify(args) -> int:
    if args.tau is None and args.tau_margin is None:
        raise UsageError("give --tau or --tau-margin")
    dense = load_model(args.src)
    task = resolve_task(args.task, args.length, args.src)
    args.task = task.name
    if task.name == "copy":
        args.length = task.params["length"]
    tcfg = TrainConfig(steps=args.steps, batch_size=args.batch_size, lr=args.lr,
                       warmup_steps=args.warmup_steps, min_lr=args.min_lr,
                       weight_decay=args.weight_decay, dual_lr=args.dual_lr, tau=args.tau,
                       tau_margin=args.tau_margin or 0.0, distill_weight=args.distill_weight,
                       edge_loss_scale=args.edge_loss_scale, nu_init=args.nu_init,
                       gate_bias=args.gate_bias, seed=args.seed, eval_every=args.eval_every,
                       eval_size=args.eval_size)
    run = start_run(args)
    model, geco, rows, info = sparse_posttrain(dense, task, tcfg)
    save_checkpoint(model, run / "model.ckpt")
    write_metrics(rows, run / "metrics.csv")
    ev = evaluate(model, *task.eval_batch(args.eval_size))
    summary = {"dense_ce": info["dense_ce"], "tau": info["tau"], "final_ce": ev["ce"],
               "exact_match": ev["exact_match"], "active_edge_fraction": ev["active_edge_fraction"],
               "lambda": geco.lam}
    (run / "summary.json").write_text(_dump(summary))
    print(f"final ce {ev['ce']:.6f} tau {info['tau']:.6f} "
          f"active_edge_fraction {ev['active_edge_fraction']:.4f} -> {run}")
    return 0


def cmd_eval(args) -> int:
    model = load_model(args.model)
    task = resolve_task(args.task, args.length, args.model)
    mode = GateMode(args.mode)
    rng = np.random.default_rng([args.seed, 4]) if mode.is_sampled else None
    run = start_run(args)
    ev = evaluate(model, *task.eval_batch(args.eval_size), mode=mode, rng=rng)
    report = {"task": task.name, "attention_mode": model.config.attention_mode,
              "gate_mode": mode.value if model.config.sparse else "dense", **ev}
    text = _dump(report)
    (run / "eval.json").write_text(text)
    print(text, end="")
    return 0


def _circuit_models(args):
    model = load_model(args.model)
    task = resolve_task(args.task, args.length, args.model)
    if not task.has_pairs:
        raise UsageError(f"task {task.name!r} has no clean/corrupt pairs")
    pairs = [task.pair(np.random.default_rng([args.seed, 5, i])) for i in range(args.pairs)]
    refs = task.sample_batch(np.random.default_rng([MEAN_REF_SEED, args.seed]), MEAN_REF_SIZE)[0]
    return model, task, pairs, refs


def _ablations(name: str) -> list[Ablation]:
    groups = {"both": [Ablation.ZERO, Ablation.MEAN], "all": [Ablation.ZERO, Ablation.MEAN, Ablation.CORRUPT]}
    return groups[name] if name in groups else [Ablation(name)]


def _granularities(name: str) -> list[Granularity]:
    return [Granularity.HEAD, Granularity.EDGE] if name == "both" else [Granularity(name)]


def find_circuit(model, pairs, granularity, ablation, scope, mean, mode, threshold) -> CircuitResult:
    """Single scope explains the first prompt; global scope averages curves over all prompts."""
    if scope is Scope.SINGLE:
        ranking = rank_components(model, pairs[:1], granularity, Ablation.CORRUPT, scope, mean, mode)
        return explained_curve(model, pairs[0], ranking, ablation, mean, mode, threshold, scope)
    ranking = rank_components(model, pairs, granularity, Ablation.CORRUPT, scope, mean, mode)
    per = [explained_curve(model, p, ranking, ablation, mean, mode, threshold, scope) for p in pairs]
    curves = [r.curve for r in per if r.curve is not None]
    res = per[0]
    res.ld_clean = float(np.mean([r.ld_clean for r in per]))
    res.ld_floor = float(np.mean([r.ld_floor for r in per]))
    res.degenerate = not curves
    res.curve = np.mean(curves, axis=0).tolist() if curves else None
    res.k90 = first_reaching(res.curve, threshold) if curves else None
    return res


def circuit_heatmaps(model, result: CircuitResult, tokens, mode) -> list[tuple[str, str]]:
    """One SVG per kept component, showing the owning head's attention on ``tokens``.

    For edge circuits the head's pattern is restricted to its kept edges.
    """
    if not result.k90:
        return []
    tr = forward(model, np.asarray(tokens)[None], mode, trace=True).trace
    kept = [c for c, _ in result.ranking[: result.k90]]
    labels = VOCAB.decode(tokens)
    out = []
    for rank, c in enumerate(kept):
        w = tr.layers[c.layer].weights[0, c.head]
        if c.kind == "edge":
            keep = np.zeros_like(w, dtype=bool)
            for o in kept:
                if (o.layer, o.head) == (c.layer, c.head):
                    keep[o.query_pos, o.key_pos] = True
            w = np.where(keep, w, 0.0)
            name = f"rank{rank:03d}_L{c.layer}H{c.head}_q{c.query_pos}k{c.key_pos}.svg"
        else:
            name = f"rank{rank:03d}_L{c.layer}H{c.head}.svg"
        out.append((name, heatmap_svg(w, labels, title=name[:-4])))
    return out


def cmd_circuits(args) -> int:
    mode = GateMode(args.mode)
    model, task, pairs, refs = _circuit_models(args)
    if model.config.sparse and mode.is_sampled:
        raise DeterminismError(f"gate mode {mode.value} is sampled; circuit discovery needs determinism")
    compare = load_model(args.compare) if args.compare else None
    scope = Scope.GLOBAL if args.scope == "global" else Scope.SINGLE
    run = start_run(args)
    table = []
    for g in _granularities(args.granularity):
        for a in _ablations(args.ablation):
            row = {"granularity": g.value, "ablation": a.value, "scope": scope.value}
            for label, m in (("model", model), ("compare", compare)):
                if m is None:
                    continue
                mean = mean_cache(m, refs, mode)
                res = find_circuit(m, pairs, g, a, scope, mean, mode, args.threshold)
                row[f"k90_{label}"] = res.k90
                if label != "model":
                    continue
                stem = f"{g.value}_{a.value}_{scope.value}"
                (run / f"{stem}.json").write_text(res.to_json() + "\n")
                svg_dir = run / f"{stem}_heatmaps"
                svg_dir.mkdir()
                for name, svg in circuit_heatmaps(m, res, pairs[0].clean, mode):
                    (svg_dir / name).write_text(svg)
            table.append(row)
    lines = []
    for row in table:
        line = f"{row['granularity']:<5} {row['ablation']:<7} {row['scope']:<15} k90 {_k(row['k90_model'])}"
        if compare is not None:
            line += f"  compare {_k(row['k90_compare'])}"
        lines.append(line)
    if compare is not None:
        cols = ["granularity", "ablation", "scope", "k90_model", "k90_compare"]
        body = "".join(",".join(_k(r[c]) for c in cols) + "\n" for r in table)
        (run / "compare.csv").write_text(",".join(cols) + "\n" + body)
    print("\n".join(lines))
    return 0


def _k(v) -> str:
    return "" if v is None else str(v)


def cmd_bench(args) -> int:
    seqs = [int(s) for s in args.seqs.split(",")]
    tiles = [int(t) for t in args.tiles.split(",")]
    run = start_run(args)
    rows = run_benchmark(run / "bench.csv", seqs, tiles, args.heads, args.d_k, GateMode(args.mode),
                         args.seed, args.trials)
    worst = max(r["max_abs_dev"] for r in rows)
    print(f"{len(rows)} rows, max deviation {worst:.3e} -> {run / 'bench.csv'}")
    return 0


def toy_problems(n_per_class: int = 1) -> list[tuple[int, int]]:
    """First held-out problems with zero, one and two carries."""
    _, held = addition_split()
    picked = []
    for want in (0, 1, 2):
        hits = [(int(a), int(b)) for a, b in held if carries(int(a), int(b)) == want]
        picked.extend(hits[:n_per_class])
    return picked


def toy_matrices(model, problems) -> list[dict]:
    """Per problem, per layer and head: the attention weights actually applied (ragged rows)."""
    out = []
    for a, b in problems:
        toks = encode_addition(a, b)[: ADDITION_LEN - 1]
        tr = forward(model, np.asarray(toks)[None], GateMode.DETERMINISTIC, trace=True).trace
        out.append({"a": a, "b": b, "carries": carries(a, b), "tokens": VOCAB.decode(toks),
                    "layers": [[ragged(lt.weights[0, h]) for h in range(lt.weights.shape[1])]
                               for lt in tr.layers]})
    return out


def render_toy(matrices: dict) -> dict[str, str]:
    """SVG file name -> content, computed from the JSON matrices alone."""
    svgs = {}
    for kind in ("dense", "sparse"):
        for prob in matrices[kind]:
            for l, heads in enumerate(prob["layers"]):
                for h, m in enumerate(heads):
                    name = f"{kind}_{prob['a']:02d}+{prob['b']:02d}_L{l}H{h}.svg"
                    title = f"{kind} {prob['a']:02d}+{prob['b']:02d} ({prob['carries']} carries) L{l}H{h}"
                    svgs[name] = heatmap_svg(m, prob["tokens"], title)
    return svgs


def cmd_repro_toy(args) -> int:
    dense = load_model(args.dense)
    sparse = load_model(args.sparse)
    if dense.config.sparse or not sparse.config.sparse:
        raise UsageError("--dense must be a dense checkpoint and --sparse a sparse one")
    run = start_run(args)
    problems = toy_problems(args.per_class)
    matrices = {"dense": toy_matrices(dense, problems), "sparse": toy_matrices(sparse, problems)}
    (run / "matrices.json").write_text(_dump(matrices))
    for name, svg in render_toy(matrices).items():
        (run / name).write_text(svg)
    print(f"{len(problems)} problems -> {run}")
    return 0


# -- argument parsing ---------------------------------------------------------------------
def _common(p: argparse.ArgumentParser) -> None:
    p.add_argument("--out", default=None, help=f"run directory (default ${RUNS_ENV}/<command>)")
    p.add_argument("--config", default=None, help="key=value file of option defaults")
    p.add_argument("--seed", type=int, default=0)


def _train_opts(p, steps, lr, warmup, min_lr) -> None:
    p.add_argument("--steps", type=int, default=steps)
    p.add_argument("--batch-size", type=int, default=64)
    p.add_argument("--lr", type=float, default=lr)
    p.add_argument("--warmup-steps", type=int, default=warmup)
    p.add_argument("--min-lr", type=float, default=min_lr)
    p.add_argument("--weight-decay", type=float, default=0.0)
    p.add_argument("--eval-every", type=int, default=250)
    p.add_argument("--eval-size", type=int, default=1000)


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="sparselab", description=__doc__.splitlines()[0])
    parser.add_argument("-v", "--verbose", action="store_true", help="log training progress")
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("pretrain", help="train a dense model")
    _common(p)
    p.add_argument("--task", default=None, choices=TASK_NAMES, help="required")
    p.add_argument("--length", type=int, default=8, help="copy segment length")
    p.add_argument("--layers", type=int, default=4)
    p.add_argument("--heads", type=int, default=1)
    p.add_argument("--d-model", type=int, default=64)
    p.add_argument("--d-ff", type=int, default=256)
    _train_opts(p, 3000, 3e-3, 100, 3e-4)
    p.set_defaults(func=cmd_pretrain)

    p = sub.add_parser("sparsify", help="sparse post-training of a dense checkpoint")
    _common(p)
    p.add_argument("--from", dest="src", default=None, help="dense checkpoint (required)")
    p.add_argument("--task", default=None, choices=TASK_NAMES)
    p.add_argument("--length", type=int, default=None)
    p.add_argument("--tau", type=float, default=None, help="target cross-entropy")
    p.add_argument("--tau-margin", type=float, default=None, help="tau = dense CE + margin")
    p.add_argument("--dual-lr", type=float, default=0.05)
    p.add_argument("--nu-init", type=float, default=0.0)
    p.add_argument("--distill-weight", type=float, default=0.0)
    p.add_argument("--edge-loss-scale", type=float, default=None)
    p.add_argument("--gate-bias", type=float, default=0.0)
    _train_opts(p, 2000, 1e-3, 50, 1e-4)
    p.set_defaults(func=cmd_sparsify)

    p = sub.add_parser("eval", help="evaluate a checkpoint")
    _common(p)
    p.add_argument("--model", default=None, help="checkpoint (required)")
    p.add_argument("--task", default=None, choices=TASK_NAMES)
    p.add_argument("--length", type=int, default=None)
    p.add_argument("--mode", default="deterministic", choices=[m.value for m in GateMode])
    p.add_argument("--eval-size", type=int, default=1000)
    p.set_defaults(func=cmd_eval)

    p = sub.add_parser("circuits", help="activation-patching circuit discovery")
    _common(p)
    p.add_argument("--model", default=None, help="checkpoint (required)")
    p.add_argument("--task", default=None, choices=[t for t in TASK_NAMES if t != "addition"])
    p.add_argument("--length", type=int, default=None)
    p.add_argument("--granularity", default="head", choices=["head", "edge", "both"])
    p.add_argument("--ablation", default="both", choices=["zero", "mean", "corrupt", "both", "all"])
    p.add_argument("--scope", default="single", choices=["single", "global"])
    p.add_argument("--pairs", type=int, default=8, help="prompts (global scope averages over them)")
    p.add_argument("--threshold", type=float, default=0.9)
    p.add_argument("--mode", default="deterministic", choices=[m.value for m in GateMode])
    p.add_argument("--compare", default=None, help="second checkpoint for a side-by-side k90 table")
    p.set_defaults(func=cmd_circuits)

    p = sub.add_parser("bench", help="fused vs naive gated attention timing")
    _common(p)
    p.add_argument("--seqs", default="64,256,1024")
    p.add_argument("--tiles", default="16,64")
    p.add_argument("--heads", type=int, default=1)
    p.add_argument("--d-k", type=int, default=16)
    p.add_argument("--mode", default="deterministic", choices=[m.value for m in GateMode])
    p.add_argument("--trials", type=int, default=1)
    p.set_defaults(func=cmd_bench)

    p = sub.add_parser("repro-toy", help="attention heatmaps of dense vs sparse addition models")
    _common(p)
    p.add_argument("--dense", default=None, help="dense addition checkpoint (required)")
    p.add_argument("--sparse", default=None, help="sparse addition checkpoint (required)")
    p.add_argument("--per-class", type=int, default=1, help="problems per carry count")
    p.set_defaults(func=cmd_repro_toy)
    return parser


def _show_warning(message, category, filename, lineno, file=None, line=None) -> None:
    print(f"warning: {message}", file=sys.stderr)


def main(argv: Optional[list[str]] = None) -> int:
    argv = list(sys.argv[1:] if argv is None else argv)
    parser = build_parser()
    args = parser.parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(asctime)s %(message)s", stream=sys.stderr)
    verbose = args.verbose
    del args.verbose
    try:
        sub = parser._subparsers._group_actions[0].choices[args.command]
        apply_config_file(sub, args, argv)
        missing = [d for d in REQUIRED.get(args.command, []) if getattr(args, d) is None]
        if missing:
            flags = {a.dest: a.option_strings[0] for a in sub._actions if a.option_strings}
            sub.error("the following arguments are required: " + ", ".join(flags[d] for d in missing))
        with warnings.catch_warnings():
            warnings.simplefilter("always")
            warnings.showwarning = _show_warning
            return args.func(args)
    except (UsageError, CheckpointError, DeterminismError, ValueError, KeyError, OSError) as e:
        if verbose:
            raise
        print(f"sparselab {args.command}: error: {e}", file=sys.stderr)
        return 2


if __name__ == "__main__":
    sys.exit(main())
