"""Dense pretraining and GECO-style constrained sparse post-training.

Post-training minimises ``scale * sum_l E|A_l| + lambda * (CE - tau)`` over the
weights, alternating one Adam step on the weights with one dual step on
``nu = log(lambda)``. The dual step uses an exponential moving average of the
batch cross-entropy.
"""
from __future__ import annotations

import csv
import logging
import math
import warnings
from dataclasses import asdict, dataclass, field
from typing import Optional

import numpy as np

from . import autodiff as ad
from .attention import GateMode, edge_fraction, expected_edges
from .autodiff import Tensor
from .model import TransformerModel, forward, transplant_dense_to_sparse
from .tasks import IGNORE, Task

log = logging.getLogger(__name__)

METRIC_COLUMNS = ["step", "ce", "ce_ema", "lambda", "active_edge_fraction", "lr", "loss_total"]


class DivergenceError(RuntimeError):
    """Training loss became non-finite."""


@dataclass
class TrainConfig:
    steps: int = 3000
    batch_size: int = 64
    lr: float = 1e-3
    warmup_steps: int = 100
    min_lr: float = 1e-4
    weight_decay: float = 0.0
    dual_lr: float = 0.05
    tau: Optional[float] = None
    tau_margin: float = 0.02
    distill_weight: float = 0.0
    edge_loss_scale: Optional[float] = None  # None: 1 / total causal positions
    ema: float = 0.99
    nu_init: float = 0.0
    gate_bias: float = 0.0
    seed: int = 0
    eval_every: int = 250
    eval_size: int = 1000

    def __post_init__(self):
        if self.steps < 1:
            raise ValueError("steps must be >= 1")
        if not 0 <= self.warmup_steps < self.steps:
            raise ValueError("warmup_steps must be < steps")
        if self.min_lr > self.lr:
            raise ValueError("min_lr must be <= lr")
        if self.distill_weight < 0:
            raise ValueError("distill_weight must be >= 0")


def lr_at(step: int, cfg: TrainConfig) -> float:
    """Linear warmup then a single cosine cycle down to ``min_lr``."""
    if step < cfg.warmup_steps:
        return cfg.lr * (step + 1) / cfg.warmup_steps
    span = max(1, cfg.steps - cfg.warmup_steps)
    progress = min(1.0, (step - cfg.warmup_steps) / span)
    return cfg.min_lr + 0.5 * (cfg.lr - cfg.min_lr) * (1.0 + math.cos(math.pi * progress))


class Adam:
    def __init__(self, params: dict[str, Tensor], beta1: float = 0.9, beta2: float = 0.999,
                 eps: float = 1e-8, weight_decay: float = 0.0):
        self.params = params
        self.b1, self.b2, self.eps, self.wd = beta1, beta2, eps, weight_decay
        self.m = {k: np.zeros_like(p.data) for k, p in params.items()}
        self.v = {k: np.zeros_like(p.data) for k, p in params.items()}
        self.t = 0

    def step(self, lr: float) -> None:
        self.t += 1
        c1 = 1.0 - self.b1 ** self.t
        c2 = 1.0 - self.b2 ** self.t
        for k, p in self.params.items():
            if p.grad is None:
                continue
            g = p.grad
            self.m[k] = self.b1 * self.m[k] + (1.0 - self.b1) * g
            self.v[k] = self.b2 * self.v[k] + (1.0 - self.b2) * g * g
            update = (self.m[k] / c1) / (np.sqrt(self.v[k] / c2) + self.eps)
            if self.wd:
                update = update + self.wd * p.data
            p.data = p.data - lr * update


# -- GECO ------------------------------------------------------------------------
@dataclass
class GecoState:
    nu: float
    tau: float
    dual_lr: float
    smoothing: float = 0.99
    ce_ema: Optional[float] = None
    lambda_history: list = field(default_factory=list)
    ce_history: list = field(default_factory=list)
    edge_history: list = field(default_factory=list)

    @property
    def lam(self) -> float:
        return math.exp(self.nu)

    def observe(self, ce: float) -> float:
        """Fold a batch cross-entropy into the moving average and return it."""
        if self.ce_ema is None:
            self.ce_ema = float(ce)
        else:
            self.ce_ema = self.smoothing * self.ce_ema + (1.0 - self.smoothing) * float(ce)
        return self.ce_ema


def dual_update(geco: GecoState, ce_observed: float) -> GecoState:
    """Dual ascent on ``nu``: lambda grows while CE exceeds tau and shrinks below it."""
    geco.nu = geco.nu + geco.dual_lr * (ce_observed - geco.tau)
    lam = geco.lam
    if not lam > 0:
        raise DivergenceError(f"lambda left the positive range: {lam}")
    return geco


def sparsity_objective(ce: Tensor, edges: list[Tensor], geco: GecoState, scale: float = 1.0) -> Tensor:
    """``scale * sum(edges) + lambda * (ce - tau)`` with lambda held constant."""
    if not edges:
        raise ValueError("edges must be nonempty")
    total = edges[0]
    for e in edges[1:]:
        total = total + e
    return total * scale + (ce - geco.tau) * geco.lam


def distill_loss(teacher_logits, student_logits: Tensor) -> Tensor:
    """Mean over rows of KL(softmax(teacher) || softmax(student)); teacher carries no gradient."""
    t = teacher_logits.data if isinstance(teacher_logits, Tensor) else np.asarray(teacher_logits, float)
    if t.shape != student_logits.shape:
        raise ad.ShapeError(f"teacher {t.shape} vs student {student_logits.shape}")
    t = t.reshape(-1, t.shape[-1])
    s = student_logits.reshape(-1, t.shape[-1])
    z = t - t.max(axis=-1, keepdims=True)
    log_pt = z - np.log(np.exp(z).sum(axis=-1, keepdims=True))
    pt = np.exp(log_pt)
    log_ps = ad.log_softmax_lastdim(s)
    n = t.shape[0]
    const = float((pt * log_pt).sum()) / n
    return (log_ps * Tensor(pt)).sum() * (-1.0 / n) + const


# -- evaluation -------------------------------------------------------------------
def evaluate(model: TransformerModel, inputs: np.ndarray, targets: np.ndarray,
             mode: GateMode = GateMode.DETERMINISTIC, rng=None, chunk: int = 500) -> dict:
    """CE over target positions, exact-match rate and gate statistics.

    Dense models report an active edge fraction of 1.0 by convention.
    """
    cfg = model.config
    nll, count, exact, fracs = 0.0, 0, [], []
    with ad.no_grad():
        for s in range(0, len(inputs), chunk):
            x, y = inputs[s:s + chunk], targets[s:s + chunk]
            out = forward(model, x, mode, rng)
            logits = out.logits.data
            keep = y != IGNORE
            z = logits - logits.max(axis=-1, keepdims=True)
            logp = z - np.log(np.exp(z).sum(axis=-1, keepdims=True))
            yy = np.where(keep, y, 0)
            picked = np.take_along_axis(logp, yy[..., None], axis=-1)[..., 0]
            nll -= float(picked[keep].sum())
            count += int(keep.sum())
            correct = (logits.argmax(-1) == y) | ~keep
            exact.append(correct.all(axis=1))
            if cfg.sparse:
                fracs.append(np.stack([edge_fraction(f.sample.data, f.valid_mask) for f in out.gate_fields], 1))
    result = {"ce": nll / count, "exact_match": float(np.concatenate(exact).mean())}
    if cfg.sparse:
        per = np.concatenate(fracs).mean(axis=0)  # (layers, heads)
        result["active_edge_fraction"] = float(per.mean())
        result["active_edge_fraction_per_head"] = per.tolist()
    else:
        result["active_edge_fraction"] = 1.0
        result["active_edge_fraction_per_head"] = np.ones((cfg.n_layers, cfg.n_heads)).tolist()
    return result


def _ce(out_logits: Tensor, targets: np.ndarray) -> Tensor:
    v = out_logits.shape[-1]
    return ad.cross_entropy(out_logits.reshape(-1, v), targets.reshape(-1), ignore=IGNORE)


@dataclass
class MetricRow:
    step: int
    ce: float
    ce_ema: float
    lam: Optional[float]
    active_edge_fraction: float
    lr: float
    loss_total: float

    def as_csv(self) -> dict:
        d = asdict(self)
        d["lambda"] = "" if d.pop("lam") is None else repr(self.lam)
        for k in ("ce", "ce_ema", "active_edge_fraction", "lr", "loss_total"):
            d[k] = repr(float(d[k]))
        return d


def write_metrics(rows: list[MetricRow], path) -> None:
    with open(path, "w", newline="") as fh:
        w = csv.DictWriter(fh, fieldnames=METRIC_COLUMNS, lineterminator="\n")
        w.writeheader()
        for r in rows:
            w.writerow(r.as_csv())


def _check_finite(x: float, step: int) -> None:
    if not math.isfinite(x):
        raise DivergenceError(f"non-finite loss at step {step}")


def pretrain_dense(model: TransformerModel, task: Task, cfg: TrainConfig) -> tuple[TransformerModel, list[MetricRow]]:
    """Next-token CE training of a dense model on ``task``'s loss positions."""
    if model.config.sparse:
        raise ValueError("pretrain_dense needs a dense model")
    rng = np.random.default_rng([cfg.seed, 1])
    opt = Adam(model.params, weight_decay=cfg.weight_decay)
    eval_x, eval_y = task.eval_batch(cfg.eval_size)
    rows: list[MetricRow] = []
    ema = None
    for step in range(cfg.steps):
        x, y = task.sample_batch(rng, cfg.batch_size)
        ad.zero_grads(model.parameters())
        loss = _ce(forward(model, x).logits, y)
        val = loss.item()
        _check_finite(val, step)
        ad.backward(loss)
        lr = lr_at(step, cfg)
        opt.step(lr)
        ema = val if ema is None else cfg.ema * ema + (1 - cfg.ema) * val
        if (step + 1) % cfg.eval_every == 0 or step + 1 == cfg.steps:
            ev = evaluate(model, eval_x, eval_y)
            rows.append(MetricRow(step + 1, ev["ce"], ema, None, 1.0, lr, val))
            log.info("pretrain step %d ce %.4f exact %.4f", step + 1, ev["ce"], ev["exact_match"])
    return model, rows


def edge_scale(model: TransformerModel, seq: int, cfg: TrainConfig) -> float:
    if cfg.edge_loss_scale is not None:
        return cfg.edge_loss_scale
    c = model.config
    return 1.0 / (c.n_layers * c.n_heads * seq * (seq + 1) // 2)


def theta_step(model: TransformerModel, x: np.ndarray, y: np.ndarray, geco: GecoState, scale: float,
               mode: GateMode, rng, teacher: Optional[TransformerModel] = None,
               distill_weight: float = 0.0):
    """Forward + backward of the composite objective; returns (loss, ce, gate fields)."""
    ad.zero_grads(model.parameters())
    out = forward(model, x, mode, rng)
    ce = _ce(out.logits, y)
    edges = [expected_edges(f) * (1.0 / x.shape[0]) for f in out.gate_fields]
    loss = sparsity_objective(ce, edges, geco, scale)
    if teacher is not None and distill_weight > 0:
        with ad.no_grad():
            t_logits = forward(teacher, x).logits.data
        loss = loss + distill_loss(t_logits, out.logits) * distill_weight
    ad.backward(loss)
    return loss, ce, out.gate_fields


def sparse_posttrain(dense: TransformerModel, task: Task, cfg: TrainConfig):
    """Transplant ``dense`` into gated attention and sparsify it under ``CE <= tau``.

    Returns ``(sparse_model, geco, metric_rows, info)``.
    """
    eval_x, eval_y = task.eval_batch(cfg.eval_size)
    dense_ce = evaluate(dense, eval_x, eval_y)["ce"]
    tau = cfg.tau if cfg.tau is not None else dense_ce + cfg.tau_margin
    if tau < dense_ce:
        warnings.warn(f"tau={tau:.4f} is below the dense model's CE {dense_ce:.4f}; "
                      "the constraint may be unsatisfiable")
    model = transplant_dense_to_sparse(dense, cfg.gate_bias)
    geco = GecoState(nu=cfg.nu_init, tau=tau, dual_lr=cfg.dual_lr, smoothing=cfg.ema)
    scale = edge_scale(model, task.seq_len, cfg)
    opt = Adam(model.params, weight_decay=cfg.weight_decay)
    data_rng = np.random.default_rng([cfg.seed, 2])
    gate_rng = np.random.default_rng([cfg.seed, 3])
    teacher = dense if cfg.distill_weight > 0 else None
    rows: list[MetricRow] = []
    for step in range(cfg.steps):
        x, y = task.sample_batch(data_rng, cfg.batch_size)
        loss, ce, gfs = theta_step(model, x, y, geco, scale, GateMode.SAMPLED_TRAIN, gate_rng,
                                   teacher, cfg.distill_weight)
        val = loss.item()
        _check_finite(val, step)
        lr = lr_at(step, cfg)
        opt.step(lr)
        ema = geco.observe(ce.item())
        dual_update(geco, ema)
        geco.lambda_history.append(geco.lam)
        geco.ce_history.append(ema)
        geco.edge_history.append(float(np.mean([f.probs.data.sum() for f in gfs])) / x.shape[0])
        if (step + 1) % cfg.eval_every == 0 or step + 1 == cfg.steps:
            ev = evaluate(model, eval_x, eval_y)
            rows.append(MetricRow(step + 1, ev["ce"], ema, geco.lam, ev["active_edge_fraction"], lr, val))
            log.info("sparsify step %d ce %.4f ema %.4f tau %.4f lambda %.4g active %.4f exact %.4f",
                     step + 1, ev["ce"], ema, tau, geco.lam, ev["active_edge_fraction"], ev["exact_match"])
    info = {"dense_ce": dense_ce, "tau": tau}
    return model, geco, rows, info
