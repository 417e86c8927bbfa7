"""Bernoulli-gated sparse attention.

Gate probabilities are ``sigmoid(q_i . k_j + bias)`` with *unscaled* dot
products; the attention weights themselves keep the usual ``1/sqrt(d_k)``
scaling. Sampled binary gates multiply the post-softmax weights and rows are
not renormalised, so gated-out mass is simply dropped.
"""
from __future__ import annotations

import csv
import enum
import math
import time
from dataclasses import dataclass, replace
from typing import Optional

import numpy as np

from .autodiff import (
    ShapeError,
    Tensor,
    _sigmoid,
    matmul,
    sigmoid,
    softmax_lastdim,
    stop_gradient,
)


class GateMode(str, enum.Enum):
    SAMPLED_TRAIN = "sampled_train"
    SAMPLED_EVAL = "sampled_eval"
    DETERMINISTIC = "deterministic"
    ALL_OPEN = "all_open"

    @property
    def is_sampled(self) -> bool:
        return self in (GateMode.SAMPLED_TRAIN, GateMode.SAMPLED_EVAL)


def causal_mask(seq: int) -> np.ndarray:
    """Boolean ``(seq, seq)`` matrix, True where key j <= query i."""
    return np.tril(np.ones((seq, seq), dtype=bool))


@dataclass
class GateField:
    """Per-head gate logits, probabilities and (once sampled) binary gates.

    Arrays have shape ``(..., heads, seq, seq)``; leading batch axes are allowed.
    """

    logits: Tensor
    probs: Tensor
    valid_mask: np.ndarray
    bias: float = 0.0
    sample: Optional[Tensor] = None

    @property
    def n_valid(self) -> int:
        return int(np.broadcast_to(self.valid_mask, self.probs.shape).sum())


def gate_probs(q: Tensor, k: Tensor, bias: float = 0.0) -> GateField:
    if q.shape != k.shape:
        raise ShapeError(f"gate_probs: q {q.shape} and k {k.shape} differ")
    seq = q.shape[-2]
    valid = causal_mask(seq)
    logits = matmul(q, k.transpose(*range(k.ndim - 2), k.ndim - 1, k.ndim - 2))
    probs = sigmoid(logits + bias) * valid.astype(np.float64)
    return GateField(logits=logits, probs=probs, valid_mask=valid, bias=float(bias))


def _logistic_noise(u: np.ndarray) -> np.ndarray:
    return np.log(u) - np.log1p(-u)


def draw_uniform(rng: np.random.Generator, shape) -> np.ndarray:
    # open interval so the logistic transform stays finite
    return rng.uniform(np.finfo(np.float64).tiny, 1.0, size=shape)


def sample_gates(field: GateField, mode: GateMode, temperature: float = 1.0,
                 rng: Optional[np.random.Generator] = None) -> GateField:
    """Populate ``field.sample`` according to ``mode``.

    ``SAMPLED_TRAIN`` uses the binary-concrete relaxation with a straight-through
    hard sample: ``soft + stop_gradient(hard - soft)``.
    """
    mode = GateMode(mode)
    valid = field.valid_mask.astype(np.float64)
    shape = field.probs.shape
    if mode is GateMode.SAMPLED_TRAIN:
        if not temperature > 0:
            raise ValueError(f"temperature must be positive, got {temperature}")
        u = draw_uniform(rng, shape)
        soft = sigmoid((field.logits + (field.bias + _logistic_noise(u))) * (1.0 / temperature))
        hard = Tensor((soft.data > 0.5).astype(np.float64))
        sample = (soft + stop_gradient(hard - soft)) * valid
    elif mode is GateMode.SAMPLED_EVAL:
        u = rng.uniform(size=shape)
        sample = Tensor((u < field.probs.data) * valid)
    elif mode is GateMode.DETERMINISTIC:
        sample = Tensor((field.probs.data > 0.5) * valid)
    else:
        sample = Tensor(np.broadcast_to(valid, shape))
    return replace(field, sample=sample)


def attention_weights(q: Tensor, k: Tensor) -> Tensor:
    """Causal softmax of ``q k^T / sqrt(d_k)`` (dense attention pattern)."""
    d_k = q.shape[-1]
    if d_k == 0:
        raise ShapeError("d_k must be positive")
    scores = matmul(q, k.transpose(*range(k.ndim - 2), k.ndim - 1, k.ndim - 2)) * (1.0 / math.sqrt(d_k))
    return softmax_lastdim(scores, causal_mask(q.shape[-2]))


def dense_attn(q: Tensor, k: Tensor, v: Tensor) -> Tensor:
    return matmul(attention_weights(q, k), v)


def sparse_attn(q: Tensor, k: Tensor, v: Tensor, field: GateField) -> Tensor:
    if field.sample is None:
        raise ValueError("gate field has no sample; call sample_gates first")
    return matmul(attention_weights(q, k) * field.sample, v)


def expected_edges(field: GateField) -> Tensor:
    """Sum of open-probabilities over causal positions (differentiable)."""
    return field.probs.sum()


def active_edge_fraction(field: GateField) -> tuple[float, np.ndarray]:
    """Fraction of open gates among causal positions.

    Returns ``(aggregate, per_head)`` where the aggregate is the mean of the
    per-head fractions and ``per_head`` has the field's leading shape.
    """
    if field.sample is None:
        raise ValueError("gate field has no sample")
    per_head = edge_fraction(field.sample.data, field.valid_mask)
    return float(per_head.mean()), per_head


def edge_fraction(sample: np.ndarray, valid: np.ndarray) -> np.ndarray:
    valid = np.broadcast_to(valid, sample.shape)
    return (sample * valid).sum(axis=(-2, -1)) / valid.sum(axis=(-2, -1))


def fused_sparse_attn(q: np.ndarray, k: np.ndarray, v: np.ndarray, bias: float = 0.0,
                      tile_size: int = 16, mode: GateMode = GateMode.DETERMINISTIC,
                      rng: Optional[np.random.Generator] = None,
                      temperature: float = 1.0) -> tuple[np.ndarray, float]:
    """Tiled single-pass gated attention with the expected-edge sum fused in.

    Keys are visited in tiles; each tile's gates are computed on the fly from
    ``q . k`` and the running max / softmax denominator is rescaled online, as
    in FlashAttention-2. The denominator accumulates *ungated* exponentials
    (gating happens after the softmax) while the numerator accumulates gated
    ones. Sampling noise is drawn up front with the same generator calls as
    :func:`sample_gates`, so both paths see identical gates.

    Arrays are ``(heads, seq, d_k)``; returns ``(output, expected_edges)``.
    """
    if tile_size < 1:
        raise ValueError(f"tile_size must be >= 1, got {tile_size}")
    mode = GateMode(mode)
    q, k, v = (np.asarray(a, dtype=np.float64) for a in (q, k, v))
    h, seq, d_k = q.shape
    scale = 1.0 / math.sqrt(d_k)
    noise = None
    if mode is GateMode.SAMPLED_TRAIN:
        if not temperature > 0:
            raise ValueError(f"temperature must be positive, got {temperature}")
        noise = _logistic_noise(draw_uniform(rng, (h, seq, seq)))
    elif mode is GateMode.SAMPLED_EVAL:
        noise = rng.uniform(size=(h, seq, seq))

    rows = np.arange(seq)[:, None]
    m = np.full((h, seq, 1), -np.inf)
    denom = np.zeros((h, seq, 1))
    acc = np.zeros((h, seq, v.shape[-1]))
    edges = 0.0
    for start in range(0, seq, tile_size):
        stop = min(start + tile_size, seq)
        kt, vt = k[:, start:stop], v[:, start:stop]
        dots = q @ kt.transpose(0, 2, 1)
        valid = np.arange(start, stop)[None, :] <= rows
        p = _sigmoid(dots + bias) * valid
        edges += p.sum()
        if mode is GateMode.SAMPLED_TRAIN:
            soft = _sigmoid((dots + (bias + noise[:, :, start:stop])) * (1.0 / temperature))
            gate = (soft > 0.5) * valid
        elif mode is GateMode.SAMPLED_EVAL:
            gate = (noise[:, :, start:stop] < p) * valid
        elif mode is GateMode.DETERMINISTIC:
            gate = (p > 0.5) * valid
        else:
            gate = valid.astype(np.float64)
        s = np.where(valid, dots * scale, -np.inf)
        m_new = np.maximum(m, s.max(axis=-1, keepdims=True))
        # rows with no valid key yet keep m = -inf; guard exp(-inf - -inf)
        safe = np.where(np.isfinite(m_new), m_new, 0.0)
        corr = np.exp(np.where(np.isfinite(m), m - safe, -np.inf))
        e = np.exp(s - safe)
        denom = denom * corr + e.sum(axis=-1, keepdims=True)
        acc = acc * corr + (e * gate) @ vt
        m = m_new
    return acc / denom, float(edges)


def naive_sparse_attn(q: np.ndarray, k: np.ndarray, v: np.ndarray, bias: float = 0.0,
                      mode: GateMode = GateMode.DETERMINISTIC,
                      rng: Optional[np.random.Generator] = None,
                      temperature: float = 1.0) -> tuple[np.ndarray, float]:
    """Unfused reference: gate_probs -> sample_gates -> sparse_attn."""
    qt, kt, vt = Tensor(q), Tensor(k), Tensor(v)
    field = sample_gates(gate_probs(qt, kt, bias), mode, temperature, rng)
    return sparse_attn(qt, kt, vt, field).data, float(expected_edges(field).data)


def run_benchmark(path, seqs=(64, 256, 1024), tiles=(16, 64), heads: int = 1, d_k: int = 16,
                  mode: GateMode = GateMode.DETERMINISTIC, seed: int = 0, trials: int = 1) -> list[dict]:
    """Time fused vs naive forward and write ``impl,seq_len,tile_size,mode,wall_ms,max_abs_dev``.

    Inputs are generated from ``seed``; each row also records the deviation
    of the fused output from the naive output on the same inputs (0 for naive rows).
    """
    mode = GateMode(mode)
    rows = []
    for seq in seqs:
        data_rng = np.random.default_rng([seed, seq])
        q, k, v = (data_rng.normal(size=(heads, seq, d_k)) for _ in range(3))
        for tile in tiles:
            for _ in range(trials):
                t0 = time.perf_counter()
                ref, _ = naive_sparse_attn(q, k, v, mode=mode, rng=np.random.default_rng(seed))
                t1 = time.perf_counter()
                out, _ = fused_sparse_attn(q, k, v, tile_size=tile, mode=mode,
                                           rng=np.random.default_rng(seed))
                t2 = time.perf_counter()
                dev = float(np.abs(out - ref).max())
                rows.append(dict(impl="naive", seq_len=seq, tile_size=tile, mode=mode.value,
                                 wall_ms=(t1 - t0) * 1e3, max_abs_dev=0.0))
                rows.append(dict(impl="fused", seq_len=seq, tile_size=tile, mode=mode.value,
                                 wall_ms=(t2 - t1) * 1e3, max_abs_dev=dev))
    if path is not None:
        with open(path, "w", newline="") as fh:
            w = csv.DictWriter(fh, fieldnames=BENCH_COLUMNS)
            w.writeheader()
            for r in rows:
                w.writerow({**r, "wall_ms": f"{r['wall_ms']:.3f}", "max_abs_dev": f"{r['max_abs_dev']:.3e}"})
    return rows


BENCH_COLUMNS = ["impl", "seq_len", "tile_size", "mode", "wall_ms", "max_abs_dev"]
