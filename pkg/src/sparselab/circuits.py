"""Activation-patching circuit discovery over attention heads and attention edges.

Components are scored by patching each one alone with its corrupted-run
activation and measuring the drop in logit difference. Given a ranking, the
explained-fraction curve keeps the top-k components live and freezes every
other component (corrupt, zero or mean replacement):

    curve(k) = (LD_k - LD_floor) / (LD_clean - LD_floor)

where ``LD_floor`` is the logit difference with every component frozen.
Edges are patched at the level of a single key's gated, weighted value vector.
"""
from __future__ import annotations

import enum
import itertools
import json
from dataclasses import dataclass, field
from typing import Optional, Sequence

import numpy as np

from . import autodiff as ad
from .attention import GateMode
from .model import Intervention, LayerPatch, TransformerModel, forward
from .tasks import PatchPair

REPORT_CLAMP = (-1.0, 1.5)


class DeterminismError(ValueError):
    """Patching requires a deterministic gate mode."""


class Ablation(str, enum.Enum):
    CORRUPT = "corrupt"
    ZERO = "zero"
    MEAN = "mean"


class Granularity(str, enum.Enum):
    HEAD = "head"
    EDGE = "edge"


class Scope(str, enum.Enum):
    SINGLE = "single_sentence"
    GLOBAL = "global"


@dataclass(frozen=True, order=True)
class ComponentId:
    layer: int
    head: int
    query_pos: int = -1
    key_pos: int = -1

    @property
    def kind(self) -> str:
        return "head" if self.query_pos < 0 else "edge"

    def to_dict(self) -> dict:
        d = {"kind": self.kind, "layer": self.layer, "head": self.head}
        if self.kind == "edge":
            d.update(query_pos=self.query_pos, key_pos=self.key_pos)
        return d

    @classmethod
    def from_dict(cls, d: dict) -> "ComponentId":
        return cls(d["layer"], d["head"], d.get("query_pos", -1), d.get("key_pos", -1))


def components(model: TransformerModel, seq_len: int, granularity: Granularity) -> list[ComponentId]:
    cfg = model.config
    if Granularity(granularity) is Granularity.HEAD:
        return [ComponentId(l, h) for l in range(cfg.n_layers) for h in range(cfg.n_heads)]
    return [ComponentId(l, h, q, k) for l in range(cfg.n_layers) for h in range(cfg.n_heads)
            for q in range(seq_len) for k in range(q + 1)]


def check_component(model: TransformerModel, c: ComponentId, seq_len: int) -> None:
    cfg = model.config
    ok = 0 <= c.layer < cfg.n_layers and 0 <= c.head < cfg.n_heads
    if c.kind == "edge":
        ok = ok and 0 <= c.key_pos <= c.query_pos < seq_len
    if not ok:
        raise IndexError(f"component {c} out of range")


# -- caches ----------------------------------------------------------------------------
@dataclass
class ActivationCache:
    """Activations of one prompt (or a mean over prompts).

    ``contrib[l, h, q, k]`` is the gated, weighted value vector key ``k`` sends
    to query ``q``; summing over ``k`` gives ``head_out[l, h, q]``.
    """

    head_out: np.ndarray   # (L, H, T, d_k)
    contrib: np.ndarray    # (L, H, T, T, d_k)
    mlp_out: np.ndarray    # (L, T, D)
    embed: np.ndarray      # (T, D)
    weights: np.ndarray    # (L, H, T, T)

    def zeros_like(self) -> "ActivationCache":
        return ActivationCache(*(np.zeros_like(a) for a in
                                 (self.head_out, self.contrib, self.mlp_out, self.embed, self.weights)))


def _require_deterministic(model: TransformerModel, mode: GateMode) -> GateMode:
    mode = GateMode(mode)
    if model.config.sparse and mode.is_sampled:
        raise DeterminismError(f"gate mode {mode.value} is sampled; patching needs a deterministic mode")
    return mode


def _cache_from_trace(tr) -> ActivationCache:
    head_out = np.stack([lt.head_out for lt in tr.layers], axis=1)
    weights = np.stack([lt.weights for lt in tr.layers], axis=1)
    values = np.stack([lt.values for lt in tr.layers], axis=1)
    contrib = weights[..., None] * values[:, :, :, None, :, :]
    mlp = np.stack([lt.mlp_out for lt in tr.layers], axis=1)
    return head_out, contrib, mlp, tr.embed, weights


def capture(model: TransformerModel, tokens, mode: GateMode = GateMode.DETERMINISTIC) -> ActivationCache:
    """Cache head outputs, per-key contributions, MLP outputs and embeddings for one prompt."""
    mode = _require_deterministic(model, mode)
    with ad.no_grad():
        tr = forward(model, np.asarray(tokens)[None], mode, trace=True).trace
    parts = _cache_from_trace(tr)
    return ActivationCache(*(p[0] for p in parts))


def mean_cache(model: TransformerModel, token_batch, mode: GateMode = GateMode.DETERMINISTIC) -> ActivationCache:
    """Mean activations over a reference batch of prompts."""
    mode = _require_deterministic(model, mode)
    with ad.no_grad():
        tr = forward(model, np.asarray(token_batch), mode, trace=True).trace
    return ActivationCache(*(p.mean(axis=0) for p in _cache_from_trace(tr)))


def full_patch(cache: ActivationCache) -> Intervention:
    """Replace embeddings, every head and every MLP output with ``cache``'s values."""
    L, H = cache.head_out.shape[:2]
    layers = {l: LayerPatch(head_mask=np.ones((1, H), bool), head_value=cache.head_out[l][None],
                            mlp_value=cache.mlp_out[l][None]) for l in range(L)}
    return Intervention(layers=layers, embed_value=cache.embed[None])


def build_intervention(comps: Sequence[ComponentId], replace: np.ndarray, source: ActivationCache,
                       n_layers: int) -> Intervention:
    """Batched intervention: row ``b`` replaces every component with ``replace[b, i]`` set."""
    replace = np.atleast_2d(np.asarray(replace, dtype=bool))
    B = replace.shape[0]
    L, H, T = source.head_out.shape[:3]
    layer_idx = np.array([c.layer for c in comps])
    head_idx = np.array([c.head for c in comps])
    layers = {}
    if comps and comps[0].kind == "head":
        mask = np.zeros((B, L, H), bool)
        mask[:, layer_idx, head_idx] = replace
        for l in range(n_layers):
            if mask[:, l].any():
                layers[l] = LayerPatch(head_mask=mask[:, l], head_value=source.head_out[l][None])
    elif comps:
        q_idx = np.array([c.query_pos for c in comps])
        k_idx = np.array([c.key_pos for c in comps])
        mask = np.zeros((B, L, H, T, T), bool)
        mask[:, layer_idx, head_idx, q_idx, k_idx] = replace
        for l in range(n_layers):
            if mask[:, l].any():
                layers[l] = LayerPatch(edge_mask=mask[:, l], edge_value=source.contrib[l][None])
    return Intervention(layers=layers)


def _ld_from_logits(logits: np.ndarray, pair: PatchPair) -> np.ndarray:
    row = logits[..., pair.answer_position, :]
    return row[..., pair.answers].mean(axis=-1) - row[..., pair.wrong_answers].mean(axis=-1)


def logit_diff(model: TransformerModel, pair: PatchPair, intervention: Optional[Intervention] = None,
               mode: GateMode = GateMode.DETERMINISTIC, tokens=None) -> float:
    """Mean answer logit minus mean wrong-answer logit at the answer position."""
    if not pair.answers or not pair.wrong_answers:
        raise ValueError("empty answer set")
    mode = _require_deterministic(model, mode)
    toks = pair.clean if tokens is None else tokens
    with ad.no_grad():
        logits = forward(model, np.asarray(toks)[None], mode, intervention=intervention).logits.data
    return float(_ld_from_logits(logits, pair)[0])


def patched_logit_diffs(model: TransformerModel, pair: PatchPair, comps: Sequence[ComponentId],
                        replace: np.ndarray, source: ActivationCache,
                        mode: GateMode = GateMode.DETERMINISTIC, chunk: int = 128) -> np.ndarray:
    """Logit difference on the clean prompt for each row of the boolean ``replace`` matrix."""
    mode = _require_deterministic(model, mode)
    replace = np.atleast_2d(np.asarray(replace, dtype=bool))
    clean = np.asarray(pair.clean)
    out = np.empty(len(replace))
    with ad.no_grad():
        for s in range(0, len(replace), chunk):
            rows = replace[s:s + chunk]
            iv = build_intervention(comps, rows, source, model.config.n_layers)
            toks = np.broadcast_to(clean, (len(rows), len(clean)))
            logits = forward(model, toks, mode, intervention=iv).logits.data
            out[s:s + chunk] = _ld_from_logits(logits, pair)
    return out


def replacement_source(model: TransformerModel, pair: PatchPair, ablation: Ablation,
                       mean: Optional[ActivationCache] = None,
                       mode: GateMode = GateMode.DETERMINISTIC) -> ActivationCache:
    ablation = Ablation(ablation)
    if ablation is Ablation.CORRUPT:
        return capture(model, pair.corrupt, mode)
    if ablation is Ablation.MEAN:
        if mean is None:
            raise ValueError("mean ablation needs a mean cache")
        return mean
    return capture(model, pair.clean, mode).zeros_like()


def importance_scores(model: TransformerModel, pair: PatchPair, comps: Sequence[ComponentId],
                      ablation: Ablation = Ablation.CORRUPT, mean: Optional[ActivationCache] = None,
                      mode: GateMode = GateMode.DETERMINISTIC) -> np.ndarray:
    """``LD_clean - LD(component alone replaced)`` for every component."""
    src = replacement_source(model, pair, ablation, mean, mode)
    base = logit_diff(model, pair, mode=mode)
    return base - patched_logit_diffs(model, pair, comps, np.eye(len(comps), dtype=bool), src, mode)


def component_importance(model: TransformerModel, pair: PatchPair, component: ComponentId,
                         ablation: Ablation = Ablation.CORRUPT, mean: Optional[ActivationCache] = None,
                         mode: GateMode = GateMode.DETERMINISTIC) -> float:
    check_component(model, component, len(pair.clean))
    return float(importance_scores(model, pair, [component], ablation, mean, mode)[0])


def rank_components(model: TransformerModel, pairs: Sequence[PatchPair], granularity: Granularity,
                    ablation: Ablation = Ablation.CORRUPT, scope: Scope = Scope.SINGLE,
                    mean: Optional[ActivationCache] = None,
                    mode: GateMode = GateMode.DETERMINISTIC) -> list[tuple[ComponentId, float]]:
    """Components by descending importance; ties broken by component order.

    ``GLOBAL`` scope averages scores across ``pairs``; ``SINGLE`` needs one pair.
    """
    if not pairs:
        raise ValueError("no pairs to rank on")
    scope = Scope(scope)
    if scope is Scope.SINGLE and len(pairs) != 1:
        raise ValueError("single-sentence scope takes exactly one pair")
    comps = components(model, len(pairs[0].clean), granularity)
    scores = np.mean([importance_scores(model, p, comps, ablation, mean, mode) for p in pairs], axis=0)
    order = sorted(range(len(comps)), key=lambda i: (-scores[i], comps[i]))
    return [(comps[i], float(scores[i])) for i in order]


# -- curves ------------------------------------------------------------------------------
@dataclass
class CircuitResult:
    ranking: list
    curve: Optional[list]
    k90: Optional[int]
    ablation_mode: str
    scope: str
    granularity: str
    ld_clean: float = float("nan")
    ld_floor: float = float("nan")
    degenerate: bool = False
    threshold: float = 0.9

    def to_json(self) -> str:
        lo, hi = REPORT_CLAMP
        return json.dumps({
            "granularity": self.granularity,
            "ablation_mode": self.ablation_mode,
            "scope": self.scope,
            "k90": self.k90,
            "threshold": self.threshold,
            "degenerate": self.degenerate,
            "ld_clean": self.ld_clean,
            "ld_floor": self.ld_floor,
            "ranking": [{"component": c.to_dict(), "score": s} for c, s in self.ranking],
            "curve": None if self.curve is None else
            [{"k": k, "fraction": min(hi, max(lo, f))} for k, f in enumerate(self.curve)],
        }, indent=1)


def first_reaching(curve: Sequence[float], threshold: float) -> Optional[int]:
    for k, f in enumerate(curve):
        if f >= threshold:
            return k
    return None


def explained_curve(model: TransformerModel, pair: PatchPair, ranking, ablation: Ablation,
                    mean: Optional[ActivationCache] = None, mode: GateMode = GateMode.DETERMINISTIC,
                    threshold: float = 0.9, scope: Scope = Scope.SINGLE) -> CircuitResult:
    """Explained fraction when only the top-k ranked components stay live, for k = 0..N."""
    comps = [c for c, _ in ranking]
    n = len(comps)
    src = replacement_source(model, pair, ablation, mean, mode)
    keep = np.arange(n)[None, :] < np.arange(n + 1)[:, None]   # row k keeps the first k
    lds = patched_logit_diffs(model, pair, comps, ~keep, src, mode)
    ld_floor, ld_clean = float(lds[0]), float(lds[-1])
    gran = comps[0].kind if comps else "head"
    res = CircuitResult(list(ranking), None, None, Ablation(ablation).value, Scope(scope).value, gran,
                        ld_clean, ld_floor, threshold=threshold)
    if ld_clean == ld_floor:
        res.degenerate = True
        return res
    curve = (lds - ld_floor) / (ld_clean - ld_floor)
    res.curve = curve.tolist()
    res.k90 = first_reaching(res.curve, threshold)
    return res


def circuit_fraction(model: TransformerModel, pair: PatchPair, comps: Sequence[ComponentId],
                     keep_sets: np.ndarray, src: ActivationCache,
                     mode: GateMode = GateMode.DETERMINISTIC) -> np.ndarray:
    """Explained fraction for each boolean keep-set row over ``comps``."""
    n = len(comps)
    base = patched_logit_diffs(model, pair, comps, np.array([[True] * n, [False] * n]), src, mode)
    ld_floor, ld_clean = base
    if ld_clean == ld_floor:
        raise ValueError("degenerate normalisation: clean and floor logit differences coincide")
    lds = patched_logit_diffs(model, pair, comps, ~np.asarray(keep_sets, bool), src, mode)
    return (lds - ld_floor) / (ld_clean - ld_floor)


MAX_BRUTE_FORCE = 16


def brute_force_min_circuit(model: TransformerModel, pair: PatchPair, comps: Sequence[ComponentId],
                            ablation: Ablation, mean: Optional[ActivationCache] = None,
                            threshold: float = 0.9,
                            mode: GateMode = GateMode.DETERMINISTIC) -> tuple[ComponentId, ...]:
    """Smallest keep-set reaching ``threshold``, searched exhaustively by size.

    Within a size, subsets are visited in lexicographic component order, so
    ties resolve to the lexicographically first set.
    """
    comps = sorted(comps)
    n = len(comps)
    if n > MAX_BRUTE_FORCE:
        raise ValueError(f"{n} components exceed the brute-force limit of {MAX_BRUTE_FORCE}")
    if threshold <= 0.0:
        return ()
    src = replacement_source(model, pair, ablation, mean, mode)
    for size in range(1, n + 1):
        subsets = list(itertools.combinations(range(n), size))
        keep = np.zeros((len(subsets), n), bool)
        for r, s in enumerate(subsets):
            keep[r, list(s)] = True
        frac = circuit_fraction(model, pair, comps, keep, src, mode)
        hit = np.nonzero(frac >= threshold)[0]
        if len(hit):
            return tuple(comps[i] for i in subsets[hit[0]])
    return tuple(comps)


# -- multi-prompt summaries ---------------------------------------------------------------
@dataclass
class CircuitSummary:
    """Mean explained-fraction curve over several prompts and its 90% crossing."""

    granularity: str
    ablation_mode: str
    scope: str
    mean_curve: list
    k90: Optional[int]
    per_pair_k90: list = field(default_factory=list)
    n_components: int = 0


def circuit_summary(model: TransformerModel, pairs: Sequence[PatchPair], granularity: Granularity,
                    ablation: Ablation, scope: Scope = Scope.SINGLE,
                    mean: Optional[ActivationCache] = None, threshold: float = 0.9,
                    mode: GateMode = GateMode.DETERMINISTIC) -> CircuitSummary:
    """Rank with corrupt patching, freeze the rest with ``ablation``, average curves over pairs.

    Single scope ranks each pair on itself; global scope ranks once on all pairs.
    Degenerate pairs (clean LD equal to floor LD) are skipped.
    """
    scope = Scope(scope)
    shared = rank_components(model, pairs, granularity, Ablation.CORRUPT, Scope.GLOBAL, mean, mode) \
        if scope is Scope.GLOBAL else None
    curves, ks = [], []
    for p in pairs:
        ranking = shared or rank_components(model, [p], granularity, Ablation.CORRUPT, Scope.SINGLE, mean, mode)
        res = explained_curve(model, p, ranking, ablation, mean, mode, threshold, scope)
        if res.curve is None:
            continue
        curves.append(res.curve)
        ks.append(res.k90)
    mean_curve = np.mean(curves, axis=0).tolist() if curves else []
    return CircuitSummary(Granularity(granularity).value, Ablation(ablation).value, scope.value,
                          mean_curve, first_reaching(mean_curve, threshold), ks,
                          len(mean_curve) - 1 if mean_curve else 0)


# -- attention heatmaps -----------------------------------------------------------------
def heatmap_svg(matrix, labels: Optional[Sequence[str]] = None, title: str = "", cell: int = 18) -> str:
    """Lower-triangular attention pattern as an SVG grid; darker blue = larger weight.

    ``matrix`` is square or ragged (row i holding keys 0..i).
    """
    rows = [list(r)[: i + 1] for i, r in enumerate(matrix)]
    n = len(rows)
    pad = 40 if labels else 10
    top = 24 if title else 6
    size_w, size_h = pad + n * cell + 6, top + pad + n * cell
    vmax = max((max(r) for r in rows if r), default=1.0) or 1.0
    out = [f'<svg xmlns="http://www.w3.org/2000/svg" width="{size_w}" height="{size_h}" '
           f'font-family="monospace" font-size="10">']
    if title:
        out.append(f'<text x="{pad}" y="14">{_esc(title)}</text>')
    for i, r in enumerate(rows):
        for j, val in enumerate(r):
            a = max(0.0, min(1.0, float(val) / vmax))
            out.append(f'<rect x="{pad + j * cell}" y="{top + i * cell}" width="{cell}" height="{cell}" '
                       f'fill="rgb(31,119,180)" fill-opacity="{a:.4f}" stroke="#ddd" stroke-width="0.5"/>')
    if labels:
        for i, lab in enumerate(labels[:n]):
            out.append(f'<text x="2" y="{top + i * cell + cell * 0.7:.1f}">{_esc(lab)}</text>')
            out.append(f'<text x="{pad + i * cell + 3}" y="{top + n * cell + 14}">{_esc(lab)}</text>')
    out.append("</svg>")
    return "\n".join(out) + "\n"


def _esc(s: str) -> str:
    return str(s).replace("&", "&amp;").replace("<", "&lt;").replace(">", "&gt;")


def ragged(matrix: np.ndarray) -> list[list[float]]:
    """Causal rows only: row i keeps keys 0..i."""
    return [np.asarray(matrix[i, : i + 1]).tolist() for i in range(matrix.shape[0])]
