"""GPT-style toy transformer with switchable dense / gated-sparse attention.

Blocks are pre-norm (LN -> attention -> add, LN -> MLP -> add) with learned
positional embeddings, untied unembedding and no dropout. Dense and sparse
models share one parameter set, so dense weights load into a sparse model
unchanged.
"""
from __future__ import annotations

import struct
from dataclasses import asdict, dataclass, field, fields, replace
from typing import Optional

import numpy as np

from . import autodiff as ad
from .attention import (
    GateField,
    GateMode,
    attention_weights,
    causal_mask,
    gate_probs,
    sample_gates,
)
from .autodiff import Tensor


@dataclass(frozen=True)
class ModelConfig:
    n_layers: int = 4
    n_heads: int = 1
    d_model: int = 64
    d_ff: int = 256
    vocab_size: int = 13
    max_seq: int = 16
    attention_mode: str = "dense"
    gate_bias: float = 0.0
    gate_temperature: float = 1.0

    def __post_init__(self):
        if self.n_layers < 1 or self.n_heads < 1 or self.d_model < 1 or self.d_ff < 1:
            raise ValueError("layer, head and width counts must be positive")
        if self.d_model % self.n_heads:
            raise ValueError(f"d_model {self.d_model} not divisible by n_heads {self.n_heads}")
        if self.vocab_size < 2 or self.max_seq < 2:
            raise ValueError("vocab_size and max_seq must be >= 2")
        if self.attention_mode not in ("dense", "sparse"):
            raise ValueError(f"attention_mode must be dense|sparse, got {self.attention_mode!r}")
        if not self.gate_temperature > 0:
            raise ValueError("gate_temperature must be positive")

    @property
    def d_k(self) -> int:
        return self.d_model // self.n_heads

    @property
    def sparse(self) -> bool:
        return self.attention_mode == "sparse"

    def to_lines(self) -> str:
        return "".join(f"{k}={v}\n" for k, v in asdict(self).items())

    @classmethod
    def from_lines(cls, text: str) -> "ModelConfig":
        types = {f.name: f.type for f in fields(cls)}
        kw = {}
        for line in text.splitlines():
            if not line.strip():
                continue
            key, _, val = line.partition("=")
            if key not in types:
                raise ValueError(f"unknown config key {key!r}")
            kw[key] = {"int": int, "float": float, "str": str}[types[key]](val)
        return cls(**kw)


def parameter_shapes(cfg: ModelConfig) -> dict[str, tuple[int, ...]]:
    D, F, V = cfg.d_model, cfg.d_ff, cfg.vocab_size
    shapes = {"tok_emb": (V, D), "pos_emb": (cfg.max_seq, D)}
    for l in range(cfg.n_layers):
        p = f"blocks.{l}."
        shapes.update({
            p + "ln1.g": (D,), p + "ln1.b": (D,),
            p + "attn.Wq": (D, D), p + "attn.bq": (D,),
            p + "attn.Wk": (D, D), p + "attn.bk": (D,),
            p + "attn.Wv": (D, D), p + "attn.bv": (D,),
            p + "attn.Wo": (D, D), p + "attn.bo": (D,),
            p + "ln2.g": (D,), p + "ln2.b": (D,),
            p + "mlp.W1": (D, F), p + "mlp.b1": (F,),
            p + "mlp.W2": (F, D), p + "mlp.b2": (D,),
        })
    shapes.update({"ln_f.g": (D,), "ln_f.b": (D,), "W_U": (D, V)})
    return shapes


class TransformerModel:
    def __init__(self, config: ModelConfig, params: dict[str, Tensor]):
        expected = parameter_shapes(config)
        if set(params) != set(expected):
            raise ValueError("parameter names do not match config")
        for name, shape in expected.items():
            if params[name].shape != shape:
                raise ValueError(f"{name}: shape {params[name].shape} != {shape}")
        self.config = config
        self.params = params

    def __getitem__(self, name: str) -> Tensor:
        return self.params[name]

    def parameters(self) -> list[Tensor]:
        return list(self.params.values())

    def n_params(self) -> int:
        return sum(p.size for p in self.params.values())

    def clone(self, **config_changes) -> "TransformerModel":
        cfg = replace(self.config, **config_changes)
        return TransformerModel(cfg, {k: Tensor(v.data.copy(), requires_grad=True)
                                      for k, v in self.params.items()})


def init_model(config: ModelConfig, rng: np.random.Generator) -> TransformerModel:
    """Gaussian(0, 0.02) weights, zero biases, unit layernorm gains."""
    params = {}
    for name, shape in parameter_shapes(config).items():
        leaf = name.rsplit(".", 1)[-1]
        if leaf == "g":
            data = np.ones(shape)
        elif leaf.startswith("b"):
            data = np.zeros(shape)
        else:
            data = rng.normal(0.0, 0.02, size=shape)
        params[name] = Tensor(data, requires_grad=True)
    return TransformerModel(config, params)


# -- interventions ------------------------------------------------------------------
@dataclass
class LayerPatch:
    """Activation replacements applied inside one layer.

    ``head_mask`` ``(B, H)`` selects heads whose pre-Wo output is replaced by
    ``head_value`` ``(B|1, H, T, d_k)``. ``edge_mask`` ``(B, H, T, T)`` selects
    (query, key) contributions replaced by ``edge_value`` ``(B|1, H, T, T, d_k)``.
    ``mlp_value`` replaces the MLP output ``(B|1, T, D)`` wholesale.
    """

    head_mask: Optional[np.ndarray] = None
    head_value: Optional[np.ndarray] = None
    edge_mask: Optional[np.ndarray] = None
    edge_value: Optional[np.ndarray] = None
    mlp_value: Optional[np.ndarray] = None


@dataclass
class Intervention:
    layers: dict[int, LayerPatch] = field(default_factory=dict)
    embed_value: Optional[np.ndarray] = None


@dataclass
class LayerTrace:
    attn: np.ndarray            # (B, H, T, T) post-softmax weights, before gating
    weights: np.ndarray         # (B, H, T, T) weights actually applied to V
    values: np.ndarray          # (B, H, T, d_k)
    head_out: np.ndarray        # (B, H, T, d_k) pre-Wo
    resid_pre: np.ndarray       # (B, T, D)
    mlp_out: np.ndarray         # (B, T, D)
    gates: Optional[GateField] = None


@dataclass
class ForwardTrace:
    embed: np.ndarray
    layers: list[LayerTrace]
    resid_final: np.ndarray

    def heads(self):
        for l, lt in enumerate(self.layers):
            for h in range(lt.attn.shape[1]):
                yield l, h, lt.weights[:, h]


@dataclass
class ForwardOutput:
    logits: Tensor
    trace: Optional[ForwardTrace]
    gate_fields: list[GateField]


def forward(model: TransformerModel, tokens, mode: GateMode = GateMode.DETERMINISTIC,
            rng: Optional[np.random.Generator] = None, trace: bool = False,
            intervention: Optional[Intervention] = None) -> ForwardOutput:
    """Causal next-token logits ``(B, T, V)`` (or ``(T, V)`` for 1-D input).

    In dense mode ``mode`` is ignored. ``gate_fields`` lists each sparse layer's
    field so callers can read expected edges and gate statistics.
    """
    cfg = model.config
    tok = np.asarray(tokens, dtype=np.int64)
    squeeze = tok.ndim == 1
    if squeeze:
        tok = tok[None]
    B, T = tok.shape
    if T > cfg.max_seq:
        raise ValueError(f"sequence length {T} exceeds max_seq {cfg.max_seq}")
    if T < 1:
        raise ValueError("empty sequence")
    if tok.min() < 0 or tok.max() >= cfg.vocab_size:
        raise ValueError(f"token id out of range for vocab of size {cfg.vocab_size}")
    mode = GateMode(mode)
    if cfg.sparse and mode.is_sampled and rng is None:
        raise ValueError("sampled gate modes need an rng")
    P = model.params
    H, dk, D = cfg.n_heads, cfg.d_k, cfg.d_model
    iv = intervention or Intervention()

    x = ad.embedding(P["tok_emb"], tok) + ad.embedding(P["pos_emb"], np.arange(T))
    if iv.embed_value is not None:
        x = Tensor(np.broadcast_to(iv.embed_value, x.shape))
    embed = x.data.copy() if trace else None
    layer_traces, fields_ = [], []
    for l in range(cfg.n_layers):
        p = f"blocks.{l}."
        patch = iv.layers.get(l)
        resid_pre = x.data.copy() if trace else None
        h = ad.layernorm(x, P[p + "ln1.g"], P[p + "ln1.b"])

        def heads_of(W, b):
            return ((h @ P[W]) + P[b]).reshape(B, T, H, dk).transpose(0, 2, 1, 3)

        q = heads_of(p + "attn.Wq", p + "attn.bq")
        k = heads_of(p + "attn.Wk", p + "attn.bk")
        v = heads_of(p + "attn.Wv", p + "attn.bv")
        attn = attention_weights(q, k)
        gf = None
        if cfg.sparse:
            gf = sample_gates(gate_probs(q, k, cfg.gate_bias), mode, cfg.gate_temperature, rng)
            fields_.append(gf)
            w = attn * gf.sample
        else:
            w = attn
        out = _attend(w, v, patch)
        if trace:
            lt = LayerTrace(attn=attn.data.copy(), weights=w.data.copy(), values=v.data.copy(),
                            head_out=out.data.copy(), resid_pre=resid_pre, mlp_out=None, gates=gf)
        merged = out.transpose(0, 2, 1, 3).reshape(B, T, D)
        x = x + (merged @ P[p + "attn.Wo"] + P[p + "attn.bo"])
        h2 = ad.layernorm(x, P[p + "ln2.g"], P[p + "ln2.b"])
        mlp = ad.gelu(h2 @ P[p + "mlp.W1"] + P[p + "mlp.b1"]) @ P[p + "mlp.W2"] + P[p + "mlp.b2"]
        if patch is not None and patch.mlp_value is not None:
            mlp = Tensor(np.broadcast_to(patch.mlp_value, mlp.shape))
        x = x + mlp
        if trace:
            lt.mlp_out = mlp.data.copy()
            layer_traces.append(lt)
    final = ad.layernorm(x, P["ln_f.g"], P["ln_f.b"])
    logits = final @ P["W_U"]
    tr = ForwardTrace(embed, layer_traces, x.data.copy()) if trace else None
    if squeeze:
        logits = logits.reshape(T, cfg.vocab_size)
    return ForwardOutput(logits, tr, fields_)


def _attend(w: Tensor, v: Tensor, patch: Optional[LayerPatch]) -> Tensor:
    if patch is None or (patch.edge_mask is None and patch.head_mask is None):
        return w @ v
    B, H, T, dk = v.shape
    if patch.edge_mask is not None:
        em = np.broadcast_to(patch.edge_mask, (B, H, T, T)).astype(np.float64)
        out = (w * (1.0 - em)) @ v
        ev = np.asarray(patch.edge_value)
        if ev.ndim == 5 and ev.shape[0] == 1:
            rep = np.einsum("bhqk,hqkd->bhqd", em, ev[0])
        else:
            rep = np.einsum("bhqk,bhqkd->bhqd", em, np.broadcast_to(ev, (B, H, T, T, dk)))
        out = out + rep
    else:
        out = w @ v
    if patch.head_mask is not None:
        hm = np.broadcast_to(patch.head_mask, (B, H))[:, :, None, None]
        keep = Tensor((~hm).astype(np.float64))
        rep = np.where(hm, np.broadcast_to(patch.head_value, (B, H, T, dk)), 0.0)
        out = out * keep + rep
    return out


def logits_of(model: TransformerModel, tokens, mode: GateMode = GateMode.DETERMINISTIC,
              rng=None, intervention: Optional[Intervention] = None) -> np.ndarray:
    with ad.no_grad():
        return forward(model, tokens, mode, rng, intervention=intervention).logits.data


# -- checkpoints -----------------------------------------------------------------------
MAGIC = b"SPLABCK\x00"
VERSION = 1


class CheckpointError(ValueError):
    """Corrupt, truncated or incompatible checkpoint file."""


def save_checkpoint(model: TransformerModel, path) -> None:
    """Versioned binary: magic, version, config block, then tensor records.

    All integers are little-endian uint32; tensor data is little-endian float64.
    """
    cfg = model.config.to_lines().encode("utf-8")
    out = [MAGIC, struct.pack("<I", VERSION), struct.pack("<I", len(cfg)), cfg,
           struct.pack("<I", len(model.params))]
    for name, t in model.params.items():
        nb = name.encode("utf-8")
        out.append(struct.pack("<I", len(nb)) + nb)
        out.append(struct.pack("<I", t.ndim) + struct.pack(f"<{t.ndim}I", *t.shape))
        out.append(t.data.astype("<f8").tobytes())
    with open(path, "wb") as fh:
        fh.write(b"".join(out))


class _Reader:
    def __init__(self, buf: bytes):
        self.buf, self.pos = buf, 0

    def take(self, n: int) -> bytes:
        if self.pos + n > len(self.buf):
            raise CheckpointError("corrupt header: file truncated")
        b = self.buf[self.pos:self.pos + n]
        self.pos += n
        return b

    def u32(self) -> int:
        return struct.unpack("<I", self.take(4))[0]


def load_checkpoint(path, attention_mode: Optional[str] = None,
                    gate_bias: Optional[float] = None) -> TransformerModel:
    """Read a checkpoint; optionally override the attention mode / gate bias."""
    with open(path, "rb") as fh:
        r = _Reader(fh.read())
    if r.take(len(MAGIC)) != MAGIC:
        raise CheckpointError("corrupt header: bad magic")
    version = r.u32()
    if version != VERSION:
        raise CheckpointError(f"checkpoint version {version} unsupported (expected {VERSION})")
    try:
        cfg = ModelConfig.from_lines(r.take(r.u32()).decode("utf-8"))
    except (UnicodeDecodeError, ValueError, TypeError) as e:
        if isinstance(e, CheckpointError):
            raise
        raise CheckpointError(f"corrupt header: {e}") from e
    changes = {}
    if attention_mode is not None:
        changes["attention_mode"] = attention_mode
    if gate_bias is not None:
        changes["gate_bias"] = float(gate_bias)
    cfg = replace(cfg, **changes)
    expected = parameter_shapes(cfg)
    params = {}
    for _ in range(r.u32()):
        name = r.take(r.u32()).decode("utf-8")
        ndim = r.u32()
        shape = struct.unpack(f"<{ndim}I", r.take(4 * ndim))
        if name not in expected or tuple(shape) != expected[name]:
            raise CheckpointError(f"shape disagreement for {name}: {shape} vs {expected.get(name)}")
        n = int(np.prod(shape))
        data = np.frombuffer(r.take(8 * n), dtype="<f8").astype(np.float64).reshape(shape)
        params[name] = Tensor(data, requires_grad=True)
    if r.pos != len(r.buf):
        raise CheckpointError("trailing bytes after last tensor")
    if set(params) != set(expected):
        raise CheckpointError("checkpoint is missing parameters")
    return TransformerModel(cfg, params)


def transplant_dense_to_sparse(dense: TransformerModel, gate_bias: float = 0.0) -> TransformerModel:
    """Copy dense weights unchanged into a sparse-attention model."""
    if dense.config.sparse:
        raise ValueError("source model is already sparse")
    return dense.clone(attention_mode="sparse", gate_bias=float(gate_bias))
