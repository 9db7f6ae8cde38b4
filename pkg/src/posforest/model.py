"""Toy-scale position forest transformer decoder.

A functional kernel: parameters live in a flat ``name -> tensor`` mapping
(:class:`ModelParams`) and every stage is a plain function over it.  All
arithmetic is float64 on CPU.

Two teacher-forced streams share the same decoder weights:

* the symbol stream feeds symbol embeddings and drives the symbol head;
* the position stream feeds identifier embeddings and drives the nested-level
  and relative-position heads.  It exists only at training time.

Cross-attention in the layers listed in ``ModelConfig.iac_layers`` is corrected
by subtracting a learned coverage term computed from the accumulated
attention of previously decoded *entity* symbols.
"""

from __future__ import annotations

import functools
import math
from dataclasses import asdict, dataclass, field, replace
from typing import NamedTuple, Sequence

import numpy as np
import torch
import torch.nn.functional as F

from .errors import IndexOutOfVocab, NonFiniteActivation, ShapeMismatch
from .forest import ID_VOCAB, IdentifierMatrix
from .lexer import SymbolClass, TokenSeq, Vocabulary, classify

DTYPE = torch.float64
LN_EPS = 1e-5
RELATIVE_CLASSES = len(ID_VOCAB)

# Parameter-name prefixes used only by the position stream.
POSITION_BRANCH = ("xi.", "head_n.", "head_r.")


@dataclass(frozen=True)
class ModelConfig:
    vocab_size: int
    glyph_channels: int
    channels: int = 32
    heads: int = 4
    layers: int = 3
    ffn_dim: int | None = None
    max_nesting: int = 3
    phi_kernel: int = 5
    phi_hidden: int = 8
    iac_layers: tuple[int, ...] = (2, 3)
    per_head_iac: bool = False
    structure_ids: tuple[int, ...] = ()

    def __post_init__(self):
        if self.channels % self.heads:
            raise ValueError("channels must be divisible by heads")
        if self.phi_kernel % 2 == 0:
            raise ValueError("phi kernel side must be odd")
        object.__setattr__(self, "iac_layers", tuple(self.iac_layers))
        object.__setattr__(self, "structure_ids", tuple(self.structure_ids))

    @property
    def identifier_width(self):
        return self.max_nesting + 3

    @property
    def nested_classes(self):
        return self.max_nesting + 1

    @property
    def hidden(self):
        return self.ffn_dim or 2 * self.channels

    def to_dict(self):
        return asdict(self)

    @classmethod
    def from_dict(cls, d):
        return cls(**d)

    @classmethod
    def for_vocab(cls, vocab: Vocabulary, glyph_channels: int, **kw):
        ids = tuple(sorted(vocab.id_of(t) for t in vocab.omega))
        return cls(vocab_size=len(vocab), glyph_channels=glyph_channels, structure_ids=ids, **kw)


class PhiWeights(NamedTuple):
    """Coverage extractor: same-padding conv (1 -> hidden) then a 1x1 linear (hidden -> 1)."""

    conv_w: torch.Tensor
    conv_b: torch.Tensor
    lin_w: torch.Tensor
    lin_b: torch.Tensor

    @classmethod
    def zeros(cls, kernel=5, hidden=8):
        return cls(
            torch.zeros(hidden, 1, kernel, kernel, dtype=DTYPE),
            torch.zeros(hidden, dtype=DTYPE),
            torch.zeros(1, hidden, dtype=DTYPE),
            torch.zeros(1, dtype=DTYPE),
        )

    @classmethod
    def identity(cls, kernel=5, hidden=8, scale=1.0):
        phi = cls.zeros(kernel, hidden)
        phi.conv_w[0, 0, kernel // 2, kernel // 2] = 1.0
        phi.lin_w[0, 0] = scale
        return phi


class ModelParams:
    def __init__(self, config: ModelConfig, tensors: dict[str, torch.Tensor]):
        self.config = config
        self.tensors = dict(tensors)

    @classmethod
    def init(cls, config: ModelConfig, seed: int = 42, phi_init: str = "zero") -> "ModelParams":
        """Seeded initialisation.

        ``phi_init="zero"`` zeroes the coverage extractor's output projection
        (coverage is a no-op at step 0 yet still trainable); ``"random"``
        draws every coverage weight, which is what gradient checks want;
        ``"off"`` zeroes all of it.
        """
        rng = np.random.default_rng(seed)
        c = config.channels
        t: dict[str, torch.Tensor] = {}

        def normal(shape, std):
            return torch.from_numpy(rng.standard_normal(shape) * std)

        def linear(name, out_dim, in_dim, bias=True):
            t[f"{name}.w"] = normal((out_dim, in_dim), 1.0 / math.sqrt(in_dim))
            if bias:
                t[f"{name}.b"] = torch.zeros(out_dim, dtype=DTYPE)

        def norm(name):
            t[f"{name}.g"] = torch.ones(c, dtype=DTYPE)
            t[f"{name}.b"] = torch.zeros(c, dtype=DTYPE)

        linear("encoder", c, config.glyph_channels)
        t["symbol_embed"] = normal((config.vocab_size, c), 1.0)
        linear("xi", c, config.identifier_width * RELATIVE_CLASSES)
        norm("xi.ln")
        for k in range(1, config.layers + 1):
            p = f"layer{k}"
            for attn in ("self", "cross"):
                for m in ("q", "k", "v", "o"):
                    # a key bias only shifts each logit row uniformly, so it is omitted
                    linear(f"{p}.{attn}.{m}", c, c, bias=m != "k")
            linear(f"{p}.ffn1", config.hidden, c)
            linear(f"{p}.ffn2", c, config.hidden)
            for n in ("ln1", "ln2", "ln3"):
                norm(f"{p}.{n}")
            if k in config.iac_layers:
                ks, hid = config.phi_kernel, config.phi_hidden
                # no bias terms: a spatially uniform offset cancels in the softmax
                t[f"{p}.phi.conv_w"] = normal((hid, 1, ks, ks), 1.0 / ks)
                t[f"{p}.phi.lin_w"] = normal((1, hid), 1.0 / math.sqrt(hid))
                if phi_init == "zero":
                    t[f"{p}.phi.lin_w"].zero_()
                elif phi_init == "off":
                    for name in ("conv_w", "lin_w"):
                        t[f"{p}.phi.{name}"].zero_()
                elif phi_init != "random":
                    raise ValueError(f"unknown phi_init {phi_init!r}")
        linear("head_c", config.vocab_size, c)
        linear("head_n", config.nested_classes, c)
        linear("head_r", RELATIVE_CLASSES, c)
        return cls(config, t)

    def __getitem__(self, name):
        return self.tensors[name]

    def __contains__(self, name):
        return name in self.tensors

    def __iter__(self):
        return iter(self.tensors)

    def names(self):
        return list(self.tensors)

    def phi(self, layer: int) -> PhiWeights | None:
        p = f"layer{layer}.phi"
        if f"{p}.conv_w" not in self.tensors:
            return None
        conv_w, lin_w = self.tensors[f"{p}.conv_w"], self.tensors[f"{p}.lin_w"]
        return PhiWeights(conv_w, conv_w.new_zeros(conv_w.shape[0]), lin_w, lin_w.new_zeros(1))

    def clone(self, requires_grad=False) -> "ModelParams":
        return ModelParams(
            self.config,
            {k: v.detach().clone().requires_grad_(requires_grad) for k, v in self.tensors.items()},
        )

    def strip_position_branch(self) -> "ModelParams":
        keep = {k: v for k, v in self.tensors.items() if not k.startswith(POSITION_BRANCH)}
        return ModelParams(self.config, keep)

    def with_config(self, **changes) -> "ModelParams":
        return ModelParams(replace(self.config, **changes), self.tensors)

    def numel(self):
        return sum(v.numel() for v in self.tensors.values())


@dataclass
class FeatureGrid:
    values: torch.Tensor  # [H', W', C]

    def __post_init__(self):
        self.values = torch.as_tensor(self.values, dtype=DTYPE)
        if self.values.dim() != 3 or min(self.values.shape) < 1:
            raise ShapeMismatch(f"feature grid must be [H, W, C], got {tuple(self.values.shape)}")

    @property
    def height(self):
        return self.values.shape[0]

    @property
    def width(self):
        return self.values.shape[1]

    @property
    def channels(self):
        return self.values.shape[2]


@dataclass
class AttentionState:
    """Cross-attention maps of one decoder layer, each ``[..., T, H', W']``."""

    raw: torch.Tensor
    normalized: torch.Tensor
    refinement: torch.Tensor
    corrected: torch.Tensor
    applied: bool = field(default=False)


# -- positional encodings -------------------------------------------------

@functools.lru_cache(maxsize=64)
def sinusoidal_encoding(n: int, dim: int) -> torch.Tensor:
    pos = torch.arange(n, dtype=DTYPE)[:, None]
    i = torch.arange(0, dim, 2, dtype=DTYPE)
    angle = pos / torch.pow(torch.tensor(10000.0, dtype=DTYPE), i / dim)
    pe = torch.zeros(n, dim, dtype=DTYPE)
    pe[:, 0::2] = torch.sin(angle)
    pe[:, 1::2] = torch.cos(angle[:, : dim // 2])
    return pe


@functools.lru_cache(maxsize=16)
def grid_encoding(h: int, w: int, dim: int) -> torch.Tensor:
    half = dim // 2
    rows = sinusoidal_encoding(h, half)[:, None, :].expand(h, w, half)
    cols = sinusoidal_encoding(w, dim - half)[None, :, :].expand(h, w, dim - half)
    return torch.cat([rows, cols], dim=-1).contiguous()


# -- embeddings -----------------------------------------------------------

def _one_hot_index(planes):
    """Plane index per cell when every cell is exactly one-hot, else None."""
    if not bool(((planes == 0) | (planes == 1)).all()) or not bool((planes.sum(-1) == 1).all()):
        return None
    return planes.argmax(dim=-1)


def encode_grid(planes, params: ModelParams) -> torch.Tensor:
    """Glyph planes ``[..., H, W, G]`` to visual features ``[..., H, W, C]``.

    One-hot grids take a row-lookup path, exactly equal to the dense product.
    """
    planes = torch.as_tensor(planes, dtype=DTYPE)
    if planes.shape[-1] != params.config.glyph_channels:
        raise ShapeMismatch(
            f"grid has {planes.shape[-1]} planes, model expects {params.config.glyph_channels}"
        )
    h, w = planes.shape[-3], planes.shape[-2]
    idx = _one_hot_index(planes)
    if idx is None:
        feats = F.linear(planes, params["encoder.w"], params["encoder.b"])
    else:
        feats = F.embedding(idx, params["encoder.w"].t()) + params["encoder.b"]
    return feats + grid_encoding(h, w, params.config.channels)


def embed_symbols(ids, params: ModelParams) -> torch.Tensor:
    ids = torch.as_tensor(ids, dtype=torch.long)
    if ids.numel() and (ids.min() < 0 or ids.max() >= params.config.vocab_size):
        raise IndexOutOfVocab("symbol id outside the vocabulary")
    emb = params["symbol_embed"][ids]
    return emb + sinusoidal_encoding(ids.shape[-1], params.config.channels)


def embed_identifiers(Q, params: ModelParams) -> torch.Tensor:
    """Identifier rows to ``[..., T, C]``: layer-norm(GELU(linear(one-hot row))) + order encoding."""
    if isinstance(Q, IdentifierMatrix):
        Q = Q.indices()
    Q = torch.as_tensor(Q, dtype=torch.long)
    cfg = params.config
    if Q.shape[-1] != cfg.identifier_width:
        raise ShapeMismatch(f"identifier rows have {Q.shape[-1]} cells, expected {cfg.identifier_width}")
    onehot = F.one_hot(Q, RELATIVE_CLASSES).to(DTYPE).flatten(-2)
    h = F.gelu(F.linear(onehot, params["xi.w"], params["xi.b"]))
    h = F.layer_norm(h, (cfg.channels,), params["xi.ln.g"], params["xi.ln.b"], LN_EPS)
    return h + sinusoidal_encoding(Q.shape[-2], cfg.channels)


# -- attention correction -------------------------------------------------

def softmax_spatial(E) -> torch.Tensor:
    """Softmax of ``[..., T, H, W]`` over the flattened spatial axes."""
    E = torch.as_tensor(E, dtype=DTYPE)
    shape = E.shape
    flat = E.reshape(*shape[:-2], shape[-2] * shape[-1])
    flat = flat - flat.max(dim=-1, keepdim=True).values
    return torch.softmax(flat, dim=-1).reshape(shape)


def entity_indicator(prefix_classes) -> torch.Tensor:
    """1.0 for entity steps, 0.0 for structure steps."""
    if isinstance(prefix_classes, torch.Tensor):
        return prefix_classes.to(DTYPE)
    if isinstance(prefix_classes, np.ndarray):
        return torch.from_numpy(prefix_classes.astype(np.float64))
    return torch.tensor(
        [1.0 if c == SymbolClass.ENTITY else 0.0 for c in prefix_classes], dtype=DTYPE
    )


def accumulate_refinement(E_norm, prefix_classes) -> torch.Tensor:
    """``A[t] = sum_{i<t} E_norm[i] * entity(i)``; ``A[0]`` is zero.

    The time axis is ``-3``; ``prefix_classes`` broadcasts over the leading axes.
    """
    E_norm = torch.as_tensor(E_norm, dtype=DTYPE)
    m = entity_indicator(prefix_classes)
    if m.shape[-1] != E_norm.shape[-3]:
        raise ShapeMismatch(f"{m.shape[-1]} classes for {E_norm.shape[-3]} steps")
    weighted = E_norm * m[..., :, None, None]
    zero = torch.zeros_like(weighted[..., :1, :, :])
    return torch.cat([zero, torch.cumsum(weighted[..., :-1, :, :], dim=-3)], dim=-3)


def apply_phi(A, phi: PhiWeights) -> torch.Tensor:
    """Same-padding conv (1 -> hidden) followed by a 1x1 linear (hidden -> 1).

    With no nonlinearity in between the pair is one linear filter, so it is
    evaluated through the collapsed kernel; parameters and gradients are
    those of the two-stage form.
    """
    shape = A.shape
    h, w = shape[-2], shape[-1]
    ks = phi.conv_w.shape[-1]
    kernel = torch.einsum("h,hij->ij", phi.lin_w[0], phi.conv_w[:, 0])
    bias = phi.lin_w[0] @ phi.conv_b + phi.lin_b[0]
    pad = ks // 2
    x = F.pad(A.reshape(-1, h, w), (pad, pad, pad, pad))
    out = torch.zeros_like(x[:, :h, :w]) + bias
    for i in range(ks):
        for j in range(ks):
            out = out + kernel[i, j] * x[:, i:i + h, j:j + w]
    return out.reshape(shape)


def apply_phi_reference(A, phi: PhiWeights) -> torch.Tensor:
    """Two-stage evaluation of the coverage extractor (slow; used in tests)."""
    shape = A.shape
    h, w = shape[-2], shape[-1]
    x = A.reshape(-1, 1, h, w)
    pad = phi.conv_w.shape[-1] // 2
    hidden = F.conv2d(x, phi.conv_w, phi.conv_b, padding=pad)
    out = F.linear(hidden.permute(0, 2, 3, 1), phi.lin_w, phi.lin_b)
    return out.reshape(shape)


def iac_correct(E, A, phi: PhiWeights) -> torch.Tensor:
    E = torch.as_tensor(E, dtype=DTYPE)
    A = torch.as_tensor(A, dtype=DTYPE)
    if E.shape != A.shape:
        raise ShapeMismatch(f"attention {tuple(E.shape)} vs refinement {tuple(A.shape)}")
    if phi.conv_w.shape[-1] % 2 == 0 or phi.conv_w.shape[-1] != phi.conv_w.shape[-2]:
        raise ShapeMismatch("phi kernel must be square with an odd side")
    return E - apply_phi(A, phi)


# -- decoder --------------------------------------------------------------

def _heads_view(x, heads):
    b, t, c = x.shape
    return x.view(b, t, heads, c // heads).transpose(1, 2)


def _merge_heads(x):
    b, h, t, d = x.shape
    return x.transpose(1, 2).reshape(b, t, h * d)


def _proj(x, params, name):
    return F.linear(x, params[f"{name}.w"], params.tensors.get(f"{name}.b"))


def _self_attention(x, params, prefix, heads):
    q = _heads_view(_proj(x, params, f"{prefix}.q"), heads)
    k = _heads_view(_proj(x, params, f"{prefix}.k"), heads)
    v = _heads_view(_proj(x, params, f"{prefix}.v"), heads)
    t = x.shape[1]
    logits = q @ k.transpose(-1, -2) / math.sqrt(q.shape[-1])
    future = torch.triu(torch.ones(t, t, dtype=torch.bool), diagonal=1)
    logits = logits.masked_fill(future, float("-inf"))
    return _proj(_merge_heads(torch.softmax(logits, dim=-1) @ v), params, f"{prefix}.o")


def _cross_attention(x, mem, hw, entity, params, layer, want_state):
    cfg = params.config
    prefix = f"layer{layer}.cross"
    q = _heads_view(_proj(x, params, f"{prefix}.q"), cfg.heads)
    k = _heads_view(_proj(mem, params, f"{prefix}.k"), cfg.heads)
    v = _heads_view(_proj(mem, params, f"{prefix}.v"), cfg.heads)
    streams = x.shape[0] // mem.shape[0]
    if streams > 1:
        k = k.repeat(streams, 1, 1, 1)
        v = v.repeat(streams, 1, 1, 1)
    b, t = x.shape[0], x.shape[1]
    h, w = hw
    logits = q @ k.transpose(-1, -2) / math.sqrt(q.shape[-1])  # [B, heads, T, S]
    phi = params.phi(layer) if layer in cfg.iac_layers else None
    state = None
    corrected = logits
    if phi is not None or want_state:
        if cfg.per_head_iac:
            raw = logits.reshape(b, cfg.heads, t, h, w)
            mask = entity[:, None, :]
        else:
            raw = logits.mean(dim=1).reshape(b, t, h, w)
            mask = entity
        norm = softmax_spatial(raw)
        A = accumulate_refinement(norm, mask)
        coverage = apply_phi(A, phi) if phi is not None else torch.zeros_like(A)
        if phi is not None:
            cov = coverage.reshape(*coverage.shape[:-2], h * w)
            corrected = logits - (cov if cfg.per_head_iac else cov[:, None])
        if want_state:
            state = AttentionState(raw, norm, A, raw - coverage, applied=phi is not None)
    out = torch.softmax(corrected, dim=-1) @ v
    return _proj(_merge_heads(out), params, f"{prefix}.o"), state


def _layer_norm(x, params, name):
    return F.layer_norm(x, (x.shape[-1],), params[f"{name}.g"], params[f"{name}.b"], LN_EPS)


def decode_batch(mem, hw, x, entity, params: ModelParams, want_states=False):
    """Batched decoder: ``mem [B, S, C]``, ``x [k*B, T, C]``, ``entity [k*B, T]``.

    ``x`` may stack ``k`` streams over the same ``B`` grids (stream-major);
    memory keys and values are then projected once and shared.
    """
    if x.shape[0] % mem.shape[0]:
        raise ShapeMismatch(f"{x.shape[0]} query rows for {mem.shape[0]} grids")
    cfg = params.config
    states = []
    for k in range(1, cfg.layers + 1):
        p = f"layer{k}"
        x = _layer_norm(x + _self_attention(x, params, f"{p}.self", cfg.heads), params, f"{p}.ln1")
        c, state = _cross_attention(x, mem, hw, entity, params, k, want_states)
        x = _layer_norm(x + c, params, f"{p}.ln2")
        ff = _proj(F.gelu(_proj(x, params, f"{p}.ffn1")), params, f"{p}.ffn2")
        x = _layer_norm(x + ff, params, f"{p}.ln3")
        states.append(state)
    if not torch.isfinite(x).all():
        raise NonFiniteActivation("decoder produced non-finite features")
    return x, states


def decoder_forward(V: FeatureGrid, target_embeds, prefix_classes, params: ModelParams):
    """Single-expression decoder pass; returns ``(F [T, C], [AttentionState] * layers)``."""
    if not isinstance(V, FeatureGrid):
        V = FeatureGrid(V)
    x = torch.as_tensor(target_embeds, dtype=DTYPE)
    c = params.config.channels
    if V.channels != c or x.dim() != 2 or x.shape[1] != c:
        raise ShapeMismatch(f"expected C={c}: grid {tuple(V.values.shape)}, embeds {tuple(x.shape)}")
    entity = entity_indicator(prefix_classes)
    if entity.shape[0] != x.shape[0]:
        raise ShapeMismatch(f"{entity.shape[0]} classes for {x.shape[0]} steps")
    mem = V.values.reshape(1, V.height * V.width, c)
    out, states = decode_batch(mem, (V.height, V.width), x[None], entity[None], params, want_states=True)
    for s in states:
        for name in ("raw", "normalized", "refinement", "corrected"):
            setattr(s, name, getattr(s, name)[0])
    return out[0], states


# -- heads and losses -----------------------------------------------------

def head_logits(F_, params: ModelParams, head: str) -> torch.Tensor:
    return F.linear(F_, params[f"head_{head}.w"], params[f"head_{head}.b"])


def predict_heads(F_, params: ModelParams):
    F_ = torch.as_tensor(F_, dtype=DTYPE)
    return tuple(torch.softmax(head_logits(F_, params, h), dim=-1) for h in ("c", "n", "r"))


def _nll(p, target, name):
    p = torch.as_tensor(p, dtype=DTYPE)
    idx = torch.as_tensor(list(target), dtype=torch.long)
    if p.shape[0] != idx.shape[0]:
        raise ShapeMismatch(f"{name}: {p.shape[0]} steps vs {idx.shape[0]} targets")
    if idx.numel() and (idx.min() < 0 or idx.max() >= p.shape[1]):
        raise IndexOutOfVocab(f"{name} target outside [0, {p.shape[1]})")
    return -torch.log(p.gather(1, idx[:, None])[:, 0]).mean()


def loss_all(p_c, p_n, p_r, targets, lambda1: float = 1.0, lambda2: float = 1.0) -> torch.Tensor:
    """``lambda1 * L_rec + lambda2 * L_pos`` from predicted distributions."""
    l_rec = _nll(p_c, targets.y_c, "symbol")
    l_pos = _nll(p_n, targets.y_n, "nested") + _nll(p_r, targets.y_r_index, "relative")
    return lambda1 * l_rec + lambda2 * l_pos


# -- inference ------------------------------------------------------------

def structure_mask(params: ModelParams) -> torch.Tensor:
    """Entity indicator over vocabulary ids (1 = entity)."""
    m = torch.ones(params.config.vocab_size, dtype=DTYPE)
    if params.config.structure_ids:
        m[list(params.config.structure_ids)] = 0.0
    return m


def greedy_decode_ids(planes, params: ModelParams, max_len: int, sos_id=1, eos_id=2) -> list[list[int]]:
    """Greedy decoding for a batch of glyph grids ``[B, H, W, G]``.

    Sequences that emitted ``eos`` keep being padded with it and are ignored.
    """
    planes = torch.as_tensor(planes, dtype=DTYPE)
    with torch.no_grad():
        feats = encode_grid(planes, params)
        b, h, w, c = feats.shape
        mem = feats.reshape(b, h * w, c)
        ent_of = structure_mask(params)
        seqs = torch.full((b, 1), sos_id, dtype=torch.long)
        done = torch.zeros(b, dtype=torch.bool)
        while seqs.shape[1] < max_len and not bool(done.all()):
            x = embed_symbols(seqs, params)
            # step i is the step that decoded seqs[:, i + 1]; the last step's class is unused
            nxt_cls = torch.cat([ent_of[seqs[:, 1:]], torch.ones(b, 1, dtype=DTYPE)], dim=1)
            out, _ = decode_batch(mem, (h, w), x, nxt_cls, params)
            nxt = head_logits(out[:, -1], params, "c").argmax(dim=-1)
            nxt = torch.where(done, torch.full_like(nxt, eos_id), nxt)
            done = done | (nxt == eos_id)
            seqs = torch.cat([seqs, nxt[:, None]], dim=1)
    results = []
    for row in seqs[:, 1:].tolist():
        results.append(row[: row.index(eos_id)] if eos_id in row else row)
    return results


def greedy_decode(planes, params: ModelParams, max_len: int, vocab: Vocabulary) -> TokenSeq:
    """Decode one glyph grid ``[H, W, G]``; ``max_len`` counts the start token."""
    planes = torch.as_tensor(planes, dtype=DTYPE)
    ids = greedy_decode_ids(planes[None], params, max_len, vocab.sos_id, vocab.eos_id)[0]
    return TokenSeq(tuple(vocab.from_id(i) for i in ids), vocab)


def make_prefix_classes(tokens: Sequence, vocab: Vocabulary):
    return [classify(t, vocab) for t in tokens]
