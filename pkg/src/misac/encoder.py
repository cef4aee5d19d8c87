"""Unified multimodal encoder: shared attention over the concatenated token
sequence, then a per-block mixture-of-experts FFN split into one shared pool
(routed with a map-derived context vector) and one specific pool per
modality (routed from the token alone).

Layout invariants:

* Tokens concatenate in the fixed order [csi, map, radar], restricted to the
  modalities present; segment bounds travel with the sequence.
* Routing is top-k over a truncated softmax: the k highest gate logits are
  renormalized, every other expert weight is exactly zero, and ties break
  toward the lower expert index. Gradients flow through the selected weights
  only; the selection itself is treated as constant, and callers can freeze
  a captured selection to keep the loss smooth for finite-difference checks.
* Both expert branches re-enter the stream through their own RMSNorm gain:
  out = x + rmsnorm(y_shared) + rmsnorm(y_specific).
"""

from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np

from . import tensor as tt
from .tensor import Tensor
from .tokenizer import Modality, Prepped, TokenizerConfig, TokenSequence, patchify_embed

MODALITY_ORDER = (Modality.CSI, Modality.MAP, Modality.RADAR)


class EncoderError(ValueError):
    pass


@dataclass(frozen=True)
class EncoderConfig:
    d: int = 64
    n_layers: int = 2
    n_heads: int = 4
    n_experts: int = 8
    top_k: int = 4
    hidden_mult: int = 2
    rms_eps: float = 1e-6

    def __post_init__(self):
        if self.d < 1 or self.n_layers < 1:
            raise EncoderError("width and depth must be >= 1")
        if self.d % self.n_heads:
            raise EncoderError("d must divide evenly into heads")
        if not 1 <= self.top_k <= self.n_experts:
            raise EncoderError("top_k must lie in [1, n_experts]")


def trunc_normal(rng: np.random.Generator, shape, std: float = 0.02) -> np.ndarray:
    """Normal(0, std) with values beyond 2 std redrawn."""
    x = rng.normal(0.0, std, size=shape)
    bad = np.abs(x) > 2 * std
    while bad.any():
        x[bad] = rng.normal(0.0, std, size=int(bad.sum()))
        bad = np.abs(x) > 2 * std
    return x


class Linear:
    def __init__(self, rng, n_in: int, n_out: int):
        self.w = Tensor(trunc_normal(rng, (n_in, n_out)), requires_grad=True)
        self.b = Tensor(np.zeros(n_out), requires_grad=True)

    def __call__(self, x: Tensor) -> Tensor:
        return tt.linear(x, self.w, self.b)

    def named(self, prefix: str):
        return [(f"{prefix}.w", self.w), (f"{prefix}.b", self.b)]


class Expert:
    """Two-layer GELU MLP at hidden width hidden_mult * d."""

    def __init__(self, rng, d: int, hidden: int):
        self.fc1 = Linear(rng, d, hidden)
        self.fc2 = Linear(rng, hidden, d)

    def __call__(self, x: Tensor) -> Tensor:
        return self.fc2(tt.gelu(self.fc1(x)))

    def named(self, prefix: str):
        return self.fc1.named(f"{prefix}.fc1") + self.fc2.named(f"{prefix}.fc2")


class ExpertPool:
    """K experts plus a gate. Shared pools gate on [token; context] (2d in),
    modality pools gate on the token alone (d in)."""

    def __init__(self, rng, cfg: EncoderConfig, kind: str):
        self.kind = kind
        gate_in = 2 * cfg.d if kind == "shared" else cfg.d
        self.gate = Linear(rng, gate_in, cfg.n_experts)
        self.experts = [
            Expert(rng, cfg.d, cfg.hidden_mult * cfg.d) for _ in range(cfg.n_experts)
        ]

    def named(self, prefix: str):
        out = self.gate.named(f"{prefix}.gate")
        for i, e in enumerate(self.experts):
            out += e.named(f"{prefix}.expert{i}")
        return out


@dataclass
class Segment:
    modality: Modality
    start: int
    stop: int


@dataclass
class ContextVector:
    vector: Tensor  # [d]
    from_map: bool


@dataclass
class RouterDecision:
    indices: np.ndarray  # [k], descending logit, ties toward lower index
    weights: Tensor  # [k], sums to 1
    logits: Tensor  # [n_experts] full pre-truncation gate output


@dataclass
class PoolStats:
    layer: int
    pool: str
    weights: Tensor  # [n_tokens, K] dense routing weights (zeros off-selection)
    selected: np.ndarray  # [n_tokens, k] chosen expert ids
    n_tokens: int


def _topk_indices(logits: np.ndarray, k: int) -> np.ndarray:
    """Row-wise top-k of [n, K]; stable sort so ties keep the lower index."""
    return np.argsort(-logits, axis=-1, kind="stable")[:, :k]


def topk_softmax(logits: Tensor, k: int) -> RouterDecision:
    """Truncated softmax over one gate row: renormalize the top k logits."""
    if logits.ndim != 1:
        raise EncoderError("topk_softmax: expected a single logit row")
    K = logits.shape[0]
    if not 1 <= k <= K:
        raise EncoderError("topk_softmax: k outside [1, n_experts]")
    idx = _topk_indices(logits.data[None, :], k)[0]
    row = tt.reshape(logits, (1, K))
    sel = tt.take_along_last(row, idx[None, :])
    weights = tt.reshape(tt.softmax(sel), (k,))
    return RouterDecision(indices=idx, weights=weights, logits=logits)


def gate_shared(x: Tensor, ctx: ContextVector, pool: ExpertPool) -> Tensor:
    if pool.kind != "shared":
        raise EncoderError("gate_shared: pool is not the shared pool")
    n = x.shape[0]
    tiled = tt.add(Tensor(np.zeros((n, ctx.vector.shape[0]))), tt.reshape(ctx.vector, (1, -1)))
    return pool.gate(tt.concat([x, tiled], axis=1))


def gate_specific(x: Tensor, pool: ExpertPool) -> Tensor:
    if pool.kind == "shared":
        raise EncoderError("gate_specific: pool is the shared pool")
    return pool.gate(x)


def _dispatch(
    pool: ExpertPool,
    x: Tensor,
    logits: Tensor,
    k: int,
    layer: int,
    frozen: np.ndarray | None,
) -> tuple[Tensor, PoolStats]:
    """Route each row to its top-k experts and sum the weighted outputs."""
    n, d = x.shape
    K = len(pool.experts)
    sel = _topk_indices(logits.data, k) if frozen is None else frozen
    w = tt.softmax(tt.take_along_last(logits, sel))  # [n, k]
    dense = tt.scatter_last(w, sel, K)  # [n, K], exact zeros elsewhere
    y = Tensor(np.zeros((n, d)))
    for e in range(K):
        rows = np.nonzero((sel == e).any(axis=1))[0]
        if rows.size == 0:
            continue
        xe = tt.gather_rows(x, rows)
        we = tt.take_along_last(tt.gather_rows(dense, rows), np.full((rows.size, 1), e))
        y = tt.index_add(y, rows, tt.mul(pool.experts[e](xe), we))
    stats = PoolStats(layer=layer, pool=pool.kind, weights=dense, selected=sel, n_tokens=n)
    return y, stats


class EncoderBlock:
    def __init__(self, rng, cfg: EncoderConfig):
        d = cfg.d
        self.wq, self.wk = Linear(rng, d, d), Linear(rng, d, d)
        self.wv, self.wo = Linear(rng, d, d), Linear(rng, d, d)
        self.g_attn = Tensor(np.ones(d), requires_grad=True)
        self.g_shared = Tensor(np.ones(d), requires_grad=True)
        self.g_specific = Tensor(np.ones(d), requires_grad=True)
        self.shared = ExpertPool(rng, cfg, "shared")
        self.specific = {m: ExpertPool(rng, cfg, m.name.lower()) for m in MODALITY_ORDER}

    def named(self, prefix: str):
        out = (
            self.wq.named(f"{prefix}.attn.q")
            + self.wk.named(f"{prefix}.attn.k")
            + self.wv.named(f"{prefix}.attn.v")
            + self.wo.named(f"{prefix}.attn.o")
            + [
                (f"{prefix}.g_attn", self.g_attn),
                (f"{prefix}.g_shared", self.g_shared),
                (f"{prefix}.g_specific", self.g_specific),
            ]
            + self.shared.named(f"{prefix}.shared")
        )
        for m in MODALITY_ORDER:
            out += self.specific[m].named(f"{prefix}.{m.name.lower()}")
        return out


def attention(h: Tensor, block: EncoderBlock, n_heads: int) -> Tensor:
    """Scaled dot-product multi-head self-attention over all tokens."""
    n, d = h.shape
    dh = d // n_heads

    def split(t: Tensor) -> Tensor:
        return tt.transpose(tt.reshape(t, (n, n_heads, dh)), (1, 0, 2))

    q, k, v = split(block.wq(h)), split(block.wk(h)), split(block.wv(h))
    scores = tt.mul(tt.matmul(q, tt.transpose(k, (0, 2, 1))), Tensor(1.0 / math.sqrt(dh)))
    mix = tt.matmul(tt.softmax(scores), v)  # [heads, n, dh]
    merged = tt.reshape(tt.transpose(mix, (1, 0, 2)), (n, d))
    return block.wo(merged)


def pool_context(h: Tensor, segments: list[Segment]) -> ContextVector:
    """Mean of the map segment rows; zeros (flagged) when no map is present."""
    for seg in segments:
        if seg.modality == Modality.MAP:
            rows = tt.gather_rows(h, np.arange(seg.start, seg.stop))
            return ContextVector(vector=tt.tmean(rows, axis=0), from_map=True)
    return ContextVector(vector=Tensor(np.zeros(h.shape[1])), from_map=False)


FrozenRouting = dict[tuple[int, str], np.ndarray]


def ss_dmoe_forward(
    x: Tensor,
    segments: list[Segment],
    ctx: ContextVector,
    block: EncoderBlock,
    cfg: EncoderConfig,
    layer: int,
    frozen: FrozenRouting | None = None,
) -> tuple[Tensor, list[PoolStats]]:
    """Shared pool over all rows plus one modality pool per segment."""

    def frozen_for(pool: str):
        return None if frozen is None else frozen.get((layer, pool))

    y_shared, st = _dispatch(
        block.shared, x, gate_shared(x, ctx, block.shared), cfg.top_k, layer, frozen_for("shared")
    )
    stats = [st]
    y_spec = Tensor(np.zeros(x.shape))
    for seg in segments:
        pool = block.specific[seg.modality]
        rows = np.arange(seg.start, seg.stop)
        xm = tt.gather_rows(x, rows)
        ym, st = _dispatch(
            pool, xm, gate_specific(xm, pool), cfg.top_k, layer, frozen_for(pool.kind)
        )
        y_spec = tt.index_add(y_spec, rows, ym)
        stats.append(st)
    out = tt.add(
        tt.add(x, tt.rmsnorm(y_shared, block.g_shared, cfg.rms_eps)),
        tt.rmsnorm(y_spec, block.g_specific, cfg.rms_eps),
    )
    return out, stats


def encoder_block(
    h: Tensor,
    segments: list[Segment],
    block: EncoderBlock,
    cfg: EncoderConfig,
    layer: int,
    frozen: FrozenRouting | None = None,
) -> tuple[Tensor, list[PoolStats]]:
    h1 = tt.add(h, tt.rmsnorm(attention(h, block, cfg.n_heads), block.g_attn, cfg.rms_eps))
    ctx = pool_context(h1, segments)
    return ss_dmoe_forward(h1, segments, ctx, block, cfg, layer, frozen)


@dataclass
class EncodeResult:
    h: Tensor  # [n_total, d]
    segments: list[Segment]
    stats: list[PoolStats]

    def segment(self, modality: Modality) -> Segment:
        for seg in self.segments:
            if seg.modality == modality:
                return seg
        raise EncoderError(f"no {modality.name.lower()} segment")

    def rows(self, modality: Modality) -> Tensor:
        seg = self.segment(modality)
        return tt.gather_rows(self.h, np.arange(seg.start, seg.stop))

    def frozen_routing(self) -> FrozenRouting:
        return {(s.layer, s.pool): s.selected for s in self.stats}


class MultimodalEncoder:
    """Owns every encoder-side parameter: patch embeddings, positional
    tables, modality id vectors, and the attention/MoE blocks."""

    def __init__(self, cfg: EncoderConfig, tok_cfg: TokenizerConfig, rng: np.random.Generator):
        self.cfg = cfg
        self.tok_cfg = tok_cfg
        if tok_cfg.d != cfg.d:
            raise EncoderError("tokenizer and encoder widths disagree")
        self.patch_embed: dict[Modality, Linear] = {}
        self.pos: dict[Modality, Tensor] = {}
        self.mod_id: dict[Modality, Tensor] = {}
        for m in MODALITY_ORDER:
            spec = tok_cfg.spec(m)
            n_tokens = spec.grid[0] * spec.grid[1]
            self.patch_embed[m] = Linear(rng, tok_cfg.patch_dim(m), cfg.d)
            self.pos[m] = Tensor(trunc_normal(rng, (n_tokens, cfg.d)), requires_grad=True)
            self.mod_id[m] = Tensor(np.zeros(cfg.d), requires_grad=True)
        self.blocks = [EncoderBlock(rng, cfg) for _ in range(cfg.n_layers)]

    def tokenize(self, prepped: Prepped) -> TokenSequence:
        lin = self.patch_embed[prepped.modality]
        return patchify_embed(prepped, lin.w, lin.b, self.tok_cfg)

    def embed_tokens(self, seq: TokenSequence, visible: np.ndarray | None = None) -> Tensor:
        """token + positional row + modality id; optionally keep a subset of
        rows (positions follow the original grid coordinates)."""
        h = tt.add(tt.add(seq.tokens, self.pos[seq.modality]), self.mod_id[seq.modality])
        if visible is not None:
            if visible.size == 0:
                raise EncoderError("embed_tokens: empty visible set")
            h = tt.gather_rows(h, visible)
        return h

    def encode(
        self,
        parts: list[tuple[Modality, Tensor]],
        frozen: FrozenRouting | None = None,
    ) -> EncodeResult:
        if not parts:
            raise EncoderError("encode: no modalities")
        order = {m: i for i, m in enumerate(MODALITY_ORDER)}
        seen = [m for m, _ in parts]
        if len(set(seen)) != len(seen):
            raise EncoderError("encode: duplicate modality")
        parts = sorted(parts, key=lambda p: order[p[0]])
        segments, offset = [], 0
        for m, t in parts:
            segments.append(Segment(m, offset, offset + t.shape[0]))
            offset += t.shape[0]
        h = parts[0][1] if len(parts) == 1 else tt.concat([t for _, t in parts], axis=0)
        stats: list[PoolStats] = []
        for li, block in enumerate(self.blocks):
            h, st = encoder_block(h, segments, block, self.cfg, li, frozen)
            stats.extend(st)
        return EncodeResult(h=h, segments=segments, stats=stats)

    def named_params(self) -> dict[str, Tensor]:
        out: list[tuple[str, Tensor]] = []
        for m in MODALITY_ORDER:
            name = m.name.lower()
            out += self.patch_embed[m].named(f"embed.{name}")
            out += [(f"pos.{name}", self.pos[m]), (f"id.{name}", self.mod_id[m])]
        for i, b in enumerate(self.blocks):
            out += b.named(f"block{i}")
        return dict(out)
