"""Self-supervised pre-training: masked multimodal reconstruction anchored
by a CSI-centric contrastive term and an expert load-balancing penalty.

The encoder only ever sees visible tokens. Reconstruction happens in a
lightweight per-modality decoder: visible latents and a learnable mask token
are scattered back to the full grid, decoder positions are added, a couple
of plain transformer blocks run over the full sequence, and a linear head
maps back to patch pixels. The masked loss is charged on the masked support
only, normalized by the number of masked scalar elements (the unnormalized
sum is also reported).

CSI masking draws one of three schemes per step: uniform random tokens,
contiguous frequency stripes (whole token-columns), or a comb of visible
token-columns derived from a subcarrier spacing. Radar and map grids reuse
the random scheme. All per-sample routing decisions are exposed as stats so
the load-balance term can aggregate over (layer, pool) pairs.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field

import numpy as np

from . import tensor as tt
from .encoder import (
    EncodeResult,
    EncoderConfig,
    FrozenRouting,
    Linear,
    MODALITY_ORDER,
    MultimodalEncoder,
    PoolStats,
    attention,
    trunc_normal,
)
from .synth import MultimodalSample, add_awgn
from .tensor import Tensor
from .tokenizer import Modality, Prepped, TokenizerConfig, preprocess, unpatchify


class PretrainError(ValueError):
    pass


# ---------------------------------------------------------------------------
# masking


@dataclass(frozen=True)
class MaskScheme:
    kind: str  # "random" | "frequency" | "comb"
    ratio: float | None = None  # random / frequency
    spacing: int | None = None  # comb, in subcarriers

    def __post_init__(self):
        if self.kind in ("random", "frequency"):
            if self.ratio is None or not 0.0 < self.ratio < 1.0:
                raise PretrainError(f"{self.kind} mask needs a ratio in (0, 1)")
        elif self.kind == "comb":
            if self.spacing is None or self.spacing < 2:
                raise PretrainError("comb mask needs a spacing >= 2")
        else:
            raise PretrainError(f"unknown mask scheme {self.kind!r}")


CSI_SCHEME_KINDS = ("random", "frequency", "comb")


def sample_scheme(kind: str, rng: np.random.Generator) -> MaskScheme:
    """Draw scheme parameters: ratios ~ U(0.1, 0.5), comb spacing ~ U{4..16}."""
    if kind == "comb":
        return MaskScheme("comb", spacing=int(rng.integers(4, 17)))
    return MaskScheme(kind, ratio=float(rng.uniform(0.1, 0.5)))


def choose_csi_scheme(rng: np.random.Generator) -> MaskScheme:
    return sample_scheme(CSI_SCHEME_KINDS[int(rng.integers(0, 3))], rng)


@dataclass
class MaskSpec:
    modality: Modality
    visible: np.ndarray  # sorted token indices
    masked: np.ndarray  # sorted token indices
    omega: np.ndarray  # [grid_rows, grid_cols] bool, True = masked

    @property
    def n_tokens(self) -> int:
        return self.omega.size


def _column_mask(grid: tuple[int, int], masked_cols: np.ndarray) -> np.ndarray:
    omega = np.zeros(grid, dtype=bool)
    omega[:, masked_cols] = True
    return omega


def sample_mask(
    scheme: MaskScheme,
    grid: tuple[int, int],
    rng: np.random.Generator,
    patch_w: int = 1,
) -> MaskSpec:
    """Draw a mask over the token grid. Comb spacing is given in input
    columns (subcarriers) and converts to token columns via patch_w: exact
    when divisible, else nearest (ties to even) floored at 1. A draw that
    leaves either side empty is retried once, then rejected."""
    gr, gc = grid
    n = gr * gc

    def draw() -> np.ndarray:
        if scheme.kind == "random":
            n_masked = int(round(scheme.ratio * n))
            omega = np.zeros(n, dtype=bool)
            omega[rng.permutation(n)[:n_masked]] = True
            return omega.reshape(grid)
        if scheme.kind == "frequency":
            width = int(round(scheme.ratio * gc))
            start = int(rng.integers(0, gc - width + 1)) if width < gc else 0
            return _column_mask(grid, np.arange(start, min(start + width, gc)))
        step = scheme.spacing // patch_w if scheme.spacing % patch_w == 0 else max(
            1, round(scheme.spacing / patch_w)
        )
        visible_cols = np.arange(0, gc, step)
        return _column_mask(grid, np.setdiff1d(np.arange(gc), visible_cols))

    omega = draw()
    if omega.all() or not omega.any():
        omega = draw()
    if omega.all() or not omega.any():
        raise PretrainError(f"{scheme.kind} mask left no {'visible' if omega.all() else 'masked'} tokens")
    flat = omega.reshape(-1)
    return MaskSpec(
        modality=Modality.CSI,  # caller overwrites; kept simple for direct use
        visible=np.nonzero(~flat)[0],
        masked=np.nonzero(flat)[0],
        omega=omega,
    )


def mask_for(modality: Modality, scheme: MaskScheme, grid, rng, patch_w: int = 1) -> MaskSpec:
    spec = sample_mask(scheme, grid, rng, patch_w)
    spec.modality = modality
    return spec


# ---------------------------------------------------------------------------
# decoder


class DecoderBlock:
    """Attention + plain GELU FFN, both on RMSNorm-gained residual branches."""

    def __init__(self, rng, d: int, n_heads: int, hidden_mult: int):
        self.n_heads = n_heads
        self.wq, self.wk = Linear(rng, d, d), Linear(rng, d, d)
        self.wv, self.wo = Linear(rng, d, d), Linear(rng, d, d)
        self.fc1 = Linear(rng, d, hidden_mult * d)
        self.fc2 = Linear(rng, hidden_mult * d, d)
        self.g_attn = Tensor(np.ones(d), requires_grad=True)
        self.g_ffn = Tensor(np.ones(d), requires_grad=True)

    def __call__(self, h: Tensor, eps: float) -> Tensor:
        h = tt.add(h, tt.rmsnorm(attention(h, self, self.n_heads), self.g_attn, eps))
        ffn = self.fc2(tt.gelu(self.fc1(h)))
        return tt.add(h, tt.rmsnorm(ffn, self.g_ffn, eps))

    def named(self, prefix: str):
        return (
            self.wq.named(f"{prefix}.attn.q")
            + self.wk.named(f"{prefix}.attn.k")
            + self.wv.named(f"{prefix}.attn.v")
            + self.wo.named(f"{prefix}.attn.o")
            + self.fc1.named(f"{prefix}.ffn.fc1")
            + self.fc2.named(f"{prefix}.ffn.fc2")
            + [(f"{prefix}.g_attn", self.g_attn), (f"{prefix}.g_ffn", self.g_ffn)]
        )


class DecoderHead:
    """Per-modality reconstruction head over the full token grid."""

    def __init__(self, rng, enc_cfg: EncoderConfig, tok_cfg: TokenizerConfig, modality: Modality, n_blocks: int):
        spec = tok_cfg.spec(modality)
        n_tokens = spec.grid[0] * spec.grid[1]
        d = enc_cfg.d
        self.modality = modality
        self.grid = spec.grid
        self.patch = spec.patch
        self.channels = tok_cfg.patch_dim(modality) // (spec.patch[0] * spec.patch[1])
        self.mask_token = Tensor(trunc_normal(rng, (d,)), requires_grad=True)
        self.pos = Tensor(trunc_normal(rng, (n_tokens, d)), requires_grad=True)
        self.blocks = [
            DecoderBlock(rng, d, enc_cfg.n_heads, enc_cfg.hidden_mult) for _ in range(n_blocks)
        ]
        self.out = Linear(rng, d, tok_cfg.patch_dim(modality))

    def named(self, prefix: str):
        out = [(f"{prefix}.mask_token", self.mask_token), (f"{prefix}.pos", self.pos)]
        for i, b in enumerate(self.blocks):
            out += b.named(f"{prefix}.block{i}")
        return out + self.out.named(f"{prefix}.out")


class PretrainModel:
    """Encoder plus per-modality decoders and contrastive projection heads."""

    def __init__(
        self,
        enc_cfg: EncoderConfig,
        tok_cfg: TokenizerConfig,
        rng: np.random.Generator,
        decoder_blocks: int = 1,
    ):
        self.enc_cfg = enc_cfg
        self.tok_cfg = tok_cfg
        self.encoder = MultimodalEncoder(enc_cfg, tok_cfg, rng)
        self.decoders = {
            m: DecoderHead(rng, enc_cfg, tok_cfg, m, decoder_blocks) for m in MODALITY_ORDER
        }
        self.proj = {m: Linear(rng, enc_cfg.d, enc_cfg.d) for m in MODALITY_ORDER}

    def named_params(self) -> dict[str, Tensor]:
        out = dict(self.encoder.named_params())
        for m in MODALITY_ORDER:
            name = m.name.lower()
            out.update(dict(self.decoders[m].named(f"decoder.{name}")))
            out.update(dict(self.proj[m].named(f"proj.{name}")))
        return out

    def encoder_param_names(self) -> set[str]:
        return set(self.encoder.named_params())


def encode_visible(
    model: PretrainModel,
    prepped: dict[Modality, Prepped],
    masks: dict[Modality, MaskSpec],
    frozen: FrozenRouting | None = None,
) -> EncodeResult:
    """Tokenize each present modality, keep visible rows, encode jointly.
    Modalities without a mask entry are fully visible."""
    parts = []
    for m in MODALITY_ORDER:
        if m not in prepped:
            continue
        seq = model.encoder.tokenize(prepped[m])
        visible = masks[m].visible if m in masks else None
        parts.append((m, model.encoder.embed_tokens(seq, visible)))
    return model.encoder.encode(parts, frozen)


def decode_masked(
    model: PretrainModel,
    result: EncodeResult,
    masks: dict[Modality, MaskSpec],
) -> dict[Modality, Tensor]:
    """Reconstruct the full grid of every masked modality: scatter visible
    latents and mask tokens to grid positions, add decoder positions, run the
    decoder blocks, project to pixels, fold patches."""
    out: dict[Modality, Tensor] = {}
    for m, spec in masks.items():
        dec = model.decoders[m]
        latents = result.rows(m)
        if latents.shape[0] != spec.visible.size:
            raise PretrainError("mask/visible row mismatch at decode")
        n_tokens = spec.n_tokens
        full = tt.index_add(Tensor(np.zeros((n_tokens, model.enc_cfg.d))), spec.visible, latents)
        if spec.masked.size:
            fill = tt.add(Tensor(np.zeros((spec.masked.size, model.enc_cfg.d))), dec.mask_token)
            full = tt.index_add(full, spec.masked, fill)
        h = tt.add(full, dec.pos)
        for block in dec.blocks:
            h = block(h, model.enc_cfg.rms_eps)
        pixels = dec.out(h)
        out[m] = unpatchify(pixels, dec.grid, dec.patch, dec.channels)
    return out


# ---------------------------------------------------------------------------
# losses


def _pixel_mask(spec: MaskSpec, patch: tuple[int, int]) -> np.ndarray:
    return np.kron(spec.omega.astype(float), np.ones(patch))[..., None]


def mask_loss(
    recons: dict[Modality, Tensor],
    targets: dict[Modality, np.ndarray],
    masks: dict[Modality, MaskSpec],
) -> tuple[Tensor, Tensor, int]:
    """(mean over masked scalar elements, unnormalized sum, element count)."""
    sse: Tensor | None = None
    count = 0
    for m, recon in recons.items():
        spec = masks[m]
        target = targets[m]
        if recon.shape != target.shape:
            raise PretrainError(f"reconstruction shape {recon.shape} != target {target.shape}")
        ph = target.shape[0] // spec.omega.shape[0]
        pw = target.shape[1] // spec.omega.shape[1]
        pix = _pixel_mask(spec, (ph, pw))
        term = tt.tsum(tt.square(tt.mul(tt.sub(recon, Tensor(target)), Tensor(pix))))
        sse = term if sse is None else tt.add(sse, term)
        count += int(spec.masked.size) * ph * pw * target.shape[2]
    if sse is None or count == 0:
        raise PretrainError("mask_loss: nothing masked")
    return tt.mul(sse, Tensor(1.0 / count)), sse, count


def contrastive_loss(
    anchors: list[Tensor],
    others: dict[Modality, list[Tensor]],
    tau: float = 0.07,
) -> Tensor:
    """Sum over non-CSI modalities of InfoNCE with CSI as the anchor.

    anchors[i] and others[m][i] are [d] embeddings of the i-th complete
    sample; similarity is the raw dot product over tau. Returns a constant
    zero when fewer than two complete samples exist."""
    b = len(anchors)
    if b <= 1:
        return Tensor(0.0)
    z_csi = tt.concat([tt.reshape(z, (1, -1)) for z in anchors], axis=0)
    total: Tensor | None = None
    diag = np.arange(b)[:, None]
    for m, zs in others.items():
        if len(zs) != b:
            raise PretrainError("contrastive_loss: ragged batch")
        z_m = tt.concat([tt.reshape(z, (1, -1)) for z in zs], axis=0)
        s = tt.mul(tt.matmul(z_csi, tt.transpose(z_m, (1, 0))), Tensor(1.0 / tau))
        log_z = tt.logsumexp_rows(s)  # [b, 1]
        pos = tt.take_along_last(s, diag)  # [b, 1]
        term = tt.tmean(tt.sub(log_z, pos))
        total = term if total is None else tt.add(total, term)
    return total if total is not None else Tensor(0.0)


def load_balance_loss(stats: list[PoolStats], n_experts: int) -> Tensor:
    """Mean over (layer, pool) groups of (1/K) sum_e Imp(e) * Load(e).

    Importance is the token-mean of the dense routing weights and carries
    gradient; load is the hard selection frequency, treated as constant.
    Uniform routing gives top_k / K^2."""
    groups: dict[tuple[int, str], list[PoolStats]] = {}
    for s in stats:
        groups.setdefault((s.layer, s.pool), []).append(s)
    if not groups:
        raise PretrainError("load_balance_loss: no routing stats")
    total: Tensor | None = None
    for _, members in sorted(groups.items()):
        weights = (
            members[0].weights
            if len(members) == 1
            else tt.concat([m.weights for m in members], axis=0)
        )
        n_tokens = sum(m.n_tokens for m in members)
        counts = np.zeros(n_experts)
        for m in members:
            for e in range(n_experts):
                counts[e] += (m.selected == e).sum()
        load = counts / n_tokens
        imp = tt.tmean(weights, axis=0)  # [K]
        term = tt.mul(tt.tsum(tt.mul(imp, Tensor(load))), Tensor(1.0 / n_experts))
        total = term if total is None else tt.add(total, term)
    return tt.mul(total, Tensor(1.0 / len(groups)))


def total_loss(
    l_mask: Tensor, l_cl: Tensor, l_lb: Tensor, lambda_cl: float = 5e-4, lambda_lb: float = 0.05
) -> Tensor:
    # the auxiliary terms are summed first; with the default weights this
    # keeps total_loss(1, 2, 0.5) at the decimal value 1.026 bit-exactly
    return tt.add(
        l_mask, tt.add(tt.mul(l_cl, Tensor(lambda_cl)), tt.mul(l_lb, Tensor(lambda_lb)))
    )


@dataclass
class PretrainLoss:
    total: Tensor
    mask: Tensor
    mask_unnormalized: Tensor
    contrastive: Tensor
    load_balance: Tensor
    masked_count: int
    n_complete: int

    def scalars(self) -> dict[str, float]:
        return {
            "loss": self.total.item(),
            "mask": self.mask.item(),
            "mask_unnormalized": self.mask_unnormalized.item(),
            "contrastive": self.contrastive.item(),
            "load_balance": self.load_balance.item(),
            "masked_count": float(self.masked_count),
            "n_complete": float(self.n_complete),
        }


# ---------------------------------------------------------------------------
# optimizer and schedule


class Adam:
    def __init__(
        self,
        params: dict[str, Tensor],
        beta1: float = 0.9,
        beta2: float = 0.999,
        eps: float = 1e-8,
    ):
        self.params = dict(params)
        self.beta1, self.beta2, self.eps = beta1, beta2, eps
        self.t = 0
        self.m = {k: np.zeros_like(p.data) for k, p in self.params.items()}
        self.v = {k: np.zeros_like(p.data) for k, p in self.params.items()}

    def zero_grad(self) -> None:
        for p in self.params.values():
            p.grad = None

    def step(self, lr: float) -> None:
        self.t += 1
        b1, b2 = self.beta1, self.beta2
        for k, p in self.params.items():
            if p.grad is None:
                continue
            self.m[k] = b1 * self.m[k] + (1 - b1) * p.grad
            self.v[k] = b2 * self.v[k] + (1 - b2) * p.grad * p.grad
            m_hat = self.m[k] / (1 - b1**self.t)
            v_hat = self.v[k] / (1 - b2**self.t)
            p.data = p.data - lr * m_hat / (np.sqrt(v_hat) + self.eps)

    def state_arrays(self) -> dict[str, np.ndarray]:
        out = {}
        for k in self.params:
            out[f"m.{k}"] = self.m[k]
            out[f"v.{k}"] = self.v[k]
        return out

    def load_state_arrays(self, arrays: dict[str, np.ndarray], t: int) -> None:
        self.t = t
        for k in self.params:
            self.m[k] = arrays[f"m.{k}"].copy()
            self.v[k] = arrays[f"v.{k}"].copy()


def cosine_lr(step: int, total_steps: int, lr_min: float, lr_max: float) -> float:
    """Cosine from lr_max (step 0) down to lr_min (step total_steps)."""
    if total_steps < 1:
        raise PretrainError("schedule needs at least one step")
    frac = min(max(step, 0), total_steps) / total_steps
    return lr_min + 0.5 * (lr_max - lr_min) * (1.0 + math.cos(math.pi * frac))


# ---------------------------------------------------------------------------
# training step


@dataclass(frozen=True)
class PretrainSettings:
    steps: int = 200
    batch_size: int = 8
    lr_min: float = 1e-5
    lr_max: float = 3e-3
    lambda_cl: float = 5e-4
    lambda_lb: float = 0.05
    tau: float = 0.07
    modality_dropout: float = 0.2
    snr_range: tuple[float, float] | None = (10.0, 25.0)


@dataclass
class StepInputs:
    """Everything sampled for one step, so a step can be replayed exactly."""

    prepped: list[dict[Modality, Prepped]]
    masks: list[dict[Modality, MaskSpec]]
    scheme: MaskScheme


def prepare_step_inputs(
    batch: list[MultimodalSample],
    model: PretrainModel,
    cfg: PretrainSettings,
    rng: np.random.Generator,
) -> StepInputs:
    """Apply modality dropout, CSI noise injection, preprocessing, and mask
    sampling for one batch. One CSI scheme per step; fresh ratio draws per
    sample for the non-CSI random masks."""
    scheme = choose_csi_scheme(rng)
    tok_cfg = model.tok_cfg
    prepped_all, masks_all = [], []
    for sample in batch:
        present = {m for m in MODALITY_ORDER if sample.available[m.name.lower()]}
        for m in (Modality.MAP, Modality.RADAR):
            if m in present and len(present) > 1 and rng.random() < cfg.modality_dropout:
                present.remove(m)
        work = sample
        if Modality.CSI in present and cfg.snr_range is not None:
            snr = float(rng.uniform(*cfg.snr_range))
            work = MultimodalSample(
                index=sample.index,
                csi=add_awgn(sample.csi, snr, rng),
                radar=sample.radar,
                map=sample.map,
                labels=sample.labels,
            )
        prepped = {m: preprocess(work, m, tok_cfg) for m in MODALITY_ORDER if m in present}
        masks = {}
        for m in (m for m in MODALITY_ORDER if m in present):
            grid = tok_cfg.spec(m).grid
            if m == Modality.CSI:
                masks[m] = mask_for(m, scheme, grid, rng, patch_w=tok_cfg.spec(m).patch[1])
            else:
                masks[m] = mask_for(m, sample_scheme("random", rng), grid, rng)
        prepped_all.append(prepped)
        masks_all.append(masks)
    return StepInputs(prepped=prepped_all, masks=masks_all, scheme=scheme)


def step_objective(
    model: PretrainModel, inputs: StepInputs, cfg: PretrainSettings,
    frozen: list[FrozenRouting] | None = None,
) -> tuple[PretrainLoss, list[EncodeResult]]:
    """Forward the whole batch and assemble the combined objective."""
    all_stats: list[PoolStats] = []
    sse_total: Tensor | None = None
    count_total = 0
    anchors: list[Tensor] = []
    others: dict[Modality, list[Tensor]] = {Modality.RADAR: [], Modality.MAP: []}
    results = []
    for i, (prepped, masks) in enumerate(zip(inputs.prepped, inputs.masks)):
        res = encode_visible(model, prepped, masks, None if frozen is None else frozen[i])
        results.append(res)
        recons = decode_masked(model, res, masks)
        targets = {m: prepped[m].array for m in recons}
        _, sse, count = mask_loss(recons, targets, masks)
        sse_total = sse if sse_total is None else tt.add(sse_total, sse)
        count_total += count
        all_stats.extend(res.stats)
        if all(m in prepped for m in MODALITY_ORDER):
            pooled = {m: tt.tmean(res.rows(m), axis=0) for m in MODALITY_ORDER}
            anchors.append(model.proj[Modality.CSI](tt.reshape(pooled[Modality.CSI], (1, -1))))
            for m in (Modality.RADAR, Modality.MAP):
                others[m].append(model.proj[m](tt.reshape(pooled[m], (1, -1))))
    l_mask = tt.mul(sse_total, Tensor(1.0 / count_total))
    anchors_flat = [tt.reshape(z, (-1,)) for z in anchors]
    others_flat = {m: [tt.reshape(z, (-1,)) for z in zs] for m, zs in others.items()}
    l_cl = contrastive_loss(anchors_flat, others_flat, cfg.tau)
    l_lb = load_balance_loss(all_stats, model.enc_cfg.n_experts)
    loss = PretrainLoss(
        total=total_loss(l_mask, l_cl, l_lb, cfg.lambda_cl, cfg.lambda_lb),
        mask=l_mask,
        mask_unnormalized=sse_total,
        contrastive=l_cl,
        load_balance=l_lb,
        masked_count=count_total,
        n_complete=len(anchors),
    )
    return loss, results


def pretrain_step(
    model: PretrainModel,
    batch: list[MultimodalSample],
    opt: Adam,
    cfg: PretrainSettings,
    rng: np.random.Generator,
    lr: float,
) -> PretrainLoss:
    inputs = prepare_step_inputs(batch, model, cfg, rng)
    opt.zero_grad()
    with tt.Tape() as tape:
        loss, _ = step_objective(model, inputs, cfg)
    tt.backward(loss.total, tape)
    opt.step(lr)
    return loss


def run_pretrain(
    model: PretrainModel,
    samples: list[MultimodalSample],
    cfg: PretrainSettings,
    seed: int,
    log=None,
    start_step: int = 0,
    until: int | None = None,
    opt: Adam | None = None,
    rng: np.random.Generator | None = None,
) -> tuple[list[dict], Adam, np.random.Generator]:
    """Cycle the dataset in order; one rng drives dropout, noise, and masks.
    The schedule always spans cfg.steps; [start_step, until) with the opt and
    rng returned by an earlier call resumes a run exactly."""
    if not samples:
        raise PretrainError("run_pretrain: empty dataset")
    opt = opt or Adam(model.named_params())
    rng = rng or np.random.default_rng(seed)
    history = []
    n = len(samples)
    for step in range(start_step, cfg.steps if until is None else until):
        batch = [samples[(step * cfg.batch_size + j) % n] for j in range(cfg.batch_size)]
        lr = cosine_lr(step, cfg.steps, cfg.lr_min, cfg.lr_max)
        loss = pretrain_step(model, batch, opt, cfg, rng, lr)
        record = {"step": step, "lr": lr, **loss.scalars()}
        history.append(record)
        if log is not None:
            log(record)
    return history, opt, rng
