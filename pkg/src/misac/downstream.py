"""Downstream task heads, fine-tuning, and evaluation.

Five tasks ride on the pre-trained encoder:

- channel_prediction: the last quarter of CSI token columns is hidden and
  reconstructed (extrapolation along frequency); loss and NMSE live on the
  hidden columns.
- channel_estimation: only every 4th CSI token column is visible (a pilot
  comb); the full grid is reconstructed and scored.
- beam_selection: classify the best codebook beam from pooled features.
- localization: regress the tx-rx distance in meters.
- aoa_estimation: regress (sin, cos) of the dominant-path azimuth; decoded
  with atan2 and scored by wrapped absolute error.

Reconstruction tasks reuse the CSI decoder as their head; label tasks attach
a small two-layer head on mean-pooled encoder output. With freeze=True only
the head (or CSI decoder) trains and the encoder stays bit-identical.
"""

from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np

from . import tensor as tt
from .encoder import FrozenRouting, Linear, MODALITY_ORDER
from .pretrain import (
    Adam,
    MaskSpec,
    PretrainModel,
    cosine_lr,
    decode_masked,
    encode_visible,
    mask_loss,
)
from .synth import MultimodalSample, add_awgn
from .tensor import Tensor
from .tokenizer import Modality, Prepped, preprocess


class DownstreamError(ValueError):
    pass


TASKS = (
    "channel_prediction",
    "channel_estimation",
    "beam_selection",
    "localization",
    "aoa_estimation",
)
RECON_TASKS = ("channel_prediction", "channel_estimation")


# ---------------------------------------------------------------------------
# task-defined CSI masks (deterministic)


def prediction_mask(grid: tuple[int, int]) -> MaskSpec:
    """Hide the last quarter of token columns (at least one)."""
    gr, gc = grid
    n_hidden = max(1, round(0.25 * gc))
    omega = np.zeros(grid, dtype=bool)
    omega[:, gc - n_hidden :] = True
    flat = omega.reshape(-1)
    return MaskSpec(Modality.CSI, np.nonzero(~flat)[0], np.nonzero(flat)[0], omega)


def estimation_mask(grid: tuple[int, int], spacing: int = 4) -> MaskSpec:
    """Keep every `spacing`-th token column visible (pilot comb)."""
    gr, gc = grid
    if spacing < 2 or spacing >= gc:
        raise DownstreamError("pilot spacing must lie in [2, grid_cols)")
    omega = np.ones(grid, dtype=bool)
    omega[:, np.arange(0, gc, spacing)] = False
    flat = omega.reshape(-1)
    return MaskSpec(Modality.CSI, np.nonzero(~flat)[0], np.nonzero(flat)[0], omega)


def task_mask(task: str, grid: tuple[int, int]) -> MaskSpec | None:
    if task == "channel_prediction":
        return prediction_mask(grid)
    if task == "channel_estimation":
        return estimation_mask(grid)
    return None


# ---------------------------------------------------------------------------
# metrics


def nmse_db(pred: np.ndarray, target: np.ndarray, floor_db: float = -120.0) -> float:
    """10 log10(|pred - target|^2 / |target|^2), floored for exact matches."""
    den = float(np.sum(np.abs(target) ** 2))
    if den == 0.0:
        raise DownstreamError("nmse_db: zero-power target")
    num = float(np.sum(np.abs(pred - target) ** 2))
    if num == 0.0:
        return floor_db
    return max(10.0 * math.log10(num / den), floor_db)


def topk_accuracy(logits: np.ndarray, labels: np.ndarray, k: int) -> float:
    """Fraction of rows whose label lands in the top-k logits (stable order,
    ties resolved toward the lower index)."""
    order = np.argsort(-logits, axis=-1, kind="stable")[:, :k]
    return float(np.mean([label in row for label, row in zip(labels, order)]))


def wrapped_abs_error(pred: float, target: float) -> float:
    """Absolute angular difference wrapped onto (-pi, pi]."""
    d = (pred - target + math.pi) % (2.0 * math.pi) - math.pi
    return abs(d)


# ---------------------------------------------------------------------------
# model


class TaskHead:
    """Two-layer GELU MLP on pooled features."""

    def __init__(self, rng: np.random.Generator, d: int, n_out: int):
        self.fc1 = Linear(rng, d, d)
        self.fc2 = Linear(rng, d, n_out)

    def __call__(self, pooled: Tensor) -> Tensor:
        return self.fc2(tt.gelu(self.fc1(pooled)))

    def named(self, prefix: str):
        return self.fc1.named(f"{prefix}.fc1") + self.fc2.named(f"{prefix}.fc2")


HEAD_OUTPUTS = {"beam_selection": None, "localization": 1, "aoa_estimation": 2}


class FinetuneModel:
    """A pre-trained model plus one task binding."""

    def __init__(
        self,
        pretrained: PretrainModel,
        task: str,
        rng: np.random.Generator,
        n_beams: int = 16,
    ):
        if task not in TASKS:
            raise DownstreamError(f"unknown task {task!r}")
        self.pretrained = pretrained
        self.task = task
        self.n_beams = n_beams
        if task in RECON_TASKS:
            self.head = None
        else:
            n_out = HEAD_OUTPUTS[task] or n_beams
            self.head = TaskHead(rng, pretrained.enc_cfg.d, n_out)

    def named_params(self) -> dict[str, Tensor]:
        out = dict(self.pretrained.named_params())
        if self.head is not None:
            out.update(dict(self.head.named("head")))
        return out

    def trainable_params(self, freeze_encoder: bool) -> dict[str, Tensor]:
        """freeze_encoder=True trains the task head only: the label head for
        label tasks, the CSI decoder for reconstruction tasks."""
        params = self.named_params()
        if not freeze_encoder:
            return params
        if self.task in RECON_TASKS:
            keep = "decoder.csi."
        else:
            keep = "head."
        return {k: p for k, p in params.items() if k.startswith(keep)}


# ---------------------------------------------------------------------------
# forward passes


@dataclass(frozen=True)
class FinetuneSettings:
    steps: int = 100
    batch_size: int = 8
    lr_min: float = 1e-5
    lr_max: float = 1e-3
    freeze_encoder: bool = False
    snr_range: tuple[float, float] | None = None
    drop: tuple[str, ...] = ()  # modality names excluded at train and eval


def _prep_modalities(
    model: PretrainModel,
    sample: MultimodalSample,
    drop: tuple[str, ...],
    snr_range,
    rng: np.random.Generator | None,
) -> dict[Modality, Prepped]:
    work = sample
    if snr_range is not None and sample.csi is not None and "csi" not in drop:
        if rng is None:
            raise DownstreamError("snr injection needs an rng")
        snr = float(rng.uniform(*snr_range))
        work = MultimodalSample(
            index=sample.index,
            csi=add_awgn(sample.csi, snr, rng),
            radar=sample.radar,
            map=sample.map,
            labels=sample.labels,
        )
    prepped = {}
    for m in MODALITY_ORDER:
        name = m.name.lower()
        if name in drop or not work.available[name]:
            continue
        prepped[m] = preprocess(work, m, model.tok_cfg)
    if not prepped:
        raise DownstreamError("sample has no usable modality after drops")
    return prepped


def sample_loss(
    model: FinetuneModel,
    sample: MultimodalSample,
    cfg: FinetuneSettings,
    rng: np.random.Generator | None = None,
    frozen: FrozenRouting | None = None,
) -> tuple[Tensor, dict]:
    """Loss for one sample plus everything needed to score it."""
    pre = model.pretrained
    prepped = _prep_modalities(pre, sample, cfg.drop, cfg.snr_range, rng)
    task = model.task
    if task in RECON_TASKS:
        if Modality.CSI not in prepped:
            raise DownstreamError(f"{task} needs csi")
        spec = task_mask(task, pre.tok_cfg.spec(Modality.CSI).grid)
        masks = {Modality.CSI: spec}
        res = encode_visible(pre, prepped, masks, frozen)
        recon = decode_masked(pre, res, masks)[Modality.CSI]
        target = prepped[Modality.CSI].array
        if task == "channel_prediction":
            loss, _, _ = mask_loss({Modality.CSI: recon}, {Modality.CSI: target}, masks)
        else:
            diff = tt.sub(recon, Tensor(target))
            loss = tt.tmean(tt.square(diff))
        scale = prepped[Modality.CSI].scale
        aux = {
            "recon": recon.data / scale,  # de-normalized
            "target": target / scale,
            "mask_pixels": np.kron(spec.omega, np.ones(pre.tok_cfg.spec(Modality.CSI).patch)).astype(
                bool
            ),
        }
        return loss, aux

    res = encode_visible(pre, prepped, {}, frozen)
    pooled = tt.reshape(tt.tmean(res.h, axis=0), (1, -1))
    out = model.head(pooled)
    lab = sample.labels
    if task == "beam_selection":
        target = int(lab.beam_index)
        log_z = tt.logsumexp_rows(out)
        picked = tt.take_along_last(out, np.array([[target]]))
        loss = tt.tmean(tt.sub(log_z, picked))
        return loss, {"logits": out.data[0].copy(), "label": target}
    if task == "localization":
        target = float(lab.distance_m)
        diff = tt.sub(out, Tensor(np.array([[target]])))
        loss = tt.tmean(tt.square(diff))
        return loss, {"pred": float(out.data[0, 0]), "label": target}
    # aoa_estimation
    theta = float(lab.aoa_rad)
    want = np.array([[math.sin(theta), math.cos(theta)]])
    loss = tt.tmean(tt.square(tt.sub(out, Tensor(want))))
    pred = math.atan2(float(out.data[0, 0]), float(out.data[0, 1]))
    return loss, {"pred": pred, "label": theta}


def finetune_step(
    model: FinetuneModel,
    batch: list[MultimodalSample],
    opt: Adam,
    cfg: FinetuneSettings,
    rng: np.random.Generator,
    lr: float,
) -> float:
    opt.zero_grad()
    with tt.Tape() as tape:
        total: Tensor | None = None
        for sample in batch:
            loss, _ = sample_loss(model, sample, cfg, rng)
            total = loss if total is None else tt.add(total, loss)
        total = tt.mul(total, Tensor(1.0 / len(batch)))
    tt.backward(total, tape)
    opt.step(lr)
    return total.item()


def run_finetune(
    model: FinetuneModel,
    samples: list[MultimodalSample],
    cfg: FinetuneSettings,
    seed: int,
    log=None,
) -> list[dict]:
    if not samples:
        raise DownstreamError("run_finetune: empty dataset")
    opt = Adam(model.trainable_params(cfg.freeze_encoder))
    rng = np.random.default_rng(seed)
    history = []
    n = len(samples)
    for step in range(cfg.steps):
        batch = [samples[(step * cfg.batch_size + j) % n] for j in range(cfg.batch_size)]
        lr = cosine_lr(step, cfg.steps, cfg.lr_min, cfg.lr_max)
        loss = finetune_step(model, batch, opt, cfg, rng, lr)
        record = {"step": step, "lr": lr, "loss": loss}
        history.append(record)
        if log is not None:
            log(record)
    return history


# ---------------------------------------------------------------------------
# evaluation


def evaluate(
    model: FinetuneModel,
    samples: list[MultimodalSample],
    cfg: FinetuneSettings,
    seed: int = 0,
) -> dict[str, float]:
    """Task metrics over a sample list. The seed fixes SNR injection noise so
    runs that differ only in the model see identical inputs."""
    if not samples:
        raise DownstreamError("evaluate: empty dataset")
    rng = np.random.default_rng(seed)
    task = model.task
    losses = []
    if task in RECON_TASKS:
        nmses = []
        for s in samples:
            loss, aux = sample_loss(model, s, cfg, rng)
            losses.append(loss.item())
            if task == "channel_prediction":
                sel = aux["mask_pixels"]
                nmses.append(nmse_db(aux["recon"][sel], aux["target"][sel]))
            else:
                nmses.append(nmse_db(aux["recon"], aux["target"]))
        return {"loss": float(np.mean(losses)), "nmse_db": float(np.mean(nmses))}
    if task == "beam_selection":
        logits, labels = [], []
        for s in samples:
            loss, aux = sample_loss(model, s, cfg, rng)
            losses.append(loss.item())
            logits.append(aux["logits"])
            labels.append(aux["label"])
        logits = np.stack(logits)
        labels = np.asarray(labels)
        return {
            "loss": float(np.mean(losses)),
            "top1": topk_accuracy(logits, labels, 1),
            "top3": topk_accuracy(logits, labels, 3),
        }
    preds, labels = [], []
    for s in samples:
        loss, aux = sample_loss(model, s, cfg, rng)
        losses.append(loss.item())
        preds.append(aux["pred"])
        labels.append(aux["label"])
    preds = np.asarray(preds)
    labels = np.asarray(labels)
    if task == "localization":
        err = np.abs(preds - labels)
        return {
            "loss": float(np.mean(losses)),
            "mae_m": float(np.mean(err)),
            "rmse_m": float(np.sqrt(np.mean(err**2))),
        }
    errs = np.array([wrapped_abs_error(p, t) for p, t in zip(preds, labels)])
    return {
        "loss": float(np.mean(losses)),
        "mae_rad": float(np.mean(errs)),
        "mae_deg": float(np.degrees(np.mean(errs))),
    }
