"""Single-file checkpoints: a canonical JSON header plus concatenated
tensor blobs.

Layout: magic ``MSCK``, u32 format version, u64 header length, the header
JSON (sorted keys, no whitespace), then the payload: one serialized tensor
per entry, parameters first, optimizer moments after, both in sorted name
order. The header stores the config fingerprint, the step counter, the
optimizer timestep, the generator state, the byte span of every blob, and a
sha256 of the whole payload. Loading verifies the checksum before touching
any array, refuses a fingerprint mismatch unless forced, and save -> load ->
save is byte-identical.
"""

from __future__ import annotations

import hashlib
import json
import os
import struct
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .tensor import mstn_dumps, mstn_loads

_MAGIC = b"MSCK"
_VERSION = 1


class CheckpointError(ValueError):
    pass


@dataclass
class Checkpoint:
    fingerprint: str
    step: int
    params: dict[str, np.ndarray]
    opt_t: int = 0
    opt_moments: dict[str, np.ndarray] = field(default_factory=dict)  # m.<name> / v.<name>
    rng_state: dict | None = None


def save_checkpoint(path: str | Path, ckpt: Checkpoint) -> None:
    """Write atomically (temp file + rename) so an interrupted save never
    clobbers the previous good checkpoint."""
    blobs: list[tuple[str, bytes]] = []
    for name in sorted(ckpt.params):
        blobs.append((f"p.{name}", mstn_dumps(ckpt.params[name])))
    for name in sorted(ckpt.opt_moments):
        blobs.append((f"o.{name}", mstn_dumps(ckpt.opt_moments[name])))
    payload = b"".join(b for _, b in blobs)
    spans, offset = [], 0
    for name, blob in blobs:
        spans.append({"name": name, "offset": offset, "length": len(blob)})
        offset += len(blob)
    header = {
        "format": "misac-checkpoint",
        "version": _VERSION,
        "fingerprint": ckpt.fingerprint,
        "step": ckpt.step,
        "opt_t": ckpt.opt_t,
        "rng_state": ckpt.rng_state,
        "tensors": spans,
        "payload_sha256": hashlib.sha256(payload).hexdigest(),
    }
    head = json.dumps(header, sort_keys=True, separators=(",", ":")).encode()
    path = Path(path)
    tmp = path.with_name(path.name + ".tmp")
    with open(tmp, "wb") as fh:
        fh.write(struct.pack("<4sIQ", _MAGIC, _VERSION, len(head)))
        fh.write(head)
        fh.write(payload)
    os.replace(tmp, path)


def load_checkpoint(
    path: str | Path, expect_fingerprint: str | None = None, force: bool = False
) -> Checkpoint:
    try:
        blob = Path(path).read_bytes()
    except FileNotFoundError:
        raise CheckpointError(f"checkpoint not found: {path}") from None
    if len(blob) < 16 or blob[:4] != _MAGIC:
        raise CheckpointError("not a checkpoint file (bad magic)")
    version, head_len = struct.unpack_from("<IQ", blob, 4)
    if version != _VERSION:
        raise CheckpointError(f"unsupported checkpoint version {version}")
    if len(blob) < 16 + head_len:
        raise CheckpointError("truncated checkpoint header")
    try:
        header = json.loads(blob[16 : 16 + head_len])
    except json.JSONDecodeError:
        raise CheckpointError("corrupt checkpoint header") from None
    payload = blob[16 + head_len :]
    digest = hashlib.sha256(payload).hexdigest()
    if digest != header["payload_sha256"]:
        raise CheckpointError("checkpoint payload checksum mismatch (truncated or corrupt)")
    if expect_fingerprint is not None and header["fingerprint"] != expect_fingerprint:
        if not force:
            raise CheckpointError(
                "checkpoint was written under a different config "
                f"({header['fingerprint'][:12]}... vs {expect_fingerprint[:12]}...); "
                "pass --force to load anyway"
            )
    params: dict[str, np.ndarray] = {}
    moments: dict[str, np.ndarray] = {}
    for span in header["tensors"]:
        raw = payload[span["offset"] : span["offset"] + span["length"]]
        arr = mstn_loads(raw)
        name = span["name"]
        if name.startswith("p."):
            params[name[2:]] = arr
        elif name.startswith("o."):
            moments[name[2:]] = arr
        else:
            raise CheckpointError(f"unknown tensor kind {name!r}")
    return Checkpoint(
        fingerprint=header["fingerprint"],
        step=int(header["step"]),
        params=params,
        opt_t=int(header["opt_t"]),
        opt_moments=moments,
        rng_state=header["rng_state"],
    )


# ---------------------------------------------------------------------------
# model <-> checkpoint


def rng_state_to_json(rng: np.random.Generator) -> dict:
    return rng.bit_generator.state


def rng_from_json(state: dict) -> np.random.Generator:
    rng = np.random.default_rng(0)
    rng.bit_generator.state = state
    return rng


def snapshot(model, fingerprint: str, step: int, opt=None, rng=None) -> Checkpoint:
    """Capture params (and optionally optimizer/rng state) from any object
    with named_params()."""
    params = {k: p.data.copy() for k, p in model.named_params().items()}
    return Checkpoint(
        fingerprint=fingerprint,
        step=step,
        params=params,
        opt_t=0 if opt is None else opt.t,
        opt_moments={} if opt is None else {k: v.copy() for k, v in opt.state_arrays().items()},
        rng_state=None if rng is None else rng_state_to_json(rng),
    )


def restore(ckpt: Checkpoint, model, opt=None, strict: bool = True):
    """Copy checkpoint arrays into the model (and optimizer); returns the
    restored rng (or None). With strict=False, parameters missing from the
    checkpoint are left at their current values (used to warm-start a
    fine-tune model whose head is new)."""
    params = model.named_params()
    missing = set(params) - set(ckpt.params)
    if strict and missing:
        raise CheckpointError(f"checkpoint lacks parameters: {sorted(missing)[:4]}...")
    for k, p in params.items():
        if k not in ckpt.params:
            continue
        arr = ckpt.params[k]
        if arr.shape != p.data.shape:
            raise CheckpointError(
                f"shape mismatch for {k}: checkpoint {arr.shape} vs model {p.data.shape}"
            )
        p.data = arr.copy()
    if opt is not None and ckpt.opt_moments:
        opt.load_state_arrays(ckpt.opt_moments, ckpt.opt_t)
    return None if ckpt.rng_state is None else rng_from_json(ckpt.rng_state)
