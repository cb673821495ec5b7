"""Binary checkpoints.

Layout (little-endian): b"DCRF", u32 version, u32 header length, UTF-8 JSON
header, u32 array count, then per array: u32 name length, name, u32 ndim,
u64 per dim, float64 payload. Arrays are written in sorted name order so
that save -> load -> save is byte-identical.
"""
from __future__ import annotations

import json
import struct
from dataclasses import dataclass, field

import numpy as np

from .config import RunConfig, config_from_dict
from .crf import PairwiseModel
from .data_io import atomic_write_bytes
from .learning import apply_crf_params, crf_params
from .optim import OptimState
from .unary import make_provider

MAGIC = b"DCRF"
VERSION = 1


class CheckpointError(ValueError):
    pass


@dataclass
class Checkpoint:
    config: dict
    arrays: dict = field(default_factory=dict)
    meta: dict = field(default_factory=dict)


def encode(ckpt: Checkpoint) -> bytes:
    header = json.dumps({"config": ckpt.config, "meta": ckpt.meta}, sort_keys=True).encode("utf-8")
    out = [MAGIC, struct.pack("<II", VERSION, len(header)), header, struct.pack("<I", len(ckpt.arrays))]
    for name in sorted(ckpt.arrays):
        arr = np.asarray(ckpt.arrays[name], dtype="<f8")
        key = name.encode("utf-8")
        out.append(struct.pack("<I", len(key)) + key)
        out.append(struct.pack("<I", arr.ndim) + struct.pack(f"<{arr.ndim}Q", *arr.shape))
        out.append(np.ascontiguousarray(arr).tobytes())
    return b"".join(out)


def decode(buf: bytes) -> Checkpoint:
    pos = 0

    def take(n):
        nonlocal pos
        if pos + n > len(buf):
            raise CheckpointError(f"truncated checkpoint at byte {pos}")
        chunk = buf[pos:pos + n]
        pos += n
        return chunk

    if take(4) != MAGIC:
        raise CheckpointError("not a checkpoint (bad magic)")
    version, hlen = struct.unpack("<II", take(8))
    if version != VERSION:
        raise CheckpointError(f"unsupported checkpoint version {version}")
    try:
        header = json.loads(take(hlen).decode("utf-8"))
    except (UnicodeDecodeError, json.JSONDecodeError) as exc:
        raise CheckpointError(f"corrupt checkpoint header: {exc}") from exc
    (count,) = struct.unpack("<I", take(4))
    arrays = {}
    for _ in range(count):
        (klen,) = struct.unpack("<I", take(4))
        name = take(klen).decode("utf-8")
        (ndim,) = struct.unpack("<I", take(4))
        shape = struct.unpack(f"<{ndim}Q", take(8 * ndim))
        size = int(np.prod(shape, dtype=np.int64))
        arrays[name] = np.frombuffer(take(8 * size), dtype="<f8").reshape(shape).astype(np.float64)
    if pos != len(buf):
        raise CheckpointError(f"{len(buf) - pos} trailing bytes in checkpoint")
    return Checkpoint(header["config"], arrays, header.get("meta", {}))


def save(path, ckpt: Checkpoint):
    atomic_write_bytes(path, encode(ckpt))


def load(path) -> Checkpoint:
    try:
        with open(path, "rb") as fh:
            buf = fh.read()
    except OSError as exc:
        raise CheckpointError(f"cannot read checkpoint {path}: {exc}") from exc
    return decode(buf)


# ---------------------------------------------------------------------------
# Training state <-> checkpoint


@dataclass
class TrainingState:
    config: RunConfig
    provider: object
    model: PairwiseModel
    optim: OptimState
    epoch: int = 0
    step: int = 0
    best_miou: float = float("-inf")


def pack_state(st: TrainingState, extra_meta=None) -> Checkpoint:
    arrays = {f"unary.{k}": v for k, v in st.provider.params.items()}
    arrays["stats.mean"] = st.provider.mean
    arrays["stats.std"] = st.provider.std
    arrays.update(crf_params(st.model))
    for k, v in st.optim.velocity.items():
        arrays[f"velocity.{k}"] = v
    arrays["counters"] = np.array([st.epoch, st.step], dtype=np.float64)
    arrays["best_miou"] = np.array([st.best_miou])
    meta = dict(extra_meta or {})
    return Checkpoint(st.config.to_dict(), arrays, meta)


def unpack_state(ckpt: Checkpoint, config: RunConfig | None = None, crf_from_config=False) -> TrainingState:
    """Rebuild training state; ``config`` overrides the stored one for hyperparameters.

    With ``crf_from_config`` the CRF parameters (and their velocities) start
    from the config instead of the checkpoint, as when a unary-only run is
    continued jointly.
    """
    stored = config_from_dict(ckpt.config)
    cfg = config or stored
    if cfg.labels != stored.labels or cfg.unary != stored.unary:
        raise CheckpointError("checkpoint labels/unary kind do not match the config")
    a = ckpt.arrays
    provider = make_provider(cfg.unary, cfg.labels, seed=cfg.training.seed)
    for k in provider.params:
        key = f"unary.{k}"
        if key not in a or a[key].shape != provider.params[k].shape:
            raise CheckpointError(f"checkpoint lacks a matching {key}")
        provider.params[k] = a[key].copy()
    provider.mean = a["stats.mean"].copy()
    provider.std = a["stats.std"].copy()
    model = cfg.model() if crf_from_config else stored.model()
    if model.num_kernels != cfg.model().num_kernels:
        raise CheckpointError("checkpoint kernels do not match the config")
    crf = {} if crf_from_config else {k: v.copy() for k, v in a.items() if k.startswith("crf.")}
    if "crf.w" in crf:
        model.weights = crf["crf.w"]
    if "crf.mu" in crf:
        model.compat.matrix = crf["crf.mu"]
    apply_crf_params(model, crf)
    optim = cfg.optim_state(provider, model)
    optim.velocity = {k[len("velocity."):]: v.copy() for k, v in a.items()
                      if k.startswith("velocity.") and not (crf_from_config and k.startswith("velocity.crf."))}
    epoch, step = (int(x) for x in a["counters"])
    return TrainingState(cfg, provider, model, optim, epoch, step, float(a["best_miou"][0]))
