"""Binary model checkpoints.

Layout: magic "DACP", u32 version, u32 spec fingerprint, u32 entry
count, then one entry per tensor: u16 name length, utf-8 name, u8
rank, u32 extent per dimension, raw little-endian float32 values.
Parameter entries come first in store order, followed by the frozen
per-layer normalization statistics under names suffixed ".src_mu" /
".src_sigma".  Everything is validated on load; a flipped header byte
or a truncated file fails loudly rather than producing a model.
"""

from __future__ import annotations

import struct
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .errors import ConfigError, FormatError

MAGIC = b"DACP"
VERSION = 1
_MAX_RANK = 8


@dataclass
class Checkpoint:
    fingerprint: int
    params: dict = field(default_factory=dict)       # name -> float32 ndarray
    src_stats: dict = field(default_factory=dict)    # layer name -> (mu, sigma) float32
    version: int = VERSION


def checkpoint_from_model(model) -> Checkpoint:
    ckpt = Checkpoint(fingerprint=model.spec.fingerprint())
    for p in model.store:
        ckpt.params[p.name] = p.tensor.data.astype(np.float32).copy()
    for name in model.bn_order:
        layer = model.bn_layers[name]
        ckpt.src_stats[name] = (layer.src_mu.copy(), layer.src_sigma.copy())
    return ckpt


def apply_checkpoint(model, ckpt: Checkpoint) -> None:
    """Load weights and source stats into the model; training/adaptation state resets."""
    if ckpt.fingerprint != model.spec.fingerprint():
        raise ConfigError(f"checkpoint fingerprint {ckpt.fingerprint} does not match "
                          f"model spec fingerprint {model.spec.fingerprint()}")
    names = {p.name for p in model.store}
    if set(ckpt.params) != names:
        missing = sorted(names - set(ckpt.params))
        extra = sorted(set(ckpt.params) - names)
        raise FormatError(f"checkpoint parameter names do not match model "
                          f"(missing {missing}, unexpected {extra})")
    for p in model.store:
        arr = ckpt.params[p.name]
        if arr.shape != p.tensor.data.shape:
            raise FormatError(f"checkpoint entry {p.name} has shape {arr.shape}, "
                              f"model expects {p.tensor.data.shape}")
        p.tensor.data = arr.astype(p.tensor.data.dtype).copy()
        p.tensor.grad = None
        p.m = None
        p.v = None
    model.store.step_count = 0
    if set(ckpt.src_stats) != set(model.bn_order):
        raise FormatError("checkpoint normalization stats do not match model layers")
    for name in model.bn_order:
        mu, sigma = ckpt.src_stats[name]
        layer = model.bn_layers[name]
        if mu.shape != (layer.channels,) or sigma.shape != (layer.channels,):
            raise FormatError(f"stats for {name} have {mu.shape[0]} channels, "
                              f"layer has {layer.channels}")
        layer.src_mu = mu.copy()
        layer.src_sigma = sigma.copy()
    if model.adapt_states is not None:
        model.make_adapt_states(
            gamma_hp=next(iter(model.adapt_states.values())).gamma_hp,
            alpha_hp=next(iter(model.adapt_states.values())).alpha_hp,
        )


def save_checkpoint(ckpt: Checkpoint, path) -> None:
    entries: list[tuple[str, np.ndarray]] = list(ckpt.params.items())
    for name, (mu, sigma) in ckpt.src_stats.items():
        entries.append((name + ".src_mu", mu))
        entries.append((name + ".src_sigma", sigma))

    chunks = [MAGIC, struct.pack("<II I", ckpt.version, ckpt.fingerprint & 0xFFFFFFFF,
                                 len(entries))]
    for name, arr in entries:
        raw = name.encode()
        arr = np.ascontiguousarray(arr, dtype="<f4")
        chunks.append(struct.pack("<H", len(raw)))
        chunks.append(raw)
        chunks.append(struct.pack("<B", arr.ndim))
        chunks.append(struct.pack(f"<{arr.ndim}I", *arr.shape))
        chunks.append(arr.tobytes())
    Path(path).write_bytes(b"".join(chunks))


def load_checkpoint(path) -> Checkpoint:
    path = Path(path)
    if not path.exists():
        raise ConfigError(f"checkpoint file not found: {path}")
    blob = path.read_bytes()
    off = 0

    def take(n: int, what: str) -> bytes:
        nonlocal off
        if off + n > len(blob):
            raise FormatError(f"checkpoint {path} truncated while reading {what} "
                              f"(offset {off}, need {n} bytes)")
        piece = blob[off:off + n]
        off += n
        return piece

    if take(4, "magic") != MAGIC:
        raise FormatError(f"{path} is not a checkpoint file (bad magic)")
    version, fingerprint, count = struct.unpack("<III", take(12, "header"))
    if version != VERSION:
        raise FormatError(f"{path}: unsupported checkpoint version {version}")

    params: dict = {}
    stats_raw: dict = {}
    for i in range(count):
        (nlen,) = struct.unpack("<H", take(2, f"entry {i} name length"))
        try:
            name = take(nlen, f"entry {i} name").decode()
        except UnicodeDecodeError as e:
            raise FormatError(f"{path}: entry {i} name is not valid utf-8") from e
        (rank,) = struct.unpack("<B", take(1, f"{name} rank"))
        if rank > _MAX_RANK:
            raise FormatError(f"{path}: entry {name} has implausible rank {rank}")
        shape = struct.unpack(f"<{rank}I", take(4 * rank, f"{name} extents"))
        size = 1
        for ext in shape:
            size *= ext
        if size > len(blob):
            raise FormatError(f"{path}: entry {name} claims {size} values, "
                              f"more than the file could hold")
        arr = np.frombuffer(take(4 * size, f"{name} values"), dtype="<f4").reshape(shape).copy()
        if not np.all(np.isfinite(arr)):
            raise FormatError(f"{path}: entry {name} contains non-finite values")
        if name.endswith(".src_mu") or name.endswith(".src_sigma"):
            stats_raw[name] = arr
        else:
            params[name] = arr
    if off != len(blob):
        raise FormatError(f"{path}: {len(blob) - off} trailing bytes after last entry")

    src_stats: dict = {}
    for name, arr in stats_raw.items():
        if name.endswith(".src_mu"):
            base = name[:-len(".src_mu")]
            sig = stats_raw.get(base + ".src_sigma")
            if sig is None:
                raise FormatError(f"{path}: {name} has no matching .src_sigma entry")
            if sig.shape != arr.shape:
                raise FormatError(f"{path}: stats shapes for {base} disagree")
            src_stats[base] = (arr, sig)
        else:
            base = name[:-len(".src_sigma")]
            if base + ".src_mu" not in stats_raw:
                raise FormatError(f"{path}: {name} has no matching .src_mu entry")
    return Checkpoint(fingerprint=fingerprint, params=params, src_stats=src_stats,
                      version=version)
