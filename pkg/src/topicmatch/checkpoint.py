"""Binary checkpoint format.

Layout (little-endian)::

    b"TFMCKPT1"  u32 version
    u32 len, config hash (ascii)
    u32 len, config text (utf-8, ``key = value`` lines)
    u32 entry count
    per entry: u32 len, name (utf-8) | u32 ndim | ndim x u32 extents | float32 values
"""
import logging
import struct

import numpy as np
import torch

from .config import parse_config

MAGIC = b"TFMCKPT1"
VERSION = 1

log = logging.getLogger(__name__)


class CheckpointError(ValueError):
    pass


def _pack_str(s):
    b = s.encode("utf-8")
    return struct.pack("<I", len(b)) + b


def write_checkpoint(path, entries, config):
    """Write ordered ``(name, array)`` entries; arrays are stored as float32."""
    parts = [MAGIC, struct.pack("<I", VERSION), _pack_str(config.hash()),
             _pack_str(config.to_text()), struct.pack("<I", len(entries))]
    for name, value in entries:
        arr = np.ascontiguousarray(np.asarray(value, dtype="<f4"))
        parts.append(_pack_str(name))
        parts.append(struct.pack("<I", arr.ndim))
        parts.append(struct.pack(f"<{arr.ndim}I", *arr.shape))
        parts.append(arr.tobytes())
    with open(path, "wb") as fh:
        fh.write(b"".join(parts))


def read_checkpoint(path, expected_config=None):
    """Return (entries, config, stored hash). Warns when ``expected_config`` differs."""
    with open(path, "rb") as fh:
        data = fh.read()
    if data[:8] != MAGIC:
        raise CheckpointError(f"{path}: not a checkpoint (bad magic)")
    pos = 8

    def take(fmt):
        nonlocal pos
        size = struct.calcsize(fmt)
        if pos + size > len(data):
            raise CheckpointError(f"{path}: truncated")
        out = struct.unpack_from(fmt, data, pos)
        pos += size
        return out

    def take_str():
        nonlocal pos
        (n,) = take("<I")
        if pos + n > len(data):
            raise CheckpointError(f"{path}: truncated")
        s = data[pos:pos + n].decode("utf-8")
        pos += n
        return s

    (version,) = take("<I")
    if version != VERSION:
        raise CheckpointError(f"{path}: unsupported version {version}")
    stored_hash = take_str()
    config = parse_config(take_str())
    (count,) = take("<I")
    entries = []
    for _ in range(count):
        name = take_str()
        (ndim,) = take("<I")
        shape = take(f"<{ndim}I") if ndim else ()
        n = int(np.prod(shape, dtype=np.int64))
        if pos + 4 * n > len(data):
            raise CheckpointError(f"{path}: truncated entry {name}")
        arr = np.frombuffer(data, dtype="<f4", count=n, offset=pos).reshape(shape).copy()
        pos += 4 * n
        entries.append((name, arr))
    if stored_hash != config.hash():
        log.warning("%s: stored config hash %s does not match its config text", path, stored_hash)
    if expected_config is not None and expected_config.hash() != stored_hash:
        log.warning("config hash mismatch: checkpoint %s was written with %s, current config is %s",
                    path, stored_hash, expected_config.hash())
    return entries, config, stored_hash


def model_entries(model):
    return [(name, t.detach().cpu().float().numpy())
            for name, t in model.state_dict().items() if t.is_floating_point()]


def optimizer_entries(model, optimizer):
    names = {id(p): n for n, p in model.named_parameters()}
    out = []
    for group in optimizer.param_groups:
        for p in group["params"]:
            state = optimizer.state.get(p)
            if not state:
                continue
            for key in ("exp_avg", "exp_avg_sq"):
                out.append((f"optim.{names[id(p)]}.{key}", state[key].detach().cpu().float().numpy()))
            out.append((f"optim.{names[id(p)]}.step", np.array([float(state["step"])])))
    return out


def save_training_state(path, model, optimizer, step, config):
    entries = model_entries(model)
    if optimizer is not None:
        entries += optimizer_entries(model, optimizer)
    entries.append(("meta.step", np.array([float(step)])))
    write_checkpoint(path, entries, config)


def load_into(model, entries, optimizer=None):
    """Copy entries into ``model`` (and optimizer state); returns the stored step."""
    table = dict(entries)
    state = model.state_dict()
    missing = [k for k, t in state.items() if t.is_floating_point() and k not in table]
    if missing:
        raise CheckpointError(f"checkpoint lacks parameters: {missing[:5]}")
    with torch.no_grad():
        for k, t in state.items():
            if not t.is_floating_point():
                continue
            src = torch.from_numpy(table[k])
            if tuple(src.shape) != tuple(t.shape):
                raise CheckpointError(f"shape mismatch for {k}: {tuple(src.shape)} vs {tuple(t.shape)}")
            t.copy_(src.to(t.dtype))
    if optimizer is not None:
        params = dict(model.named_parameters())
        for name, p in params.items():
            key = f"optim.{name}"
            if f"{key}.exp_avg" not in table:
                continue
            optimizer.state[p] = {
                "step": torch.tensor(float(table[f"{key}.step"][0])),
                "exp_avg": torch.from_numpy(table[f"{key}.exp_avg"]).to(p.dtype).clone(),
                "exp_avg_sq": torch.from_numpy(table[f"{key}.exp_avg_sq"]).to(p.dtype).clone(),
            }
    return int(table["meta.step"][0]) if "meta.step" in table else 0


def load_model(path, expected_config=None, overrides=None):
    from .matcher import TopicMatcher

    entries, config, _ = read_checkpoint(path, expected_config)
    if overrides:
        config = config.override(**overrides)
    model = TopicMatcher(config)
    load_into(model, entries)
    model.eval()
    return model
