"""Single-file model checkpoints (format tag ``dfa-ckpt-1``).

Layout, all text lines ASCII and ``\\n``-terminated::

    dfa-ckpt-1
    config <nbytes>        followed by canonical JSON of the ModelConfig
    rng <nbytes>           followed by JSON of the RNG state (or null)
    tensors <count>
    <name> <f4|f8> <d0,d1,...> <nbytes>   then the little-endian payload

Parameters are followed by batch-norm running statistics, stored as
``<layer>.running_mean`` / ``<layer>.running_var``.
"""

from __future__ import annotations

import io
import json
import os
from typing import BinaryIO

import numpy as np

from .models import ModelConfig, build_model
from .nn import Module

VERSION = "dfa-ckpt-1"
_DTYPES = {"f4": np.dtype("<f4"), "f8": np.dtype("<f8")}


class CheckpointError(ValueError):
    pass


def state_arrays(model: Module) -> dict[str, np.ndarray]:
    out = {name: p.data for name, p in model.named_parameters()}
    for name, st in model.named_states():
        out[f"{name}.running_mean"] = st.mean
        out[f"{name}.running_var"] = st.var
    return out


def load_state_arrays(model: Module, arrays: dict[str, np.ndarray]) -> None:
    params = dict(model.named_parameters())
    states = dict(model.named_states())
    expected = set(params) | {f"{n}.running_{s}" for n in states for s in ("mean", "var")}
    if set(arrays) != expected:
        missing = sorted(expected - set(arrays))
        extra = sorted(set(arrays) - expected)
        raise CheckpointError(f"tensor names do not match model (missing={missing[:5]}, extra={extra[:5]})")
    for name, p in params.items():
        if arrays[name].shape != p.shape:
            raise CheckpointError(f"{name}: shape {arrays[name].shape} != {p.shape}")
        p.data = arrays[name].astype(p.dtype, copy=True)
    for name, st in states.items():
        st.mean = arrays[f"{name}.running_mean"].astype(st.mean.dtype, copy=True)
        st.var = arrays[f"{name}.running_var"].astype(st.var.dtype, copy=True)


def _tag(arr: np.ndarray) -> str:
    if arr.dtype == np.float32:
        return "f4"
    if arr.dtype == np.float64:
        return "f8"
    raise CheckpointError(f"unsupported dtype {arr.dtype}")


def write_checkpoint(dest: str | os.PathLike | BinaryIO, config: ModelConfig, model: Module,
                     rng_state: dict | None = None) -> None:
    buf = io.BytesIO()
    cfg = config.to_json().encode()
    rng = json.dumps(rng_state, sort_keys=True, separators=(",", ":")).encode()
    buf.write(f"{VERSION}\n".encode())
    buf.write(f"config {len(cfg)}\n".encode() + cfg + b"\n")
    buf.write(f"rng {len(rng)}\n".encode() + rng + b"\n")
    arrays = state_arrays(model)
    buf.write(f"tensors {len(arrays)}\n".encode())
    for name, arr in arrays.items():
        tag = _tag(arr)
        payload = np.ascontiguousarray(arr, dtype=_DTYPES[tag]).tobytes()
        shape = ",".join(str(d) for d in arr.shape)
        buf.write(f"{name} {tag} {shape} {len(payload)}\n".encode() + payload)
    data = buf.getvalue()
    if hasattr(dest, "write"):
        dest.write(data)
    else:
        with open(dest, "wb") as fh:
            fh.write(data)


def _line(stream: BinaryIO) -> str:
    pos = stream.tell()
    raw = stream.readline()
    if not raw.endswith(b"\n"):
        raise CheckpointError(f"truncated header at byte {pos}")
    return raw[:-1].decode("ascii")


def _block(stream: BinaryIO, key: str) -> bytes:
    pos = stream.tell()
    parts = _line(stream).split(" ")
    if len(parts) != 2 or parts[0] != key:
        raise CheckpointError(f"expected '{key} <nbytes>' at byte {pos}")
    n = int(parts[1])
    data = stream.read(n)
    if len(data) != n or stream.read(1) != b"\n":
        raise CheckpointError(f"truncated {key} block at byte {pos}")
    return data


def read_checkpoint(src: str | os.PathLike | BinaryIO):
    """Returns ``(config, arrays, rng_state)``."""
    if hasattr(src, "read"):
        stream = src
    else:
        with open(src, "rb") as fh:
            stream = io.BytesIO(fh.read())
    version = _line(stream)
    if version != VERSION:
        raise CheckpointError(f"unsupported checkpoint version {version!r}")
    config = ModelConfig.from_json(_block(stream, "config").decode())
    rng_state = json.loads(_block(stream, "rng").decode())
    head = _line(stream).split(" ")
    if len(head) != 2 or head[0] != "tensors":
        raise CheckpointError("missing tensor count")
    arrays = {}
    for _ in range(int(head[1])):
        pos = stream.tell()
        name, tag, shape_s, nbytes = _line(stream).split(" ")
        if tag not in _DTYPES:
            raise CheckpointError(f"unknown dtype tag {tag!r} at byte {pos}")
        shape = tuple(int(d) for d in shape_s.split(",")) if shape_s else ()
        payload = stream.read(int(nbytes))
        if len(payload) != int(nbytes):
            raise CheckpointError(f"truncated payload for {name} at byte {pos}")
        arr = np.frombuffer(payload, dtype=_DTYPES[tag]).reshape(shape)
        arrays[name] = arr.astype(arr.dtype.newbyteorder("="))
    return config, arrays, rng_state


def load_model(src, seed: int = 0):
    """Rebuild a model from a checkpoint; returns ``(config, model, rng_state)``."""
    config, arrays, rng_state = read_checkpoint(src)
    model = build_model(config, seed)
    load_state_arrays(model, arrays)
    return config, model, rng_state
