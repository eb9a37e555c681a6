"""NNCP1 checkpoints.

Layout: ``b"NNCP1"``, u32-LE manifest length, UTF-8 JSON manifest, then the
f64-LE tensors listed in ``manifest["tensors"]`` back to back. The manifest
carries the layer descriptors, head span, epoch, seed, Adam step and the
training history; tensors carry parameters, batchnorm statistics, Adam moments,
the best-validation snapshot and any influence products of ISR/ISP.
"""
from __future__ import annotations

import json
import struct
from pathlib import Path

import numpy as np

from inflrobust import nn
from inflrobust.training import TrainState

MAGIC = b"NNCP1"
FORMAT_VERSION = 1


class CheckpointError(ValueError):
    def __init__(self, msg: str, offset: int | None = None):
        super().__init__(msg if offset is None else f"{msg} (byte offset {offset})")
        self.offset = offset


def _tensors(state: TrainState) -> list[tuple[str, np.ndarray]]:
    net = state.net
    out = [("params", net.params)]
    for i, b in enumerate(net.buffers):
        for k in sorted(b):
            out.append((f"buffer.{i}.{k}", b[k]))
    out += [("adam.m", state.adam.m), ("adam.v", state.adam.v)]
    if state.best_params is not None:
        out.append(("best.params", state.best_params))
        for i, b in enumerate(state.best_buffers):
            for k in sorted(b):
                out.append((f"best.buffer.{i}.{k}", b[k]))
    for k in sorted(state.aux):
        out.append((f"aux.{k}", np.asarray(state.aux[k])))
    return out


def checkpoint_bytes(state: TrainState, meta: dict | None = None) -> bytes:
    net, adam = state.net, state.adam
    tensors = _tensors(state)
    manifest = {
        "format": "NNCP1",
        "version": FORMAT_VERSION,
        "layers": net.describe(),
        "input_shape": list(net.input_shape),
        "head_span": [net.head_span.start, net.head_span.stop],
        "epoch": net.epoch,
        "seed": net.seed,
        "adam": {"lr": adam.lr, "beta1": adam.beta1, "beta2": adam.beta2, "eps": adam.eps, "step": adam.step},
        "history": state.history,
        "best_epoch": state.best_epoch,
        "best_val": state.best_val,
        "aux_int": sorted(k for k, v in state.aux.items() if np.asarray(v).dtype.kind in "iub"),
        "tensors": [{"name": n, "shape": list(np.shape(a))} for n, a in tensors],
        "meta": meta or {},
    }
    head = json.dumps(manifest, sort_keys=True, separators=(",", ":")).encode()
    body = b"".join(np.ascontiguousarray(a, dtype="<f8").tobytes() for _, a in tensors)
    return MAGIC + struct.pack("<I", len(head)) + head + body


def parse_checkpoint(buf: bytes) -> tuple[TrainState, dict]:
    if buf[:5] != MAGIC:
        raise CheckpointError(f"bad magic {bytes(buf[:5])!r}, expected 'NNCP1'", 0)
    if len(buf) < 9:
        raise CheckpointError("truncated before manifest length", len(buf))
    (n,) = struct.unpack_from("<I", buf, 5)
    if 9 + n > len(buf):
        raise CheckpointError(f"manifest length {n} exceeds file size", 5)
    try:
        man = json.loads(buf[9 : 9 + n])
    except ValueError as exc:
        raise CheckpointError(f"manifest is not valid JSON: {exc}", 9) from None
    if man.get("version") != FORMAT_VERSION:
        raise CheckpointError(f"unsupported checkpoint version {man.get('version')!r}", 9)

    net = nn.Network(man["layers"], man["input_shape"], seed=None)
    if [net.head_span.start, net.head_span.stop] != man["head_span"]:
        raise CheckpointError("head_span in manifest disagrees with the layer descriptors", 9)
    off = 9 + n
    arrays = {}
    for t in man["tensors"]:
        count = int(np.prod(t["shape"], dtype=np.int64))
        end = off + 8 * count
        if end > len(buf):
            raise CheckpointError(f"buffer {t['name']!r} needs {8 * count} bytes, "
                                  f"{len(buf) - off} remain", off)
        arrays[t["name"]] = np.frombuffer(buf, "<f8", count, off).astype(np.float64).reshape(t["shape"])
        off = end
    if off != len(buf):
        raise CheckpointError(f"{len(buf) - off} bytes after the last buffer", off)

    if arrays["params"].shape != net.params.shape:
        raise CheckpointError(f"params buffer has {arrays['params'].size} values, "
                              f"layers need {net.params.size}", 9 + n)
    net.params = arrays["params"].copy()
    for i, b in enumerate(net.buffers):
        for k in b:
            b[k] = arrays[f"buffer.{i}.{k}"].copy()
    net.epoch = man["epoch"]
    net.seed = man["seed"]
    a = man["adam"]
    adam = nn.AdamState(len(net.params), a["lr"], a["beta1"], a["beta2"], a["eps"], a["step"],
                        arrays["adam.m"].copy(), arrays["adam.v"].copy())
    state = TrainState(net, adam, man["history"], best_epoch=man["best_epoch"], best_val=man["best_val"])
    if "best.params" in arrays:
        state.best_params = arrays["best.params"].copy()
        state.best_buffers = [{k: arrays[f"best.buffer.{i}.{k}"].copy() for k in b}
                              for i, b in enumerate(net.buffers)]
    ints = set(man.get("aux_int", []))
    for name, arr in arrays.items():
        if name.startswith("aux."):
            key = name[4:]
            state.aux[key] = arr.astype(np.int64) if key in ints else arr.copy()
    return state, man["meta"]


def save_checkpoint(state: TrainState, path, meta: dict | None = None) -> None:
    path = Path(path)
    tmp = path.with_name(path.name + ".tmp")
    tmp.write_bytes(checkpoint_bytes(state, meta))
    tmp.replace(path)


def load_checkpoint(path) -> tuple[TrainState, dict]:
    return parse_checkpoint(Path(path).read_bytes())
