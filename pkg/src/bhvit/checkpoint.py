"""Versioned binary checkpoints.

Layout (all integers little-endian)::

    b"BHVT" | u32 version | u64 header_len | JSON header | tensor payload

The JSON header carries the model and training configs, the epoch, the
optimizer step and a tensor table. Each entry names a tensor, its kind
(``dense-f32`` or ``bitpacked``), logical shape, and byte offset/length in
the payload. ``bitpacked`` tensors hold a binary layer's weight signs as
64-bit LSB-first words (one row per output channel) followed by the
per-channel float32 scale.
"""

from __future__ import annotations

import json
import struct
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from . import bitpack
from .errors import ConfigError, ShapeError
from .model import BHViT, ModelConfig

MAGIC = b"BHVT"
VERSION = 1
DENSE = "dense-f32"
PACKED = "bitpacked"


class CheckpointError(ConfigError):
    pass


def _resolve(model, dotted: str):
    obj = model
    for part in dotted.split("."):
        obj = obj[int(part)] if isinstance(obj, list) else getattr(obj, part)
    return obj


def _owner(model, name: str):
    return _resolve(model, name.rsplit(".", 1)[0])


class _Writer:
    def __init__(self):
        self.table: list[dict] = []
        self.chunks: list[bytes] = []
        self.offset = 0

    def _put(self, raw: bytes) -> int:
        start = self.offset
        self.chunks.append(raw)
        self.offset += len(raw)
        return start

    def dense(self, name: str, arr: np.ndarray):
        raw = np.ascontiguousarray(arr, dtype="<f4").tobytes()
        self.table.append({"name": name, "kind": DENSE, "shape": list(np.shape(arr)),
                           "offset": self._put(raw), "nbytes": len(raw)})

    def packed(self, name: str, weight: np.ndarray, scale: np.ndarray):
        shape = list(weight.shape)
        cout = shape[-1]
        rows = np.where(weight.reshape(-1, cout).T >= 0, 1, -1).astype(np.int8)
        bm = bitpack.pack(rows)
        words = bm.words.astype("<u8").tobytes()
        sc = np.ascontiguousarray(scale, dtype="<f4").tobytes()
        self.table.append({"name": name, "kind": PACKED, "shape": shape, "rows": bm.rows, "cols": bm.cols,
                           "offset": self._put(words), "nbytes": len(words),
                           "scale_offset": self._put(sc), "scale_nbytes": len(sc)})


def save_checkpoint(path, model: BHViT, optimizer=None, epoch: int = 0, train_config=None,
                    packed: bool = False) -> Path:
    """Write ``model`` (and optionally optimizer state) to ``path``.

    ``packed=True`` stores binary-layer weights as signs plus scales; the
    result reproduces the forward pass exactly but drops latent magnitudes,
    so it is meant for inference.
    """
    w = _Writer()
    binary = {n for n, _ in model.binary_weights()}
    for name, p in model.named_parameters():
        owner = _owner(model, name) if name in binary else None
        if name in binary and packed:
            w.packed("param:" + name, p.data, owner.alpha())
            continue
        w.dense("param:" + name, p.data)
        if owner is not None and owner.frozen_alpha is not None:
            w.dense("alpha:" + name, owner.frozen_alpha)
    for name, buf in model.named_buffers():
        w.dense("buffer:" + name, buf)
    opt_meta = None
    if optimizer is not None:
        state = optimizer.state_dict()
        opt_meta = {"t": state["t"]}
        for key in ("m", "v"):
            for name, arr in state[key].items():
                w.dense(f"optim.{key}:{name}", arr)
    tc = train_config.to_dict() if hasattr(train_config, "to_dict") else train_config
    header = {
        "version": VERSION,
        "epoch": int(epoch),
        "model_config": model.config.to_dict(),
        "train_config": tc,
        "optimizer": opt_meta,
        "tensors": w.table,
    }
    hdr = json.dumps(header).encode("utf-8")
    path = Path(path)
    tmp = path.with_suffix(path.suffix + ".tmp")
    with open(tmp, "wb") as fh:
        fh.write(MAGIC + struct.pack("<IQ", VERSION, len(hdr)))
        fh.write(hdr)
        for chunk in w.chunks:
            fh.write(chunk)
    tmp.replace(path)
    return path


@dataclass
class Checkpoint:
    model: BHViT
    epoch: int
    train_config: dict | None
    optimizer_state: dict | None


def read_header(path) -> tuple[dict, int]:
    path = Path(path)
    if not path.is_file():
        from .data import DataFileError

        raise DataFileError(path, "checkpoint")
    with open(path, "rb") as fh:
        head = fh.read(16)
        if len(head) < 16 or head[:4] != MAGIC:
            raise CheckpointError(f"{path}: not a BHVT checkpoint")
        version, hlen = struct.unpack("<IQ", head[4:])
        if version != VERSION:
            raise CheckpointError(f"{path}: unsupported checkpoint version {version}")
        header = json.loads(fh.read(hlen).decode("utf-8"))
    return header, 16 + hlen


def load_checkpoint(path) -> Checkpoint:
    header, base = read_header(path)
    blob = Path(path).read_bytes()[base:]
    model = BHViT(ModelConfig.from_dict({k: v for k, v in header["model_config"].items()}))
    params = dict(model.named_parameters())
    buffers = dict(model.named_buffers())
    opt_state = {"t": header["optimizer"]["t"], "m": {}, "v": {}} if header["optimizer"] else None

    def dense(entry) -> np.ndarray:
        arr = np.frombuffer(blob, dtype="<f4", count=entry["nbytes"] // 4, offset=entry["offset"])
        return arr.reshape(entry["shape"]).astype(np.float32)

    seen = set()
    for entry in header["tensors"]:
        kind, name = entry["name"].split(":", 1)
        if kind == "param":
            if name not in params:
                raise CheckpointError(f"checkpoint tensor {name} has no matching parameter")
            target = params[name]
            if list(target.shape) != entry["shape"]:
                raise ShapeError(f"{name}: checkpoint shape {entry['shape']} vs model {list(target.shape)}")
            if entry["kind"] == PACKED:
                words = np.frombuffer(blob, dtype="<u8", count=entry["nbytes"] // 8, offset=entry["offset"])
                bm = bitpack.BitMatrix(entry["rows"], entry["cols"],
                                       words.astype(np.uint64).reshape(entry["rows"], -1).copy())
                signs = bm.unpack().T.reshape(entry["shape"]).astype(np.float32)
                scale = np.frombuffer(blob, dtype="<f4", count=entry["scale_nbytes"] // 4,
                                      offset=entry["scale_offset"]).astype(np.float32)
                target.data[...] = signs
                _owner(model, name).frozen_alpha = scale
            else:
                target.data[...] = dense(entry)
            seen.add(name)
        elif kind == "alpha":
            _owner(model, name).frozen_alpha = dense(entry)
        elif kind == "buffer":
            if name not in buffers:
                raise CheckpointError(f"checkpoint buffer {name} has no matching buffer")
            buffers[name][...] = dense(entry)
        elif kind.startswith("optim.") and opt_state is not None:
            opt_state[kind.split(".", 1)[1]][name] = dense(entry)
        else:
            raise CheckpointError(f"unknown tensor entry {entry['name']}")
    missing = set(params) - seen
    if missing:
        raise CheckpointError(f"checkpoint lacks parameters: {sorted(missing)[:5]}")
    return Checkpoint(model, header["epoch"], header.get("train_config"), opt_state)
