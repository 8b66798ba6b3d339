"""BTSF: a small binary container for models, banks and training state.

Layout (all integers little-endian)::

    b"BTSF" | u32 version | u64 metadata length | metadata JSON | payload

The metadata is UTF-8 JSON with sorted keys.  Its ``tensors`` list gives
each tensor's name, shape and byte offset into the payload, which holds
the raw little-endian float32 data in directory order.  Writing is
deterministic, so equal content gives equal bytes.
"""

from __future__ import annotations

import json
import struct
from pathlib import Path

import numpy as np

from .approximators import ApproximatorBank
from .model import LanguageModel, ModelConfig, TrainState

MAGIC = b"BTSF"
VERSION = 1
_HEADER = struct.Struct("<4sIQ")
_F32 = np.dtype("<f4")


class CheckpointError(ValueError):
    pass


def dumps(tensors: dict[str, np.ndarray], meta: dict | None = None) -> bytes:
    """Serialize float32 tensors plus a JSON-able metadata dict."""
    directory = []
    chunks = []
    offset = 0
    for name, arr in tensors.items():
        a = np.asarray(arr)
        if not np.issubdtype(a.dtype, np.floating) and not np.issubdtype(a.dtype, np.integer):
            raise CheckpointError(f"tensor {name!r} has unsupported dtype {a.dtype}")
        data = np.array(a, dtype=_F32, order="C")
        if not np.array_equal(data.astype(a.dtype), a):
            raise CheckpointError(f"tensor {name!r} is not exactly representable as float32")
        directory.append({"name": name, "shape": list(data.shape), "offset": offset})
        raw = data.tobytes()
        chunks.append(raw)
        offset += len(raw)
    doc = {"meta": meta or {}, "tensors": directory}
    blob = json.dumps(doc, sort_keys=True, separators=(",", ":"), allow_nan=False).encode("utf-8")
    return _HEADER.pack(MAGIC, VERSION, len(blob)) + blob + b"".join(chunks)


def loads(buf: bytes) -> tuple[dict[str, np.ndarray], dict]:
    """Inverse of :func:`dumps`; validates every directory entry."""
    if len(buf) < _HEADER.size:
        raise CheckpointError("file too short for a BTSF header")
    magic, version, n = _HEADER.unpack_from(buf)
    if magic != MAGIC:
        raise CheckpointError(f"bad magic {magic!r}, not a BTSF file")
    if version != VERSION:
        raise CheckpointError(f"unsupported BTSF version {version}")
    start = _HEADER.size + n
    if start > len(buf):
        raise CheckpointError("metadata block runs past end of file")
    try:
        doc = json.loads(buf[_HEADER.size:start].decode("utf-8"))
    except (UnicodeDecodeError, json.JSONDecodeError) as exc:
        raise CheckpointError(f"unreadable metadata: {exc}") from None
    payload = memoryview(buf)[start:]
    tensors: dict[str, np.ndarray] = {}
    expected = 0
    for entry in doc.get("tensors", []):
        name, shape, off = entry["name"], tuple(entry["shape"]), entry["offset"]
        if name in tensors:
            raise CheckpointError(f"duplicate tensor name {name!r}")
        size = int(np.prod(shape, dtype=np.int64)) * _F32.itemsize
        if off != expected or off + size > len(payload):
            raise CheckpointError(f"tensor {name!r} has an out-of-bounds offset")
        tensors[name] = np.frombuffer(payload[off:off + size], dtype=_F32).reshape(shape).astype(np.float32)
        expected = off + size
    if expected != len(payload):
        raise CheckpointError("payload size does not match the tensor directory")
    return tensors, doc.get("meta", {})


def write(path, tensors: dict[str, np.ndarray], meta: dict | None = None) -> None:
    Path(path).write_bytes(dumps(tensors, meta))


def read(path) -> tuple[dict[str, np.ndarray], dict]:
    p = Path(path)
    if not p.is_file():
        raise FileNotFoundError(f"no checkpoint at {p}")
    return loads(p.read_bytes())


# ---------------------------------------------------------------------------
# typed payloads
# ---------------------------------------------------------------------------


def _bank_tensors(banks: dict[str, ApproximatorBank]) -> tuple[dict, dict]:
    tensors, meta = {}, {}
    for key in sorted(banks):
        b = banks[key]
        tensors[f"bank.{key}.bounds"] = b.bounds
        tensors[f"bank.{key}.params"] = b.params
        tensors[f"bank.{key}.segment"] = b.segment
        meta[key] = {"kind": b.kind, "steps": b.steps, "partition": b.partition, "tail": b.tail,
                     "tail_slope": b.tail_slope, "mse": b.mse if np.isfinite(b.mse) else None}
    return tensors, meta


def _banks_from(tensors: dict, meta: dict) -> dict[str, ApproximatorBank]:
    banks = {}
    for key, m in meta.items():
        try:
            bounds = tensors[f"bank.{key}.bounds"]
            params = tensors[f"bank.{key}.params"]
            segment = tensors[f"bank.{key}.segment"]
        except KeyError as exc:
            raise CheckpointError(f"bank {key!r} is missing tensor {exc.args[0]!r}") from None
        bank = ApproximatorBank(m["kind"], bounds.astype(np.float64), params.astype(np.float64),
                                segment.astype(np.int64), m["steps"], m["partition"], m["tail"], m["tail_slope"])
        bank.mse = float("nan") if m["mse"] is None else m["mse"]
        banks[key] = bank
    return banks


def model_tensors(model: LanguageModel, state: TrainState | None = None) -> tuple[dict, dict]:
    tensors: dict[str, np.ndarray] = {}
    for name in sorted(model.params):
        tensors[f"param.{name}"] = model.params[name]
    for site in sorted(model.calibration):
        tensors[f"calib.{site}"] = np.float32(model.calibration[site])
    for site in sorted(model.neurons):
        tensors[f"neuron.{site}"] = model.neurons[site]
    bank_t, bank_m = _bank_tensors(model.banks)
    tensors.update(bank_t)
    meta = {"config": model.config.to_dict(), "banks": bank_m}
    if state is not None:
        for name in sorted(state.slots):
            tensors[f"opt.{name}"] = state.slots[name]
        for site in sorted(state.ema):
            tensors[f"ema.{site}"] = np.float32(state.ema[site])
        meta["train_state"] = {"step": state.step, "epoch": state.epoch, "batch": state.batch}
    return tensors, meta


def _strip(tensors: dict, prefix: str) -> dict[str, np.ndarray]:
    n = len(prefix)
    return {k[n:]: v for k, v in tensors.items() if k.startswith(prefix)}


def model_from(tensors: dict, meta: dict) -> tuple[LanguageModel, TrainState | None]:
    if "config" not in meta:
        raise CheckpointError("checkpoint has no model config")
    cfg = ModelConfig.from_dict(meta["config"])
    model = LanguageModel(
        cfg,
        _strip(tensors, "param."),
        {k: float(v) for k, v in _strip(tensors, "calib.").items()},
        _banks_from(tensors, meta.get("banks", {})),
        _strip(tensors, "neuron."),
    )
    state = None
    if "train_state" in meta:
        ts = meta["train_state"]
        state = TrainState(ts["step"], ts["epoch"], ts["batch"], _strip(tensors, "opt."),
                           {k: float(v) for k, v in _strip(tensors, "ema.").items()})
    return model, state


def save_model(path, model: LanguageModel, state: TrainState | None = None, extra: dict | None = None) -> None:
    tensors, meta = model_tensors(model, state)
    if extra:
        meta["extra"] = extra
    write(path, tensors, meta)


def load_model(path) -> tuple[LanguageModel, TrainState | None, dict]:
    tensors, meta = read(path)
    model, state = model_from(tensors, meta)
    return model, state, meta.get("extra", {})


def save_banks(path, banks: dict[str, ApproximatorBank], extra: dict | None = None) -> None:
    tensors, meta = _bank_tensors(banks)
    write(path, tensors, {"banks": meta, **({"extra": extra} if extra else {})})


def load_banks(path) -> dict[str, ApproximatorBank]:
    tensors, meta = read(path)
    if "banks" not in meta:
        raise CheckpointError(f"{path} holds no approximator banks")
    return _banks_from(tensors, meta["banks"])
