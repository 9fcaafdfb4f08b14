"""Directory-based tensor container: ``manifest.json`` plus one raw binary per tensor.

Every tensor is stored little-endian and row-major with exactly its declared
shape, so a round trip is byte-exact.
"""

from __future__ import annotations

import json
import math
import os
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .containers import Activation, ActivationBatch, DataError, FfnWeights, Predictor

MANIFEST_NAME = "manifest.json"

DTYPES = {"f32": np.dtype("<f4"), "f64": np.dtype("<f8")}


@dataclass(frozen=True)
class TensorEntry:
    name: str
    dtype: str
    shape: tuple[int, ...]
    file: str
    layout: str = "row-major"
    endianness: str = "little"

    @property
    def nbytes(self) -> int:
        return math.prod(self.shape) * DTYPES[self.dtype].itemsize

    def to_json(self) -> dict:
        return {"name": self.name, "dtype": self.dtype, "shape": list(self.shape),
                "file": self.file, "layout": self.layout, "endianness": self.endianness}


@dataclass(frozen=True)
class TensorManifest:
    root: Path
    entries: list[TensorEntry] = field(default_factory=list)

    def names(self) -> list[str]:
        return [e.name for e in self.entries]

    def __contains__(self, name: str) -> bool:
        return any(e.name == name for e in self.entries)

    def entry(self, name: str) -> TensorEntry:
        for e in self.entries:
            if e.name == name:
                return e
        raise DataError(f"container {self.root} has no entry {name!r} (has {self.names()})")


def _parse_entry(raw, root: Path) -> TensorEntry:
    if not isinstance(raw, dict):
        raise DataError(f"manifest entry must be an object, got {type(raw).__name__}")
    try:
        name, dtype, shape, file = raw["name"], raw["dtype"], raw["shape"], raw["file"]
    except KeyError as exc:
        raise DataError(f"manifest entry missing field {exc.args[0]!r}") from None
    if dtype not in DTYPES:
        raise DataError(f"entry {name!r}: unknown dtype {dtype!r} (expected f32 or f64)")
    if (not isinstance(shape, list) or not shape
            or not all(isinstance(n, int) and not isinstance(n, bool) and n > 0 for n in shape)):
        raise DataError(f"entry {name!r}: shape must be a non-empty list of positive integers, got {shape!r}")
    layout = raw.get("layout", "row-major")
    endianness = raw.get("endianness", "little")
    if layout != "row-major" or endianness != "little":
        raise DataError(f"entry {name!r}: only row-major little-endian tensors are supported")
    rel = Path(file)
    if rel.is_absolute() or ".." in rel.parts:
        raise DataError(f"entry {name!r}: file must be a relative path inside the container")
    entry = TensorEntry(name, dtype, tuple(shape), str(file), layout, endianness)
    path = root / rel
    if not path.is_file():
        raise DataError(f"entry {name!r}: missing binary {path}")
    size = path.stat().st_size
    if size != entry.nbytes:
        raise DataError(f"entry {name!r}: {path.name} holds {size} bytes but shape {list(shape)} "
                        f"{dtype} needs {entry.nbytes}")
    return entry


def load_manifest(path) -> TensorManifest:
    """Parse and validate ``<path>/manifest.json`` without reading payloads."""
    root = Path(path)
    mpath = root / MANIFEST_NAME
    if not mpath.is_file():
        raise DataError(f"no {MANIFEST_NAME} in {root}")
    try:
        raw = json.loads(mpath.read_text())
    except json.JSONDecodeError as exc:
        raise DataError(f"malformed manifest {mpath}: {exc}") from None
    if not isinstance(raw, dict) or not isinstance(raw.get("entries"), list):
        raise DataError(f"manifest {mpath} must be an object with an 'entries' list")
    entries = [_parse_entry(e, root) for e in raw["entries"]]
    names = [e.name for e in entries]
    if len(set(names)) != len(names):
        raise DataError(f"manifest {mpath} has duplicate entry names")
    return TensorManifest(root, entries)


def read_tensor(manifest: TensorManifest, name: str) -> np.ndarray:
    e = manifest.entry(name)
    data = np.fromfile(manifest.root / e.file, dtype=DTYPES[e.dtype])
    return data.reshape(e.shape)


def write_tensors(path, tensors: dict[str, np.ndarray]) -> TensorManifest:
    """Write ``tensors`` as a new container at ``path`` (created if needed).

    Arrays keep their dtype (f32 or f64); anything else is rejected rather
    than silently converted.
    """
    root = Path(path)
    root.mkdir(parents=True, exist_ok=True)
    entries = []
    for name, arr in tensors.items():
        arr = np.asarray(arr)
        tag = {np.dtype("float32"): "f32", np.dtype("float64"): "f64"}.get(arr.dtype.newbyteorder("="))
        if tag is None:
            raise DataError(f"tensor {name!r}: unsupported dtype {arr.dtype}")
        if arr.ndim == 0 or 0 in arr.shape:
            raise DataError(f"tensor {name!r}: shape {arr.shape} must have positive dimensions")
        fname = f"{name}.bin"
        payload = np.ascontiguousarray(arr, dtype=DTYPES[tag]).tobytes(order="C")
        (root / fname).write_bytes(payload)
        entries.append(TensorEntry(name, tag, tuple(int(n) for n in arr.shape), fname))
    doc = {"entries": [e.to_json() for e in entries]}
    tmp = root / (MANIFEST_NAME + ".tmp")
    tmp.write_text(json.dumps(doc, indent=2) + "\n")
    os.replace(tmp, root / MANIFEST_NAME)
    return TensorManifest(root, entries)


def load_ffn_weights(manifest: TensorManifest, activation="reglu") -> FfnWeights:
    return FfnWeights(
        gate=read_tensor(manifest, "gate"),
        up=read_tensor(manifest, "up"),
        down=read_tensor(manifest, "down"),
        activation=Activation.parse(activation),
    )


def save_ffn_weights(weights: FfnWeights, path) -> TensorManifest:
    return write_tensors(path, {"gate": weights.gate, "up": weights.up, "down": weights.down})


def load_activation_batch(manifest: TensorManifest, name: str = "x") -> ActivationBatch:
    x = read_tensor(manifest, name)
    if x.ndim != 2:
        raise DataError(f"entry {name!r} must be d x N, got shape {x.shape}")
    return ActivationBatch(x)


def save_activation_batch(batch: ActivationBatch, path, name: str = "x") -> TensorManifest:
    return write_tensors(path, {name: batch.x_cols})


def save_predictor(pred: Predictor, path) -> TensorManifest:
    return write_tensors(path, {"A": pred.A, "B": pred.B, "bias": pred.bias})


def load_predictor(path) -> Predictor:
    m = load_manifest(path)
    return Predictor(read_tensor(m, "A"), read_tensor(m, "B"), read_tensor(m, "bias"))
