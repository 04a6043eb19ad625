"""Binary file formats. All integers and floats are little-endian.

CVKM  model checkpoint
    b"CVKM" | version u16 | class_count u32 | layer_count u32
    per layer: name_len u16 | name utf-8 | kind u8 | ndims u8 | dims u32[ndims]
               | parameters float32[...]  (dense: weight, bias; conv2d: kernel, bias)

CVKC  CAV store
    b"CVKC" | version u16 | record_count u32
    per record: concept_len u16 | concept | layer_len u16 | layer | run_id i32
                | flags u8 (bit 0: random-random CAV) | length u32
                | direction float32[length] | bias float32 | holdout_accuracy float32

ACTV1 activation dump
    b"ACTV" | version u16 = 1 | name_len u16 | layer name | sample_count u32
    | vector_length u32 | payload float32[sample_count * vector_length] (row-major)
    then zero or more gradient blocks: b"G" | class u16 | float32 payload of the same dims
"""

from __future__ import annotations

import io
import os
import struct
import tempfile
from dataclasses import dataclass, field
from pathlib import Path
from typing import BinaryIO

import numpy as np

from .cav import Cav
from .diffmodel import LayeredModel, build_layer

CVKM_MAGIC = b"CVKM"
CVKC_MAGIC = b"CVKC"
ACTV_MAGIC = b"ACTV"
CVKM_VERSION = 1
CVKC_VERSION = 1
ACTV_VERSION = 1

_PARAM_ORDER = {"dense": ("weight", "bias"), "conv2d": ("kernel", "bias")}


class FormatError(ValueError):
    pass


def atomic_write(path, data: bytes) -> None:
    """Write to a temporary file in the target directory, then rename."""
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    fd, tmp = tempfile.mkstemp(dir=path.parent, prefix=f".{path.name}.", suffix=".tmp")
    try:
        with os.fdopen(fd, "wb") as fh:
            fh.write(data)
        os.replace(tmp, path)
    except BaseException:
        if os.path.exists(tmp):
            os.unlink(tmp)
        raise


def _read_exact(fh: BinaryIO, n: int, what: str) -> bytes:
    data = fh.read(n)
    if len(data) != n:
        raise FormatError(f"truncated file while reading {what}")
    return data


def _unpack(fh: BinaryIO, fmt: str, what: str):
    return struct.unpack(fmt, _read_exact(fh, struct.calcsize(fmt), what))


def _write_str(out: BinaryIO, s: str) -> None:
    raw = s.encode("utf-8")
    if len(raw) > 0xFFFF:
        raise FormatError(f"name too long: {s[:40]!r}...")
    out.write(struct.pack("<H", len(raw)))
    out.write(raw)


def _read_str(fh: BinaryIO, what: str) -> str:
    (n,) = _unpack(fh, "<H", f"{what} length")
    return _read_exact(fh, n, what).decode("utf-8")


def _read_f32(fh: BinaryIO, count: int, what: str) -> np.ndarray:
    return np.frombuffer(_read_exact(fh, 4 * count, what), dtype="<f4").astype(np.float32)


def _check_magic(fh: BinaryIO, magic: bytes, supported: int) -> int:
    got = fh.read(len(magic))
    if got != magic:
        raise FormatError(f"bad magic {got!r}, expected {magic!r}")
    (version,) = _unpack(fh, "<H", "version")
    if version != supported:
        raise FormatError(f"unsupported {magic.decode()} version {version}")
    return version


# --------------------------------------------------------------------------
# CVKM


def model_to_bytes(model: LayeredModel) -> bytes:
    out = io.BytesIO()
    out.write(CVKM_MAGIC)
    out.write(struct.pack("<HII", CVKM_VERSION, model.class_count, len(model.layers)))
    for layer in model.layers:
        _write_str(out, layer.name)
        dims = layer.shape_dims()
        out.write(struct.pack("<BB", layer.tag, len(dims)))
        out.write(struct.pack(f"<{len(dims)}I", *dims))
        for key in _PARAM_ORDER.get(layer.kind, ()):
            out.write(np.ascontiguousarray(layer.params[key], dtype="<f4").tobytes())
    return out.getvalue()


def model_from_bytes(data: bytes) -> LayeredModel:
    fh = io.BytesIO(data)
    _check_magic(fh, CVKM_MAGIC, CVKM_VERSION)
    class_count, n_layers = _unpack(fh, "<II", "header")
    layers = []
    for _ in range(n_layers):
        name = _read_str(fh, "layer name")
        tag, ndims = _unpack(fh, "<BB", "layer kind")
        dims = _unpack(fh, f"<{ndims}I", "layer dims")
        try:
            layer = build_layer(tag, name, dims)
        except (ValueError, IndexError) as exc:
            raise FormatError(f"layer {name!r}: {exc}") from exc
        for key in _PARAM_ORDER.get(layer.kind, ()):
            shape = layer.params[key].shape
            layer.params[key] = _read_f32(fh, int(np.prod(shape)), f"{name}.{key}").reshape(shape)
        layers.append(layer)
    if fh.read(1):
        raise FormatError("trailing bytes after last layer")
    return LayeredModel(layers, class_count)


def save_model(path, model: LayeredModel) -> None:
    atomic_write(path, model_to_bytes(model))


def load_model(path) -> LayeredModel:
    return model_from_bytes(Path(path).read_bytes())


# --------------------------------------------------------------------------
# CVKC


def cavs_to_bytes(cavs) -> bytes:
    out = io.BytesIO()
    out.write(CVKC_MAGIC)
    out.write(struct.pack("<HI", CVKC_VERSION, len(cavs)))
    for cav in cavs:
        _write_str(out, cav.concept_name)
        _write_str(out, cav.layer_name)
        out.write(struct.pack("<iBI", cav.run_id, 1 if cav.is_random else 0, cav.size))
        out.write(np.ascontiguousarray(cav.direction, dtype="<f4").tobytes())
        out.write(struct.pack("<ff", cav.bias, cav.holdout_accuracy))
    return out.getvalue()


def cavs_from_bytes(data: bytes) -> list[Cav]:
    fh = io.BytesIO(data)
    _check_magic(fh, CVKC_MAGIC, CVKC_VERSION)
    (count,) = _unpack(fh, "<I", "record count")
    cavs = []
    for _ in range(count):
        concept = _read_str(fh, "concept name")
        layer = _read_str(fh, "layer name")
        run_id, flags, length = _unpack(fh, "<iBI", "record header")
        direction = _read_f32(fh, length, "direction").astype(np.float64)
        bias, acc = _unpack(fh, "<ff", "bias/accuracy")
        cavs.append(Cav(concept, layer, direction, bias, acc, run_id=run_id, is_random=bool(flags & 1)))
    if fh.read(1):
        raise FormatError("trailing bytes after last CAV record")
    return cavs


def save_cavs(path, cavs) -> None:
    atomic_write(path, cavs_to_bytes(list(cavs)))


def load_cavs(path) -> list[Cav]:
    return cavs_from_bytes(Path(path).read_bytes())


# --------------------------------------------------------------------------
# ACTV1


@dataclass
class ActivationDump:
    layer_name: str
    payload: np.ndarray
    gradients: dict = field(default_factory=dict)  # class index -> float32 matrix

    def __post_init__(self) -> None:
        self.payload = _as_matrix_f32(self.payload, "payload")
        for k, g in list(self.gradients.items()):
            g = _as_matrix_f32(g, f"gradient for class {k}")
            if g.shape != self.payload.shape:
                raise ValueError(f"gradient block for class {k} has shape {g.shape}, payload {self.payload.shape}")
            self.gradients[int(k)] = g

    @property
    def sample_count(self) -> int:
        return self.payload.shape[0]

    @property
    def vector_length(self) -> int:
        return self.payload.shape[1]


def _as_matrix_f32(a, what: str) -> np.ndarray:
    a = np.asarray(a, dtype=np.float32)
    if a.ndim != 2:
        raise ValueError(f"{what} must be a sample_count x vector_length matrix")
    if not np.all(np.isfinite(a)):
        raise ValueError(f"{what} contains non-finite values")
    return a


def dump_to_bytes(dump: ActivationDump) -> bytes:
    out = io.BytesIO()
    out.write(ACTV_MAGIC)
    out.write(struct.pack("<H", ACTV_VERSION))
    _write_str(out, dump.layer_name)
    out.write(struct.pack("<II", dump.sample_count, dump.vector_length))
    out.write(np.ascontiguousarray(dump.payload, dtype="<f4").tobytes())
    for k in sorted(dump.gradients):
        out.write(b"G")
        out.write(struct.pack("<H", k))
        out.write(np.ascontiguousarray(dump.gradients[k], dtype="<f4").tobytes())
    return out.getvalue()


def dump_from_bytes(data: bytes) -> ActivationDump:
    fh = io.BytesIO(data)
    _check_magic(fh, ACTV_MAGIC, ACTV_VERSION)
    name = _read_str(fh, "layer name")
    n, d = _unpack(fh, "<II", "dimensions")
    payload = _read_f32(fh, n * d, "payload").reshape(n, d)
    grads = {}
    while True:
        tag = fh.read(1)
        if not tag:
            break
        if tag != b"G":
            raise FormatError(f"unknown block tag {tag!r}")
        (k,) = _unpack(fh, "<H", "gradient class")
        grads[k] = _read_f32(fh, n * d, f"gradient block {k}").reshape(n, d)
    return ActivationDump(name, payload, grads)


def save_dump(path, dump: ActivationDump) -> None:
    atomic_write(path, dump_to_bytes(dump))


def load_dump(path) -> ActivationDump:
    return dump_from_bytes(Path(path).read_bytes())
