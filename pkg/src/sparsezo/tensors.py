"""Layered parameter storage with a deterministic flat order and binary checkpoints.

A ParameterSet is an ordered list of named dense tensors. All iteration and
update code walks elements in one canonical order: ascending layer id, then
row-major element index within the layer. That order is what makes seeded
perturbations replayable across runs.

A set expects a single mutator at a time; concurrent readers are fine
between updates (no internal locking).
"""

from __future__ import annotations

import struct
from dataclasses import dataclass

import numpy as np

from .errors import CheckpointError, NumericError, StructuralError

_DTYPE_CODES = {np.dtype(np.float32): 0, np.dtype(np.float64): 1}
_CODE_DTYPES = {code: dt for dt, code in _DTYPE_CODES.items()}
_LE_DTYPES = {0: np.dtype("<f4"), 1: np.dtype("<f8")}

MAGIC = b"SZCK"
FORMAT_VERSION = 1


@dataclass
class LayerTensor:
    """One named dense tensor; values are kept C-contiguous."""

    layer_id: int
    name: str
    values: np.ndarray

    def __post_init__(self):
        self.values = np.ascontiguousarray(self.values)
        if self.values.dtype not in _DTYPE_CODES:
            raise StructuralError(
                f"layer {self.name!r}: unsupported element type {self.values.dtype}"
            )
        if self.values.size == 0:
            raise StructuralError(f"layer {self.name!r} is empty")

    @property
    def shape(self):
        return self.values.shape

    @property
    def size(self):
        return int(self.values.size)

    @property
    def flat(self):
        """Row-major 1-D view of the values (shares memory)."""
        return self.values.reshape(-1)


class ParameterSet:
    """Ordered collection of layers; the optimizer state."""

    def __init__(self, layers):
        layers = list(layers)
        if not layers:
            self.layers = []
            return
        ids = [t.layer_id for t in layers]
        if sorted(ids) != list(range(len(layers))):
            raise StructuralError(f"layer ids must be dense 0..N-1, got {ids}")
        layers.sort(key=lambda t: t.layer_id)
        dtypes = {t.values.dtype for t in layers}
        if len(dtypes) != 1:
            raise StructuralError(f"mixed element types in one set: {dtypes}")
        self.layers = layers

    @classmethod
    def from_arrays(cls, named_arrays):
        """Build from [(name, array), ...]; layer ids follow list order."""
        return cls(
            LayerTensor(i, name, np.asarray(arr))
            for i, (name, arr) in enumerate(named_arrays)
        )

    @property
    def total_params(self):
        return sum(t.size for t in self.layers)

    @property
    def dtype(self):
        return self.layers[0].values.dtype if self.layers else np.dtype(np.float64)

    def copy(self):
        return ParameterSet(
            LayerTensor(t.layer_id, t.name, t.values.copy()) for t in self.layers
        )

    def astype(self, dtype):
        return ParameterSet(
            LayerTensor(t.layer_id, t.name, t.values.astype(dtype))
            for t in self.layers
        )

    def flat_values(self):
        """Concatenated copy of all values in flat order."""
        if not self.layers:
            return np.empty(0, dtype=np.float64)
        return np.concatenate([t.flat for t in self.layers])

    def check_finite(self):
        for t in self.layers:
            finite = np.isfinite(t.flat)
            if not finite.all():
                idx = int(np.argmin(finite))
                raise NumericError(
                    f"non-finite value in layer {t.name!r} at flat index {idx}",
                    layer_name=t.name,
                    index=idx,
                )

    def allclose(self, other, rtol=0.0, atol=0.0):
        if self.total_params != other.total_params:
            return False
        return all(
            np.allclose(a.values, b.values, rtol=rtol, atol=atol)
            for a, b in zip(self.layers, other.layers)
        )

    def __repr__(self):
        return (
            f"ParameterSet({len(self.layers)} layers, "
            f"{self.total_params} params, {self.dtype})"
        )


def values_provider(p):
    """Provider serving a set's resident (unperturbed) layer values."""

    def provider(layer_id):
        return p.layers[layer_id].values

    return provider


def flat_view(p):
    """Iterate (layer_id, element_index, value) in the canonical flat order."""
    for tensor in p.layers:
        flat = tensor.flat
        for i in range(flat.shape[0]):
            yield (tensor.layer_id, i, float(flat[i]))


def axpy_into(p, scale, source):
    """In place, set each element to theta_i + scale * src_i in flat order.

    `source` must yield exactly total_params elements. The whole update is
    validated before any layer is written, so a failure leaves p untouched.
    """
    src = np.asarray(
        source if not hasattr(source, "__next__") else list(source),
        dtype=np.float64,
    ).reshape(-1)
    if src.shape[0] != p.total_params:
        raise StructuralError(
            f"source has {src.shape[0]} elements, expected {p.total_params}"
        )
    updated = []
    offset = 0
    for tensor in p.layers:
        chunk = src[offset : offset + tensor.size].astype(tensor.values.dtype)
        offset += tensor.size
        if scale == 0.0:
            updated.append(None)  # bit-exact no-op
            continue
        with np.errstate(over="ignore", invalid="ignore"):
            new = tensor.flat + tensor.values.dtype.type(scale) * chunk
        finite = np.isfinite(new)
        if not finite.all():
            idx = int(np.argmin(finite))
            raise NumericError(
                f"axpy produced non-finite value in layer {tensor.name!r} "
                f"at flat index {idx}",
                layer_name=tensor.name,
                index=idx,
            )
        updated.append(new)
    for tensor, new in zip(p.layers, updated):
        if new is not None:
            tensor.flat[:] = new


# ---------------------------------------------------------------------------
# checkpoint format
#
# All integers little-endian. Layout:
#   magic "SZCK" | version u8 | n_layers u32
#   per layer: name_len u16 | name utf-8 | rank u8 | extents u64*rank
#              | dtype code u8 (0=f32, 1=f64) | payload offset u64
#   payload: concatenated raw little-endian value blocks
# Offsets are relative to the end of the header and must tile the payload
# exactly, in layer order.
# ---------------------------------------------------------------------------


def save_checkpoint(p, path):
    header = bytearray()
    header += MAGIC
    header += struct.pack("<B", FORMAT_VERSION)
    header += struct.pack("<I", len(p.layers))
    offset = 0
    blocks = []
    for tensor in p.layers:
        name_bytes = tensor.name.encode("utf-8")
        code = _DTYPE_CODES[tensor.values.dtype]
        header += struct.pack("<H", len(name_bytes))
        header += name_bytes
        header += struct.pack("<B", len(tensor.shape))
        header += struct.pack(f"<{len(tensor.shape)}Q", *tensor.shape)
        header += struct.pack("<B", code)
        header += struct.pack("<Q", offset)
        block = tensor.values.astype(_LE_DTYPES[code], copy=False).tobytes()
        blocks.append(block)
        offset += len(block)
    with open(path, "wb") as fh:
        fh.write(bytes(header))
        for block in blocks:
            fh.write(block)


def load_checkpoint(path):
    with open(path, "rb") as fh:
        data = fh.read()
    view = memoryview(data)
    pos = 0

    def take(n, what):
        nonlocal pos
        if pos + n > len(data):
            raise CheckpointError(f"truncated checkpoint while reading {what}")
        out = view[pos : pos + n]
        pos += n
        return out

    if bytes(take(4, "magic")) != MAGIC:
        raise CheckpointError("bad magic bytes; not a checkpoint file")
    (version,) = struct.unpack("<B", take(1, "version"))
    if version != FORMAT_VERSION:
        raise CheckpointError(f"unsupported checkpoint version {version}")
    (n_layers,) = struct.unpack("<I", take(4, "layer count"))

    manifest = []
    for i in range(n_layers):
        (name_len,) = struct.unpack("<H", take(2, f"layer {i} name length"))
        name = bytes(take(name_len, f"layer {i} name")).decode("utf-8")
        (rank,) = struct.unpack("<B", take(1, f"layer {name!r} rank"))
        shape = struct.unpack(f"<{rank}Q", take(8 * rank, f"layer {name!r} extents"))
        (code,) = struct.unpack("<B", take(1, f"layer {name!r} dtype"))
        if code not in _CODE_DTYPES:
            raise CheckpointError(f"layer {name!r}: unknown element-type code {code}")
        (offset,) = struct.unpack("<Q", take(8, f"layer {name!r} offset"))
        manifest.append((name, shape, code, offset))

    payload_start = pos
    payload_size = len(data) - payload_start
    expected = 0
    layers = []
    for layer_id, (name, shape, code, offset) in enumerate(manifest):
        nbytes = int(np.prod(shape, dtype=np.int64)) * _LE_DTYPES[code].itemsize
        if offset != expected:
            raise CheckpointError(
                f"layer {name!r}: manifest offset {offset} does not match "
                f"payload position {expected}"
            )
        expected += nbytes
        if offset + nbytes > payload_size:
            raise CheckpointError(
                f"layer {name!r}: manifest shape needs {nbytes} bytes at offset "
                f"{offset} but payload has {payload_size}"
            )
        start = payload_start + offset
        raw = np.frombuffer(data, dtype=_LE_DTYPES[code], count=-1, offset=start)
        raw = raw[: int(np.prod(shape, dtype=np.int64))]
        values = raw.astype(_CODE_DTYPES[code]).reshape(shape)
        layers.append(LayerTensor(layer_id, name, values))
    if expected != payload_size:
        raise CheckpointError(
            f"payload has {payload_size - expected} trailing bytes beyond manifest"
        )
    loaded = ParameterSet(layers)
    loaded.check_finite()
    return loaded
