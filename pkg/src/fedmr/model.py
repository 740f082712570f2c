"""Layered parameter containers, model arithmetic, and serialization.

A model is an ordered tuple of immutable :class:`LayerBlock` values. Every dense
layer of an MLP contributes two blocks (weight, then bias) with consecutive
``layer_index``. All parameters are float64.
"""

from __future__ import annotations

import hashlib
import io
import json
import math
import struct
from dataclasses import dataclass, field
from pathlib import Path
from typing import Iterable, Sequence

import numpy as np

from . import _kernels
from .errors import (
    DegenerateNormError,
    EmptyAggregateError,
    InvalidArchitectureError,
    ShapeMismatchError,
)

_MAGIC = b"FMRM"
_FORMAT_VERSION = 1


def arch_fingerprint(shapes: Iterable[Sequence[int]]) -> str:
    text = ";".join("x".join(str(d) for d in s) for s in shapes)
    return hashlib.sha1(text.encode()).hexdigest()[:16]


@dataclass(frozen=True)
class ArchitectureSpec:
    """Dense ReLU network; softmax cross-entropy head on the last layer."""

    layer_dims: tuple[tuple[int, int], ...]
    activation: str = "relu"

    def __post_init__(self):
        dims = tuple((int(i), int(o)) for i, o in self.layer_dims)
        object.__setattr__(self, "layer_dims", dims)
        if not dims:
            raise InvalidArchitectureError("architecture has no layers")
        for i, o in dims:
            if i < 1 or o < 1:
                raise InvalidArchitectureError(f"layer dims must be >= 1, got ({i}, {o})")
        for (_, o), (i, _) in zip(dims, dims[1:]):
            if o != i:
                raise InvalidArchitectureError(f"layer dims do not chain: {o} -> {i}")
        if self.activation != "relu":
            raise InvalidArchitectureError(f"unsupported activation {self.activation!r}")

    @classmethod
    def from_sizes(cls, sizes: Sequence[int]) -> "ArchitectureSpec":
        """``[32, 64, 10]`` -> two dense layers 32->64->10."""
        if len(sizes) < 2:
            raise InvalidArchitectureError("need at least input and output sizes")
        return cls(tuple(zip(sizes[:-1], sizes[1:])))

    @property
    def sizes(self) -> list[int]:
        return [self.layer_dims[0][0]] + [o for _, o in self.layer_dims]

    @property
    def dims(self) -> np.ndarray:
        return np.asarray(self.sizes, dtype=np.int64)

    @property
    def in_dim(self) -> int:
        return self.layer_dims[0][0]

    @property
    def num_classes(self) -> int:
        return self.layer_dims[-1][1]

    def block_shapes(self) -> list[tuple[int, ...]]:
        shapes: list[tuple[int, ...]] = []
        for i, o in self.layer_dims:
            shapes.append((i, o))
            shapes.append((o,))
        return shapes

    @property
    def arch_id(self) -> str:
        return arch_fingerprint(self.block_shapes())

    def to_dict(self) -> dict:
        return {"sizes": self.sizes, "activation": self.activation}


@dataclass(frozen=True, eq=False)
class LayerBlock:
    layer_index: int
    shape: tuple[int, ...]
    values: np.ndarray = field(repr=False)

    def __post_init__(self):
        shape = tuple(int(d) for d in self.shape)
        object.__setattr__(self, "shape", shape)
        vals = np.asarray(self.values, dtype=np.float64).reshape(-1)
        if vals.size != math.prod(shape):
            raise ShapeMismatchError(
                f"layer {self.layer_index}: {vals.size} values for shape {shape}"
            )
        if vals.flags.writeable:
            vals = vals.copy()
            vals.flags.writeable = False
        object.__setattr__(self, "values", vals)

    @property
    def size(self) -> int:
        return self.values.size

    def array(self) -> np.ndarray:
        return self.values.reshape(self.shape)

    def digest(self) -> str:
        h = hashlib.sha1(struct.pack("<I", self.layer_index))
        h.update(self.values.astype("<f8").tobytes())
        return h.hexdigest()


@dataclass(frozen=True, eq=False)
class LayeredModel:
    arch_id: str
    layers: tuple[LayerBlock, ...]

    def __post_init__(self):
        layers = tuple(self.layers)
        object.__setattr__(self, "layers", layers)
        seen = [b.layer_index for b in layers]
        if len(set(seen)) != len(seen):
            raise ShapeMismatchError("duplicate layer_index in model")

    @classmethod
    def from_arrays(cls, arrays: Sequence[np.ndarray]) -> "LayeredModel":
        blocks = tuple(
            LayerBlock(i, np.shape(a), np.asarray(a, dtype=np.float64)) for i, a in enumerate(arrays)
        )
        return cls(arch_fingerprint(b.shape for b in blocks), blocks)

    @property
    def n_layers(self) -> int:
        return len(self.layers)

    @property
    def shapes(self) -> list[tuple[int, ...]]:
        return [b.shape for b in self.layers]

    @property
    def size(self) -> int:
        return sum(b.size for b in self.layers)

    @property
    def nbytes(self) -> int:
        return 8 * self.size

    def flatten(self) -> np.ndarray:
        return np.concatenate([b.values for b in self.layers])

    def unflatten(self, flat: np.ndarray) -> "LayeredModel":
        """New model with this model's layout and the given flat parameters."""
        flat = np.asarray(flat, dtype=np.float64)
        if flat.shape != (self.size,):
            raise ShapeMismatchError(f"expected {self.size} parameters, got {flat.shape}")
        blocks = []
        off = 0
        for b in self.layers:
            blocks.append(LayerBlock(b.layer_index, b.shape, flat[off:off + b.size]))
            off += b.size
        return LayeredModel(self.arch_id, tuple(blocks))

    def bitwise_equal(self, other: "LayeredModel") -> bool:
        if self.arch_id != other.arch_id or self.n_layers != other.n_layers:
            return False
        return all(
            a.layer_index == b.layer_index
            and a.shape == b.shape
            and a.values.tobytes() == b.values.tobytes()
            for a, b in zip(self.layers, other.layers)
        )


ModelList = Sequence[LayeredModel]


def init_model(arch: ArchitectureSpec, seed: int | np.random.SeedSequence) -> LayeredModel:
    """Scaled-uniform (Glorot) weights in ``+-sqrt(6 / (fan_in + fan_out))``, zero biases."""
    if not isinstance(arch, ArchitectureSpec):
        raise InvalidArchitectureError(f"expected ArchitectureSpec, got {type(arch).__name__}")
    rng = np.random.default_rng(seed)
    arrays = []
    for fan_in, fan_out in arch.layer_dims:
        limit = math.sqrt(6.0 / (fan_in + fan_out))
        arrays.append(rng.uniform(-limit, limit, size=(fan_in, fan_out)))
        arrays.append(np.zeros(fan_out))
    return LayeredModel.from_arrays(arrays)


def check_same_arch(models: ModelList) -> None:
    if len(models) == 0:
        raise EmptyAggregateError("model list is empty")
    ref = models[0]
    for k, m in enumerate(models):
        if m.arch_id != ref.arch_id or m.shapes != ref.shapes:
            raise ShapeMismatchError(f"model {k} has arch {m.arch_id}, expected {ref.arch_id}")


def stack(models: ModelList) -> np.ndarray:
    """(K, P) matrix of flattened models."""
    check_same_arch(models)
    return np.stack([m.flatten() for m in models])


def sum_models(models: ModelList) -> LayeredModel:
    """Elementwise sum, compensated, accumulated in list order."""
    s = stack(models)
    return models[0].unflatten(_kernels.stack_sum(s))


def aggregate_mean(models: ModelList) -> LayeredModel:
    """Elementwise arithmetic mean of the models.

    Computed as ``m_0 + sum_k(m_k - m_0) / K`` with the compensated sum, so a list
    of identical models averages to exactly that model.
    """
    if len(models) == 0:
        _empty()
    s = stack(models)
    ref = s[0]
    mean = ref + _kernels.stack_sum(s - ref) / len(models)
    return models[0].unflatten(mean)


def sq_distance_sum(models: ModelList, x: LayeredModel) -> float:
    """``sum_k ||m_k - x||^2`` over flattened parameters."""
    s = stack(models)
    check_same_arch([models[0], x])
    return float(_kernels.sq_dist_sum(s, x.flatten()))


def pairwise_cosine_mean(models: ModelList) -> float:
    """Mean cosine similarity over all unordered pairs of models."""
    if len(models) < 2:
        raise ValueError("pairwise cosine needs at least two models")
    g = _kernels.gram(stack(models))
    norms = np.sqrt(np.diag(g))
    if np.any(norms == 0.0):
        raise DegenerateNormError("a model has zero norm")
    iu = np.triu_indices(len(models), k=1)
    cos = g[iu] / (norms[iu[0]] * norms[iu[1]])
    return float(np.clip(cos, -1.0, 1.0).mean())


def _empty():
    raise EmptyAggregateError("model list is empty")


# ---------------------------------------------------------------------------
# serialization
# ---------------------------------------------------------------------------


def model_to_bytes(model: LayeredModel) -> bytes:
    """Binary container: header, then little-endian float64 values in layer order.

    Header: ``b"FMRM"``, u16 version, u16 arch-id length, arch-id (utf-8),
    u32 layer count, then per layer u32 layer_index, u32 ndim, u64 dims.
    """
    buf = io.BytesIO()
    aid = model.arch_id.encode()
    buf.write(_MAGIC)
    buf.write(struct.pack("<HH", _FORMAT_VERSION, len(aid)))
    buf.write(aid)
    buf.write(struct.pack("<I", model.n_layers))
    for b in model.layers:
        buf.write(struct.pack("<II", b.layer_index, len(b.shape)))
        buf.write(struct.pack(f"<{len(b.shape)}Q", *b.shape))
    for b in model.layers:
        buf.write(b.values.astype("<f8", copy=False).tobytes())
    return buf.getvalue()


def model_from_bytes(data: bytes) -> LayeredModel:
    if data[:4] != _MAGIC:
        raise ValueError("not a model container (bad magic)")
    off = 4
    version, alen = struct.unpack_from("<HH", data, off)
    off += 4
    if version != _FORMAT_VERSION:
        raise ValueError(f"unsupported container version {version}")
    arch_id = data[off:off + alen].decode()
    off += alen
    (n_layers,) = struct.unpack_from("<I", data, off)
    off += 4
    header = []
    for _ in range(n_layers):
        idx, ndim = struct.unpack_from("<II", data, off)
        off += 8
        shape = struct.unpack_from(f"<{ndim}Q", data, off)
        off += 8 * ndim
        header.append((idx, shape))
    blocks = []
    for idx, shape in header:
        n = math.prod(shape)
        vals = np.frombuffer(data, dtype="<f8", count=n, offset=off).astype(np.float64)
        off += 8 * n
        blocks.append(LayerBlock(idx, shape, vals))
    if off != len(data):
        raise ValueError("trailing bytes in model container")
    return LayeredModel(arch_id, tuple(blocks))


def save_model(model: LayeredModel, path: str | Path) -> None:
    Path(path).write_bytes(model_to_bytes(model))


def load_model(path: str | Path) -> LayeredModel:
    return model_from_bytes(Path(path).read_bytes())


def model_to_json(model: LayeredModel) -> str:
    """Debug dump; float repr round-trips exactly."""
    return json.dumps(
        {
            "arch_id": model.arch_id,
            "layers": [
                {"layer_index": b.layer_index, "shape": list(b.shape), "values": b.values.tolist()}
                for b in model.layers
            ],
        }
    )


def model_from_json(text: str) -> LayeredModel:
    doc = json.loads(text)
    blocks = tuple(
        LayerBlock(d["layer_index"], tuple(d["shape"]), np.asarray(d["values"], dtype=np.float64))
        for d in doc["layers"]
    )
    return LayeredModel(doc["arch_id"], blocks)
