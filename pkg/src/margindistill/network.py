"""Feed-forward embedder with exact manual backprop and checkpoint I/O.

The embedder is a plain MLP: affine layers with ReLU between them, a
linear final layer, then row-wise L2 normalization onto the hypersphere.
Teacher and student differ only in ``layer_dims``.

Checkpoint files (``.mdck``) are little-endian binary: an 8-byte magic,
a uint32 format version, a length-prefixed JSON metadata block, then the
raw float64 arrays (weights, biases, centers) in declared order.
"""

import enum
import json
from dataclasses import dataclass, field

import numpy as np

from . import rng
from .errors import CorruptCheckpoint, DimensionMismatch, IoFailure, ShapeMismatch
from .geometry import ClassCenters, EmbeddingBatch, normalize_rows, normalize_rows_backward

CHECKPOINT_MAGIC = b"MDCKBIN\n"
CHECKPOINT_VERSION = 1


class Role(enum.Enum):
    TEACHER = "TEACHER"
    STUDENT = "STUDENT"


@dataclass
class MlpParams:
    """Weights and biases for layer_dims [D_in, h_1, ..., D].

    weights[l] has shape (layer_dims[l+1], layer_dims[l]); biases[l] has
    length layer_dims[l+1]. A single-entry layer_dims is the identity
    embedder (no parameters).
    """

    layer_dims: list[int]
    weights: list[np.ndarray]
    biases: list[np.ndarray]

    def validate(self):
        dims = self.layer_dims
        if len(dims) < 1 or any(d < 1 for d in dims):
            raise ShapeMismatch(f"bad layer_dims {dims}")
        if len(self.weights) != len(dims) - 1 or len(self.biases) != len(dims) - 1:
            raise ShapeMismatch("weights/biases count must be len(layer_dims) - 1")
        for l, (w, b) in enumerate(zip(self.weights, self.biases)):
            if w.shape != (dims[l + 1], dims[l]) or b.shape != (dims[l + 1],):
                raise ShapeMismatch(f"layer {l}: weight {w.shape} bias {b.shape} "
                                    f"inconsistent with dims {dims}")
            if not (np.isfinite(w).all() and np.isfinite(b).all()):
                raise ShapeMismatch(f"layer {l}: non-finite parameter values")

    @property
    def in_dim(self) -> int:
        return self.layer_dims[0]

    @property
    def out_dim(self) -> int:
        return self.layer_dims[-1]


@dataclass
class MlpGrads:
    weights: list[np.ndarray]
    biases: list[np.ndarray]


@dataclass
class ForwardCache:
    """Everything the backward pass needs from a forward call."""

    inputs: np.ndarray
    pre_acts: list[np.ndarray]
    acts: list[np.ndarray]
    pre_norm: np.ndarray = field(default=None)


@dataclass
class Checkpoint:
    """Serialized embedder: parameters, class centers, provenance."""

    role: Role
    params: MlpParams
    centers: ClassCenters
    training_meta: dict
    format_version: int = CHECKPOINT_VERSION


def init_mlp_params(layer_dims: list[int], seed: int) -> MlpParams:
    """Glorot-uniform weights, zero biases, deterministic in the seed."""
    weights, biases = [], []
    for l in range(len(layer_dims) - 1):
        fan_in, fan_out = layer_dims[l], layer_dims[l + 1]
        bound = np.sqrt(6.0 / (fan_in + fan_out))
        gen = rng.stream(seed, rng.INIT, l)
        weights.append(gen.uniform(-bound, bound, size=(fan_out, fan_in)))
        biases.append(np.zeros(fan_out))
    return MlpParams(list(layer_dims), weights, biases)


def mlp_forward(params: MlpParams, inputs) -> tuple[EmbeddingBatch, ForwardCache]:
    """Forward pass ending in row-wise L2 normalization.

    ReLU after every layer except the last; the final affine output is
    normalized onto the unit sphere. The cache suffices for an exact
    backward pass.
    """
    x = np.asarray(inputs, dtype=np.float64)
    if x.ndim != 2 or x.shape[1] != params.in_dim:
        raise DimensionMismatch(
            f"inputs shape {x.shape} incompatible with input dim {params.in_dim}")
    h = x
    pre_acts, acts = [], []
    last = len(params.weights) - 1
    for l, (w, b) in enumerate(zip(params.weights, params.biases)):
        z = h @ w.T + b
        pre_acts.append(z)
        h = z if l == last else np.maximum(z, 0.0)
        acts.append(h)
    cache = ForwardCache(inputs=x, pre_acts=pre_acts, acts=acts, pre_norm=h)
    return EmbeddingBatch(normalize_rows(h)), cache


def mlp_backward_pre_norm(params: MlpParams, cache: ForwardCache, grad_pre_norm) -> MlpGrads:
    """Backward from a gradient on the pre-normalization output."""
    g = np.asarray(grad_pre_norm, dtype=np.float64)
    if g.shape != cache.pre_norm.shape:
        raise ShapeMismatch(
            f"grad shape {g.shape} != pre-norm shape {cache.pre_norm.shape}")
    n_layers = len(params.weights)
    grad_w = [None] * n_layers
    grad_b = [None] * n_layers
    for l in range(n_layers - 1, -1, -1):
        # ReLU subgradient at 0 is 0; the last layer is linear
        gz = g if l == n_layers - 1 else g * (cache.pre_acts[l] > 0)
        below = cache.inputs if l == 0 else cache.acts[l - 1]
        grad_w[l] = gz.T @ below
        grad_b[l] = gz.sum(axis=0)
        g = gz @ params.weights[l]
    return MlpGrads(grad_w, grad_b)


def mlp_backward(params: MlpParams, cache: ForwardCache, grad_embeddings) -> MlpGrads:
    """Exact parameter gradients for a loss with the given gradient on the
    normalized embeddings."""
    g = np.asarray(grad_embeddings, dtype=np.float64)
    if g.shape != cache.pre_norm.shape:
        raise ShapeMismatch(
            f"grad_embeddings shape {g.shape} != output shape {cache.pre_norm.shape}")
    if len(params.weights) == 0:
        return MlpGrads([], [])
    return mlp_backward_pre_norm(params, cache,
                                 normalize_rows_backward(cache.pre_norm, g))


def _meta_bytes(ck: Checkpoint) -> bytes:
    meta = {
        "role": ck.role.value,
        "layer_dims": [int(d) for d in ck.params.layer_dims],
        "n_classes": int(ck.centers.n_classes),
        "centers_frozen": bool(ck.centers.frozen),
        "training_meta": ck.training_meta,
    }
    return json.dumps(meta, sort_keys=True, separators=(",", ":")).encode("utf-8")


def _arrays_in_order(ck: Checkpoint) -> list[np.ndarray]:
    return [*ck.params.weights, *ck.params.biases, ck.centers.data]


def checkpoint_save(ck: Checkpoint, path) -> None:
    ck.params.validate()
    meta = _meta_bytes(ck)
    try:
        with open(path, "wb") as fh:
            fh.write(CHECKPOINT_MAGIC)
            fh.write(np.array(ck.format_version, dtype="<u4").tobytes())
            fh.write(np.array(len(meta), dtype="<u8").tobytes())
            fh.write(meta)
            for arr in _arrays_in_order(ck):
                fh.write(np.ascontiguousarray(arr, dtype="<f8").tobytes())
    except OSError as exc:
        raise IoFailure(f"cannot write checkpoint {path}: {exc}") from exc


def checkpoint_load(path) -> Checkpoint:
    try:
        with open(path, "rb") as fh:
            blob = fh.read()
    except OSError as exc:
        raise IoFailure(f"cannot read checkpoint {path}: {exc}") from exc

    if len(blob) < len(CHECKPOINT_MAGIC) + 12:
        raise CorruptCheckpoint(f"{path}: file too short")
    if blob[: len(CHECKPOINT_MAGIC)] != CHECKPOINT_MAGIC:
        raise CorruptCheckpoint(f"{path}: bad magic")
    off = len(CHECKPOINT_MAGIC)
    version = int(np.frombuffer(blob, dtype="<u4", count=1, offset=off)[0])
    if version != CHECKPOINT_VERSION:
        raise CorruptCheckpoint(
            f"{path}: unsupported format_version {version} (supported: {CHECKPOINT_VERSION})")
    off += 4
    meta_len = int(np.frombuffer(blob, dtype="<u8", count=1, offset=off)[0])
    off += 8
    if off + meta_len > len(blob):
        raise CorruptCheckpoint(f"{path}: truncated metadata block")
    try:
        meta = json.loads(blob[off:off + meta_len].decode("utf-8"))
        role = Role(meta["role"])
        layer_dims = [int(d) for d in meta["layer_dims"]]
        n_classes = int(meta["n_classes"])
        frozen = bool(meta["centers_frozen"])
        training_meta = meta["training_meta"]
    except (KeyError, ValueError, UnicodeDecodeError) as exc:
        raise CorruptCheckpoint(f"{path}: invalid metadata: {exc}") from exc
    off += meta_len

    shapes = [(layer_dims[l + 1], layer_dims[l]) for l in range(len(layer_dims) - 1)]
    shapes += [(layer_dims[l + 1],) for l in range(len(layer_dims) - 1)]
    shapes.append((layer_dims[-1], n_classes))
    arrays = []
    for shape in shapes:
        count = int(np.prod(shape, dtype=np.int64))
        nbytes = count * 8
        if off + nbytes > len(blob):
            raise CorruptCheckpoint(f"{path}: truncated array data")
        arrays.append(np.frombuffer(blob, dtype="<f8", count=count,
                                    offset=off).astype(np.float64).reshape(shape))
        off += nbytes
    if off != len(blob):
        raise CorruptCheckpoint(f"{path}: {len(blob) - off} trailing bytes")

    k = len(layer_dims) - 1
    params = MlpParams(layer_dims, arrays[:k], arrays[k:2 * k])
    try:
        params.validate()
        centers = ClassCenters(arrays[-1], frozen=frozen)
    except Exception as exc:
        raise CorruptCheckpoint(f"{path}: invariant violation: {exc}") from exc
    return Checkpoint(role=role, params=params, centers=centers,
                      training_meta=training_meta, format_version=version)
