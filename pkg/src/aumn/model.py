"""Forward pass of the action unit memory network.

Every operation accepts optional leading batch axes on its per-video
arguments (``(l, D)`` or ``(B, l, D)``); the training loop stacks videos of
equal length to amortize Python overhead. Memory-side tensors (``M``,
``K_M``, ``V_M``) are never batched.
"""

from __future__ import annotations

import math
import struct
from dataclasses import dataclass, field, fields
from pathlib import Path

import numpy as np

from .errors import CheckpointError, ShapeError, ValidationError
from .numerics import relu, sigmoid, softmax_rows

TENSOR_NAMES = (
    "W_emb", "b_emb", "M",
    "W_K", "b_K",
    "W_V1", "b_V1", "W_V2", "b_V2",
    "W_Q", "b_Q",
)


@dataclass(frozen=True)
class ModelDims:
    D: int
    F: int
    C: int
    K: int
    m: int = 4
    r: int | None = None
    kernel: int = 3

    def __post_init__(self):
        if self.r is None:
            object.__setattr__(self, "r", max(1, self.F // 4))
        for name in ("D", "F", "C", "K", "m", "r", "kernel"):
            value = getattr(self, name)
            if not isinstance(value, (int, np.integer)) or value < 1:
                raise ValidationError(f"ModelDims.{name} must be a positive integer, got {value!r}")
        if self.F % self.m:
            raise ValidationError(f"F={self.F} is not divisible by m={self.m}")
        if self.kernel % 2 == 0:
            raise ValidationError(f"kernel width must be odd, got {self.kernel}")

    @property
    def key_dim(self) -> int:
        return self.F // self.m

    def shapes(self) -> dict[str, tuple[int, ...]]:
        D, F, C, K, r, h = self.D, self.F, self.C, self.K, self.r, self.key_dim
        return {
            "W_emb": (self.kernel, D, F), "b_emb": (F,), "M": (K, F),
            "W_K": (F, h), "b_K": (h,),
            "W_V1": (F, r), "b_V1": (r,), "W_V2": (r, C * F), "b_V2": (C * F,),
            "W_Q": (F, h), "b_Q": (h,),
        }


@dataclass
class ModelParams:
    """All learnable tensors. ``M`` is the memory bank of K templates."""

    dims: ModelDims
    W_emb: np.ndarray
    b_emb: np.ndarray
    M: np.ndarray
    W_K: np.ndarray
    b_K: np.ndarray
    W_V1: np.ndarray
    b_V1: np.ndarray
    W_V2: np.ndarray
    b_V2: np.ndarray
    W_Q: np.ndarray
    b_Q: np.ndarray

    def __post_init__(self):
        expected = self.dims.shapes()
        for name in TENSOR_NAMES:
            arr = np.asarray(getattr(self, name), dtype=np.float64)
            if arr.shape != expected[name]:
                raise ShapeError(f"{name} has shape {arr.shape}, expected {expected[name]}")
            if not np.all(np.isfinite(arr)):
                raise ValidationError(f"{name} contains non-finite entries")
            setattr(self, name, arr)

    def tensors(self) -> dict[str, np.ndarray]:
        return {name: getattr(self, name) for name in TENSOR_NAMES}

    def copy(self) -> "ModelParams":
        return ModelParams(self.dims, **{k: v.copy() for k, v in self.tensors().items()})

    def replace(self, **tensors) -> "ModelParams":
        merged = self.tensors()
        merged.update(tensors)
        return ModelParams(self.dims, **merged)


def init_params(dims: ModelDims, rng: np.random.Generator) -> ModelParams:
    """Gaussian memory with std 1/sqrt(F), fan-in uniform weights, zero biases."""

    def uniform(shape, fan_in):
        bound = 1.0 / math.sqrt(fan_in)
        return rng.uniform(-bound, bound, size=shape)

    s = dims.shapes()
    return ModelParams(
        dims,
        W_emb=uniform(s["W_emb"], dims.kernel * dims.D),
        b_emb=np.zeros(s["b_emb"]),
        M=rng.normal(0.0, 1.0 / math.sqrt(dims.F), size=s["M"]),
        W_K=uniform(s["W_K"], dims.F),
        b_K=np.zeros(s["b_K"]),
        W_V1=uniform(s["W_V1"], dims.F),
        b_V1=np.zeros(s["b_V1"]),
        W_V2=uniform(s["W_V2"], dims.r),
        b_V2=np.zeros(s["b_V2"]),
        W_Q=uniform(s["W_Q"], dims.F),
        b_Q=np.zeros(s["b_Q"]),
    )


# --------------------------------------------------------------------------
# individual operations


def pad_sequence(x: np.ndarray, kernel: int) -> np.ndarray:
    pad = kernel // 2
    widths = [(0, 0)] * (x.ndim - 2) + [(pad, pad), (0, 0)]
    return np.pad(x, widths)


def _embed_preactivation(x_pad: np.ndarray, params: ModelParams, length: int) -> np.ndarray:
    out = params.b_emb
    for j in range(params.dims.kernel):
        out = out + x_pad[..., j:j + length, :] @ params.W_emb[j]
    return out


def _check_features(x: np.ndarray, dims: ModelDims) -> np.ndarray:
    x = np.asarray(x, dtype=np.float64)
    if x.ndim < 2 or x.shape[-1] != dims.D:
        raise ShapeError(f"features must be (l, {dims.D}), got {x.shape}")
    if x.shape[-2] < 1:
        raise ShapeError("feature sequence is empty")
    return x


def embed_features(x: np.ndarray, params: ModelParams) -> np.ndarray:
    """Same-length temporal convolution + bias + ReLU, ``(l, D) -> (l, F)``."""
    x = _check_features(x, params.dims)
    x_pad = pad_sequence(x, params.dims.kernel)
    return relu(_embed_preactivation(x_pad, params, x.shape[-2]))


def encode_memory(params: ModelParams) -> tuple[np.ndarray, np.ndarray]:
    """Keys ``(K, F/m)`` via one affine layer, values ``(K, C*F)`` via a bottleneck MLP."""
    keys = params.M @ params.W_K + params.b_K
    hidden = relu(params.M @ params.W_V1 + params.b_V1)
    values = hidden @ params.W_V2 + params.b_V2
    return keys, values


def encode_queries(X_e: np.ndarray, params: ModelParams) -> np.ndarray:
    return X_e @ params.W_Q + params.b_Q


def self_attention(X_e: np.ndarray, Q: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
    """Residual segment-to-segment attention; returns ``(X_s, A)``."""
    if X_e.shape[:-1] != Q.shape[:-1]:
        raise ShapeError(f"row mismatch between features {X_e.shape} and queries {Q.shape}")
    scale = math.sqrt(Q.shape[-1])
    A = softmax_rows((Q @ np.swapaxes(Q, -1, -2)) / scale)
    return A @ X_e + X_e, A


def cross_similarity(Q: np.ndarray, K_M: np.ndarray) -> np.ndarray:
    if Q.shape[-1] != K_M.shape[-1]:
        raise ShapeError(f"query dim {Q.shape[-1]} != key dim {K_M.shape[-1]}")
    return sigmoid((Q @ K_M.T) / math.sqrt(Q.shape[-1]))


def read_classifiers(S: np.ndarray, V_M: np.ndarray, F: int) -> np.ndarray:
    """Aggregate template values into per-segment ``(F, C)`` classifiers.

    Row ``t`` of ``S @ V_M`` is laid out class-major: entry ``(f, c)`` of the
    classifier is column ``c*F + f``. Returns shape ``(..., l, F, C)``.
    """
    if S.shape[-1] != V_M.shape[0]:
        raise ShapeError(f"S has {S.shape[-1]} columns but V_M has {V_M.shape[0]} rows")
    V_O = S @ V_M
    C = V_O.shape[-1] // F
    return np.swapaxes(V_O.reshape(*V_O.shape[:-1], C, F), -1, -2)


def flatten_classifiers(W_cls: np.ndarray) -> np.ndarray:
    """Inverse of the reshape in :func:`read_classifiers`."""
    C, F = W_cls.shape[-1], W_cls.shape[-2]
    return np.swapaxes(W_cls, -1, -2).reshape(*W_cls.shape[:-2], C * F)


def foreground_attention(S: np.ndarray) -> np.ndarray:
    return S.max(axis=-1)


def segment_logits(X_s: np.ndarray, W_cls: np.ndarray) -> np.ndarray:
    return (X_s[..., None, :] @ W_cls)[..., 0, :]


def video_prediction(X_s: np.ndarray, W_cls: np.ndarray, a: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
    """Attention-weighted temporal mean of segment logits, then class softmax.

    Returns ``(y_hat, C_seg)``.
    """
    C_seg = segment_logits(X_s, W_cls)
    pooled = (a[..., :, None] * C_seg).sum(axis=-2) / a.shape[-1]
    return softmax_rows(pooled), C_seg


# --------------------------------------------------------------------------
# composed forward pass


@dataclass
class ForwardTrace:
    X_e: np.ndarray
    Q: np.ndarray
    K_M: np.ndarray
    V_M: np.ndarray
    A_self: np.ndarray | None
    X_s: np.ndarray
    S: np.ndarray
    a: np.ndarray
    C_seg: np.ndarray
    y_hat: np.ndarray
    use_self_attention: bool
    # retained for the backward pass
    x_pad: np.ndarray = field(repr=False)
    Z_emb: np.ndarray = field(repr=False)
    V_O: np.ndarray = field(repr=False)
    a_index: np.ndarray = field(repr=False)
    logits: np.ndarray = field(repr=False)

    @property
    def length(self) -> int:
        return self.X_e.shape[-2]

    def video(self, i: int) -> "ForwardTrace":
        """Slice one video out of a stacked trace."""
        shared = {"K_M", "V_M", "use_self_attention"}
        kwargs = {}
        for f in fields(self):
            value = getattr(self, f.name)
            kwargs[f.name] = value if f.name in shared or value is None else value[i]
        return ForwardTrace(**kwargs)


def forward(
    x: np.ndarray,
    params: ModelParams,
    use_self_attention: bool = True,
    memory: tuple[np.ndarray, np.ndarray] | None = None,
) -> ForwardTrace:
    """Run the full network on one video (or a stack of equal-length videos).

    ``memory`` may carry precomputed ``encode_memory(params)`` output.
    """
    dims = params.dims
    x = _check_features(x, dims)
    length = x.shape[-2]
    x_pad = pad_sequence(x, dims.kernel)
    Z_emb = _embed_preactivation(x_pad, params, length)
    X_e = relu(Z_emb)
    K_M, V_M = memory if memory is not None else encode_memory(params)
    Q = encode_queries(X_e, params)
    if use_self_attention:
        X_s, A = self_attention(X_e, Q)
    else:
        X_s, A = X_e, None
    S = cross_similarity(Q, K_M)
    V_O = S @ V_M
    W_cls = np.swapaxes(V_O.reshape(*V_O.shape[:-1], dims.C, dims.F), -1, -2)
    a_index = S.argmax(axis=-1)
    a = np.take_along_axis(S, a_index[..., None], axis=-1)[..., 0]
    C_seg = segment_logits(X_s, W_cls)
    logits = (a[..., :, None] * C_seg).sum(axis=-2) / length
    return ForwardTrace(
        X_e=X_e, Q=Q, K_M=K_M, V_M=V_M, A_self=A, X_s=X_s, S=S, a=a,
        C_seg=C_seg, y_hat=softmax_rows(logits), use_self_attention=use_self_attention,
        x_pad=x_pad, Z_emb=Z_emb, V_O=V_O, a_index=a_index, logits=logits,
    )


# --------------------------------------------------------------------------
# checkpoint file
#
# layout (little-endian):
#   b"AUMN" | u32 version | u32 D, F, C, K, m, r, kernel
#   | each tensor of TENSOR_NAMES, row-major float64

CHECKPOINT_MAGIC = b"AUMN"
CHECKPOINT_VERSION = 1
_HEADER = struct.Struct("<4sI7I")


def save_checkpoint(path: str | Path, params: ModelParams) -> None:
    d = params.dims
    chunks = [_HEADER.pack(CHECKPOINT_MAGIC, CHECKPOINT_VERSION, d.D, d.F, d.C, d.K, d.m, d.r, d.kernel)]
    for name in TENSOR_NAMES:
        chunks.append(np.ascontiguousarray(getattr(params, name), dtype="<f8").tobytes())
    Path(path).write_bytes(b"".join(chunks))


def load_checkpoint(path: str | Path) -> ModelParams:
    raw = Path(path).read_bytes()
    if len(raw) < _HEADER.size:
        raise CheckpointError(f"{path}: file too short for checkpoint header")
    magic, version, *dim_values = _HEADER.unpack_from(raw)
    if magic != CHECKPOINT_MAGIC:
        raise CheckpointError(f"{path}: bad magic {magic!r}")
    if version != CHECKPOINT_VERSION:
        raise CheckpointError(f"{path}: unsupported checkpoint version {version}")
    dims = ModelDims(*dim_values)
    offset = _HEADER.size
    tensors = {}
    for name, shape in dims.shapes().items():
        count = int(np.prod(shape))
        end = offset + 8 * count
        if end > len(raw):
            raise CheckpointError(f"{path}: truncated while reading {name}")
        tensors[name] = np.frombuffer(raw, dtype="<f8", count=count, offset=offset).reshape(shape).astype(np.float64)
        offset = end
    if offset != len(raw):
        raise CheckpointError(f"{path}: {len(raw) - offset} trailing bytes")
    return ModelParams(dims, **tensors)
