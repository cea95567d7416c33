"""Reverse-mode gradients, Adam, the training loop and a finite-difference audit.

Gradients are derived by hand and replayed over the activations kept in a
:class:`~aumn.model.ForwardTrace`. Videos of equal length are stacked into a
single forward/backward call; the result is the same as looping over videos
and accumulating.
"""

from __future__ import annotations

import csv
import io
import logging
import math
from dataclasses import dataclass, field
from typing import Iterable, Sequence

import numpy as np

from .errors import NumericalError, ValidationError
from .losses import (
    LOG_CLAMP,
    AblationFlags,
    LossComponents,
    LossWeights,
    classification_loss,
    diversity_loss,
    homogeneity_loss,
    occurrence_probability,
    sparsity_loss,
    total_loss,
)
from .model import TENSOR_NAMES, ForwardTrace, ModelDims, ModelParams, encode_memory, forward, init_params
from .numerics import relu

log = logging.getLogger(__name__)

GradientSet = dict[str, np.ndarray]
Example = tuple[np.ndarray, np.ndarray]  # (features l x D, label of length C)

ORTHONORMAL_ATOL = 1e-12
HISTORY_COLUMNS = ("step", "L_cls", "L_d", "L_h", "L_s", "total")


@dataclass(frozen=True)
class TrainConfig:
    learning_rate: float = 1e-4
    batch_size: int = 32
    steps: int = 1000
    seed: int = 0
    beta1: float = 0.9
    beta2: float = 0.999
    epsilon: float = 1e-8
    weights: LossWeights = field(default_factory=LossWeights)
    flags: AblationFlags = field(default_factory=AblationFlags)

    def __post_init__(self):
        if not self.learning_rate > 0:
            raise ValidationError(f"learning_rate must be > 0, got {self.learning_rate}")
        if not (0 < self.beta1 < 1 and 0 < self.beta2 < 1):
            raise ValidationError("Adam betas must lie in (0, 1)")
        if self.epsilon <= 0:
            raise ValidationError("Adam epsilon must be > 0")
        if self.batch_size < 1 or self.steps < 0:
            raise ValidationError("batch_size must be >= 1 and steps >= 0")


# --------------------------------------------------------------------------
# forward over a batch


def _group_by_length(batch: Sequence[Example]) -> list[list[int]]:
    groups: dict[int, list[int]] = {}
    for i, (x, _) in enumerate(batch):
        groups.setdefault(np.shape(x)[0], []).append(i)
    return list(groups.values())


@dataclass
class BatchForward:
    groups: list[list[int]]
    traces: list[ForwardTrace]  # one stacked trace per group
    labels: list[np.ndarray]  # (n_group, C) per group
    hidden: np.ndarray  # Enc_V pre-activation, (K, r)
    components: LossComponents


def forward_batch(batch: Sequence[Example], params: ModelParams, use_self_attention: bool = True) -> BatchForward:
    if len(batch) == 0:
        raise ValidationError("batch is empty")
    hidden = params.M @ params.W_V1 + params.b_V1
    memory = encode_memory(params)
    groups = _group_by_length(batch)
    traces, labels = [], []
    for idx in groups:
        x = np.stack([np.asarray(batch[i][0], dtype=np.float64) for i in idx])
        traces.append(forward(x, params, use_self_attention, memory=memory))
        labels.append(np.stack([np.asarray(batch[i][1], dtype=np.float64) for i in idx]))

    y_hat = np.concatenate([t.y_hat for t in traces])
    y = np.concatenate(labels)
    p = np.concatenate([occurrence_probability(t.S) for t in traces])
    a_rows = [row for t in traces for row in t.a]
    components = LossComponents(
        cls=classification_loss(y_hat, y),
        diversity=diversity_loss(params.M),
        homogeneity=homogeneity_loss(p),
        sparsity=sparsity_loss(a_rows),
    )
    return BatchForward(groups, traces, labels, hidden, components)


# --------------------------------------------------------------------------
# backward


def _flat(t: np.ndarray) -> np.ndarray:
    return t.reshape(-1, t.shape[-1])


def _softmax_backward(p: np.ndarray, grad: np.ndarray) -> np.ndarray:
    return p * (grad - (grad * p).sum(axis=-1, keepdims=True))


def diversity_gradient(M: np.ndarray) -> np.ndarray:
    """Gradient of ``||M M^T - I||_F``; zero at the non-differentiable optimum.

    Residuals at rounding level count as the optimum, where G/||G|| would
    otherwise be an arbitrary unit direction.
    """
    G = M @ M.T - np.eye(M.shape[0])
    norm = math.sqrt(float(np.sum(G * G)))
    if norm <= ORTHONORMAL_ATOL:
        return np.zeros_like(M)
    return (2.0 / norm) * (G @ M)


def _segment_backward(
    trace: ForwardTrace,
    params: ModelParams,
    d_logits: np.ndarray,
    d_a_extra: np.ndarray | float,
    d_colsum: np.ndarray | float,
    grads: GradientSet,
) -> tuple[np.ndarray, np.ndarray]:
    """Backpropagate one stacked group into the per-segment parameters.

    Accumulates into ``grads`` and returns ``(dK_M, dV_M)`` for the memory side.
    """
    dims = params.dims
    length = trace.length
    scale = math.sqrt(dims.key_dim)
    a, S, C_seg, X_s, X_e, Q = trace.a, trace.S, trace.C_seg, trace.X_s, trace.X_e, trace.Q

    # attention-weighted pooling of segment logits
    dC = a[..., :, None] * d_logits[..., None, :] / length
    d_a = (C_seg * d_logits[..., None, :]).sum(axis=-1) / length + d_a_extra

    # max over templates routes d_a to the winning column
    dS = np.zeros_like(S)
    np.put_along_axis(dS, trace.a_index[..., None], d_a[..., None], axis=-1)
    dS += np.asarray(d_colsum)[..., None, :] if np.ndim(d_colsum) else d_colsum

    # segment classifiers: C_seg[t, c] = sum_f X_s[t, f] * V_O[t, c*F + f]
    Vr = trace.V_O.reshape(*trace.V_O.shape[:-1], dims.C, dims.F)
    dX_s = (dC[..., :, None, :] @ Vr)[..., 0, :]
    dV_O = (dC[..., :, :, None] * X_s[..., :, None, :]).reshape(trace.V_O.shape)
    dS += dV_O @ trace.V_M.T
    dV_M = _flat(S).T @ _flat(dV_O)

    # sigmoid similarity
    dZ = dS * S * (1.0 - S) / scale
    dQ = dZ @ trace.K_M
    dK_M = _flat(dZ).T @ _flat(Q)

    if trace.use_self_attention:
        A = trace.A_self
        dA = dX_s @ np.swapaxes(X_e, -1, -2)
        dX_e = np.swapaxes(A, -1, -2) @ dX_s + dX_s
        dZa = _softmax_backward(A, dA) / scale
        dQ = dQ + (dZa + np.swapaxes(dZa, -1, -2)) @ Q
    else:
        dX_e = dX_s

    grads["W_Q"] += _flat(X_e).T @ _flat(dQ)
    grads["b_Q"] += _flat(dQ).sum(axis=0)
    dX_e = dX_e + dQ @ params.W_Q.T

    dZ_emb = _flat(dX_e * (trace.Z_emb > 0))
    grads["b_emb"] += dZ_emb.sum(axis=0)
    for j in range(dims.kernel):
        grads["W_emb"][j] += _flat(trace.x_pad[..., j:j + length, :]).T @ dZ_emb
    return dK_M, dV_M


def backward(
    batch: Sequence[Example],
    params: ModelParams,
    config: TrainConfig,
) -> tuple[LossComponents, GradientSet]:
    """Loss components and exact gradients of the total loss for one mini-batch."""
    flags, w = config.flags, config.weights
    fb = forward_batch(batch, params, flags.self_attention)
    comps = fb.components
    if not all(math.isfinite(v) for v in (comps.cls, comps.diversity, comps.homogeneity, comps.sparsity)):
        _check_finite(params.tensors())
        for trace in fb.traces:
            _check_finite({name: getattr(trace, name) for name in _TRACE_ORDER})
        raise NumericalError(f"non-finite loss components {comps}")
    B = len(batch)

    grads = {name: np.zeros_like(arr) for name, arr in params.tensors().items()}
    p_groups = [occurrence_probability(t.S) for t in fb.traces]
    p_mean = np.concatenate(p_groups).mean(axis=0)
    p_norm = float(np.sqrt(np.sum(p_mean * p_mean)))

    dK_M = np.zeros_like(fb.traces[0].K_M)
    dV_M = np.zeros_like(fb.traces[0].V_M)
    for trace, y, p in zip(fb.traces, fb.labels, p_groups):
        y_hat = trace.y_hat
        g = np.where(y_hat > LOG_CLAMP, -y / np.maximum(y_hat, LOG_CLAMP), 0.0) / B
        d_logits = _softmax_backward(y_hat, g)
        d_a_extra = w.gamma / B if flags.sparsity else 0.0
        if flags.homogeneity:
            d_colsum = _softmax_backward(p, np.broadcast_to(w.beta * p_mean / (p_norm * B), p.shape))
        else:
            d_colsum = 0.0
        dk, dv = _segment_backward(trace, params, d_logits, d_a_extra, d_colsum, grads)
        dK_M += dk
        dV_M += dv

    # memory side: keys, bottleneck values, and the diversity regularizer
    M, hidden = params.M, fb.hidden
    grads["W_K"] += M.T @ dK_M
    grads["b_K"] += dK_M.sum(axis=0)
    grads["W_V2"] += relu(hidden).T @ dV_M
    grads["b_V2"] += dV_M.sum(axis=0)
    d_hidden = (dV_M @ params.W_V2.T) * (hidden > 0)
    grads["W_V1"] += M.T @ d_hidden
    grads["b_V1"] += d_hidden.sum(axis=0)
    grads["M"] += dK_M @ params.W_K.T + d_hidden @ params.W_V1.T
    if flags.diversity:
        grads["M"] += w.alpha * diversity_gradient(M)

    _check_finite(grads)
    return comps, grads


_TRACE_ORDER = ("Z_emb", "X_e", "Q", "K_M", "V_M", "X_s", "S", "a", "C_seg", "logits", "y_hat")


def _check_finite(tensors: dict[str, np.ndarray]) -> None:
    for name, arr in tensors.items():
        if not np.all(np.isfinite(arr)):
            raise NumericalError(f"non-finite values in {name}")


def loss_value(batch: Sequence[Example], params: ModelParams, config: TrainConfig) -> float:
    comps = forward_batch(batch, params, config.flags.self_attention).components
    return total_loss(comps, config.weights, config.flags)


# --------------------------------------------------------------------------
# Adam


@dataclass
class AdamState:
    step: int = 0
    m: GradientSet = field(default_factory=dict)
    v: GradientSet = field(default_factory=dict)


def adam_step(
    params: ModelParams,
    grads: GradientSet,
    state: AdamState,
    config: TrainConfig,
) -> tuple[ModelParams, AdamState]:
    """One bias-corrected Adam update. Inputs are left untouched."""
    t = state.step + 1
    b1, b2 = config.beta1, config.beta2
    bc1 = 1.0 - b1 ** t
    bc2 = 1.0 - b2 ** t
    new_m, new_v, updated = {}, {}, {}
    for name, value in params.tensors().items():
        g = grads[name]
        if g.shape != value.shape:
            raise ValidationError(f"gradient for {name} has shape {g.shape}, expected {value.shape}")
        m = b1 * state.m.get(name, 0.0) + (1.0 - b1) * g
        v = b2 * state.v.get(name, 0.0) + (1.0 - b2) * (g * g)
        new_m[name], new_v[name] = m, v
        updated[name] = value - config.learning_rate * (m / bc1) / (np.sqrt(v / bc2) + config.epsilon)
    return params.replace(**updated), AdamState(t, new_m, new_v)


# --------------------------------------------------------------------------
# training loop


@dataclass
class TrainResult:
    params: ModelParams
    history: list[tuple[int, float, float, float, float, float]]


def iterate_minibatches(n: int, batch_size: int, rng: np.random.Generator) -> Iterable[np.ndarray]:
    """Endless stream of index batches drawn from reshuffled epochs."""
    batch_size = min(batch_size, n)
    while True:
        order = rng.permutation(n)
        for start in range(0, n - batch_size + 1, batch_size):
            yield order[start:start + batch_size]


def train(
    dataset: Sequence[Example],
    dims: ModelDims,
    config: TrainConfig,
    params: ModelParams | None = None,
) -> TrainResult:
    if len(dataset) == 0:
        raise ValidationError("training set is empty")
    rng = np.random.default_rng(config.seed)
    if params is None:
        params = init_params(dims, rng)
    state = AdamState()
    history = []
    batches = iterate_minibatches(len(dataset), config.batch_size, rng)
    for step in range(1, config.steps + 1):
        idx = next(batches)
        comps, grads = backward([dataset[i] for i in idx], params, config)
        total = total_loss(comps, config.weights, config.flags)
        history.append((step, comps.cls, comps.diversity, comps.homogeneity, comps.sparsity, total))
        params, state = adam_step(params, grads, state, config)
        if step % 500 == 0:
            log.info("step %d total=%.5f cls=%.5f", step, total, comps.cls)
    return TrainResult(params, history)


def history_csv(history: Sequence[Sequence[float]]) -> str:
    buf = io.StringIO()
    writer = csv.writer(buf, lineterminator="\n")
    writer.writerow(HISTORY_COLUMNS)
    for row in history:
        writer.writerow([row[0], *(repr(float(v)) for v in row[1:])])
    return buf.getvalue()


# --------------------------------------------------------------------------
# finite-difference audit


@dataclass
class GradientCheckReport:
    errors: dict[str, float]
    tolerance: float

    @property
    def max_error(self) -> float:
        return max(self.errors.values())

    @property
    def passed(self) -> bool:
        return self.max_error < self.tolerance

    def format(self) -> str:
        lines = [f"{name:8s} {err:.3e}" for name, err in self.errors.items()]
        verdict = "PASS" if self.passed else "FAIL"
        lines.append(f"max relative error {self.max_error:.3e} (tolerance {self.tolerance:.1e}) {verdict}")
        return "\n".join(lines)


def relative_error(analytic: np.ndarray, numeric: np.ndarray, floor: float = 1e-6) -> float:
    """Largest entrywise deviation, relative to the tensor's gradient scale."""
    scale = max(float(np.abs(analytic).max()), float(np.abs(numeric).max()), floor)
    return float(np.abs(analytic - numeric).max()) / scale


def numerical_gradient(batch: Sequence[Example], params: ModelParams, config: TrainConfig, h: float) -> GradientSet:
    out = {}
    for name, tensor in params.tensors().items():
        grad = np.zeros_like(tensor)
        for idx in np.ndindex(tensor.shape):
            original = tensor[idx]
            plus, minus = tensor.copy(), tensor.copy()
            plus[idx] = original + h
            minus[idx] = original - h
            f_plus = loss_value(batch, params.replace(**{name: plus}), config)
            f_minus = loss_value(batch, params.replace(**{name: minus}), config)
            grad[idx] = (f_plus - f_minus) / (2.0 * h)
        out[name] = grad
    return out


def finite_difference_check(
    params: ModelParams,
    batch: Sequence[Example],
    config: TrainConfig,
    h: float = 1e-5,
    tolerance: float = 1e-4,
    analytic: GradientSet | None = None,
) -> GradientCheckReport:
    """Compare analytic gradients with central differences, tensor by tensor.

    ``analytic`` overrides the gradients under test (used for fault injection).
    """
    if h <= 0:
        raise ValidationError("finite-difference step must be > 0")
    if analytic is None:
        _, analytic = backward(batch, params, config)
    numeric = numerical_gradient(batch, params, config, h)
    errors = {name: relative_error(analytic[name], numeric[name]) for name in TENSOR_NAMES}
    return GradientCheckReport(errors, tolerance)


def random_instance(
    seed: int,
    dims: ModelDims | None = None,
    length: int = 6,
    batch_size: int = 3,
) -> tuple[ModelParams, list[Example]]:
    """Small random parameters and batch for gradient audits."""
    dims = dims or ModelDims(D=8, F=4, C=2, K=3, m=2, r=2, kernel=3)
    rng = np.random.default_rng(seed)
    params = init_params(dims, rng)
    # non-zero biases so every term of the gradient is exercised
    params = params.replace(**{
        name: rng.normal(0.0, 0.3, size=arr.shape)
        for name, arr in params.tensors().items() if name.startswith("b_")
    })
    batch = []
    for _ in range(batch_size):
        x = rng.normal(size=(length, dims.D))
        y = rng.dirichlet(np.ones(dims.C))
        batch.append((x, y))
    return params, batch
