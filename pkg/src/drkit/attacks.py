"""Dispersion Reduction and the FGSM family under one L-inf contract.

All attacks accept a single image (C, H, W) or a batch (N, C, H, W) with
values in [0, 1]. Batch items never interact: losses are summed over the
batch and every normalisation (L1 norm, dispersion) is per image, so a batch
is equivalent to attacking its images one at a time.

Budgets ``epsilon`` and ``step`` are in 0-255 pixel units and divided by 255
internally.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, fields, replace
from typing import Callable, Dict, List, Optional, Sequence, Tuple

import numpy as np

from . import autodiff as ad
from .autodiff import Tape, Tensor, backward
from .models import Model

DEFAULT_ITERATIONS = {"dr": 100, "fgsm": 1, "identity": 0}
FGSM_FAMILY_ITERATIONS = 20
LINF_SLACK = 1e-6


class BudgetViolation(RuntimeError):
    """An adversarial example left the epsilon ball or the pixel range."""


@dataclass(frozen=True)
class AttackConfig:
    epsilon: float = 16.0
    iterations: Optional[int] = None
    learning_rate: float = 5e-2
    momentum: float = 1.0
    step: Optional[float] = None
    transform_probability: float = 0.5
    tap_layer: Optional[str] = None
    adam_beta1: float = 0.98
    adam_beta2: float = 0.99
    adam_eps: float = 1e-8
    seed: int = 0

    def __post_init__(self) -> None:
        if not self.epsilon > 0:
            raise ValueError(f"epsilon must be > 0, got {self.epsilon}")
        if self.iterations is not None and (isinstance(self.iterations, bool) or self.iterations < 1):
            raise ValueError(f"iterations must be >= 1, got {self.iterations}")
        if not 0 <= self.transform_probability <= 1:
            raise ValueError(f"transform_probability must lie in [0, 1], got {self.transform_probability}")
        if self.momentum < 0:
            raise ValueError(f"momentum must be >= 0, got {self.momentum}")
        for key in ("adam_beta1", "adam_beta2"):
            if not 0 < getattr(self, key) < 1:
                raise ValueError(f"{key} must lie in (0, 1), got {getattr(self, key)}")
        if self.learning_rate <= 0:
            raise ValueError(f"learning_rate must be > 0, got {self.learning_rate}")
        if self.step is not None and self.step <= 0:
            raise ValueError(f"step must be > 0, got {self.step}")
        if self.adam_eps <= 0:
            raise ValueError(f"adam_eps must be > 0, got {self.adam_eps}")

    def iterations_for(self, attack: str) -> int:
        if self.iterations is not None:
            return int(self.iterations)
        return DEFAULT_ITERATIONS.get(attack, FGSM_FAMILY_ITERATIONS)

    def step_for(self, attack: str) -> float:
        """Per-iteration step in 0-255 units; epsilon / T unless set."""
        return self.step if self.step is not None else self.epsilon / self.iterations_for(attack)

    def with_(self, **changes) -> "AttackConfig":
        return replace(self, **changes)

    def as_dict(self) -> dict:
        return {f.name: getattr(self, f.name) for f in fields(self)}


@dataclass
class MomentumState:
    """Attack state carried between iterations.

    ``g`` is the MI-FGSM accumulated direction; ``m``/``v`` are Adam moments.
    Kept in float64.
    """

    g: np.ndarray
    m: np.ndarray
    v: np.ndarray
    step: int = 0

    @classmethod
    def zeros(cls, shape: Tuple[int, ...]) -> "MomentumState":
        return cls(np.zeros(shape), np.zeros(shape), np.zeros(shape), 0)


@dataclass
class AdversarialResult:
    x_adv: Tensor
    trace: np.ndarray  # (records, N): dispersion for DR, cross-entropy otherwise
    linf: np.ndarray  # (N,) achieved L-inf distance, 0-1 units
    iterations: int
    attack: str = ""
    degenerate: Optional[np.ndarray] = None
    iterates: Optional[List[np.ndarray]] = None


# ---------------------------------------------------------------------------
# primitives


def adam_step(
    state: MomentumState,
    grad: np.ndarray,
    lr: float,
    betas: Tuple[float, float] = (0.98, 0.99),
    eps: float = 1e-8,
) -> Tuple[MomentumState, np.ndarray]:
    """One bias-corrected Adam update; returns the new state and the descent delta."""
    grad = np.asarray(grad.data if isinstance(grad, Tensor) else grad, dtype=np.float64)
    if grad.shape != state.m.shape:
        raise ad.ShapeError(f"gradient shape {grad.shape} does not match state shape {state.m.shape}")
    if not np.isfinite(grad).all():
        raise ad.NonFiniteError("adam_step received a non-finite gradient")
    b1, b2 = betas
    t = state.step + 1
    m = b1 * state.m + (1 - b1) * grad
    v = b2 * state.v + (1 - b2) * grad * grad
    m_hat = m / (1 - b1**t)
    v_hat = v / (1 - b2**t)
    delta = lr * m_hat / (np.sqrt(v_hat) + eps)
    return MomentumState(state.g, m, v, t), delta


def momentum_update(state: MomentumState, grad: np.ndarray, mu: float) -> MomentumState:
    """g <- mu * g + grad / |grad|_1, the L1 norm taken per image over axis 0.

    A zero L1 norm makes the normalised term zero, so momentum alone drives the step.
    """
    g64 = np.asarray(grad, dtype=np.float64)
    l1 = np.abs(g64).reshape(len(g64), -1).sum(axis=1)
    scale = np.divide(1.0, l1, out=np.zeros_like(l1), where=l1 > 0)
    g = mu * state.g + g64 * scale.reshape((-1,) + (1,) * (g64.ndim - 1))
    return MomentumState(g, state.m, state.v, state.step + 1)


def _bounds(x: np.ndarray, epsilon: float) -> Tuple[np.ndarray, np.ndarray]:
    e = np.float32(epsilon / 255.0)
    return np.maximum(x - e, np.float32(0)), np.minimum(x + e, np.float32(1))


def _project(x_t: np.ndarray, x: np.ndarray, epsilon: float) -> np.ndarray:
    lo, hi = _bounds(x, epsilon)
    # epsilon ball, then pixel range
    return np.clip(np.asarray(x_t, dtype=np.float32), lo, hi).astype(np.float32)


def project(x_t, x, epsilon: float) -> Tensor:
    """Clip ``x_t`` into the epsilon ball around ``x`` intersected with [0, 1]."""
    a = np.asarray(x_t.data if isinstance(x_t, Tensor) else x_t, dtype=np.float32)
    b = np.asarray(x.data if isinstance(x, Tensor) else x, dtype=np.float32)
    if a.shape != b.shape:
        raise ad.ShapeError(f"project: shapes differ, {a.shape} vs {b.shape}")
    return Tensor(_project(a, b, epsilon))


def check_linf(x, x_adv, epsilon: float) -> np.ndarray:
    """Per-image L-inf distance; raises BudgetViolation on any breach."""
    a = np.asarray(x.data if isinstance(x, Tensor) else x, dtype=np.float64)
    b = np.asarray(x_adv.data if isinstance(x_adv, Tensor) else x_adv, dtype=np.float64)
    if a.ndim == 3:
        a, b = a[None], b[None]
    dist = np.abs(b - a).reshape(len(a), -1).max(axis=1) if a.size else np.zeros(len(a))
    bound = epsilon / 255.0 + LINF_SLACK
    if (dist > bound).any():
        worst = int(dist.argmax())
        raise BudgetViolation(f"image {worst}: L-inf {dist[worst]:.8f} exceeds budget {bound:.8f}")
    if b.size and (b.min() < 0 or b.max() > 1):
        raise BudgetViolation("adversarial pixels outside [0, 1]")
    return dist


def _sign_step(x_t: np.ndarray, direction: np.ndarray, alpha: float) -> np.ndarray:
    # sign(0) == 0: no perturbation without a direction
    return x_t + np.float32(alpha / 255.0) * np.sign(direction).astype(np.float32)


def _as_batch(x) -> Tuple[np.ndarray, bool]:
    arr = np.array(x.data if isinstance(x, Tensor) else x, dtype=np.float32)
    if arr.ndim == 3:
        return arr[None], True
    if arr.ndim != 4:
        raise ad.ShapeError(f"expected (C, H, W) or (N, C, H, W) input, got shape {arr.shape}")
    if arr.size and (arr.min() < 0 or arr.max() > 1):
        raise ValueError("input pixels must lie in [0, 1]")
    return arr, False


def _labels(label, n: int) -> np.ndarray:
    labels = np.atleast_1d(np.asarray(label, dtype=np.int64))
    if labels.shape != (n,):
        raise ad.ShapeError(f"expected {n} labels, got shape {labels.shape}")
    return labels


def _finish(name, x0, xt, single, epsilon, trace, iterations, degenerate=None, iterates=None) -> AdversarialResult:
    linf = check_linf(x0, xt, epsilon)
    x_adv = Tensor(xt[0] if single else xt)
    return AdversarialResult(x_adv, np.asarray(trace), linf, iterations, name, degenerate, iterates)


# ---------------------------------------------------------------------------
# gradients


def loss_gradient(model: Model, x: np.ndarray, labels: np.ndarray) -> Tuple[np.ndarray, np.ndarray]:
    """Per-image cross-entropy and its input gradient (loss summed over the batch)."""
    xt = Tensor(x, requires_grad=True)
    with Tape() as tape:
        logits = model.forward(xt)
        loss = ad.softmax_cross_entropy(logits, labels, reduction="sum")
    grad = backward(tape, loss)[xt].data
    return _per_image_xent(logits.data, labels), grad


def _per_image_xent(logits: np.ndarray, labels: np.ndarray) -> np.ndarray:
    z = logits.astype(np.float64)
    z = z - z.max(axis=1, keepdims=True)
    return np.log(np.exp(z).sum(axis=1)) - z[np.arange(len(z)), labels]


def dispersion_gradient(model: Model, x: np.ndarray, tap: str) -> Tuple[np.ndarray, np.ndarray]:
    """Per-image std of the tapped feature map and its input gradient."""
    xt = Tensor(x, requires_grad=True)
    with Tape() as tape:
        stds = ad.std_dispersion(model.features(xt, tap), per_sample=True)
        root = ad.sum_all(stds)
    return stds.data.astype(np.float64), backward(tape, root)[xt].data


def feature_dispersion(model: Model, x: np.ndarray, tap: str, batch_size: int = 250) -> np.ndarray:
    out = []
    for start in range(0, len(x), batch_size):
        feats = model.features(Tensor(x[start : start + batch_size]), tap)
        out.append(ad.std_dispersion(feats, per_sample=True).data.astype(np.float64))
    return np.concatenate(out) if out else np.zeros(0)


def closed_form_std_gradient(t: np.ndarray) -> np.ndarray:
    """d std / d t = (t - mean) / (sqrt(N - 1) * sqrt(sum (t_i - mean)^2)), 0 at zero variance."""
    flat = np.asarray(t, dtype=np.float64).reshape(-1)
    centred = flat - flat.mean()
    ss = float(centred @ centred)
    if ss == 0.0:
        return np.zeros(np.shape(t))
    return (centred / (math.sqrt(flat.size - 1) * math.sqrt(ss))).reshape(np.shape(t))


def analytic_dispersion_gradient(model: Model, x, tap: str) -> np.ndarray:
    """Input gradient of the tapped std, chaining the closed form through the network.

    The closed-form head gives dstd/dF; the tape only supplies the
    vector-Jacobian product with dF/dx, expressed as a dense contraction.
    """
    batch, single = _as_batch(x)
    out = np.zeros(batch.shape, dtype=np.float64)
    for i in range(len(batch)):
        xi = Tensor(batch[i : i + 1], requires_grad=True)
        with Tape() as tape:
            feats = model.features(xi, tap)
            head = closed_form_std_gradient(feats.data[0]).reshape(-1, 1)
            root = ad.dense(ad.flatten(feats), Tensor(head), Tensor(np.zeros(1)))
        out[i] = backward(tape, root)[xi].data[0]
    return out[0] if single else out


# ---------------------------------------------------------------------------
# attacks


def identity(model: Model, x, label=None, cfg: Optional[AttackConfig] = None, indices=None) -> AdversarialResult:
    batch, single = _as_batch(x)
    eps = cfg.epsilon if cfg else 16.0
    return _finish("identity", batch, batch.copy(), single, eps, np.zeros((0, len(batch))), 0)


def dispersion_reduction(
    model: Model, x, cfg: AttackConfig, indices=None, record_iterates: bool = False
) -> AdversarialResult:
    """Minimise the std of the tap layer's feature map with Adam, projecting every step."""
    tap = cfg.tap_layer or model.default_tap()
    model.depth(tap)
    x0, single = _as_batch(x)
    steps = cfg.iterations_for("dr")
    betas = (cfg.adam_beta1, cfg.adam_beta2)
    xt = x0.copy()
    state = MomentumState.zeros(x0.shape)
    trace = []
    iterates = [] if record_iterates else None
    degenerate = np.zeros(len(x0), dtype=bool)
    for t in range(steps):
        stds, grad = dispersion_gradient(model, xt, tap)
        trace.append(stds)
        if t == 0:
            degenerate = stds == 0
        state, delta = adam_step(state, grad, cfg.learning_rate, betas, cfg.adam_eps)
        xt = _project(xt - delta, x0, cfg.epsilon)
        xt[degenerate] = x0[degenerate]
        if iterates is not None:
            iterates.append(xt.copy())
    trace.append(feature_dispersion(model, xt, tap))
    return _finish("dr", x0, xt, single, cfg.epsilon, trace, steps, degenerate, iterates)


def fgsm(model: Model, x, label, epsilon: float = 16.0, record_iterates: bool = False) -> AdversarialResult:
    """x' = clip(x + epsilon * sign(grad_x J(x, y)))."""
    x0, single = _as_batch(x)
    labels = _labels(label, len(x0))
    loss, grad = loss_gradient(model, x0, labels)
    xt = _project(_sign_step(x0, grad, epsilon), x0, epsilon)
    final, _ = loss_gradient(model, xt, labels)
    return _finish("fgsm", x0, xt, single, epsilon, [loss, final], 1, iterates=[xt.copy()] if record_iterates else None)


def _diversity_index(rngs, shape, p: float) -> Optional[np.ndarray]:
    """Random resize-then-pad as a gather map; None when no image is transformed."""
    n, _, h, w = shape
    idx = np.tile(np.arange(h * w), (n, 1))
    touched = False
    for i, rng in enumerate(rngs):
        if not rng.random() < p:
            continue
        touched = True
        rh = int(rng.integers(math.ceil(0.9 * h), h + 1))
        rw = max(1, int(round(rh * w / h)))
        top = int(rng.integers(0, h - rh + 1))
        left = int(rng.integers(0, w - rw + 1))
        src_r = (np.arange(rh) * h) // rh
        src_c = (np.arange(rw) * w) // rw
        canvas = np.full((h, w), -1, dtype=np.int64)
        canvas[top : top + rh, left : left + rw] = src_r[:, None] * w + src_c[None, :]
        idx[i] = canvas.reshape(-1)
    return idx if touched else None


def _diverse_loss_gradient(model, x, labels, index):
    xt = Tensor(x, requires_grad=True)
    with Tape() as tape:
        loss = ad.softmax_cross_entropy(model.forward(ad.gather_pad(xt, index)), labels, reduction="sum")
    return backward(tape, loss)[xt].data


def _iterative(
    name: str,
    model: Model,
    x,
    label,
    cfg: AttackConfig,
    momentum: Optional[float],
    p: float,
    indices=None,
    record_iterates: bool = False,
) -> AdversarialResult:
    x0, single = _as_batch(x)
    labels = _labels(label, len(x0))
    steps = cfg.iterations_for(name)
    alpha = cfg.step_for(name)
    indices = np.arange(len(x0)) if indices is None else np.asarray(indices)
    rngs = [np.random.default_rng([cfg.seed, int(i)]) for i in indices] if p > 0 else []
    state = MomentumState.zeros(x0.shape)
    xt = x0.copy()
    trace = []
    iterates = [] if record_iterates else None
    for _ in range(steps):
        index = _diversity_index(rngs, x0.shape, p) if p > 0 else None
        if index is None:
            loss, grad = loss_gradient(model, xt, labels)
        else:
            # the trace keeps the loss at the untransformed iterate
            loss = _per_image_xent(model.forward(Tensor(xt)).data, labels)
            grad = _diverse_loss_gradient(model, xt, labels, index)
        trace.append(loss)
        if momentum is None:
            direction = grad
        else:
            state = momentum_update(state, grad, momentum)
            direction = state.g
        xt = _project(_sign_step(xt, direction, alpha), x0, cfg.epsilon)
        if iterates is not None:
            iterates.append(xt.copy())
    final, _ = loss_gradient(model, xt, labels)
    trace.append(final)
    return _finish(name, x0, xt, single, cfg.epsilon, trace, steps, iterates=iterates)


def ifgsm(model: Model, x, label, cfg: AttackConfig, indices=None, record_iterates: bool = False) -> AdversarialResult:
    return _iterative("ifgsm", model, x, label, cfg, None, 0.0, indices, record_iterates)


def mi_fgsm(model: Model, x, label, cfg: AttackConfig, indices=None, record_iterates: bool = False) -> AdversarialResult:
    """g <- mu * g + grad / |grad|_1 ;  x' <- clip(x' + alpha * sign(g))."""
    return _iterative("mi_fgsm", model, x, label, cfg, cfg.momentum, 0.0, indices, record_iterates)


def dim(model: Model, x, label, cfg: AttackConfig, indices=None, record_iterates: bool = False) -> AdversarialResult:
    """MI-FGSM with the gradient taken at a randomly resized and padded input (probability p per image)."""
    return _iterative("dim", model, x, label, cfg, cfg.momentum, cfg.transform_probability, indices, record_iterates)


def run_attack(name: str, model: Model, x, labels, cfg: AttackConfig, indices=None) -> AdversarialResult:
    """Dispatch by attack identifier with a uniform signature."""
    if name == "dr":
        return dispersion_reduction(model, x, cfg, indices)
    if name == "fgsm":
        return fgsm(model, x, labels, cfg.epsilon)
    if name == "identity":
        return identity(model, x, labels, cfg)
    try:
        fn = ITERATIVE[name]
    except KeyError:
        raise ValueError(f"unknown attack {name!r}; choose from {', '.join(ATTACK_NAMES)}") from None
    return fn(model, x, labels, cfg, indices)


ITERATIVE: Dict[str, Callable] = {"ifgsm": ifgsm, "mi_fgsm": mi_fgsm, "dim": dim}
ATTACK_NAMES: Sequence[str] = ("dr", "fgsm", "ifgsm", "mi_fgsm", "dim", "identity")
