"""White-box input attacks: FGSM, PGD (sign and Adam updates) and DeepFool.

Attacks run batched internally; per-image results are independent because
no model op mixes information across the batch axis.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from . import tensor as T
from .validation import as_batch

KINDS = ("fgsm", "pgd_sign", "pgd_adam", "deepfool")


class AttackError(RuntimeError):
    def __init__(self, step: int, message: str = "non-finite gradient"):
        super().__init__(f"{message} at step {step}")
        self.step = step


@dataclass(frozen=True)
class AttackSpec:
    """Attack hyperparameters; ``epsilon`` is an l-inf budget in [-1, 1] pixel units."""

    kind: str = "pgd_sign"
    epsilon: float = 0.002
    steps: int = 20
    step_size: float | None = None
    learning_rate: float = 1e-3
    overshoot: float = 0.02
    max_iters: int = 50
    candidates: int = 10
    adam_betas: tuple[float, float] = (0.9, 0.999)

    def __post_init__(self):
        if self.kind not in KINDS:
            raise ValueError(f"unknown attack kind {self.kind!r}; expected one of {KINDS}")
        if self.epsilon < 0:
            raise ValueError("epsilon must be >= 0")
        if self.steps < 0 or self.max_iters < 0:
            raise ValueError("steps and max_iters must be >= 0")

    @property
    def alpha(self) -> float:
        """Sign-step size; defaults to 2.5 * epsilon / steps."""
        if self.step_size is not None:
            return float(self.step_size)
        return 2.5 * self.epsilon / max(self.steps, 1)


@dataclass
class AttackResult:
    adversarial: np.ndarray
    perturbation: np.ndarray
    loss_trace: np.ndarray
    success: bool
    iterations: int
    vacuous: bool = False


def logit_function(model):
    """Map a checkpoint, a fitted estimator or a callable to ``Tensor -> logits``."""
    ckpt = getattr(model, "checkpoint_", model)
    forward = getattr(ckpt, "forward", None)
    if forward is not None:
        return forward
    if callable(model):
        return model
    raise TypeError(f"cannot attack object of type {type(model).__name__}")


def _loss_and_grad(fn, x: np.ndarray, labels: np.ndarray, step: int):
    xt = T.Tensor(x, requires_grad=True)
    logits = fn(xt)
    losses = T.cross_entropy(logits, labels, reduction="none")
    T.backward(T.sum(losses))
    grad = xt.grad
    if grad is None:
        grad = np.zeros_like(x)
    if not np.all(np.isfinite(grad)):
        raise AttackError(step)
    return losses.data.copy(), logits.data.copy(), grad


def _losses(fn, x, labels):
    with T.no_grad():
        logits = fn(T.Tensor(x))
        return T.cross_entropy(logits, labels, reduction="none").data, logits.data


def pgd_batch(model, images, labels, spec: AttackSpec) -> list[AttackResult]:
    """Projected ascent on cross-entropy from the clean images (no random start)."""
    if spec.kind not in ("pgd_sign", "pgd_adam", "fgsm"):
        raise ValueError(f"pgd_batch cannot run {spec.kind!r}")
    fn = logit_function(model)
    x0, _ = as_batch(images, check_range=True)
    labels = np.asarray(labels, dtype=np.int64).reshape(-1)
    eps = float(spec.epsilon)
    lo, hi = linf_bounds(x0, eps)
    x = x0.copy()
    trace = []
    m = np.zeros_like(x0)
    v = np.zeros_like(x0)
    b1, b2 = spec.adam_betas
    for step in range(spec.steps):
        losses, _, grad = _loss_and_grad(fn, x, labels, step)
        trace.append(losses)
        if spec.kind == "pgd_adam":
            t = step + 1
            m = b1 * m + (1 - b1) * grad
            v = b2 * v + (1 - b2) * grad * grad
            update = spec.learning_rate * (m / (1 - b1**t)) / (np.sqrt(v / (1 - b2**t)) + 1e-8)
        else:
            update = spec.alpha * np.sign(grad)
        x = np.clip(np.clip(x + update, -1.0, 1.0), lo, hi)
    final, logits = _losses(fn, x, labels)
    trace.append(final)
    trace = np.stack(trace, axis=1)
    pred = np.argmax(logits, axis=1)
    return [
        AttackResult(x[i], x[i] - x0[i], trace[i], bool(pred[i] != labels[i]), spec.steps)
        for i in range(x0.shape[0])
    ]


def pgd(model, image, label: int, spec: AttackSpec) -> AttackResult:
    if spec.kind not in ("pgd_sign", "pgd_adam"):
        raise ValueError(f"pgd expects a pgd_sign or pgd_adam spec, got {spec.kind!r}")
    return pgd_batch(model, np.asarray(image)[None], [label], spec)[0]


def linf_bounds(x0, eps: float) -> tuple[np.ndarray, np.ndarray]:
    """Box [lo, hi] within [-1, 1] such that ``|v - x0| <= eps`` holds in floating point for every v in it."""
    lo, hi = x0 - eps, x0 + eps
    # x0 +/- eps is rounded, so the recomputed difference can exceed eps by an ulp
    while np.any(bad := x0 - lo > eps):
        lo = np.where(bad, np.nextafter(lo, np.inf), lo)
    while np.any(bad := hi - x0 > eps):
        hi = np.where(bad, np.nextafter(hi, -np.inf), hi)
    return np.maximum(lo, -1.0), np.minimum(hi, 1.0)


def fgsm_spec(epsilon: float) -> AttackSpec:
    return AttackSpec("fgsm", epsilon=epsilon, steps=1, step_size=epsilon)


def fgsm(model, image, label: int, epsilon: float) -> AttackResult:
    """Single signed-gradient step of size ``epsilon``."""
    return pgd_batch(model, np.asarray(image)[None], [label], fgsm_spec(epsilon))[0]


def fgsm_batch(model, images, labels, epsilon: float) -> list[AttackResult]:
    return pgd_batch(model, images, labels, fgsm_spec(epsilon))


def deepfool_batch(model, images, labels, max_iters: int = 50, overshoot: float = 0.02, candidates: int = 10) -> list[AttackResult]:
    """Iterative linearised minimal-l2 attack against the top competing classes."""
    fn = logit_function(model)
    x0, _ = as_batch(images, check_range=True)
    labels = np.asarray(labels, dtype=np.int64).reshape(-1)
    n = x0.shape[0]
    with T.no_grad():
        clean_logits = fn(T.Tensor(x0)).data
    k = min(candidates, clean_logits.shape[1])
    ranked = np.argsort(-clean_logits, axis=1, kind="stable")[:, :k]
    vacuous = np.argmax(clean_logits, axis=1) != labels
    active = ~vacuous
    r_tot = np.zeros_like(x0)
    x = x0.copy()
    iterations = np.zeros(n, dtype=np.int64)
    traces: list[list[float]] = [[] for _ in range(n)]
    rows = np.arange(n)
    for it in range(max_iters + 1):
        xt = T.Tensor(x, requires_grad=True)
        logits = fn(xt)
        with T.no_grad():
            ce = T.cross_entropy(T.Tensor(logits.data), labels, reduction="none").data
        for i in np.flatnonzero(~vacuous):
            if active[i] or not traces[i] or iterations[i] == it:
                traces[i].append(float(ce[i]))
        pred = np.argmax(logits.data, axis=1)
        active &= pred == labels
        if it == max_iters or not active.any():
            break
        grads = []
        for j in range(k):
            xt.grad = None
            T.backward(T.sum(logits[rows, ranked[:, j]]))
            grads.append(xt.grad.copy())
        grads = np.stack(grads, axis=1)
        if not np.all(np.isfinite(grads)):
            raise AttackError(it)
        g_orig = grads[rows, np.argmax(ranked == labels[:, None], axis=1)]
        f = logits.data[rows[:, None], ranked]
        f_orig = logits.data[rows, labels]
        best = np.full(n, np.inf)
        step = np.zeros_like(x0)
        for j in range(k):
            w = grads[:, j] - g_orig
            fk = f[:, j] - f_orig
            norm = np.sqrt((w * w).reshape(n, -1).sum(axis=1)) + 1e-12
            pert = np.abs(fk) / norm
            better = (ranked[:, j] != labels) & (pert < best)
            best = np.where(better, pert, best)
            scale = ((pert + 1e-4) / norm).reshape((n,) + (1,) * (x0.ndim - 1))
            step = np.where(better.reshape(scale.shape), scale * w, step)
        r_tot = np.where(active.reshape((n,) + (1,) * (x0.ndim - 1)), r_tot + step, r_tot)
        iterations += active
        x = np.clip(x0 + (1 + overshoot) * r_tot, -1.0, 1.0)
    with T.no_grad():
        pred = np.argmax(fn(T.Tensor(x)).data, axis=1)
    return [
        AttackResult(
            x[i],
            x[i] - x0[i],
            np.asarray(traces[i]),
            bool(vacuous[i] or pred[i] != labels[i]),
            int(iterations[i]),
            bool(vacuous[i]),
        )
        for i in range(n)
    ]


def deepfool(model, image, label: int, max_iters: int = 50, overshoot: float = 0.02, candidates: int = 10) -> AttackResult:
    return deepfool_batch(model, np.asarray(image)[None], [label], max_iters, overshoot, candidates)[0]


def run_attack(model, images, labels, spec: AttackSpec) -> list[AttackResult]:
    if spec.kind == "deepfool":
        return deepfool_batch(model, images, labels, spec.max_iters, spec.overshoot, spec.candidates)
    if spec.kind == "fgsm":
        return fgsm_batch(model, images, labels, spec.epsilon)
    return pgd_batch(model, images, labels, spec)
