"""Cluster and instance distillation losses with analytic gradients.

All losses are reported as sums over the batch (the mean-normalized values
are exposed alongside in reports). Teacher embeddings and prototypes are
constants: gradients flow only to the student towers. Every softmax is
log-sum-exp stabilized, and all arithmetic runs in float64 regardless of
the storage precision of the inputs.

Losses:

* ``logit_loss``       L_l  = -sum_i log softmax(W^T e_i^s)[label_i]
* ``kl_distill_loss``  L_d  = sum_i KL(softmax(W^T e_i^s / tau) ||
                                       softmax(W^T e_i^t / tau))
* ``cluster_loss``     alpha * L_l + (1 - alpha) * L_d
* ``contrastive_loss`` bidirectional InfoNCE over matched rows
* ``instance_loss``    gamma * contrast(e^s, c^t) + (1 - gamma) * contrast(c^s, e^t)
* ``overall_loss``     contrast(e^s, c^s) + cluster + instance
"""
from __future__ import annotations

import math
from dataclasses import dataclass, field

import numpy as np


@dataclass(frozen=True)
class LossParams:
    """Temperature and mixing weights. Defaults follow the reference setup."""

    tau: float = 0.07
    alpha: float = 0.999
    gamma: float = 0.5

    def __post_init__(self):
        if self.tau <= 0:
            raise ValueError("tau must be > 0")
        if not 0.0 <= self.alpha <= 1.0:
            raise ValueError("alpha must be in [0, 1]")
        if not 0.0 <= self.gamma <= 1.0:
            raise ValueError("gamma must be in [0, 1]")


@dataclass(frozen=True)
class Prototypes:
    """d x k matrix of unit-norm class prototypes.

    ``active`` optionally restricts the softmax support to a sorted subset
    of columns (negative-class sampling); it must contain every label used.
    ``provenance`` records where the matrix came from; loaders reject
    matrices that were not produced by clustering unless explicitly
    overridden, since training against uninitialized prototypes collapses.
    """

    matrix: np.ndarray
    active: np.ndarray | None = None
    provenance: str = "kmeans"

    def __post_init__(self):
        m = np.ascontiguousarray(self.matrix, dtype=np.float64)
        if m.ndim != 2:
            raise ValueError("prototype matrix must be 2-D (d, k)")
        object.__setattr__(self, "matrix", m)
        if self.active is not None:
            a = np.asarray(self.active, dtype=np.int64)
            if a.size and (a.min() < 0 or a.max() >= m.shape[1]):
                raise ValueError("active indices out of range [0, k)")
            if np.any(np.diff(a) <= 0):
                raise ValueError("active indices must be sorted and unique")
            object.__setattr__(self, "active", a)

    @property
    def k(self) -> int:
        return self.matrix.shape[1]

    def columns(self) -> np.ndarray:
        """The (d, m) matrix actually used: active columns, or all of W."""
        if self.active is None or (
            self.active.size == self.k
            and np.array_equal(self.active, np.arange(self.k))
        ):
            return self.matrix
        return self.matrix[:, self.active]

    def label_positions(self, labels: np.ndarray) -> np.ndarray:
        """Map global labels to column positions in :meth:`columns`."""
        labels = np.asarray(labels, dtype=np.int64)
        if labels.size and (labels.min() < 0 or labels.max() >= self.k):
            raise ValueError("labels out of range [0, k)")
        if self.active is None:
            return labels
        if self.active.size == 0:
            if labels.size:
                raise ValueError(f"label {int(labels[0])} outside active set")
            return labels
        pos = np.searchsorted(self.active, labels)
        bad = (pos >= self.active.size) | (
            self.active[np.minimum(pos, self.active.size - 1)] != labels
        )
        if np.any(bad):
            raise ValueError(f"label {int(labels[np.argmax(bad)])} outside active set")
        return pos


@dataclass(frozen=True)
class DistillBatch:
    """Matched student/teacher image and text embeddings plus pseudo-labels."""

    student_image: np.ndarray
    student_text: np.ndarray
    teacher_image: np.ndarray
    teacher_text: np.ndarray
    labels: np.ndarray

    def __post_init__(self):
        blocks = {
            "student_image": self.student_image,
            "student_text": self.student_text,
            "teacher_image": self.teacher_image,
            "teacher_text": self.teacher_text,
        }
        shape = None
        for name, b in blocks.items():
            arr = np.ascontiguousarray(b, dtype=np.float64)
            if arr.ndim != 2:
                raise ValueError(f"{name} must be 2-D")
            if shape is None:
                shape = arr.shape
            elif arr.shape != shape:
                raise ValueError(f"{name} shape {arr.shape} != {shape}")
            object.__setattr__(self, name, arr)
        labels = np.asarray(self.labels, dtype=np.int64)
        if labels.shape != (shape[0],):
            raise ValueError("labels must have one entry per batch row")
        object.__setattr__(self, "labels", labels)

    @property
    def n(self) -> int:
        return self.student_image.shape[0]


@dataclass(frozen=True)
class LossReport:
    """Scalar loss components (batch sums) and optional student gradients."""

    n: int
    l_logit: float
    l_kl: float
    l_cluster: float
    l_contrast_base: float
    l_instance: float
    l_overall: float
    grad_student_image: np.ndarray | None = None
    grad_student_text: np.ndarray | None = None

    def to_dict(self) -> dict:
        scale = 1.0 / self.n if self.n else 0.0
        out = {
            "n": self.n,
            "sum": {
                "l_logit": self.l_logit,
                "l_kl": self.l_kl,
                "l_cluster": self.l_cluster,
                "l_contrast_base": self.l_contrast_base,
                "l_instance": self.l_instance,
                "l_overall": self.l_overall,
            },
            "mean": {
                "l_logit": self.l_logit * scale,
                "l_kl": self.l_kl * scale,
                "l_cluster": self.l_cluster * scale,
                "l_contrast_base": self.l_contrast_base * scale,
                "l_instance": self.l_instance * scale,
                "l_overall": self.l_overall * scale,
            },
        }
        if self.grad_student_image is not None:
            out["grad_norms"] = {
                "student_image": float(np.linalg.norm(self.grad_student_image)),
                "student_text": float(np.linalg.norm(self.grad_student_text)),
            }
        return out


def _log_softmax(z: np.ndarray) -> np.ndarray:
    shift = z - z.max(axis=1, keepdims=True)
    return shift - np.log(np.exp(shift).sum(axis=1, keepdims=True))


def softmax_with_temperature(logits: np.ndarray, tau: float) -> np.ndarray:
    """Stable softmax of ``logits / tau``; the output sums to 1."""
    if tau <= 0:
        raise ValueError("tau must be > 0")
    z = np.asarray(logits, dtype=np.float64)
    if np.isnan(z).any():
        raise ValueError("NaN in logits")
    return np.exp(_log_softmax(np.atleast_2d(z) / tau)).reshape(z.shape)


def logit_loss(
    student_image: np.ndarray,
    labels: np.ndarray,
    prototypes: Prototypes,
) -> tuple[float, np.ndarray]:
    """Softmax cross-entropy of student embeddings against prototypes.

    No temperature is applied here. Returns the batch sum and the gradient
    with respect to the student embeddings.
    """
    s = np.asarray(student_image, dtype=np.float64)
    w = prototypes.columns()
    pos = prototypes.label_positions(labels)
    logits = s @ w
    logp = _log_softmax(logits)
    n = s.shape[0]
    loss = -float(logp[np.arange(n), pos].sum())
    g = np.exp(logp)
    g[np.arange(n), pos] -= 1.0
    return loss, g @ w.T


def kl_distill_loss(
    student_image: np.ndarray,
    teacher_image: np.ndarray,
    prototypes: Prototypes,
    tau: float,
) -> tuple[float, np.ndarray]:
    """Sum over the batch of KL(student dist || teacher dist) at temperature tau.

    Distributions are softmaxes of prototype logits; the teacher side is a
    constant for the gradient. When an active set is present it restricts
    both distributions, matching the negative-sampling regime.
    """
    if tau <= 0:
        raise ValueError("tau must be > 0")
    s = np.asarray(student_image, dtype=np.float64)
    t = np.asarray(teacher_image, dtype=np.float64)
    w = prototypes.columns()
    logp = _log_softmax((s @ w) / tau)
    logq = _log_softmax((t @ w) / tau)
    p = np.exp(logp)
    r = logp - logq
    kl_per_sample = (p * r).sum(axis=1)
    loss = float(kl_per_sample.sum())
    grad_z = p * (r - kl_per_sample[:, None])
    return loss, (grad_z @ w.T) / tau


def cluster_loss(
    student_image: np.ndarray,
    teacher_image: np.ndarray,
    labels: np.ndarray,
    prototypes: Prototypes,
    params: LossParams,
) -> float:
    """alpha-weighted blend of the logit and KL distillation losses."""
    l_l, _ = logit_loss(student_image, labels, prototypes)
    l_d, _ = kl_distill_loss(student_image, teacher_image, prototypes, params.tau)
    return params.alpha * l_l + (1.0 - params.alpha) * l_d


def contrastive_loss(
    left: np.ndarray,
    right: np.ndarray,
    tau: float,
) -> tuple[float, np.ndarray, np.ndarray]:
    """Bidirectional InfoNCE with diagonal positives.

    Averages the row-wise and column-wise directions, each a batch sum.
    Symmetric in its arguments. Returns the value and gradients with
    respect to both inputs.
    """
    if tau <= 0:
        raise ValueError("tau must be > 0")
    a = np.asarray(left, dtype=np.float64)
    b = np.asarray(right, dtype=np.float64)
    if a.shape != b.shape or a.ndim != 2:
        raise ValueError("left/right must share an (n, d) shape")
    n = a.shape[0]
    if n == 0:
        raise ValueError("empty batch")

    m = (a @ b.T) / tau
    diag = np.arange(n)
    logp_rows = _log_softmax(m)
    # contiguous copy so both argument orders hit the same reduction path
    logp_cols = _log_softmax(np.ascontiguousarray(m.T))
    loss = 0.5 * (-float(logp_rows[diag, diag].sum()) - float(logp_cols[diag, diag].sum()))

    dm = np.exp(logp_rows) + np.exp(logp_cols).T
    dm[diag, diag] -= 2.0
    dm *= 0.5
    return loss, (dm @ b) / tau, (dm.T @ a) / tau


def instance_loss(batch: DistillBatch, params: LossParams) -> float:
    """Cross-tower alignment: student image vs teacher text and vice versa."""
    e_to_c, _, _ = contrastive_loss(batch.student_image, batch.teacher_text, params.tau)
    c_to_e, _, _ = contrastive_loss(batch.student_text, batch.teacher_image, params.tau)
    return params.gamma * e_to_c + (1.0 - params.gamma) * c_to_e


def overall_loss(
    batch: DistillBatch,
    prototypes: Prototypes,
    params: LossParams,
    compute_grads: bool = False,
) -> LossReport:
    """Base CLIP loss plus cluster and instance distillation terms.

    Gradients, when requested, are taken with respect to the student image
    and student text towers and sum the contributions of every component.
    """
    l_logit, g_logit = logit_loss(batch.student_image, batch.labels, prototypes)
    l_kl, g_kl = kl_distill_loss(
        batch.student_image, batch.teacher_image, prototypes, params.tau
    )
    l_cluster = params.alpha * l_logit + (1.0 - params.alpha) * l_kl

    l_base, g_base_img, g_base_txt = contrastive_loss(
        batch.student_image, batch.student_text, params.tau
    )
    l_ec, g_ec, _ = contrastive_loss(batch.student_image, batch.teacher_text, params.tau)
    l_ce, g_ce, _ = contrastive_loss(batch.student_text, batch.teacher_image, params.tau)
    l_instance = params.gamma * l_ec + (1.0 - params.gamma) * l_ce

    l_overall = l_base + l_cluster + l_instance

    grad_img = grad_txt = None
    if compute_grads:
        grad_img = (
            g_base_img
            + params.alpha * g_logit
            + (1.0 - params.alpha) * g_kl
            + params.gamma * g_ec
        )
        grad_txt = g_base_txt + (1.0 - params.gamma) * g_ce
    return LossReport(
        batch.n, l_logit, l_kl, l_cluster, l_base, l_instance, l_overall,
        grad_img, grad_txt,
    )


def sample_negatives(
    k: int,
    rate: float,
    positives: np.ndarray,
    seed: int,
) -> np.ndarray:
    """Positives plus a seeded uniform sample of the negative class indices.

    Keeps ceil(rate * (k - |positives|)) negatives, without replacement.
    Returns a sorted index array; rate 1.0 yields all k classes.
    """
    if not 0.0 < rate <= 1.0:
        raise ValueError("rate must be in (0, 1]")
    pos = np.unique(np.asarray(positives, dtype=np.int64))
    if pos.size and (pos.min() < 0 or pos.max() >= k):
        raise ValueError("positives out of range [0, k)")
    negatives = np.setdiff1d(np.arange(k, dtype=np.int64), pos, assume_unique=True)
    take = math.ceil(rate * negatives.size)
    rng = np.random.default_rng(seed)
    sampled = rng.choice(negatives, size=take, replace=False)
    return np.union1d(pos, sampled)


def finite_difference_gradient(fn, x: np.ndarray, eps: float = 1e-4) -> np.ndarray:
    """Central finite differences of a scalar function, element by element."""
    x = np.asarray(x, dtype=np.float64)
    grad = np.empty_like(x)
    flat = x.reshape(-1)
    gflat = grad.reshape(-1)
    for i in range(flat.size):
        orig = flat[i]
        flat[i] = orig + eps
        f_plus = fn(x)
        flat[i] = orig - eps
        f_minus = fn(x)
        flat[i] = orig
        gflat[i] = (f_plus - f_minus) / (2.0 * eps)
    return grad


def gradient_relative_error(analytic: np.ndarray, numeric: np.ndarray) -> float:
    """L2-norm relative disagreement between two gradients."""
    denom = max(np.linalg.norm(analytic), np.linalg.norm(numeric), 1e-300)
    return float(np.linalg.norm(analytic - numeric) / denom)
