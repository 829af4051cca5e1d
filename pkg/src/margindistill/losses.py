"""Training objectives with forward values and analytic gradients.

Five objectives are implemented:

* ``unified_margin_loss`` — the (m1, m2, m3, s) margin softmax family;
  SphereFace, CosFace and ArcFace are parameter presets of it.
* ``margin_distillation_loss`` — ArcFace with a per-sample additive
  angular margin supplied by ``per_sample_margins`` from teacher cosines.
* ``triplet_distillation_loss`` — hinge over triplets whose margin is set
  by teacher distance gaps.
* ``angular_distillation_loss`` — mean (1 - cos) between student and
  teacher embeddings.
* ``temperature_kd_loss`` — temperature-softened KL between teacher and
  student margin-adjusted distributions.

Gradients are exact derivatives of the returned value with respect to the
stated inputs; every one is validated against central finite differences
in the test suite.

Angle saturation: whenever the adjusted angle theta*m1 + m2 exceeds pi,
it is clamped to pi and the local derivative is taken as 0. This keeps
the loss monotone in the margin without target-logit fallbacks.
"""

import enum
from dataclasses import dataclass

import numpy as np

from .errors import (
    DimensionMismatch,
    EmptyBatch,
    InvalidConfig,
    LabelOutOfRange,
    NonPositiveTemperature,
)
from .geometry import ClassCenters, CosineLogits, EmbeddingBatch, clamp_cosines

DEFAULT_SCALE = 64.0
DEFAULT_M_MIN = 0.2
DEFAULT_M_MAX = 0.5

# Teacher probabilities below this contribute 0 to the KL (limit convention).
KL_PROB_FLOOR = 1e-12


@dataclass(frozen=True)
class MarginSpec:
    """Margin softmax parameters: multiplicative angular margin ``m1``,
    additive angular margin ``m2`` (radians), additive cosine margin
    ``m3``, logit scale ``s``."""

    m1: float = 1.0
    m2: float = 0.0
    m3: float = 0.0
    s: float = DEFAULT_SCALE

    def __post_init__(self):
        if not self.s > 0:
            raise InvalidConfig(f"scale s must be positive, got {self.s}")
        if self.m1 < 1:
            raise InvalidConfig(f"m1 must be >= 1, got {self.m1}")
        if not 0 <= self.m2 < np.pi / 2:
            raise InvalidConfig(f"m2 must be in [0, pi/2), got {self.m2}")
        if not 0 <= self.m3 < 1:
            raise InvalidConfig(f"m3 must be in [0, 1), got {self.m3}")

    @classmethod
    def sphereface(cls, s: float = DEFAULT_SCALE) -> "MarginSpec":
        return cls(4.0, 0.0, 0.0, s)

    @classmethod
    def cosface(cls, s: float = DEFAULT_SCALE) -> "MarginSpec":
        return cls(1.0, 0.0, 0.35, s)

    @classmethod
    def arcface(cls, s: float = DEFAULT_SCALE) -> "MarginSpec":
        return cls(1.0, 0.5, 0.0, s)

    @classmethod
    def softmax(cls, s: float = DEFAULT_SCALE) -> "MarginSpec":
        """No margin: plain softmax cross-entropy over scaled cosines."""
        return cls(1.0, 0.0, 0.0, s)


@dataclass(frozen=True)
class PerSampleMargins:
    """Additive angular margins m_i derived from teacher cosines a_i.

    ``cosines`` holds the a_i after clamping below at zero; ``a_max`` is
    their batch maximum. Every margin lies in [m_min, m_max] and is
    non-decreasing in a_i; the a_max sample gets exactly m_max.
    """

    margins: np.ndarray
    cosines: np.ndarray
    a_max: float
    m_min: float
    m_max: float


@dataclass(frozen=True)
class LossOutput:
    """Softmax-family loss: scalar value, gradient with respect to every
    input cosine logit, and the probability rows of the forward pass."""

    value: float
    grad_logits: np.ndarray
    probabilities: np.ndarray


@dataclass(frozen=True)
class TripletLossOutput:
    """Triplet hinge loss with gradients per student embedding role and
    the dynamic margins actually applied."""

    value: float
    grad_anchor: np.ndarray
    grad_positive: np.ndarray
    grad_negative: np.ndarray
    margins: np.ndarray


@dataclass(frozen=True)
class AngularLossOutput:
    value: float
    grad_student: np.ndarray
    cosines: np.ndarray


@dataclass(frozen=True)
class EmbeddingGradients:
    """Gradients of a scalar loss through cosine logits and L2
    normalization, with respect to pre-normalization inputs and centers.

    ``centers_frozen`` flags grad_centers as non-applicable when the
    centers were transferred from a teacher.
    """

    grad_inputs: np.ndarray
    grad_centers: np.ndarray
    centers_frozen: bool


class DistanceMetric(enum.Enum):
    L2 = "l2"
    COS = "cos"


def _check_labels(labels, n_rows: int, n_classes: int) -> np.ndarray:
    labels = np.asarray(labels)
    if labels.shape != (n_rows,):
        raise DimensionMismatch(f"labels shape {labels.shape} != ({n_rows},)")
    if labels.size and (labels.min() < 0 or labels.max() >= n_classes):
        raise LabelOutOfRange(f"labels must lie in [0, {n_classes})")
    return labels.astype(np.int64)


def _adjusted_logits(logits: np.ndarray, labels: np.ndarray, m1: float,
                     m2: np.ndarray, m3: float, s: float):
    """Margin-adjusted scaled logits z and the label-column derivative
    dz/d(cos theta_y), with the angle clamped at pi (derivative 0 there)."""
    n_rows = logits.shape[0]
    idx = np.arange(n_rows)
    cy = clamp_cosines(logits[idx, labels])
    theta = np.arccos(cy)
    phi_raw = theta * m1 + m2
    saturated = phi_raw > np.pi
    phi = np.minimum(phi_raw, np.pi)
    z = s * logits
    z[idx, labels] = s * (np.cos(phi) - m3)
    dz_dcy = np.where(saturated, 0.0,
                      s * m1 * np.sin(phi) / np.sqrt(1.0 - cy * cy))
    return z, dz_dcy


def _log_softmax(z: np.ndarray):
    zmax = z.max(axis=1, keepdims=True)
    shifted = z - zmax
    log_norm = np.log(np.exp(shifted).sum(axis=1, keepdims=True))
    return shifted - log_norm


def _margin_softmax_core(logits: np.ndarray, labels: np.ndarray, m1: float,
                         m2: np.ndarray, m3: float, s: float) -> LossOutput:
    n_rows = logits.shape[0]
    idx = np.arange(n_rows)
    z, dz_dcy = _adjusted_logits(logits, labels, m1, m2, m3, s)
    log_p = _log_softmax(z)
    probs = np.exp(log_p)
    value = float(-np.mean(log_p[idx, labels]))

    grad_z = probs.copy()
    grad_z[idx, labels] -= 1.0
    grad_z /= n_rows
    grad = s * grad_z
    grad[idx, labels] = grad_z[idx, labels] * dz_dcy
    return LossOutput(value, grad, probs)


def unified_margin_loss(logits: CosineLogits, labels, spec: MarginSpec) -> LossOutput:
    """Margin softmax cross-entropy for any (m1, m2, m3, s).

    The label logit becomes s*(cos(theta_y*m1 + m2) - m3); all other
    logits are scaled cosines. ``grad_logits`` is the exact gradient of
    the value with respect to every input entry.
    """
    arr = logits.data
    labels = _check_labels(labels, arr.shape[0], arr.shape[1])
    m2 = np.full(arr.shape[0], float(spec.m2))
    return _margin_softmax_core(arr, labels, spec.m1, m2, spec.m3, spec.s)


def per_sample_margins(teacher_cos, m_min: float = DEFAULT_M_MIN,
                       m_max: float = DEFAULT_M_MAX) -> PerSampleMargins:
    """Linear margin law m_i = (m_max - m_min)/a_max * a_i + m_min.

    Teacher cosines are clamped below at zero, a_max is the batch maximum
    of the clamped values, and the result is clamped to [m_min, m_max].
    A batch with a_max below 1e-7 gets m_min everywhere.
    """
    a = np.asarray(teacher_cos, dtype=np.float64)
    if a.size == 0:
        raise EmptyBatch("per_sample_margins needs at least one cosine")
    if not 0 <= m_min <= m_max:
        raise InvalidConfig(f"need 0 <= m_min <= m_max, got ({m_min}, {m_max})")
    a = np.maximum(a, 0.0)
    a_max = float(a.max())
    if a_max < 1e-7:
        margins = np.full(a.shape, float(m_min))
    else:
        margins = np.clip((m_max - m_min) / a_max * a + m_min, m_min, m_max)
    return PerSampleMargins(margins, a, a_max, float(m_min), float(m_max))


def margin_distillation_loss(logits: CosineLogits, labels,
                             margins: PerSampleMargins, s: float = DEFAULT_SCALE) -> LossOutput:
    """ArcFace with one additive angular margin per sample.

    With all margins equal to a constant m this is bit-equal to
    ``unified_margin_loss`` with spec (1, m, 0, s).
    """
    arr = logits.data
    labels = _check_labels(labels, arr.shape[0], arr.shape[1])
    if margins.margins.shape != (arr.shape[0],):
        raise DimensionMismatch(
            f"margins length {margins.margins.shape} != batch size {arr.shape[0]}")
    return _margin_softmax_core(arr, labels, 1.0, margins.margins, 0.0, s)


def _pair_distance(u: np.ndarray, v: np.ndarray, metric: DistanceMetric):
    """Row-wise distance and its gradients with respect to u and v.

    L2 is the squared Euclidean distance; COS is 1 - cosine, computed
    with explicit norms so the gradient is exact for any inputs.
    """
    if metric is DistanceMetric.L2:
        diff = u - v
        d = (diff * diff).sum(axis=1)
        return d, 2.0 * diff, -2.0 * diff
    nu = np.linalg.norm(u, axis=1, keepdims=True)
    nv = np.linalg.norm(v, axis=1, keepdims=True)
    uh = u / nu
    vh = v / nv
    cos = (uh * vh).sum(axis=1, keepdims=True)
    d = 1.0 - cos[:, 0]
    grad_u = -(vh - cos * uh) / nu
    grad_v = -(uh - cos * vh) / nv
    return d, grad_u, grad_v


def triplet_distillation_loss(student, teacher, m_min: float = DEFAULT_M_MIN,
                              m_max: float = DEFAULT_M_MAX,
                              metric: DistanceMetric = DistanceMetric.L2) -> TripletLossOutput:
    """Triplet hinge whose margin follows the teacher's distance gap.

    ``student`` and ``teacher`` are (anchor, positive, negative) triples
    of aligned EmbeddingBatches. Per triplet the teacher gap
    g = d_T(a, n) - d_T(a, p) sets m = clamp(m_min + g, m_min, m_max) and
    the student pays max(0, d_S(a, p) - d_S(a, n) + m).
    """
    sa, sp, sn = (b.data for b in student)
    ta, tp, tn = (b.data for b in teacher)
    n_rows = sa.shape[0]
    for arr in (sp, sn):
        if arr.shape != sa.shape:
            raise DimensionMismatch("student triplet batches must share one shape")
    for arr in (tp, tn):
        if arr.shape != ta.shape:
            raise DimensionMismatch("teacher triplet batches must share one shape")
    if ta.shape[0] != n_rows:
        raise DimensionMismatch("teacher and student triplet counts differ")

    d_tp, _, _ = _pair_distance(ta, tp, metric)
    d_tn, _, _ = _pair_distance(ta, tn, metric)
    margins = np.clip(m_min + (d_tn - d_tp), m_min, m_max)

    d_sp, g_ap, g_p = _pair_distance(sa, sp, metric)
    d_sn, g_an, g_n = _pair_distance(sa, sn, metric)
    slack = d_sp - d_sn + margins
    active = (slack > 0).astype(np.float64)[:, None]
    value = float(np.mean(np.maximum(slack, 0.0)))

    scale = active / n_rows
    return TripletLossOutput(
        value=value,
        grad_anchor=scale * (g_ap - g_an),
        grad_positive=scale * g_p,
        grad_negative=scale * (-g_n),
        margins=margins,
    )


def angular_distillation_loss(student: EmbeddingBatch, teacher: EmbeddingBatch) -> AngularLossOutput:
    """Mean (1 - cos) between student and teacher embedding directions."""
    s_arr, t_arr = student.data, teacher.data
    if s_arr.shape != t_arr.shape:
        raise DimensionMismatch(
            f"student shape {s_arr.shape} != teacher shape {t_arr.shape}")
    d, grad_s, _ = _pair_distance(s_arr, t_arr, DistanceMetric.COS)
    return AngularLossOutput(
        value=float(np.mean(d)),
        grad_student=grad_s / s_arr.shape[0],
        cosines=1.0 - d,
    )


def temperature_kd_loss(student_logits: CosineLogits, teacher_logits: CosineLogits,
                        labels, spec: MarginSpec, temperature: float,
                        hard_weight: float = 0.0) -> LossOutput:
    """Soft-target KL distillation over margin-adjusted logits.

    Teacher and student logits both get the margin applied at the label
    position, are divided by the temperature, and the loss is
    T^2 * KL(teacher || student) averaged over the batch. ``hard_weight``
    optionally adds that multiple of the plain cross-entropy on the
    student's margin-adjusted logits.
    """
    if temperature <= 0:
        raise NonPositiveTemperature(f"temperature must be > 0, got {temperature}")
    s_arr, t_arr = student_logits.data, teacher_logits.data
    if s_arr.shape != t_arr.shape:
        raise DimensionMismatch(
            f"student logits {s_arr.shape} != teacher logits {t_arr.shape}")
    n_rows = s_arr.shape[0]
    idx = np.arange(n_rows)
    labels = _check_labels(labels, n_rows, s_arr.shape[1])
    m2 = np.full(n_rows, float(spec.m2))

    z_s, dz_dcy = _adjusted_logits(s_arr, labels, spec.m1, m2, spec.m3, spec.s)
    z_t, _ = _adjusted_logits(t_arr, labels, spec.m1, m2, spec.m3, spec.s)

    log_q = _log_softmax(z_s / temperature)
    log_p = _log_softmax(z_t / temperature)
    p = np.exp(log_p)
    q = np.exp(log_q)
    kl_terms = np.where(p > KL_PROB_FLOOR, p * (log_p - log_q), 0.0)
    value = temperature**2 * float(np.mean(kl_terms.sum(axis=1)))
    # d(T^2 * KL)/dz_s = T * (q - p), averaged over the batch
    grad_z = temperature * (q - p) / n_rows

    if hard_weight != 0.0:
        log_q1 = _log_softmax(z_s)
        hard_probs = np.exp(log_q1)
        value += hard_weight * float(-np.mean(log_q1[idx, labels]))
        grad_hard = hard_probs.copy()
        grad_hard[idx, labels] -= 1.0
        grad_z = grad_z + hard_weight * grad_hard / n_rows

    grad = spec.s * grad_z
    grad[idx, labels] = grad_z[idx, labels] * dz_dcy
    return LossOutput(value, grad, q)


def backprop_to_embeddings(grad_logits, x: EmbeddingBatch, w: ClassCenters) -> EmbeddingGradients:
    """Chain a logit gradient back through the cosine dot product and the
    row/column L2-normalization maps.

    Inputs are unit-norm, so the normalization Jacobian reduces to the
    tangent projector I - vv^T: both returned gradients are orthogonal to
    their embedding/center directions.
    """
    g = np.asarray(grad_logits, dtype=np.float64)
    if g.shape != (x.n, w.n_classes):
        raise DimensionMismatch(
            f"grad_logits shape {g.shape} != ({x.n}, {w.n_classes})")
    if x.dim != w.dim:
        raise DimensionMismatch(f"embedding dim {x.dim} != center dim {w.dim}")
    gx = g @ w.data.T
    gx -= (gx * x.data).sum(axis=1, keepdims=True) * x.data
    gw = x.data.T @ g
    gw -= (gw * w.data).sum(axis=0, keepdims=True) * w.data
    return EmbeddingGradients(gx, gw, w.frozen)
