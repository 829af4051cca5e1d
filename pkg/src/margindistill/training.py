"""Training loops: teacher, center transfer, and student distillation.

All methods share one SGD-with-momentum driver over a flat parameter set
(MLP weights, biases, optionally the raw class-center matrix). Centers
are stored unnormalized and column-normalized every forward pass; frozen
centers (MarginDistillation) are excluded from the update set and stay
bit-identical for the whole run.

Runs are deterministic given (config, dataset, seed): batch order comes
from counter-based streams and every reduction has a fixed order.
"""

import enum
import json
from dataclasses import dataclass, field
from typing import Callable

import numpy as np

from . import rng
from .errors import (
    DimensionMismatch,
    DivergedLoss,
    InvalidConfig,
    MissingTeacher,
    ShapeMismatch,
)
from .geometry import (
    ClassCenters,
    EmbeddingBatch,
    cosine_logits,
    normalize_cols,
    normalize_cols_backward,
)
from .losses import (
    DEFAULT_M_MAX,
    DEFAULT_M_MIN,
    DistanceMetric,
    MarginSpec,
    PerSampleMargins,
    angular_distillation_loss,
    backprop_to_embeddings,
    margin_distillation_loss,
    per_sample_margins,
    temperature_kd_loss,
    triplet_distillation_loss,
    unified_margin_loss,
)
from .network import (
    Checkpoint,
    MlpParams,
    Role,
    init_mlp_params,
    mlp_backward,
    mlp_forward,
)
from .data import Dataset, Split

LOSS_DIVERGENCE_CAP = 1e4
SIGNAL_BATCH = 512


class Method(enum.Enum):
    ARCFACE = "arcface"
    MARGIN_DISTILLATION = "margin"
    TRIPLET_L2 = "triplet-l2"
    TRIPLET_COS = "triplet-cos"
    ANGULAR = "angular"
    TEMPERATURE_KD = "temp-kd"


DISTILL_METHODS = tuple(m for m in Method if m is not Method.ARCFACE)


@dataclass
class TrainConfig:
    """Hyperparameters for one training run (desk-scale defaults)."""

    method: Method
    layer_dims: list[int]
    batch_size: int = 128
    total_iterations: int = 20_000
    seed: int = 0
    base_lr: float = 0.1
    momentum: float = 0.9
    weight_decay: float = 5e-4
    milestones: tuple[int, ...] = (10_000, 15_000, 18_000)
    decay_factor: float = 10.0
    spec: MarginSpec = field(default_factory=MarginSpec.arcface)
    m_min: float = DEFAULT_M_MIN
    m_max: float = DEFAULT_M_MAX
    temperature: float = 4.0
    hard_weight: float = 0.0
    lambda_angular: float = 1.0
    global_a_max: bool = False
    triplet_classes: int = 16
    triplet_per_class: int = 8

    def validate(self):
        if self.batch_size < 2:
            raise InvalidConfig(f"batch_size must be >= 2, got {self.batch_size}")
        if self.total_iterations < 1:
            raise InvalidConfig("total_iterations must be >= 1")
        if len(self.layer_dims) < 1 or any(d < 1 for d in self.layer_dims):
            raise InvalidConfig(f"bad layer_dims {self.layer_dims}")
        if list(self.milestones) != sorted(set(self.milestones)):
            raise InvalidConfig("milestones must be strictly increasing")
        if not 0 <= self.momentum < 1:
            raise InvalidConfig(f"momentum must be in [0, 1), got {self.momentum}")
        if self.weight_decay < 0 or self.base_lr <= 0 or self.decay_factor <= 0:
            raise InvalidConfig("bad optimizer constants")
        if not 0 <= self.m_min <= self.m_max:
            raise InvalidConfig(f"need 0 <= m_min <= m_max, got "
                                f"({self.m_min}, {self.m_max})")
        if self.temperature <= 0:
            raise InvalidConfig("temperature must be positive")
        if self.triplet_classes < 2 or self.triplet_per_class < 2:
            raise InvalidConfig("triplet batches need >= 2 classes and >= 2 per class")


@dataclass
class ParamSet:
    """Flat list of trainable tensors with a per-tensor freeze flag."""

    tensors: list[np.ndarray]
    frozen: list[bool]

    def __post_init__(self):
        if len(self.tensors) != len(self.frozen):
            raise ShapeMismatch("tensor/frozen length mismatch")


@dataclass
class OptimizerState:
    """SGD-with-momentum buffers plus the step-decay schedule."""

    velocity: list[np.ndarray]
    momentum: float
    weight_decay: float
    base_lr: float
    milestones: tuple[int, ...]
    decay_factor: float

    @classmethod
    def for_params(cls, pset: ParamSet, config: TrainConfig) -> "OptimizerState":
        return cls(
            velocity=[np.zeros_like(t) for t in pset.tensors],
            momentum=config.momentum,
            weight_decay=config.weight_decay,
            base_lr=config.base_lr,
            milestones=tuple(config.milestones),
            decay_factor=config.decay_factor,
        )


@dataclass
class TeacherSignals:
    """Per-sample teacher quantities cached for a whole distillation run."""

    cosines: np.ndarray
    embeddings: np.ndarray
    logits: np.ndarray


def lr_at(iteration: int, state: OptimizerState) -> float:
    """Base learning rate divided by decay_factor once per passed milestone."""
    if iteration < 0:
        raise InvalidConfig("iteration must be >= 0")
    passed = sum(1 for m in state.milestones if iteration >= m)
    return state.base_lr / state.decay_factor**passed


def sgd_momentum_step(pset: ParamSet, grads: list, state: OptimizerState, lr: float) -> None:
    """In-place update: g' = grad + wd*param; v <- mu*v + g'; param -= lr*v.

    Frozen tensors are skipped entirely (no velocity update either).
    """
    if len(grads) != len(pset.tensors):
        raise ShapeMismatch("gradient list length mismatch")
    for tensor, grad, vel, frozen in zip(pset.tensors, grads, state.velocity, pset.frozen):
        if frozen:
            continue
        grad = np.asarray(grad, dtype=np.float64)
        if grad.shape != tensor.shape:
            raise ShapeMismatch(f"grad shape {grad.shape} != param shape {tensor.shape}")
        g = grad + state.weight_decay * tensor
        vel *= state.momentum
        vel += g
        tensor -= lr * vel


def init_centers(dim: int, n_classes: int, seed: int) -> np.ndarray:
    """Random unit-column center matrix (raw trainable form)."""
    gen = rng.stream(seed, rng.CENTERS)
    return normalize_cols(gen.standard_normal((dim, n_classes)))


def transfer_centers(teacher: Checkpoint, student_dim: int | None = None) -> ClassCenters:
    """Copy the teacher's class centers, re-normalized and frozen.

    The student must share the teacher's embedding dimension; pass
    ``student_dim`` to enforce that here.
    """
    if teacher.role is not Role.TEACHER:
        raise InvalidConfig(f"center transfer needs a TEACHER checkpoint, "
                            f"got {teacher.role.value}")
    if student_dim is not None and student_dim != teacher.centers.dim:
        raise DimensionMismatch(
            f"student embedding dim {student_dim} != teacher centers dim "
            f"{teacher.centers.dim}; distillation with transferred centers "
            f"requires equal dimensions")
    return ClassCenters(normalize_cols(teacher.centers.data), frozen=True)


def embed_dataset(ck: Checkpoint, dataset: Dataset) -> np.ndarray:
    """Unit embeddings for every dataset sample, in fixed-size batches."""
    out = np.empty((dataset.n_samples, ck.params.out_dim))
    for start in range(0, dataset.n_samples, SIGNAL_BATCH):
        stop = min(start + SIGNAL_BATCH, dataset.n_samples)
        emb, _ = mlp_forward(ck.params, dataset.inputs[start:stop])
        out[start:stop] = emb.data
    return out


def precompute_teacher_signals(teacher: Checkpoint, dataset: Dataset) -> TeacherSignals:
    """One teacher forward per sample; cached because the teacher is fixed.

    ``cosines[i]`` is the teacher cosine between sample i's embedding and
    the center of its own class.
    """
    embeddings = embed_dataset(teacher, dataset)
    logits = cosine_logits(EmbeddingBatch(embeddings), teacher.centers).data
    cosines = logits[np.arange(dataset.n_samples), dataset.labels]
    return TeacherSignals(cosines=cosines, embeddings=embeddings, logits=logits)


def _class_batches(dataset: Dataset, batch_size: int, seed: int):
    """Endless stream of train batches from per-epoch permutations."""
    train_idx = dataset.indices_of(Split.TRAIN)
    gen = rng.stream(seed, rng.SHUFFLE)
    pool = np.empty(0, dtype=np.int64)
    while True:
        while pool.size < batch_size:
            pool = np.concatenate([pool, train_idx[gen.permutation(train_idx.size)]])
        yield pool[:batch_size]
        pool = pool[batch_size:]


def _triplet_batches(dataset: Dataset, config: TrainConfig):
    """Endless stream of (sample_indices, triplet index triples).

    Each step draws ``triplet_classes`` identities and up to
    ``triplet_per_class`` train samples per identity, then enumerates
    triplets round-robin over anchors in index order (each anchor
    contributes its r-th (positive, negative) combination per round),
    capped at batch_size triplets.
    """
    train_idx = dataset.indices_of(Split.TRAIN)
    labels = dataset.labels[train_idx]
    members = [train_idx[labels == c] for c in range(dataset.n_classes)]
    eligible = [c for c in range(dataset.n_classes) if members[c].size >= 2]
    if len(eligible) < 2:
        raise InvalidConfig("triplet training needs >= 2 classes with >= 2 train samples")
    n_cls = min(config.triplet_classes, len(eligible))
    gen = rng.stream(config.seed, rng.TRIPLETS)
    cap = config.batch_size
    while True:
        chosen = [eligible[k] for k in gen.choice(len(eligible), size=n_cls, replace=False)]
        batch, owner = [], []
        for slot, c in enumerate(chosen):
            take = min(config.triplet_per_class, members[c].size)
            picks = gen.choice(members[c].size, size=take, replace=False)
            batch.extend(int(members[c][p]) for p in picks)
            owner.extend([slot] * take)
        owner = np.array(owner)
        positions = np.arange(len(batch))
        pos_lists = [positions[(owner == owner[a]) & (positions != a)] for a in positions]
        neg_lists = [positions[owner != owner[a]] for a in positions]
        triples = []
        r = 0
        while len(triples) < cap:
            progressed = False
            for a in positions:
                n_comb = pos_lists[a].size * neg_lists[a].size
                if r < n_comb:
                    triples.append((a, pos_lists[a][r // neg_lists[a].size],
                                    neg_lists[a][r % neg_lists[a].size]))
                    progressed = True
                    if len(triples) == cap:
                        break
            if not progressed:
                break
            r += 1
        yield np.array(batch, dtype=np.int64), np.array(triples, dtype=np.int64)


def _check_loss(value: float, iteration: int) -> None:
    if not np.isfinite(value) or value > LOSS_DIVERGENCE_CAP:
        raise DivergedLoss(f"loss {value} at iteration {iteration}")


class _MetricsWriter:
    def __init__(self, path):
        self._fh = open(path, "w", encoding="utf-8") if path else None

    def write(self, iteration: int, lr: float, loss: float) -> None:
        if self._fh is not None:
            self._fh.write(json.dumps(
                {"iteration": iteration, "lr": lr, "loss": loss}) + "\n")

    def close(self):
        if self._fh is not None:
            self._fh.close()


IterationCallback = Callable[[int, float, float, np.ndarray], None]


def _drive(config: TrainConfig, pset: ParamSet, batches, step_fn,
           centers_tensor: np.ndarray, metrics_path, callback: IterationCallback | None):
    opt = OptimizerState.for_params(pset, config)
    writer = _MetricsWriter(metrics_path)
    loss = float("nan")
    try:
        for it in range(config.total_iterations):
            lr = lr_at(it, opt)
            loss, grads = step_fn(next(batches))
            _check_loss(loss, it)
            sgd_momentum_step(pset, grads, opt, lr)
            writer.write(it, lr, loss)
            if callback is not None:
                callback(it, loss, lr, centers_tensor)
    finally:
        writer.close()
    return loss


def _finish(config: TrainConfig, role: Role, params: MlpParams,
            centers_raw: np.ndarray, frozen: bool, final_loss: float) -> Checkpoint:
    centers = ClassCenters(normalize_cols(centers_raw), frozen=frozen)
    meta = {
        "iterations": config.total_iterations,
        "final_loss": final_loss,
        "seed": config.seed,
        "method": config.method.value,
    }
    return Checkpoint(role=role, params=params, centers=centers, training_meta=meta)


def _classification_step(params, dataset, centers_raw, frozen, loss_fn):
    """Build a step function for losses driven by cosine logits.

    loss_fn(batch_idx, logits, emb) -> (value, grad_logits, extra_grad_emb)
    """
    def step(batch_idx):
        emb, cache = mlp_forward(params, dataset.inputs[batch_idx])
        unit_centers = ClassCenters(normalize_cols(centers_raw), frozen=frozen)
        logits = cosine_logits(emb, unit_centers)
        value, grad_logits, extra_grad_emb = loss_fn(batch_idx, logits, emb)
        eg = backprop_to_embeddings(grad_logits, emb, unit_centers)
        grad_emb = eg.grad_inputs if extra_grad_emb is None else eg.grad_inputs + extra_grad_emb
        mlp_grads = mlp_backward(params, cache, grad_emb)
        grads = [g for pair in zip(mlp_grads.weights, mlp_grads.biases) for g in pair]
        if frozen:
            grads.append(None)
        else:
            grads.append(normalize_cols_backward(centers_raw, eg.grad_centers))
        return value, grads
    return step


def _mlp_pset(params: MlpParams) -> list[np.ndarray]:
    return [t for pair in zip(params.weights, params.biases) for t in pair]


def train_teacher(config: TrainConfig, dataset: Dataset,
                  metrics_path=None, callback: IterationCallback | None = None) -> Checkpoint:
    """Train embedder and class centers jointly with the ArcFace preset."""
    config.validate()
    if config.method is not Method.ARCFACE:
        raise InvalidConfig("train_teacher requires method ARCFACE")
    return _train_arcface(config, dataset, Role.TEACHER, metrics_path, callback)


def _train_arcface(config: TrainConfig, dataset: Dataset, role: Role,
                   metrics_path, callback) -> Checkpoint:
    if config.layer_dims[0] != dataset.in_dim:
        raise DimensionMismatch(
            f"layer_dims[0]={config.layer_dims[0]} != dataset dim {dataset.in_dim}")
    params = init_mlp_params(config.layer_dims, config.seed)
    centers_raw = init_centers(params.out_dim, dataset.n_classes, config.seed)
    pset = ParamSet(_mlp_pset(params) + [centers_raw],
                    [False] * (2 * len(params.weights)) + [False])

    def loss_fn(batch_idx, logits, emb):
        out = unified_margin_loss(logits, dataset.labels[batch_idx], config.spec)
        return out.value, out.grad_logits, None

    step = _classification_step(params, dataset, centers_raw, False, loss_fn)
    final = _drive(config, pset, _class_batches(dataset, config.batch_size, config.seed),
                   step, centers_raw, metrics_path, callback)
    return _finish(config, role, params, centers_raw, False, final)


def distill_student(config: TrainConfig, dataset: Dataset,
                    teacher: Checkpoint | None, metrics_path=None,
                    callback: IterationCallback | None = None) -> Checkpoint:
    """Train a student with the configured method.

    Every method except the plain ARCFACE baseline requires a teacher
    checkpoint. MARGIN_DISTILLATION freezes the transferred teacher
    centers; ANGULAR and TEMPERATURE_KD keep trainable student centers.
    """
    config.validate()
    if config.method is Method.ARCFACE:
        return _train_arcface(config, dataset, Role.STUDENT, metrics_path, callback)
    if teacher is None:
        raise MissingTeacher(f"method {config.method.value} requires --teacher")
    if teacher.role is not Role.TEACHER:
        raise InvalidConfig("distillation teacher checkpoint must have role TEACHER")
    if config.layer_dims[0] != dataset.in_dim:
        raise DimensionMismatch(
            f"layer_dims[0]={config.layer_dims[0]} != dataset dim {dataset.in_dim}")
    if teacher.centers.n_classes != dataset.n_classes:
        raise DimensionMismatch(
            f"teacher trained for {teacher.centers.n_classes} classes, "
            f"dataset has {dataset.n_classes}")

    signals = precompute_teacher_signals(teacher, dataset)
    params = init_mlp_params(config.layer_dims, config.seed)
    student_dim = params.out_dim

    if config.method is Method.MARGIN_DISTILLATION:
        centers = transfer_centers(teacher, student_dim)
        return _distill_margin(config, dataset, signals, params, centers,
                               metrics_path, callback)
    if config.method in (Method.TRIPLET_L2, Method.TRIPLET_COS):
        return _distill_triplet(config, dataset, signals, params,
                                metrics_path, callback)
    if config.method is Method.ANGULAR:
        if student_dim != teacher.params.out_dim:
            raise DimensionMismatch(
                f"angular distillation needs equal embedding dims "
                f"(student {student_dim}, teacher {teacher.params.out_dim})")
        return _distill_angular(config, dataset, signals, params,
                                metrics_path, callback)
    if config.method is Method.TEMPERATURE_KD:
        return _distill_temperature(config, dataset, signals, params,
                                    metrics_path, callback)
    raise InvalidConfig(f"unknown method {config.method}")


def _distill_margin(config, dataset, signals, params, centers: ClassCenters,
                    metrics_path, callback) -> Checkpoint:
    centers_data = centers.data
    pset = ParamSet(_mlp_pset(params) + [centers_data],
                    [False] * (2 * len(params.weights)) + [True])
    global_margins = None
    if config.global_a_max:
        global_margins = per_sample_margins(signals.cosines, config.m_min,
                                            config.m_max)

    def loss_fn(batch_idx, logits, emb):
        if global_margins is not None:
            margins = PerSampleMargins(
                margins=global_margins.margins[batch_idx],
                cosines=global_margins.cosines[batch_idx],
                a_max=global_margins.a_max,
                m_min=config.m_min, m_max=config.m_max)
        else:
            margins = per_sample_margins(signals.cosines[batch_idx],
                                         config.m_min, config.m_max)
        out = margin_distillation_loss(logits, dataset.labels[batch_idx],
                                       margins, config.spec.s)
        return out.value, out.grad_logits, None

    step = _classification_step(params, dataset, centers_data, True, loss_fn)
    final = _drive(config, pset, _class_batches(dataset, config.batch_size, config.seed),
                   step, centers_data, metrics_path, callback)
    ck = _finish(config, Role.STUDENT, params, centers_data, True, final)
    return ck


def _distill_angular(config, dataset, signals, params, metrics_path, callback) -> Checkpoint:
    centers_raw = init_centers(params.out_dim, dataset.n_classes, config.seed)
    pset = ParamSet(_mlp_pset(params) + [centers_raw],
                    [False] * (2 * len(params.weights)) + [False])

    def loss_fn(batch_idx, logits, emb):
        cls = unified_margin_loss(logits, dataset.labels[batch_idx], config.spec)
        ang = angular_distillation_loss(
            emb, EmbeddingBatch(signals.embeddings[batch_idx]))
        value = cls.value + config.lambda_angular * ang.value
        return value, cls.grad_logits, config.lambda_angular * ang.grad_student

    step = _classification_step(params, dataset, centers_raw, False, loss_fn)
    final = _drive(config, pset, _class_batches(dataset, config.batch_size, config.seed),
                   step, centers_raw, metrics_path, callback)
    return _finish(config, Role.STUDENT, params, centers_raw, False, final)


def _distill_temperature(config, dataset, signals, params, metrics_path, callback) -> Checkpoint:
    from .geometry import CosineLogits

    centers_raw = init_centers(params.out_dim, dataset.n_classes, config.seed)
    pset = ParamSet(_mlp_pset(params) + [centers_raw],
                    [False] * (2 * len(params.weights)) + [False])

    def loss_fn(batch_idx, logits, emb):
        out = temperature_kd_loss(
            logits, CosineLogits(signals.logits[batch_idx]),
            dataset.labels[batch_idx], config.spec, config.temperature,
            config.hard_weight)
        return out.value, out.grad_logits, None

    step = _classification_step(params, dataset, centers_raw, False, loss_fn)
    final = _drive(config, pset, _class_batches(dataset, config.batch_size, config.seed),
                   step, centers_raw, metrics_path, callback)
    return _finish(config, Role.STUDENT, params, centers_raw, False, final)


def _distill_triplet(config, dataset, signals, params, metrics_path, callback) -> Checkpoint:
    metric = (DistanceMetric.L2 if config.method is Method.TRIPLET_L2
              else DistanceMetric.COS)
    # centers play no role in the triplet objective; kept only so the
    # checkpoint format stays uniform
    centers_raw = init_centers(params.out_dim, dataset.n_classes, config.seed)
    pset = ParamSet(_mlp_pset(params), [False] * (2 * len(params.weights)))

    def step(batch):
        batch_idx, triples = batch
        emb, cache = mlp_forward(params, dataset.inputs[batch_idx])
        a, p, n = triples[:, 0], triples[:, 1], triples[:, 2]
        student = tuple(EmbeddingBatch(emb.data[k]) for k in (a, p, n))
        t_emb = signals.embeddings[batch_idx]
        teacher = tuple(EmbeddingBatch(t_emb[k]) for k in (a, p, n))
        out = triplet_distillation_loss(student, teacher, config.m_min,
                                        config.m_max, metric)
        grad_emb = np.zeros_like(emb.data)
        np.add.at(grad_emb, a, out.grad_anchor)
        np.add.at(grad_emb, p, out.grad_positive)
        np.add.at(grad_emb, n, out.grad_negative)
        mlp_grads = mlp_backward(params, cache, grad_emb)
        grads = [g for pair in zip(mlp_grads.weights, mlp_grads.biases) for g in pair]
        return out.value, grads

    final = _drive(config, pset, _triplet_batches(dataset, config),
                   step, centers_raw, metrics_path, callback)
    return _finish(config, Role.STUDENT, params, centers_raw, False, final)


def center_classification_accuracy(ck: Checkpoint, dataset: Dataset,
                                   split: Split = Split.TRAIN) -> float:
    """Fraction of samples whose nearest class center is their own class."""
    idx = dataset.indices_of(split)
    emb = embed_dataset(ck, dataset)[idx]
    logits = emb @ ck.centers.data
    return float(np.mean(np.argmax(logits, axis=1) == dataset.labels[idx]))
