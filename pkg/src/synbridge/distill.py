"""Stage 1: train the student-to-text projector by distillation and a cosine
classifier over the base categories, on frozen embeddings.

The objective per batch is ``mean CE + mean KD`` where KD is the
temperature-scaled KL divergence from the teacher's similarity distribution
over the task's text features to the student's.
"""
from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .dataio import DatasetSplit, EmbeddingBank, sample_episode
from .errors import LabelOutOfRange, MissingBank, ShapeMismatch
from .nnkit import (
    IDENTITY,
    RELU,
    Adam,
    AffineLayer,
    init_parameters,
    layer_from_tensors,
    layer_tensors,
    load_checkpoint,
    save_checkpoint,
)
from .numcore import (
    as_vector,
    kl_divergence,
    l2_normalize,
    normalize_rows,
    softmax,
    softmax_rows,
    unit_rows,
    unit_rows_backward,
)


@dataclass
class DistillConfig:
    temperature: float = 4.0
    scale: float = 10.0
    epochs: int = 10
    episodes_per_epoch: int = 50
    n_way: int = 5
    k_shot: int = 1
    n_query: int = 15
    lr: float = 1e-3
    weight_decay: float = 5e-4
    hidden_dim: int | None = None
    projector_relu: bool = False
    flat_batch: bool = False
    batch_size: int = 80
    seed: int = 0

    def __post_init__(self):
        if not self.temperature > 0:
            raise ValueError("temperature must be positive")
        if not self.scale > 0:
            raise ValueError("classifier scale must be positive")
        if self.epochs < 0 or self.episodes_per_epoch < 1:
            raise ValueError("epochs must be >= 0 and episodes_per_epoch >= 1")


class Projector:
    """Two stacked affine maps from student space to the teacher text space."""

    def __init__(self, first: AffineLayer, second: AffineLayer):
        if first.out_dim != second.in_dim:
            raise ShapeMismatch("projector layers do not chain")
        self.layers = [first, second]

    @classmethod
    def init(cls, in_dim, out_dim, seed, hidden_dim=None, relu=False):
        hidden = hidden_dim or out_dim
        ss = np.random.SeedSequence([seed, 1]).spawn(2)
        return cls(
            init_parameters(in_dim, hidden, ss[0], RELU if relu else IDENTITY),
            init_parameters(hidden, out_dim, ss[1]),
        )

    @property
    def in_dim(self):
        return self.layers[0].in_dim

    @property
    def out_dim(self):
        return self.layers[1].out_dim

    def forward(self, x):
        return self.layers[1].forward(self.layers[0].forward(x))

    __call__ = forward

    def apply(self, x):
        return self.layers[1].apply(self.layers[0].apply(x))

    def backward(self, upstream):
        return self.layers[0].backward(self.layers[1].backward(upstream))

    def parameters(self):
        return [p for layer in self.layers for p in layer.parameters()]

    def gradients(self):
        return [g for layer in self.layers for g in layer.gradients()]

    def tensors(self):
        return {**layer_tensors("projector.0", self.layers[0]), **layer_tensors("projector.1", self.layers[1])}

    @classmethod
    def from_tensors(cls, tensors, relu=False):
        return cls(
            layer_from_tensors(tensors, "projector.0", RELU if relu else IDENTITY),
            layer_from_tensors(tensors, "projector.1"),
        )


class CosineClassifier:
    """One weight vector per base category; logits are ``scale * cos(x, w_c)``."""

    def __init__(self, weight, class_ids, scale=10.0):
        self.weight = np.array(weight, dtype=np.float64)
        self.class_ids = tuple(int(c) for c in class_ids)
        if self.weight.shape[0] != len(self.class_ids):
            raise ShapeMismatch("one weight row per base category required")
        self.scale = float(scale)
        self.grad_weight = np.zeros_like(self.weight)
        self._index = {c: i for i, c in enumerate(self.class_ids)}

    @classmethod
    def init(cls, dim, class_ids, seed, scale=10.0):
        rng = np.random.default_rng([seed, 2])
        bound = 1.0 / np.sqrt(dim)
        return cls(rng.uniform(-bound, bound, (len(class_ids), dim)), class_ids, scale)

    def index_of(self, category_id):
        try:
            return self._index[int(category_id)]
        except KeyError:
            raise LabelOutOfRange(f"category {category_id} is not a base category") from None

    def weights_for(self, category_ids):
        return self.weight[[self.index_of(c) for c in category_ids]]

    def parameters(self):
        return [self.weight]

    def gradients(self):
        return [self.grad_weight]

    def tensors(self):
        return {
            "classifier.W": self.weight,
            "classifier.classes": np.array(self.class_ids, dtype=np.float64),
            "classifier.scale": np.array([self.scale]),
        }

    @classmethod
    def from_tensors(cls, tensors):
        return cls(
            tensors["classifier.W"],
            tensors["classifier.classes"].astype(np.int64),
            float(tensors["classifier.scale"][0]),
        )


# -- pure loss helpers ----------------------------------------------------------


def teacher_logits(u_t, text_rows) -> np.ndarray:
    """Cosine of a teacher image feature against each text feature."""
    return normalize_rows(text_rows) @ l2_normalize(u_t)


def student_logits(u_s, projector: Projector, text_rows) -> np.ndarray:
    return normalize_rows(text_rows) @ l2_normalize(projector.apply(as_vector(u_s, "u_s")))


def distill_loss(q_t, q_s, temperature: float) -> float:
    """``tau^2 * KL(softmax(q_t / tau) || softmax(q_s / tau))``."""
    q_t, q_s = as_vector(q_t, "q_t"), as_vector(q_s, "q_s")
    if q_t.shape != q_s.shape:
        raise ShapeMismatch("teacher and student logits differ in length")
    return temperature**2 * kl_divergence(softmax(q_t, temperature), softmax(q_s, temperature))


def classification_loss(u_s, label: int, classifier: CosineClassifier) -> float:
    """Cross-entropy of the scaled cosine logits at ``label`` (a base category id)."""
    idx = classifier.index_of(label)
    logits = classifier.scale * (normalize_rows(classifier.weight) @ l2_normalize(u_s))
    shifted = logits - logits.max()
    return float(np.log(np.exp(shifted).sum()) - shifted[idx])


# -- batched objective with gradients -------------------------------------------


def kd_objective(projector, u_student, u_teacher, text_rows, temperature, backward=True):
    """Mean distillation loss over a batch; accumulates projector gradients."""
    text, _ = unit_rows(text_rows)
    teacher, _ = unit_rows(u_teacher)
    p_t = softmax_rows(teacher @ text.T, temperature)
    projected = projector(u_student)
    unit, norms = unit_rows(projected)
    log_ps = _log_softmax(unit @ text.T / temperature)
    with np.errstate(divide="ignore", invalid="ignore"):
        log_pt = np.where(p_t > 0, np.log(p_t), 0.0)
    batch = u_student.shape[0]
    loss = temperature**2 * float(np.sum(p_t * (log_pt - log_ps))) / batch
    if backward:
        d_logits = temperature * (np.exp(log_ps) - p_t) / batch
        projector.backward(unit_rows_backward(d_logits @ text, unit, norms))
    return loss


def ce_objective(classifier, u_student, label_index, backward=True):
    """Mean cosine-classifier cross-entropy; accumulates classifier gradients."""
    x, _ = unit_rows(u_student)
    w, w_norms = unit_rows(classifier.weight)
    log_p = _log_softmax(classifier.scale * x @ w.T)
    batch = x.shape[0]
    rows = np.arange(batch)
    loss = -float(log_p[rows, label_index].sum()) / batch
    if backward:
        d_logits = np.exp(log_p)
        d_logits[rows, label_index] -= 1.0
        d_logits /= batch
        classifier.grad_weight += unit_rows_backward(classifier.scale * d_logits.T @ x, w, w_norms)
    return loss


def vis_objective(projector, classifier, u_student, u_teacher, label_index, text_rows, temperature, backward=True):
    """``(L_ce, L_kd)`` for one batch. Their sum is the stage-1 loss."""
    l_ce = ce_objective(classifier, u_student, label_index, backward)
    l_kd = kd_objective(projector, u_student, u_teacher, text_rows, temperature, backward)
    return l_ce, l_kd


def _log_softmax(z):
    z = z - z.max(axis=-1, keepdims=True)
    return z - np.log(np.exp(z).sum(axis=-1, keepdims=True))


# -- training ---------------------------------------------------------------------


def train_stage1(
    student: EmbeddingBank,
    text: EmbeddingBank,
    split: DatasetSplit,
    config: DistillConfig,
    teacher: EmbeddingBank | None = None,
    checkpoint=None,
    history: list | None = None,
):
    """Fit the projector and cosine classifier on base-category batches.

    Without a teacher-visual bank, each image's teacher feature is taken to be
    its own category's text feature.

    Returns:
        ``(projector, classifier)``. If ``history`` is given, one
        ``{"epoch", "ce", "kd"}`` dict per epoch is appended to it.
    """
    if student is None or text is None:
        raise MissingBank("stage 1 needs student_visual and teacher_text banks")
    if teacher is not None and not np.array_equal(teacher.labels, student.labels):
        raise ShapeMismatch("teacher and student banks must be row-aligned")
    base = tuple(split.base)
    projector = Projector.init(student.dim, text.dim, config.seed, config.hidden_dim, config.projector_relu)
    classifier = CosineClassifier.init(student.dim, base, config.seed, config.scale)
    params = projector.parameters() + classifier.parameters()
    grads = projector.gradients() + classifier.gradients()
    opt = Adam(lr=config.lr, weight_decay=config.weight_decay)
    text_unit = normalize_rows(text.rows)
    base_rows = np.concatenate([student.indices_by_label[c] for c in base])
    rng = np.random.default_rng([config.seed, 3])

    step = 0
    for epoch in range(config.epochs):
        ce_sum = kd_sum = 0.0
        for _ in range(config.episodes_per_epoch):
            if config.flat_batch:
                idx = rng.choice(base_rows, size=min(config.batch_size, base_rows.size), replace=False)
                task_classes = base
            else:
                ep = sample_episode(
                    split, student, min(config.n_way, len(base)), config.k_shot, config.n_query,
                    seed=config.seed, index=step, pool="base",
                )
                idx = np.concatenate([ep.support, ep.query])
                task_classes = ep.categories
            step += 1
            labels = student.labels[idx]
            u_s = student.rows[idx]
            u_t = teacher.rows[idx] if teacher is not None else text_unit[labels]
            label_index = np.array([classifier.index_of(c) for c in labels])
            l_ce, l_kd = vis_objective(
                projector, classifier, u_s, u_t, label_index, text_unit[list(task_classes)], config.temperature
            )
            opt.step(params, grads)
            ce_sum += l_ce
            kd_sum += l_kd
        if history is not None:
            n = config.episodes_per_epoch
            history.append({"epoch": epoch, "ce": ce_sum / n, "kd": kd_sum / n})
    if checkpoint is not None:
        save_stage1(projector, classifier, checkpoint)
    return projector, classifier


def save_stage1(projector: Projector, classifier: CosineClassifier, path) -> None:
    save_checkpoint({**projector.tensors(), **classifier.tensors()}, path)


def load_stage1(path, relu=False):
    tensors = load_checkpoint(path)
    return Projector.from_tensors(tensors, relu), CosineClassifier.from_tensors(tensors)
