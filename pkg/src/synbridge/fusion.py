"""Stage 3: build per-episode multimodal classifiers from support prototypes,
bridged weights and descriptors; meta-train the gate ``G`` and reconstructor
``R``; fused prediction and episodic evaluation.

Shapes used throughout: ``N`` ways, ``d_v`` student/visual dim, ``d_s``
teacher-text/semantic dim.
"""
from __future__ import annotations

import csv
import io
import json
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field

import numpy as np

from ._fileutil import atomic_write
from .dataio import DatasetSplit, Episode, EmbeddingBank, sample_episode
from .distill import Projector
from .errors import MissingCheckpoint, ShapeMismatch, ZeroNorm
from .nnkit import (
    IDENTITY,
    SIGMOID,
    Adam,
    AffineLayer,
    init_parameters,
    layer_from_tensors,
    layer_tensors,
    leaky_relu,
    load_checkpoint,
    save_checkpoint,
    scheduled_lr,
)
from .numcore import EPS, as_vector, l2_normalize, softmax_rows, unit_rows, unit_rows_backward
from .vsbird import DualAutoencoder, semantic_to_weight, visual_to_semantic


@dataclass
class FusionConfig:
    lam: float | None = None  # None means 1/K
    epochs: int = 10
    episodes_per_epoch: int = 200
    n_way: int = 5
    k_shot: int = 1
    n_query: int = 15
    lr: float = 1e-4
    weight_decay: float = 5e-4
    hidden_dim: int = 2048
    leaky_slope: float = 0.01
    score: str = "cosine"
    lr_schedule: str = "constant"
    seed: int = 0

    def __post_init__(self):
        if self.lam is not None and not self.lam > 0:
            raise ValueError("lambda must be positive")
        if self.score not in ("cosine", "dot"):
            raise ValueError(f"unknown score {self.score!r}")
        if self.epochs < 0 or self.episodes_per_epoch < 1:
            raise ValueError("epochs must be >= 0 and episodes_per_epoch >= 1")

    def fusion_lambda(self, k_shot: int | None = None) -> float:
        return self.lam if self.lam is not None else 1.0 / (k_shot or self.k_shot)


class FusionHeads:
    """Gate ``G`` (visual dim -> 1, sigmoid) and reconstructor ``R``
    (``2 d_s -> hidden`` LeakyReLU, then ``hidden -> d_s``)."""

    def __init__(self, gate: AffineLayer, r1: AffineLayer, r2: AffineLayer):
        if gate.out_dim != 1:
            raise ShapeMismatch("gate must produce a single coefficient")
        if r1.out_dim != r2.in_dim or r1.in_dim != 2 * r2.out_dim:
            raise ShapeMismatch("reconstructor layers are inconsistent")
        self.gate, self.r1, self.r2 = gate, r1, r2

    @classmethod
    def init(cls, visual_dim, semantic_dim, hidden_dim=2048, seed=0, leaky_slope=0.01):
        s = np.random.SeedSequence([seed, 6]).spawn(3)
        return cls(
            init_parameters(visual_dim, 1, s[0], SIGMOID),
            init_parameters(2 * semantic_dim, hidden_dim, s[1], leaky_relu(leaky_slope)),
            init_parameters(hidden_dim, semantic_dim, s[2], IDENTITY),
        )

    @property
    def visual_dim(self):
        return self.gate.in_dim

    @property
    def semantic_dim(self):
        return self.r2.out_dim

    def layers(self):
        return [self.gate, self.r1, self.r2]

    def parameters(self):
        return [p for layer in self.layers() for p in layer.parameters()]

    def gradients(self):
        return [g for layer in self.layers() for g in layer.gradients()]

    def tensors(self):
        return {
            **layer_tensors("G", self.gate),
            **layer_tensors("R.W1", self.r1),
            **layer_tensors("R.W2", self.r2),
            "R.slope": np.array([self.r1.activation.slope]),
        }

    @classmethod
    def from_tensors(cls, tensors):
        # the slope went through float32; 7 significant digits recover the configured value
        slope = float(f"{tensors['R.slope'][0]:.7g}") if "R.slope" in tensors else 0.01
        return cls(
            layer_from_tensors(tensors, "G", SIGMOID),
            layer_from_tensors(tensors, "R.W1", leaky_relu(slope)),
            layer_from_tensors(tensors, "R.W2"),
        )

    def copy(self):
        return FusionHeads(*(layer.copy() for layer in self.layers()))


@dataclass(frozen=True, eq=False)
class MultimodalClassifier:
    """Unit-norm rows: ``visual`` is W_V (N x d_v), ``semantic`` is W_S (N x d_s)."""

    visual: np.ndarray
    semantic: np.ndarray
    lam: float
    prototypes: np.ndarray = field(repr=False)
    betas: np.ndarray = field(repr=False)


# -- elementary operations ----------------------------------------------------------


def compute_prototype(features) -> np.ndarray:
    """Normalized sum of a category's support features."""
    feats = np.atleast_2d(np.asarray(features, dtype=np.float64))
    total = feats.sum(axis=0)
    if np.linalg.norm(total) <= EPS:
        raise ZeroNorm("support features cancel out; prototype undefined")
    return total / np.linalg.norm(total)


def gate_coefficient(heads: FusionHeads, semantic_derived) -> float | np.ndarray:
    """``sigmoid(G(w))`` for one derived weight (scalar) or a stack of them."""
    w = np.asarray(semantic_derived, dtype=np.float64)
    out = heads.gate.apply(w)
    return float(out[0]) if w.ndim == 1 else out[:, 0]


def visual_dominated_weight(beta, semantic_derived, prototype) -> np.ndarray:
    """``normalize(beta * w_s' + (1 - beta) * w_v)`` over unit-normalized inputs."""
    a, b = as_vector(semantic_derived, "w_s'"), as_vector(prototype, "w_v")
    if a.shape != b.shape:
        raise ShapeMismatch(f"derived weight has {a.size} dims, prototype {b.size}")
    if not 0.0 <= beta <= 1.0:
        raise ValueError(f"beta must lie in [0, 1], got {beta}")
    return l2_normalize(beta * l2_normalize(a) + (1.0 - beta) * l2_normalize(b))


def semantic_dominated_weight(heads: FusionHeads, descriptor, visual_derived) -> np.ndarray:
    """``normalize(W2 . LeakyReLU(W1 . [descriptor ; visual_derived]))``."""
    s, v = as_vector(descriptor, "w_s"), as_vector(visual_derived, "w_v'")
    if s.size != heads.semantic_dim or v.size != heads.semantic_dim:
        raise ShapeMismatch(f"both inputs must have length {heads.semantic_dim}")
    out = heads.r2.apply(heads.r1.apply(np.concatenate([s, v])))
    if np.linalg.norm(out) <= EPS:
        raise ZeroNorm("reconstructor output is zero")
    return out / np.linalg.norm(out)


# -- per-episode classifier ---------------------------------------------------------


def episode_prototypes(support_features, support_labels, n_way) -> np.ndarray:
    return np.stack(
        [compute_prototype(support_features[support_labels == m]) for m in range(n_way)]
    )


def build_classifier(heads, bridge: DualAutoencoder, prototypes, descriptors, lam) -> MultimodalClassifier:
    """Assemble W_V and W_S for one episode from prototypes (N x d_v) and
    descriptors (N x d_s) of its categories."""
    derived_v = semantic_to_weight(bridge, descriptors)
    derived_s = visual_to_semantic(bridge, prototypes)
    betas = heads.gate.apply(derived_v)
    w_v, _ = unit_rows(betas * derived_v + (1.0 - betas) * prototypes)
    w_s, _ = unit_rows(heads.r2.apply(heads.r1.apply(np.hstack([descriptors, derived_s]))))
    return MultimodalClassifier(w_v, w_s, float(lam), prototypes, betas[:, 0])


def _scores(features, weights, score):
    features = np.atleast_2d(np.asarray(features, dtype=np.float64))
    if score == "dot":
        return features @ weights.T
    unit, _ = unit_rows(features)
    return unit @ weights.T


def episode_probabilities(classifier: MultimodalClassifier, query, projector: Projector):
    """``(P_v, P_s)``: softmax over the cosines to W_V and, after projection, to W_S."""
    query = np.asarray(query, dtype=np.float64)
    p_v = softmax_rows(_scores(query, classifier.visual, "cosine"))
    p_s = softmax_rows(_scores(projector.apply(query), classifier.semantic, "cosine"))
    if query.ndim == 1:
        return p_v[0], p_s[0]
    return p_v, p_s


def fused_scores(classifier, query, projector, lam=None, score="cosine"):
    lam = classifier.lam if lam is None else lam
    if not lam > 0:
        raise ValueError("lambda must be positive")
    query = np.atleast_2d(np.asarray(query, dtype=np.float64))
    return _scores(query, classifier.visual, score) + lam * _scores(
        projector.apply(query), classifier.semantic, score
    )


def fused_predict(classifier, query, projector, lam=None, score="cosine"):
    """Label(s) maximizing ``score(f(q), W_V) + lam * score(proj(f(q)), W_S)``."""
    pred = np.argmax(fused_scores(classifier, query, projector, lam, score), axis=1)
    return int(pred[0]) if np.ndim(query) == 1 else pred


# -- meta-training ------------------------------------------------------------------


def fusion_objective(heads, bridge, projector, prototypes, descriptors, query, query_labels, backward=True):
    """Mean over queries of ``CE(P_v) + CE(P_s)``; accumulates G and R gradients."""
    n_way = prototypes.shape[0]
    derived_v = semantic_to_weight(bridge, descriptors)
    derived_s = visual_to_semantic(bridge, prototypes)

    betas = heads.gate.forward(derived_v)
    mixed = betas * derived_v + (1.0 - betas) * prototypes
    w_v, w_v_norms = unit_rows(mixed)
    hidden = heads.r1.forward(np.hstack([descriptors, derived_s]))
    recon = heads.r2.forward(hidden)
    w_s, w_s_norms = unit_rows(recon)

    q_v, _ = unit_rows(query)
    q_s, _ = unit_rows(projector.apply(query))
    p_v = softmax_rows(q_v @ w_v.T)
    p_s = softmax_rows(q_s @ w_s.T)
    rows = np.arange(len(query_labels))
    loss = -float(np.mean(np.log(p_v[rows, query_labels]) + np.log(p_s[rows, query_labels])))

    if backward:
        onehot = np.zeros((len(query_labels), n_way))
        onehot[rows, query_labels] = 1.0
        m = len(query_labels)
        d_wv = unit_rows_backward(((p_v - onehot) / m).T @ q_v, w_v, w_v_norms)
        heads.gate.backward(np.sum(d_wv * (derived_v - prototypes), axis=1, keepdims=True))
        d_ws = unit_rows_backward(((p_s - onehot) / m).T @ q_s, w_s, w_s_norms)
        heads.r1.backward(heads.r2.backward(d_ws))
    return loss


def episode_inputs(episode: Episode, features: EmbeddingBank, descriptors):
    support = features.rows[episode.support]
    prototypes = episode_prototypes(support, episode.support_labels, episode.n_way)
    return prototypes, np.asarray(descriptors)[list(episode.categories)]


def meta_train(
    features: EmbeddingBank,
    descriptors,
    split: DatasetSplit,
    bridge: DualAutoencoder,
    projector: Projector,
    config: FusionConfig,
    checkpoint=None,
    history: list | None = None,
) -> FusionHeads:
    """Train G and R on base-split episodes; bridge and projector stay frozen.

    ``descriptors`` is a ``(num_categories, d_s)`` array indexed by category id.
    """
    if bridge is None or projector is None:
        raise MissingCheckpoint("fusion needs the bridge and stage-1 projector")
    descriptors = np.asarray(descriptors, dtype=np.float64)
    heads = FusionHeads.init(
        features.dim, descriptors.shape[1], config.hidden_dim, config.seed, config.leaky_slope
    )
    opt = Adam(lr=config.lr, weight_decay=config.weight_decay)
    params, grads = heads.parameters(), heads.gradients()
    n_way = min(config.n_way, len(split.base))
    total = config.epochs * config.episodes_per_epoch
    step = 0
    for epoch in range(config.epochs):
        running = correct = proto_correct = seen = 0.0
        for _ in range(config.episodes_per_epoch):
            ep = sample_episode(
                split, features, n_way, config.k_shot, config.n_query,
                seed=config.seed + 7919, index=step, pool="base",
            )
            prototypes, desc = episode_inputs(ep, features, descriptors)
            query = features.rows[ep.query]
            opt.lr = scheduled_lr(config.lr, step, total, config.lr_schedule)
            running += fusion_objective(heads, bridge, projector, prototypes, desc, query, ep.query_labels)
            opt.step(params, grads)
            if history is not None:
                clf = build_classifier(heads, bridge, prototypes, desc, config.fusion_lambda())
                correct += np.sum(fused_predict(clf, query, projector, score=config.score) == ep.query_labels)
                proto_correct += np.sum(np.argmax(_scores(query, prototypes, config.score), axis=1) == ep.query_labels)
                seen += len(ep.query_labels)
            step += 1
        if history is not None:
            history.append({
                "epoch": epoch,
                "loss": running / config.episodes_per_epoch,
                "fused_acc": float(correct / max(seen, 1)),
                "prototype_acc": float(proto_correct / max(seen, 1)),
            })
    for layer in heads.layers():
        layer.clear_cache()
    if checkpoint is not None:
        save_heads(heads, checkpoint)
    return heads


def save_heads(heads: FusionHeads, path) -> None:
    save_checkpoint(heads.tensors(), path)


def load_heads(path) -> FusionHeads:
    return FusionHeads.from_tensors(load_checkpoint(path))


# -- evaluation ---------------------------------------------------------------------


def confidence_interval(per_episode) -> float:
    """Half-width of the normal 95% interval: ``1.96 * std / sqrt(n)`` (population std)."""
    acc = np.asarray(per_episode, dtype=np.float64)
    return float(1.96 * acc.std() / np.sqrt(acc.size))


@dataclass
class EvalReport:
    n: int
    k: int
    q: int
    episodes: int
    seed: int
    per_episode: list
    baselines: dict = field(default_factory=dict)

    @property
    def mean_acc(self) -> float:
        return float(100.0 * np.mean(self.per_episode))

    @property
    def ci95(self) -> float:
        return 100.0 * confidence_interval(self.per_episode)

    def summary(self, key=None):
        accs = self.per_episode if key is None else self.baselines[key]
        return float(100.0 * np.mean(accs)), 100.0 * confidence_interval(accs)

    def to_json(self) -> str:
        doc = {
            "n": self.n,
            "k": self.k,
            "q": self.q,
            "episodes": self.episodes,
            "mean_acc": round(self.mean_acc, 6),
            "ci95": round(self.ci95, 6),
            "per_episode": [round(float(a), 10) for a in self.per_episode],
            "seed": self.seed,
        }
        for name in sorted(self.baselines):
            mean, ci = self.summary(name)
            doc[f"{name}_mean_acc"] = round(mean, 6)
            doc[f"{name}_ci95"] = round(ci, 6)
        return json.dumps(doc, indent=2) + "\n"

    def to_csv(self) -> str:
        buf = io.StringIO()
        names = sorted(self.baselines)
        writer = csv.writer(buf, lineterminator="\n")
        writer.writerow(["episode", "fused", *names])
        for i, acc in enumerate(self.per_episode):
            writer.writerow([i, f"{acc:.10f}", *(f"{self.baselines[n][i]:.10f}" for n in names)])
        return buf.getvalue()

    def write(self, json_path, csv_path=None) -> None:
        atomic_write(json_path, self.to_json().encode())
        if csv_path is not None:
            atomic_write(csv_path, self.to_csv().encode())


def evaluate_episode(episode, features, descriptors, heads, bridge, projector, lam, score="cosine"):
    """Accuracies of the fused, prototype-only, W_V-only and W_S-only classifiers."""
    prototypes, desc = episode_inputs(episode, features, descriptors)
    clf = build_classifier(heads, bridge, prototypes, desc, lam)
    query = features.rows[episode.query]
    labels = episode.query_labels
    fused = fused_predict(clf, query, projector, score=score)
    proto = np.argmax(_scores(query, prototypes, score), axis=1)
    visual = np.argmax(_scores(query, clf.visual, score), axis=1)
    semantic = np.argmax(_scores(projector.apply(query), clf.semantic, score), axis=1)
    return {
        "fused": float(np.mean(fused == labels)),
        "prototype": float(np.mean(proto == labels)),
        "visual_dominated": float(np.mean(visual == labels)),
        "semantic_dominated": float(np.mean(semantic == labels)),
    }


def evaluate(
    features: EmbeddingBank,
    descriptors,
    split: DatasetSplit,
    heads: FusionHeads,
    bridge: DualAutoencoder,
    projector: Projector,
    n_way: int = 5,
    k_shot: int = 1,
    n_query: int = 15,
    num_episodes: int = 600,
    seed: int = 0,
    lam: float | None = None,
    score: str = "cosine",
    workers: int = 1,
) -> EvalReport:
    """Mean accuracy with a 95% interval over novel-split episodes.

    Episode ``i`` depends only on ``(seed, i)``, so results do not depend on
    ``workers`` or on evaluation order.
    """
    if heads is None or bridge is None or projector is None:
        raise MissingCheckpoint("evaluation needs stage-1, bridge and fusion checkpoints")
    descriptors = np.asarray(descriptors, dtype=np.float64)
    lam = 1.0 / k_shot if lam is None else lam

    def run(i):
        ep = sample_episode(split, features, n_way, k_shot, n_query, seed=seed, index=i, pool="novel")
        return evaluate_episode(ep, features, descriptors, heads, bridge, projector, lam, score)

    if workers > 1:
        with ThreadPoolExecutor(max_workers=workers) as pool:
            results = list(pool.map(run, range(num_episodes)))
    else:
        results = [run(i) for i in range(num_episodes)]
    baselines = {
        key: [r[key] for r in results] for key in ("prototype", "visual_dominated", "semantic_dominated")
    }
    return EvalReport(
        n=n_way, k=k_shot, q=n_query, episodes=num_episodes, seed=seed,
        per_episode=[r["fused"] for r in results], baselines=baselines,
    )


def dump_weights(features, descriptors, split, heads, bridge, n_way, k_shot, num_episodes, seed, lam=None):
    """W_V, W_S and prototype rows for novel-split episodes, labeled by category id.

    Returns three ``(rows, labels)`` pairs keyed ``"visual"``, ``"semantic"``,
    ``"prototype"``.
    """
    descriptors = np.asarray(descriptors, dtype=np.float64)
    lam = 1.0 / k_shot if lam is None else lam
    out = {"visual": ([], []), "semantic": ([], []), "prototype": ([], [])}
    for i in range(num_episodes):
        ep = sample_episode(split, features, n_way, k_shot, 0, seed=seed, index=i, pool="novel")
        prototypes, desc = episode_inputs(ep, features, descriptors)
        clf = build_classifier(heads, bridge, prototypes, desc, lam)
        for key, rows in (("visual", clf.visual), ("semantic", clf.semantic), ("prototype", prototypes)):
            out[key][0].append(rows)
            out[key][1].extend(ep.categories)
    return {k: (np.vstack(r), np.array(l)) for k, (r, l) in out.items()}
