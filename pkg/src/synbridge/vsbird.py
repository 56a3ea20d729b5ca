"""Visual-semantic bridging: a dual autoencoder over paired classifier weights
and semantic descriptors, trained with self- and cross-reconstruction.

Encoders are affine + ReLU into a shared latent space; decoders are affine.
Every reconstruction is scored with cosine distance against its target.
"""
from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .errors import InsufficientPairs, ShapeMismatch, ZeroNorm
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
    scheduled_lr,
)
from .numcore import EPS, as_vector, cosine_distance, l2_normalize, normalize_rows, unit_rows_backward

PATHS = ("V->V", "S->S", "S->V", "V->S")


@dataclass
class BridgeConfig:
    alpha: float = 0.7
    latent_dim: int | None = None
    epochs: int = 50
    lr: float = 1e-4
    weight_decay: float = 5e-4
    batch_size: int = 1
    lr_schedule: str = "cosine"
    seed: int = 0

    def __post_init__(self):
        if not 0.0 <= self.alpha <= 1.0:
            raise ValueError(f"alpha must lie in [0, 1], got {self.alpha}")
        if self.epochs < 0:
            raise ValueError("epochs must be >= 0")
        if self.batch_size < 0:
            raise ValueError("batch_size must be >= 0 (0 means full batch)")


@dataclass(frozen=True, eq=False)
class BridgePairset:
    """Unit-normalized visual weights and descriptors, row-aligned by category."""

    category_ids: tuple
    visual: np.ndarray
    semantic: np.ndarray

    def __post_init__(self):
        if len(self.category_ids) != len(self.visual) or len(self.visual) != len(self.semantic):
            raise ShapeMismatch("visual weights and descriptors must cover the same categories")
        object.__setattr__(self, "visual", normalize_rows(self.visual))
        object.__setattr__(self, "semantic", normalize_rows(self.semantic))


class DualAutoencoder:
    def __init__(self, ve: AffineLayer, se: AffineLayer, vd: AffineLayer, sd: AffineLayer):
        if len({ve.out_dim, se.out_dim, vd.in_dim, sd.in_dim}) != 1:
            raise ShapeMismatch("all four maps must share the latent dimension")
        if ve.in_dim != vd.out_dim or se.in_dim != sd.out_dim:
            raise ShapeMismatch("decoder outputs must match encoder inputs")
        self.ve, self.se, self.vd, self.sd = ve, se, vd, sd

    @classmethod
    def init(cls, visual_dim, semantic_dim, latent_dim=None, seed=0):
        d_z = latent_dim or min(visual_dim, semantic_dim)
        s = np.random.SeedSequence([seed, 4]).spawn(4)
        return cls(
            init_parameters(visual_dim, d_z, s[0], RELU),
            init_parameters(semantic_dim, d_z, s[1], RELU),
            init_parameters(d_z, visual_dim, s[2], IDENTITY),
            init_parameters(d_z, semantic_dim, s[3], IDENTITY),
        )

    @property
    def visual_dim(self):
        return self.ve.in_dim

    @property
    def semantic_dim(self):
        return self.se.in_dim

    @property
    def latent_dim(self):
        return self.ve.out_dim

    def layers(self):
        return [self.ve, self.se, self.vd, self.sd]

    def parameters(self):
        return [p for layer in self.layers() for p in layer.parameters()]

    def gradients(self):
        return [g for layer in self.layers() for g in layer.gradients()]

    def tensors(self):
        return {
            **layer_tensors("VE", self.ve),
            **layer_tensors("SE", self.se),
            **layer_tensors("VD", self.vd),
            **layer_tensors("SD", self.sd),
        }

    @classmethod
    def from_tensors(cls, tensors):
        return cls(
            layer_from_tensors(tensors, "VE", RELU),
            layer_from_tensors(tensors, "SE", RELU),
            layer_from_tensors(tensors, "VD"),
            layer_from_tensors(tensors, "SD"),
        )

    def copy(self):
        return DualAutoencoder(*(layer.copy() for layer in self.layers()))

    # cache-free forward maps, safe for concurrent inference
    def visual_to_visual(self, w):
        return self.vd.apply(self.ve.apply(w))

    def semantic_to_semantic(self, t):
        return self.sd.apply(self.se.apply(t))

    def semantic_to_visual(self, t):
        return self.vd.apply(self.se.apply(t))

    def visual_to_semantic(self, w):
        return self.sd.apply(self.ve.apply(w))


def bridge_losses(model: DualAutoencoder, w, t):
    """Cosine distances of the four reconstructions for one pair ``(w, t)``.

    Returns ``(L_VV, L_SS, L_SV, L_VS)``: self-reconstruction of each space,
    then semantic-to-visual and visual-to-semantic cross-reconstruction.
    """
    w = as_vector(w, "w")
    t = as_vector(t, "t")
    if w.size != model.visual_dim or t.size != model.semantic_dim:
        raise ShapeMismatch("pair dimensions do not match the model")
    outputs = (
        ("V->V", model.visual_to_visual(w), w),
        ("S->S", model.semantic_to_semantic(t), t),
        ("S->V", model.semantic_to_visual(t), w),
        ("V->S", model.visual_to_semantic(w), t),
    )
    losses = []
    for name, recon, target in outputs:
        try:
            losses.append(cosine_distance(recon, target))
        except ZeroNorm:
            raise ZeroNorm(f"reconstruction along {name} collapsed to zero") from None
    return tuple(losses)


def total_bridge_loss(terms, alpha: float) -> float:
    """``alpha * (L_VV + L_SS) + (1 - alpha) * (L_SV + L_VS)``."""
    if not 0.0 <= alpha <= 1.0:
        raise ValueError(f"alpha must lie in [0, 1], got {alpha}")
    l_vv, l_ss, l_sv, l_vs = terms
    return alpha * (l_vv + l_ss) + (1.0 - alpha) * (l_sv + l_vs)


def _cosdist_batch(recon, target, path):
    """Mean cosine distance over rows and the gradient with respect to ``recon``."""
    norms = np.linalg.norm(recon, axis=1, keepdims=True)
    if np.any(norms <= EPS):
        raise ZeroNorm(f"reconstruction along {path} collapsed to zero")
    unit = recon / norms
    tgt = target / np.linalg.norm(target, axis=1, keepdims=True)
    cos = np.sum(unit * tgt, axis=1)
    n = recon.shape[0]
    grad = unit_rows_backward(-tgt / n, unit, norms)
    return float(np.mean(1.0 - cos)), grad


def bridge_objective(model: DualAutoencoder, visual, semantic, alpha, backward=True):
    """Weighted reconstruction loss averaged over categories, with the four terms.

    Gradients are accumulated into the model's layers when ``backward``.
    """
    visual = np.atleast_2d(np.asarray(visual, dtype=np.float64))
    semantic = np.atleast_2d(np.asarray(semantic, dtype=np.float64))
    ve, se, vd, sd = model.layers()
    zv = ve(visual)
    zs = se(semantic)

    weights = {"V->V": alpha, "S->S": alpha, "S->V": 1.0 - alpha, "V->S": 1.0 - alpha}
    terms = {}
    dzv = np.zeros_like(zv)
    dzs = np.zeros_like(zs)
    # each decoder is used twice; run it per path and backprop immediately
    for path, decoder, latent, target in (
        ("V->V", vd, zv, visual),
        ("S->V", vd, zs, visual),
        ("S->S", sd, zs, semantic),
        ("V->S", sd, zv, semantic),
    ):
        recon = decoder(latent)
        loss, grad = _cosdist_batch(recon, target, path)
        terms[path] = loss
        if backward and weights[path] != 0.0:
            d_latent = decoder.backward(weights[path] * grad)
            if path in ("V->V", "V->S"):
                dzv += d_latent
            else:
                dzs += d_latent
    if backward:
        ve.backward(dzv)
        se.backward(dzs)
    ordered = tuple(terms[p] for p in PATHS)
    return total_bridge_loss(ordered, alpha), ordered


def train_bridge(pairs: BridgePairset, config: BridgeConfig, checkpoint=None, history: list | None = None):
    """Adam over shuffled mini-batches of category pairs.

    ``batch_size=0`` takes one full-batch step per epoch. ``history`` receives
    the full-data loss after each epoch.
    """
    n = len(pairs.category_ids)
    if n < 2:
        raise InsufficientPairs(f"need at least 2 category pairs, got {n}")
    model = DualAutoencoder.init(
        pairs.visual.shape[1], pairs.semantic.shape[1], config.latent_dim, config.seed
    )
    opt = Adam(lr=config.lr, weight_decay=config.weight_decay)
    params, grads = model.parameters(), model.gradients()
    batch = config.batch_size or n
    steps_per_epoch = -(-n // batch)
    total = config.epochs * steps_per_epoch
    rng = np.random.default_rng([config.seed, 5])
    step = 0
    for epoch in range(config.epochs):
        order = rng.permutation(n) if batch < n else np.arange(n)
        for start in range(0, n, batch):
            rows = order[start : start + batch]
            opt.lr = scheduled_lr(config.lr, step, total, config.lr_schedule)
            bridge_objective(model, pairs.visual[rows], pairs.semantic[rows], config.alpha)
            opt.step(params, grads)
            step += 1
        if history is not None:
            loss, terms = bridge_objective(model, pairs.visual, pairs.semantic, config.alpha, backward=False)
            history.append({"epoch": epoch, "loss": loss, "terms": terms})
    if checkpoint is not None:
        save_bridge(model, checkpoint)
    return model


def final_loss(model: DualAutoencoder, pairs: BridgePairset, alpha: float) -> float:
    loss, _ = bridge_objective(model, pairs.visual, pairs.semantic, alpha, backward=False)
    return loss


def semantic_to_weight(model: DualAutoencoder, t):
    """Visual-space classifier weight inferred from a descriptor, unit norm."""
    t = np.asarray(t, dtype=np.float64)
    if t.shape[-1] != model.semantic_dim:
        raise ShapeMismatch(f"descriptor length {t.shape[-1]} != {model.semantic_dim}")
    out = model.semantic_to_visual(t)
    return l2_normalize(out) if out.ndim == 1 else normalize_rows(out)


def visual_to_semantic(model: DualAutoencoder, w):
    """Semantic-space weight inferred from a visual prototype, unit norm."""
    w = np.asarray(w, dtype=np.float64)
    if w.shape[-1] != model.visual_dim:
        raise ShapeMismatch(f"visual weight length {w.shape[-1]} != {model.visual_dim}")
    out = model.visual_to_semantic(w)
    return l2_normalize(out) if out.ndim == 1 else normalize_rows(out)


def save_bridge(model: DualAutoencoder, path) -> None:
    save_checkpoint(model.tensors(), path)


def load_bridge(path) -> DualAutoencoder:
    return DualAutoencoder.from_tensors(load_checkpoint(path))
