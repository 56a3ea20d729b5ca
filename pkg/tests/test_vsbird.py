import numpy as np
import pytest
from gradcheck import worst_relative_error
from hypothesis import given
from hypothesis import strategies as st
from oracles import linear_bridge_oracle

from synbridge.errors import InsufficientPairs, ZeroNorm
from synbridge.nnkit import IDENTITY, RELU, AffineLayer
from synbridge.vsbird import (
    BridgeConfig,
    BridgePairset,
    DualAutoencoder,
    bridge_losses,
    bridge_objective,
    final_loss,
    load_bridge,
    save_bridge,
    semantic_to_weight,
    total_bridge_loss,
    train_bridge,
    visual_to_semantic,
)

FAST = dict(lr=2e-2, latent_dim=32, epochs=20)


def identity_model(d, decoder_sign=1.0):
    eye = np.eye(d)
    return DualAutoencoder(
        AffineLayer(eye, np.zeros(d), RELU),
        AffineLayer(eye, np.zeros(d), RELU),
        AffineLayer(decoder_sign * eye, np.zeros(d), IDENTITY),
        AffineLayer(eye, np.zeros(d), IDENTITY),
    )


def cos_dist(a, b):
    return 1 - a @ b / (np.linalg.norm(a) * np.linalg.norm(b))


def by_hand(layer, x, relu=False):
    z = layer.weight @ x + layer.bias
    return np.maximum(z, 0) if relu else z


class TestLosses:
    def test_identity_model(self):
        w = t = np.array([0.6, 0.8])
        assert bridge_losses(identity_model(2), w, t) == pytest.approx((0, 0, 0, 0), abs=1e-15)

    def test_antipodal_decoder(self):
        w = t = np.array([0.6, 0.8])
        l_vv = bridge_losses(identity_model(2, decoder_sign=-1.0), w, t)[0]
        assert l_vv == pytest.approx(2.0)

    def test_random_instance(self, rng):
        m = DualAutoencoder.init(8, 8, 8, seed=3)
        w, t = rng.standard_normal(8), rng.standard_normal(8)
        zv, zs = by_hand(m.ve, w, True), by_hand(m.se, t, True)
        expected = (
            cos_dist(by_hand(m.vd, zv), w),
            cos_dist(by_hand(m.sd, zs), t),
            cos_dist(by_hand(m.vd, zs), w),
            cos_dist(by_hand(m.sd, zv), t),
        )
        np.testing.assert_allclose(bridge_losses(m, w, t), expected, rtol=1e-10)

    def test_collapsed_path_named(self):
        m = identity_model(2)
        m.se.bias[:] = -10.0
        with pytest.raises(ZeroNorm, match="S->S"):
            bridge_losses(m, [0.6, 0.8], [0.6, 0.8])

    def test_total_examples(self):
        terms = (0.1, 0.2, 0.3, 0.4)
        assert total_bridge_loss(terms, 0.7) == pytest.approx(0.42, abs=1e-15)
        assert total_bridge_loss(terms, 1.0) == pytest.approx(0.3)
        assert total_bridge_loss(terms, 0.0) == pytest.approx(0.7)

    @given(st.tuples(*[st.floats(0, 2)] * 4))
    def test_total_linear_in_alpha(self, terms):
        grid = [0.0, 0.25, 0.5, 0.75, 1.0]
        lo, hi = total_bridge_loss(terms, 0.0), total_bridge_loss(terms, 1.0)
        for a in grid:
            assert abs(total_bridge_loss(terms, a) - ((1 - a) * lo + a * hi)) < 1e-12

    def test_alpha_range(self):
        with pytest.raises(ValueError):
            total_bridge_loss((0, 0, 0, 0), 1.5)


def random_model(rng, d=8):
    model = DualAutoencoder.init(d, d, d, seed=int(rng.integers(1 << 30)))
    for layer in model.layers():
        layer.bias[:] = 0.1 * rng.standard_normal(layer.out_dim)
    return model


@pytest.mark.parametrize("instance", range(20))
def test_objective_gradient(instance):
    rng = np.random.default_rng([88, instance])
    model = random_model(rng)
    visual, semantic = rng.standard_normal((4, 8)), rng.standard_normal((4, 8))
    alpha = rng.uniform(0.05, 0.95)

    def objective(backward):
        return bridge_objective(model, visual, semantic, alpha, backward)[0]

    assert worst_relative_error(objective, model.parameters(), model.gradients()) < 1e-5


# at alpha in {0, 1} the two active paths use disjoint encoder/decoder pairs,
# so each path's gradient is exactly the gradient on its own two layers
PATH_LAYERS = {"V->V": (1.0, "ve", "vd"), "S->S": (1.0, "se", "sd"), "S->V": (0.0, "se", "vd"), "V->S": (0.0, "ve", "sd")}


@pytest.mark.parametrize("path", list(PATH_LAYERS))
@pytest.mark.parametrize("instance", range(20))
def test_path_gradient(path, instance):
    rng = np.random.default_rng([89, instance])
    model = random_model(rng)
    visual, semantic = rng.standard_normal((3, 8)), rng.standard_normal((3, 8))
    alpha, enc, dec = PATH_LAYERS[path]
    layers = [getattr(model, enc), getattr(model, dec)]

    def objective(backward):
        return bridge_objective(model, visual, semantic, alpha, backward)[0]

    params = [p for layer in layers for p in layer.parameters()]
    grads = [g for layer in layers for g in layer.gradients()]
    for layer in model.layers():
        layer.zero_grad()
    assert worst_relative_error(objective, params, grads) < 1e-5


class TestInference:
    def test_identity_semantic_to_weight(self):
        t = np.array([3.0, 4.0])
        np.testing.assert_allclose(semantic_to_weight(identity_model(2), t), [0.6, 0.8])

    def test_semantic_to_weight_by_hand(self, rng):
        m = DualAutoencoder.init(6, 4, 5, seed=2)
        t = rng.standard_normal(4)
        out = by_hand(m.vd, by_hand(m.se, t, True))
        np.testing.assert_allclose(semantic_to_weight(m, t), out / np.linalg.norm(out), rtol=1e-10)

    def test_visual_to_semantic_by_hand(self, rng):
        m = DualAutoencoder.init(6, 4, 5, seed=2)
        w = rng.standard_normal(6)
        out = by_hand(m.sd, by_hand(m.ve, w, True))
        np.testing.assert_allclose(visual_to_semantic(m, w), out / np.linalg.norm(out), rtol=1e-10)

    def test_batched(self, rng):
        m = DualAutoencoder.init(6, 4, 5, seed=2)
        t = rng.standard_normal((3, 4))
        rows = semantic_to_weight(m, t)
        np.testing.assert_allclose(rows[1], semantic_to_weight(m, t[1]))


class TestTraining:
    def pairs(self, seed=0):
        w, t = linear_bridge_oracle(seed)
        return BridgePairset(tuple(range(9)), w[:9], t[:9]), w, t

    def test_too_few_pairs(self):
        with pytest.raises(InsufficientPairs):
            train_bridge(BridgePairset((0,), np.ones((1, 3)), np.ones((1, 2))), BridgeConfig())

    def test_zero_epochs_is_init(self):
        pairs, _, _ = self.pairs()
        model = train_bridge(pairs, BridgeConfig(epochs=0, latent_dim=12, seed=4))
        init = DualAutoencoder.init(16, 16, 12, seed=4)
        for a, b in zip(model.parameters(), init.parameters()):
            np.testing.assert_array_equal(a, b)

    def test_deterministic(self, tmp_path):
        pairs, _, _ = self.pairs()
        for name in ("a", "b"):
            train_bridge(pairs, BridgeConfig(**FAST), checkpoint=tmp_path / f"{name}.synw")
        assert (tmp_path / "a.synw").read_bytes() == (tmp_path / "b.synw").read_bytes()

    def test_loss_goes_down(self):
        pairs, _, _ = self.pairs()
        history = []
        train_bridge(pairs, BridgeConfig(**FAST), history=history)
        assert history[-1]["loss"] < 0.1 * history[0]["loss"]

    def test_full_batch_option(self):
        pairs, _, _ = self.pairs()
        history = []
        train_bridge(pairs, BridgeConfig(batch_size=0, epochs=5, lr=1e-2), history=history)
        assert len(history) == 5

    def test_cross_terms_help_held_out(self):
        # with alpha=1 the cross paths get no training signal, so a held-out
        # descriptor maps to the visual side worse than with alpha=0.7
        pairs, w, t = self.pairs()
        cfg = dict(lr=2e-2, latent_dim=128)
        mixed = train_bridge(pairs, BridgeConfig(alpha=0.7, **cfg))
        self_only = train_bridge(pairs, BridgeConfig(alpha=1.0, **cfg))

        def cross(m):
            _, _, l_sv, l_vs = bridge_losses(m, w[9], t[9])
            return l_sv + l_vs

        assert cross(mixed) < cross(self_only)

    def test_checkpoint_round_trip(self, tmp_path):
        pairs, _, _ = self.pairs()
        model = train_bridge(pairs, BridgeConfig(epochs=2, latent_dim=8))
        save_bridge(model, tmp_path / "b.synw")
        loaded = load_bridge(tmp_path / "b.synw")
        assert loaded.latent_dim == 8
        assert final_loss(loaded, pairs, 0.7) == pytest.approx(final_loss(model, pairs, 0.7), abs=1e-5)
