import math

import numpy as np
import pytest
from gradcheck import worst_relative_error

from synbridge.dataio import SyntheticSpec, generate_synthetic
from synbridge.distill import (
    CosineClassifier,
    DistillConfig,
    Projector,
    classification_loss,
    distill_loss,
    load_stage1,
    save_stage1,
    student_logits,
    teacher_logits,
    train_stage1,
    vis_objective,
)
from synbridge.errors import LabelOutOfRange
from synbridge.numcore import kl_divergence, l2_normalize, softmax


def kl_by_hand(p, q):
    return sum(pi * math.log(pi / qi) for pi, qi in zip(p, q) if pi > 0)


class TestLogits:
    def test_teacher_one_hot(self):
        text = np.eye(3)
        np.testing.assert_allclose(teacher_logits([0, 1, 0], text), [0, 1, 0])

    def test_teacher_bisector(self):
        q = teacher_logits([1, 1], np.eye(2))
        assert q[0] == pytest.approx(q[1])

    def test_teacher_brute_force(self, rng):
        u = l2_normalize(rng.standard_normal(8))
        text = rng.standard_normal((5, 8))
        text /= np.linalg.norm(text, axis=1, keepdims=True)
        np.testing.assert_allclose(teacher_logits(u, text), [float(np.dot(u, t)) for t in text], rtol=1e-12)

    def test_student_goes_through_projector(self, rng):
        proj = Projector.init(6, 4, seed=0)
        text = rng.standard_normal((3, 4))
        u = rng.standard_normal(6)
        h = proj.layers[1].weight @ (proj.layers[0].weight @ u + proj.layers[0].bias) + proj.layers[1].bias
        expected = [h @ t / (np.linalg.norm(h) * np.linalg.norm(t)) for t in text]
        np.testing.assert_allclose(student_logits(u, proj, text), expected, rtol=1e-10)


class TestDistillLoss:
    @pytest.mark.parametrize("tau", [1.0, 2.0, 4.0, 8.0])
    def test_identity(self, tau):
        assert distill_loss([1, 2, 3], [1, 2, 3], tau) == 0.0

    def test_analytic(self):
        expected = (2 / 3) * math.log(4 / 3) + (1 / 3) * math.log(2 / 3)
        assert distill_loss([math.log(2), 0], [0, 0], 1.0) == pytest.approx(expected, abs=1e-12)
        assert expected == pytest.approx(0.0566, abs=5e-5)

    def test_random_tau4(self, rng):
        for _ in range(10):
            q_t, q_s = rng.standard_normal(6), rng.standard_normal(6)
            pt = np.exp(q_t / 4) / np.exp(q_t / 4).sum()
            ps = np.exp(q_s / 4) / np.exp(q_s / 4).sum()
            assert distill_loss(q_t, q_s, 4.0) == pytest.approx(16 * kl_by_hand(pt, ps), rel=1e-10)

    def test_teacher_first(self, rng):
        q_t, q_s = rng.standard_normal(4), rng.standard_normal(4)
        assert distill_loss(q_t, q_s, 2.0) == pytest.approx(
            4 * kl_divergence(softmax(q_t, 2.0), softmax(q_s, 2.0))
        )


class TestClassificationLoss:
    def test_antipodal(self):
        clf = CosineClassifier(np.array([[1.0, 0.0], [-1.0, 0.0]]), (0, 1), scale=10.0)
        expected = -math.log(math.exp(10) / (math.exp(10) + math.exp(-10)))
        assert classification_loss([1.0, 0.0], 0, clf) == pytest.approx(expected, rel=1e-6)
        assert expected == pytest.approx(2.06e-9, rel=1e-2)

    def test_uniform(self, rng):
        clf = CosineClassifier(np.tile(rng.standard_normal(4), (6, 1)), tuple(range(6)))
        assert classification_loss(rng.standard_normal(4), 2, clf) == pytest.approx(math.log(6))

    def test_hand_composed(self, rng):
        w = rng.standard_normal((5, 8))
        u = rng.standard_normal(8)
        clf = CosineClassifier(w, (10, 11, 12, 13, 14), scale=10.0)
        logits = [10 * np.dot(u, wj) / (np.linalg.norm(u) * np.linalg.norm(wj)) for wj in w]
        expected = -logits[3] + math.log(sum(math.exp(z) for z in logits))
        assert classification_loss(u, 13, clf) == pytest.approx(expected, rel=1e-12)

    def test_unknown_label(self):
        clf = CosineClassifier(np.eye(2), (0, 1))
        with pytest.raises(LabelOutOfRange):
            classification_loss([1, 0], 5, clf)


@pytest.mark.parametrize("instance", range(20))
def test_vis_gradient(instance):
    rng = np.random.default_rng([77, instance])
    d, batch, ways = 8, 6, 5
    proj = Projector.init(d, d, seed=instance)
    clf = CosineClassifier.init(d, tuple(range(ways)), seed=instance)
    u_s = rng.standard_normal((batch, d))
    u_t = rng.standard_normal((batch, d))
    text = rng.standard_normal((ways, d))
    labels = rng.integers(0, ways, batch)

    def objective(backward):
        return sum(vis_objective(proj, clf, u_s, u_t, labels, text, 4.0, backward))

    params = proj.parameters() + clf.parameters()
    grads = proj.gradients() + clf.gradients()
    assert worst_relative_error(objective, params, grads) < 1e-5


@pytest.fixture(scope="module")
def data():
    return generate_synthetic(SyntheticSpec(num_categories=8, num_base=4, samples_per_category=30, seed=1))


def quick(**kw):
    base = dict(epochs=2, episodes_per_epoch=5, n_way=3, k_shot=1, n_query=5)
    base.update(kw)
    return DistillConfig(**base)


class TestTraining:
    def test_zero_epochs_is_init(self, data):
        proj, clf = train_stage1(data.student_visual, data.teacher_text, data.split, quick(epochs=0))
        init = Projector.init(data.student_visual.dim, data.teacher_text.dim, 0)
        np.testing.assert_array_equal(proj.layers[0].weight, init.layers[0].weight)
        np.testing.assert_array_equal(proj.layers[1].bias, init.layers[1].bias)
        init_clf = CosineClassifier.init(data.student_visual.dim, data.split.base, 0)
        np.testing.assert_array_equal(clf.weight, init_clf.weight)

    def test_deterministic_checkpoints(self, data, tmp_path):
        for name in ("a", "b"):
            train_stage1(data.student_visual, data.teacher_text, data.split, quick(),
                         data.teacher_visual, checkpoint=tmp_path / f"{name}.synw")
        assert (tmp_path / "a.synw").read_bytes() == (tmp_path / "b.synw").read_bytes()

    def test_inputs_untouched(self, data):
        before = [b.checksum() for b in (data.student_visual, data.teacher_text, data.teacher_visual)]
        train_stage1(data.student_visual, data.teacher_text, data.split, quick(), data.teacher_visual)
        train_stage1(data.student_visual, data.teacher_text, data.split, quick(flat_batch=True, batch_size=16))
        after = [b.checksum() for b in (data.student_visual, data.teacher_text, data.teacher_visual)]
        assert before == after

    def test_ce_decreases_on_noiseless_data(self):
        clean = generate_synthetic(SyntheticSpec(
            num_categories=10, num_base=5, latent_dim=16, visual_dim=16, semantic_dim=16,
            samples_per_category=30, visual_noise=0, semantic_noise=0, teacher_noise=0, mixing="identity",
        ))
        history = []
        train_stage1(clean.student_visual, clean.teacher_text, clean.split,
                     DistillConfig(epochs=5, episodes_per_epoch=20), clean.teacher_visual, history=history)
        ce = [h["ce"] for h in history]
        assert all(a > b for a, b in zip(ce, ce[1:])), ce

    def test_checkpoint_round_trip(self, data, tmp_path):
        proj, clf = train_stage1(data.student_visual, data.teacher_text, data.split, quick())
        save_stage1(proj, clf, tmp_path / "s1.synw")
        proj2, clf2 = load_stage1(tmp_path / "s1.synw")
        np.testing.assert_array_equal(proj2.layers[0].weight, proj.layers[0].weight.astype(np.float32))
        assert clf2.class_ids == clf.class_ids and clf2.scale == clf.scale

    def test_hidden_relu_variant(self, data):
        proj, _ = train_stage1(data.student_visual, data.teacher_text, data.split,
                               quick(hidden_dim=20, projector_relu=True))
        assert proj.layers[0].out_dim == 20 and proj.layers[0].activation.kind == "relu"
