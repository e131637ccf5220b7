import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from gapprune import functional as F
from gapprune.attack import (
    AttackSpec,
    adversarial_accuracy,
    load_adversarial_batch,
    mean_loss,
    pgd,
    save_adversarial_batch,
    surrogate_gradient_attack,
)
from gapprune.errors import ArchitectureMismatchError, ContractError
from gapprune.model import Model
from gapprune.quantization import quantize_model
from gapprune.tensor import Tensor

EPS = 8 / 255


class LinearModel:
    """Logits ``flatten(x) @ w``; with ``w[:, 0] = 1`` and label 1 the loss grows with every pixel."""

    num_classes = 2
    dtype = np.float64

    def __init__(self, w):
        self.w = w

    def forward(self, x):
        return F.dense(F.flatten(x), Tensor(self.w), Tensor(np.zeros(2)))

    def predict(self, images):
        return np.zeros(len(images), dtype=int)


def uphill(pixels):
    return LinearModel(np.stack([np.ones(pixels), np.zeros(pixels)], axis=1))


@pytest.mark.parametrize("random_start", [True, False])
def test_zero_epsilon_reproduces_inputs(cnn_blobs, random_start):
    model, train_ds, _ = cnn_blobs
    x, y = train_ds.images[:32], train_ds.labels[:32]
    batch = pgd(model, x, y, AttackSpec(epsilon=0.0, alpha=2 / 255, random_start=random_start))
    assert batch.adversarials.tobytes() == np.asarray(x).tobytes()


def test_single_sign_step_analytic():
    x = np.array([[[[0.2, 0.5], [1.0, 0.999]]]])
    spec = AttackSpec(epsilon=EPS, alpha=2 / 255, steps=1, random_start=False)
    batch = pgd(uphill(4), x, np.array([1]), spec)
    expected = np.minimum(x + 2 / 255, 1.0)
    np.testing.assert_allclose(batch.adversarials, expected, rtol=0, atol=1e-12)
    assert batch.adversarials[0, 0, 1, 0] == 1.0


def test_sign_of_zero_does_not_move():
    x = np.full((1, 1, 2, 2), 0.5)
    batch = pgd(LinearModel(np.zeros((4, 2))), x, np.array([0]), AttackSpec(random_start=False))
    assert np.array_equal(batch.adversarials, x)


@settings(max_examples=12, deadline=None)
@given(
    eps_steps=st.integers(1, 16),
    ratio=st.floats(0.1, 1.0),
    steps=st.integers(1, 6),
    seed=st.integers(0, 1000),
)
def test_containment(cnn_blobs, eps_steps, ratio, steps, seed):
    model, train_ds, _ = cnn_blobs
    eps = eps_steps / 255
    spec = AttackSpec(epsilon=eps, alpha=eps * ratio, steps=steps, seed=seed)
    x = train_ds.images[:40]
    batch = pgd(model, x, train_ds.labels[:40], spec)
    assert batch.max_perturbation() <= eps + 1e-6
    assert batch.adversarials.min() >= 0.0 and batch.adversarials.max() <= 1.0


def test_attack_raises_loss_and_harms_generator(cnn_blobs):
    model, train_ds, _ = cnn_blobs
    sub = train_ds.sample(256, 11)
    batch = pgd(model, sub.images, sub.labels, AttackSpec(seed=1))
    assert batch.max_perturbation() <= EPS + 1e-6
    assert mean_loss(model, batch.adversarials, sub.labels) >= mean_loss(model, sub.images, sub.labels)
    assert adversarial_accuracy(model, batch) <= model.accuracy(sub.images, sub.labels)


def test_deterministic(cnn_blobs):
    model, train_ds, _ = cnn_blobs
    x, y = train_ds.images[:50], train_ds.labels[:50]
    a = pgd(model, x, y, AttackSpec(seed=4))
    b = pgd(model, x, y, AttackSpec(seed=4), batch_size=17)
    assert a.adversarials.tobytes() == b.adversarials.tobytes()
    c = pgd(model, x, y, AttackSpec(seed=5))
    assert a.adversarials.tobytes() != c.adversarials.tobytes()


def test_attack_leaves_parameter_grads_untouched(cnn_blobs):
    model, train_ds, _ = cnn_blobs
    pgd(model, train_ds.images[:8], train_ds.labels[:8], AttackSpec(steps=2))
    assert all(p.tensor.grad is None for p in model.params)
    assert all(p.tensor.requires_grad for p in model.params)


def test_zero_epsilon_accuracy_is_clean_accuracy(cnn_blobs):
    model, train_ds, _ = cnn_blobs
    sub = train_ds.sample(200, 2)
    batch = pgd(model, sub.images, sub.labels, AttackSpec(epsilon=0.0, alpha=1 / 255))
    assert adversarial_accuracy(model, batch) == model.accuracy(sub.images, sub.labels)


def test_untrained_target_near_chance(cnn_blobs):
    model, train_ds, _ = cnn_blobs
    sub = train_ds.sample(600, 3)
    batch = pgd(model, sub.images, sub.labels, AttackSpec(seed=0))
    target = Model("minicnn", (1, 16, 16), 10, seed=99)
    assert abs(adversarial_accuracy(target, batch) - 0.1) <= 0.05


def test_class_count_mismatch(cnn_blobs):
    model, train_ds, _ = cnn_blobs
    batch = pgd(model, train_ds.images[:20], train_ds.labels[:20], AttackSpec(steps=1))
    batch.labels[0] = 9
    with pytest.raises(ContractError):
        adversarial_accuracy(Model("minicnn", (1, 16, 16), 5), batch)


@pytest.mark.parametrize(
    "kwargs",
    [dict(epsilon=-0.1), dict(alpha=0.0), dict(alpha=0.5, epsilon=0.1), dict(steps=0), dict(clip_min=1.0, clip_max=0.0)],
)
def test_spec_validation(kwargs):
    with pytest.raises(ContractError):
        AttackSpec(**kwargs)


def test_inputs_outside_clip_range_rejected():
    with pytest.raises(ContractError):
        pgd(uphill(4), np.full((1, 1, 2, 2), 1.5), np.array([1]), AttackSpec())


def test_surrogate_identity_quantizer_matches_twin(cnn_blobs):
    model, train_ds, _ = cnn_blobs
    x, y = train_ds.images[:64], train_ds.labels[:64]
    q = quantize_model(model, enabled=False)
    a = surrogate_gradient_attack(q, q.twin, x, y, AttackSpec(seed=3))
    b = pgd(model, x, y, AttackSpec(seed=3))
    assert a.adversarials.tobytes() == b.adversarials.tobytes()
    assert a.generator_id.endswith(":quantized")
    assert a.max_perturbation() <= EPS + 1e-6


def test_surrogate_architecture_mismatch(cnn_blobs):
    model, train_ds, _ = cnn_blobs
    q = quantize_model(model)
    with pytest.raises(ArchitectureMismatchError):
        surrogate_gradient_attack(q, Model("mlp"), train_ds.images[:2], train_ds.labels[:2], AttackSpec())


def test_surrogate_accuracy_close_to_full_precision(cnn_blobs):
    model, train_ds, _ = cnn_blobs
    sub = train_ds.sample(512, 6)
    q = quantize_model(model)
    batch = surrogate_gradient_attack(q, q.twin, sub.images, sub.labels, AttackSpec(seed=2))
    fp = adversarial_accuracy(model, pgd(model, sub.images, sub.labels, AttackSpec(seed=2)))
    assert abs(adversarial_accuracy(q, batch) - fp) <= 0.05


def test_batch_round_trip(tmp_path, cnn_blobs):
    model, train_ds, _ = cnn_blobs
    batch = pgd(model, train_ds.images[:10], train_ds.labels[:10], AttackSpec(steps=2), generator_id="g")
    loaded = load_adversarial_batch(save_adversarial_batch(batch, tmp_path / "b.gapw"))
    assert loaded.adversarials.tobytes() == batch.adversarials.tobytes()
    assert loaded.originals.tobytes() == batch.originals.tobytes()
    assert np.array_equal(loaded.labels, batch.labels)
    assert (loaded.generator_id, loaded.epsilon) == ("g", batch.epsilon)
