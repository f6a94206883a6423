import numpy as np
import pytest

from oracles import central_diff, model_gradient_error, rel_err
from tamoo.data import DatasetSpec, gen_dataset
from tamoo.errors import DomainError, IntegrityError
from tamoo.models import (
    CE,
    CW,
    KL,
    Classifier,
    LossKind,
    checkpoint_bytes,
    ensemble_ce_and_grad,
    ensemble_probs,
    forward,
    grad_input,
    init_classifier,
    load_model,
    loss,
    loss_from_logits,
    model_from_bytes,
    save_model,
    softmax,
    train_classifier,
)


def linear(W, b=None):
    W = np.asarray(W, float)
    return Classifier((W,), (np.zeros(W.shape[1]) if b is None else np.asarray(b, float),))


def test_zero_model_uniform_probs_and_zero_grad():
    model = linear(np.zeros((3, 5)))
    _, p = forward(model, [0.3, -1.0, 2.0])
    np.testing.assert_allclose(p, 0.2, atol=1e-15)
    for kind, target in ((CE, 1), (CW, 1), (KL, np.full(5, 0.2))):
        assert np.all(grad_input(model, [0.3, -1.0, 2.0], target, kind) == 0)


def test_identity_model_argmax():
    _, p = forward(linear(np.eye(4)), [1.0, 0, 0, 0])
    assert int(np.argmax(p)) == 0
    assert abs(p.sum() - 1) < 1e-9


def test_dimension_mismatch():
    with pytest.raises(DomainError):
        forward(linear(np.eye(3)), [1.0, 2.0])


def test_ce_uniform_is_log_m():
    assert loss(linear(np.zeros((2, 7))), [1.0, 1.0], 3, CE) == pytest.approx(np.log(7), abs=1e-12)


def test_kl_self_is_zero():
    model = linear(np.random.default_rng(0).normal(size=(3, 4)))
    x = np.array([0.2, 0.5, 0.9])
    ref = forward(model, x)[1]
    assert loss(model, x, ref, KL) == pytest.approx(0.0, abs=1e-12)


def test_cw_example():
    value, _ = loss_from_logits(np.array([2.0, 0.5, -1.0]), 0, CW)
    assert value == pytest.approx(-1.5, abs=1e-15)
    value, _ = loss_from_logits(np.array([2.0, 0.5, -1.0]), 0, LossKind("cw", 0.25))
    assert value == pytest.approx(-1.25, abs=1e-15)


def test_cw_ties_pick_lowest_index():
    _, grad = loss_from_logits(np.array([0.0, 1.0, 1.0]), 0, CW)
    np.testing.assert_array_equal(grad, [-1.0, 1.0, 0.0])


def test_linear_ce_gradient_formula():
    rng = np.random.default_rng(1)
    W, b = rng.normal(size=(5, 3)), rng.normal(size=3)
    model = linear(W, b)
    x = rng.random(5)
    p = forward(model, x)[1]
    expected = W @ (p - np.eye(3)[2])
    np.testing.assert_allclose(grad_input(model, x, 2, CE), expected, atol=1e-14)
    assert rel_err(expected, central_diff(lambda v: float(loss(model, v, 2, CE)), x)) < 1e-8


def test_cw_gradient_unique_runner_up():
    rng = np.random.default_rng(2)
    W = rng.normal(size=(4, 3))
    model = linear(W)
    x = rng.random(4)
    z = model.logits(x)
    y = int(np.argmax(z))
    k = max((i for i in range(3) if i != y), key=lambda i: z[i])
    np.testing.assert_allclose(grad_input(model, x, y, CW), W @ (np.eye(3)[k] - np.eye(3)[y]), atol=1e-14)


def test_gradients_match_finite_differences():
    rng = np.random.default_rng(3)
    errs = [model_gradient_error(rng) for _ in range(100)]
    assert max(errs) <= 1e-5


def test_softmax_shift_invariance_and_nonnegative_losses():
    rng = np.random.default_rng(4)
    for _ in range(50):
        z = rng.normal(0, 5, size=6)
        np.testing.assert_allclose(softmax(z + 123.4), softmax(z), atol=1e-12)
        ref = softmax(rng.normal(size=6))
        assert loss_from_logits(z, int(rng.integers(6)), CE)[0] >= 0
        assert loss_from_logits(z, ref, KL)[0] >= -1e-15


def test_ce_clamp_gives_finite_value_and_zero_grad():
    value, grad = loss_from_logits(np.array([1000.0, 0.0]), 1, CE)
    assert value == pytest.approx(-np.log(1e-12))
    assert np.all(grad == 0)


def test_batch_losses_match_single():
    rng = np.random.default_rng(5)
    Z = rng.normal(size=(4, 5))
    y = np.array([0, 3, 1, 4])
    for kind in (CE, CW):
        v, g = loss_from_logits(Z, y, kind)
        for i in range(4):
            vi, gi = loss_from_logits(Z[i], y[i], kind)
            assert v[i] == pytest.approx(vi)
            np.testing.assert_allclose(g[i], gi)


def test_loss_kind_parse():
    assert LossKind.parse("cw") == CW
    assert LossKind.parse(KL) is KL
    with pytest.raises(DomainError):
        LossKind.parse("hinge")
    with pytest.raises(DomainError):
        LossKind("cw", -1.0)


def test_scaled_keeps_decisions():
    rng = np.random.default_rng(6)
    model = init_classifier((6, 8, 4), rng)
    X = rng.random((20, 6))
    big = model.scaled(1000.0)
    np.testing.assert_array_equal(big.predict(X), model.predict(X))
    np.testing.assert_allclose(big.logits(X), 1000 * model.logits(X))


def test_input_mask_blocks_features():
    rng = np.random.default_rng(7)
    mask = np.array([True, False, True, False])
    model = init_classifier((4, 5, 3), rng, input_mask=mask)
    x = rng.random(4)
    x2 = x.copy()
    x2[1] += 10
    np.testing.assert_allclose(model.logits(x), model.logits(x2))
    g = model.grad_input(x, 0, CE)
    assert np.all(g[~mask] == 0)


def test_training_separable_two_class():
    ds = gen_dataset(DatasetSpec(kind="blobs", classes=2, samples=400, dim=8, margin=10.0, sigma=0.05, seed=0))
    model = train_classifier(ds.X, ds.y, hidden=(), epochs=50, lr=0.1, seed=0)
    assert model.train_accuracy >= 0.99


def test_zero_epochs_is_near_chance():
    ds = gen_dataset(DatasetSpec(kind="blobs", classes=4, samples=400, dim=16, seed=1))
    accs = [train_classifier(ds.X, ds.y, hidden=(8,), epochs=0, seed=s).train_accuracy for s in range(10)]
    assert abs(np.mean(accs) - 0.25) < 0.15


def test_training_deterministic():
    ds = gen_dataset(DatasetSpec(kind="blobs", classes=3, samples=120, dim=6, seed=2))
    a = train_classifier(ds.X, ds.y, hidden=(5,), epochs=3, seed=9)
    b = train_classifier(ds.X, ds.y, hidden=(5,), epochs=3, seed=9)
    c = train_classifier(ds.X, ds.y, hidden=(5,), epochs=3, seed=10)
    assert a == b
    assert checkpoint_bytes(a) == checkpoint_bytes(b)
    assert a != c


def test_training_rejects_empty():
    with pytest.raises(DomainError):
        train_classifier(np.zeros((0, 3)), np.zeros(0, dtype=int))


def test_checkpoint_roundtrip(tmp_path):
    rng = np.random.default_rng(8)
    for mask in (None, rng.random(5) < 0.5):
        model = init_classifier((5, 7, 3), rng, input_mask=mask)
        path = tmp_path / "m.bin"
        save_model(model, path)
        again = load_model(path)
        assert again == model
        assert checkpoint_bytes(again) == checkpoint_bytes(model)


def test_checkpoint_rejects_corruption(tmp_path):
    model = init_classifier((3, 2), np.random.default_rng(9))
    blob = bytearray(checkpoint_bytes(model))
    for pos in (0, 20, len(blob) - 12, len(blob) - 1):
        bad = bytearray(blob)
        bad[pos] ^= 0xFF
        with pytest.raises(IntegrityError):
            model_from_bytes(bytes(bad))
    with pytest.raises(IntegrityError):
        model_from_bytes(bytes(blob[:-3]))
    with pytest.raises(IntegrityError):
        load_model(tmp_path / "missing.bin")


def test_ensemble_ce_gradient():
    rng = np.random.default_rng(10)
    models = [init_classifier((6, 5, 4), rng) for _ in range(3)]
    x = rng.random(6)
    value, g = ensemble_ce_and_grad(models, x, 2)
    assert value == pytest.approx(-np.log(ensemble_probs(models, x)[2]))
    fd = central_diff(lambda v: float(ensemble_ce_and_grad(models, v, 2)[0]), x)
    assert rel_err(g, fd) < 1e-6
