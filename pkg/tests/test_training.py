import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from smoothinv import autodiff as ad
from smoothinv.autodiff import Tensor
from smoothinv.data import Dataset, checker_backdoor, generate_synthetic_dataset
from smoothinv.errors import ContractError, DimensionError, TrainingError
from smoothinv.training import (
    Intervention,
    Layer,
    Model,
    TrainConfig,
    evaluate_asr,
    evaluate_clean_accuracy,
    forward_graph,
    intervention_loss,
    model_forward,
    model_init,
    predict,
    train,
    train_with_intervention,
)

SMALL = (3, 16, 16)


def small_data(seed=0, per_class=10, classes=4):
    return generate_synthetic_dataset(seed, classes, per_class, SMALL)


def constant_model(class_count=10, shape=(1, 4, 4), bias=None):
    n = int(np.prod(shape))
    b = np.zeros(class_count, np.float32) if bias is None else np.asarray(bias, np.float32)
    return Model([Layer("dense", np.zeros((n, class_count), np.float32), b, relu=False)], shape, class_count)


def test_init_is_deterministic():
    a, b = model_init(4), model_init(4)
    for p, q in zip(a.parameters(), b.parameters()):
        assert np.array_equal(p, q)
    assert not np.array_equal(a.parameters()[0], model_init(5).parameters()[0])


def test_architecture_and_logit_shape():
    m = model_init(0)
    kinds = [layer.kind for layer in m.layers]
    assert kinds == ["conv", "pool", "conv", "pool", "dense", "dense"]
    assert m.layers[0].weight.shape[0] == 16 and m.layers[2].weight.shape[:2] == (32, 16)
    assert model_forward(m, np.zeros((3, 32, 32))).shape == (10,)
    assert model_forward(m, np.zeros((5, 3, 32, 32))).shape == (5, 10)


def test_input_shape_mismatch():
    with pytest.raises(DimensionError):
        model_forward(model_init(0), np.zeros((3, 30, 32)))


def test_incompatible_layers_rejected():
    with pytest.raises(DimensionError):
        Model([Layer("dense", np.zeros((10, 3), np.float32), np.zeros(3, np.float32))], (1, 4, 4), 3)


def test_untrained_accuracy_near_chance(test_set):
    acc = evaluate_clean_accuracy(model_init(0), test_set)
    assert abs(acc - 0.1) <= 0.08


def test_forward_repeatable():
    m = model_init(1)
    x = np.random.default_rng(0).random((3, 32, 32)).astype(np.float32)
    assert np.array_equal(model_forward(m, x), model_forward(m, x))


def test_zero_final_layer_gives_zero_logits():
    m = model_init(2)
    params = m.parameters()
    params[-2] = np.zeros_like(params[-2])
    params[-1] = np.zeros_like(params[-1])
    out = model_forward(m.with_parameters(params), np.random.default_rng(0).random((4, 3, 32, 32)))
    assert not out.any()


def test_batch_and_single_forward_agree_bitwise():
    m = model_init(3)
    x = np.random.default_rng(1).random((12, 3, 32, 32)).astype(np.float32)
    batched = model_forward(m, x)
    single = np.stack([model_forward(m, xi) for xi in x])
    assert np.array_equal(batched, single)


def test_model_gradients_match_finite_differences():
    m = model_init(0, SMALL, 4, hidden=8, dtype=np.float64)
    x = np.random.default_rng(2).random(SMALL)
    f = lambda t: ad.softmax_cross_entropy(forward_graph(m, t), 1)  # noqa: E731
    leaf = Tensor(x, requires_grad=True)
    (g,) = ad.backward(f(leaf), [leaf])
    fd = ad.finite_diff_grad(lambda z: f(Tensor(z)).item(), x)
    assert np.max(np.abs(g - fd)) / np.max(np.abs(fd)) < 1e-4


# --------------------------------------------------------------------------
# training


def test_zero_epochs_returns_same_weights():
    m = model_init(0, SMALL, 4)
    out, metrics = train(m, small_data(), TrainConfig(epochs=0))
    for p, q in zip(m.parameters(), out.parameters()):
        assert np.array_equal(p, q)
    assert metrics.loss_history == []


def test_training_is_bitwise_reproducible_and_lowers_loss():
    d = small_data()
    cfg = TrainConfig(epochs=3, batch_size=8, seed=5)
    a, ma = train(model_init(0, SMALL, 4), d, cfg)
    b, mb = train(model_init(0, SMALL, 4), d, cfg)
    for p, q in zip(a.parameters(), b.parameters()):
        assert np.array_equal(p, q)
    assert ma.loss_history == mb.loss_history
    assert len(ma.loss_history) == 3 and all(np.isfinite(ma.loss_history))
    assert ma.loss_history[-1] < ma.loss_history[0]


def test_divergence_reports_epoch():
    with pytest.raises(TrainingError) as info:
        train(model_init(0, SMALL, 4), small_data(), TrainConfig(epochs=5, batch_size=4, learning_rate=1e6))
    assert info.value.epoch >= 0


def test_config_validation():
    with pytest.raises(ContractError):
        TrainConfig(batch_size=0)
    with pytest.raises(ContractError):
        TrainConfig(learning_rate=0)
    with pytest.raises(ContractError):
        Intervention(alphas=(0, 0, 0))
    with pytest.raises(ContractError):
        Intervention(alphas=(1, -1, 0))


def test_intervention_requires_config():
    with pytest.raises(ContractError):
        train_with_intervention(model_init(0, SMALL, 4), small_data(), checker_backdoor(0), TrainConfig(epochs=1))


def _batch():
    d = small_data(per_class=4)
    return d.images, d.labels


def test_intervention_without_noise_term_is_blind_poisoning():
    m = model_init(0, SMALL, 4)
    params = [Tensor(p) for p in m.parameters()]
    images, labels = _batch()
    spec = checker_backdoor(0)
    got = intervention_loss(m, params, images, labels, spec, Intervention((1, 1, 0)), np.random.default_rng(0)).item()
    patched = images.copy()
    patched[:, :, :3, :3] = spec.patch
    clean = ad.softmax_cross_entropy(model_forward(m, images), labels).item()
    bd = ad.softmax_cross_entropy(model_forward(m, patched), np.zeros(len(labels), int)).item()
    assert got == pytest.approx(clean + bd, rel=1e-12)


def test_intervention_clean_only_is_clean_loss():
    m = model_init(0, SMALL, 4)
    params = [Tensor(p) for p in m.parameters()]
    images, labels = _batch()
    got = intervention_loss(m, params, images, labels, checker_backdoor(0), Intervention((1, 0, 0)),
                            np.random.default_rng(0)).item()
    assert got == ad.softmax_cross_entropy(model_forward(m, images), labels).item()


def test_intervention_clean_only_trains_like_clean():
    d = small_data()
    cfg = TrainConfig(epochs=2, batch_size=8)
    a, _ = train(model_init(0, SMALL, 4), d, cfg)
    iv = TrainConfig(epochs=2, batch_size=8, intervention=Intervention((1, 0, 0)))
    b, _ = train_with_intervention(model_init(0, SMALL, 4), d, checker_backdoor(0), iv)
    for p, q in zip(a.parameters(), b.parameters()):
        assert np.array_equal(p, q)


def test_intervention_noise_term_uses_true_labels():
    m = model_init(0, SMALL, 4)
    params = [Tensor(p) for p in m.parameters()]
    images, labels = _batch()
    spec = checker_backdoor(0)
    got = intervention_loss(m, params, images, labels, spec, Intervention((0, 0, 1), sigma=0.3),
                            np.random.default_rng(7)).item()
    rng = np.random.default_rng(7)
    noise = rng.standard_normal(images.shape) * 0.3
    patched = images.copy()
    patched[:, :, :3, :3] = spec.patch
    expected = ad.softmax_cross_entropy(model_forward(m, patched + noise), labels).item()
    assert got == pytest.approx(expected, rel=1e-6)


# --------------------------------------------------------------------------
# metrics


def test_constant_model_tie_break_accuracy():
    d = Dataset(np.zeros((100, 1, 4, 4), np.float32), np.repeat(np.arange(10), 10), 10)
    assert evaluate_clean_accuracy(constant_model(), d) == 0.1
    assert np.all(predict(constant_model(), d.images) == 0)


def test_memorizer_accuracy_is_one():
    # logits = one-hot class read off pixel positions
    images = np.zeros((10, 1, 4, 4), np.float32)
    for i in range(10):
        images[i, 0].flat[i] = 1.0
    w = np.zeros((16, 10), np.float32)
    w[np.arange(10), np.arange(10)] = 1.0
    m = Model([Layer("dense", w, np.zeros(10, np.float32), relu=False)], (1, 4, 4), 10)
    assert evaluate_clean_accuracy(m, Dataset(images, np.arange(10), 10)) == 1.0


def test_accuracy_matches_hand_recount():
    m = model_init(3, SMALL, 4)
    d = small_data(per_class=5)
    hits = 0
    for x in d:
        logits = model_forward(m, x.pixels)
        best = 0
        for k in range(len(logits)):
            if logits[k] > logits[best]:
                best = k
        hits += best == x.label
    assert evaluate_clean_accuracy(m, d) == hits / len(d)


def test_empty_evaluation_rejected():
    with pytest.raises(ContractError):
        Dataset(np.zeros((0, 1, 4, 4)), np.zeros(0, np.int64), 10)


def test_asr_always_target_model():
    d = Dataset(np.random.default_rng(0).random((30, 1, 4, 4)).astype(np.float32), np.arange(30) % 3, 3)
    m = constant_model(3, bias=[0, 0, 5])
    assert evaluate_asr(m, d, np.zeros((1, 4, 4)), target=2) == 1.0


def test_asr_all_target_rejected():
    d = Dataset(np.zeros((4, 1, 4, 4), np.float32), np.zeros(4, np.int64), 3)
    with pytest.raises(ContractError):
        evaluate_asr(constant_model(3), d, np.zeros((1, 4, 4)), target=0)


def test_asr_counts_only_non_target_images():
    d = Dataset(np.zeros((10, 1, 4, 4), np.float32), np.array([0, 0, 0, 1, 1, 2, 2, 2, 2, 2]), 3)
    m = constant_model(3, bias=[1, 0, 0])
    # predictions are always class 0: target 1 excludes two images, all eight go to 0, none to 1
    assert evaluate_asr(m, d, np.zeros((1, 4, 4)), target=1) == 0.0
    assert evaluate_asr(m, d, np.zeros((1, 4, 4)), target=0) == 1.0


def test_asr_additive_is_unclamped_unless_asked():
    # logit 1 grows with the sum of pixels; a shift pushing values above 1 only counts unclamped
    w = np.zeros((16, 2), np.float32)
    w[:, 1] = 1.0
    m = Model([Layer("dense", w, np.array([20.0, 0.0], np.float32), relu=False)], (1, 4, 4), 2)
    d = Dataset(np.ones((5, 1, 4, 4), np.float32), np.zeros(5, np.int64), 2)
    delta = np.full((1, 4, 4), 0.5)
    assert evaluate_asr(m, d, delta, target=1) == 1.0
    assert evaluate_asr(m, d, delta, target=1, clamp=True) == 0.0


@settings(max_examples=30, deadline=None)
@given(st.integers(0, 2**31))
def test_metrics_invariant_under_permutation(seed):
    m = model_init(3, SMALL, 4)
    d = small_data(per_class=6)
    perm = np.random.default_rng(seed).permutation(len(d))
    shuffled = d.subset(perm)
    delta = np.full(SMALL, 0.1, np.float32)
    assert evaluate_clean_accuracy(m, d) == evaluate_clean_accuracy(m, shuffled)
    assert evaluate_asr(m, d, delta, 1) == evaluate_asr(m, shuffled, delta, 1)


# --------------------------------------------------------------------------
# trained models (shared session fixtures)


def test_clean_model_accuracy(clean_model, test_set):
    assert evaluate_clean_accuracy(clean_model, test_set) >= 0.90


def test_zero_perturbation_asr_is_small(clean_model, test_set):
    assert evaluate_asr(clean_model, test_set, np.zeros((3, 32, 32), np.float32), target=0) < 0.05


def test_poisoned_model_profile(clean_model, poisoned_model, test_set, trigger):
    clean_acc = evaluate_clean_accuracy(clean_model, test_set)
    assert evaluate_clean_accuracy(poisoned_model, test_set) >= clean_acc - 0.03
    assert evaluate_asr(poisoned_model, test_set, trigger) >= 0.95
