import numpy as np
import pytest

from jpegdefense.attacks import (
    AttackConfig,
    attack_dataset,
    calibrate_epsilon,
    deepfool,
    fgsm,
    misclassification_success,
    success_rate,
)
from jpegdefense.data_io import Dataset
from jpegdefense.nn import build_network, logits

from .helpers import brute_force_min_flip, linear_model


# -- FGSM ---------------------------------------------------------------------------------

def test_fgsm_zero_epsilon_identity():
    m = build_network("toy", (8, 8, 3), 3, seed=0)
    x = np.random.default_rng(0).random((8, 8, 3)).astype(np.float32)
    label = int(logits(m, x[None])[0].argmax())
    res = fgsm(m, x, label, 0.0)
    assert np.array_equal(res.x_adversarial, x)
    assert not res.success and res.linf_norm == 0


def test_fgsm_logistic_sign():
    # P(positive) = sigmoid(w * x); for true label "negative" the loss grows with x when w > 0
    m = linear_model([[0.0, 3.0]], [0.0, 0.0], (1, 1, 1))
    res = fgsm(m, np.array([[[0.4]]], np.float32), 0, 0.05)
    assert res.delta[0, 0, 0] == pytest.approx(0.05)
    m_neg = linear_model([[0.0, -3.0]], [0.0, 0.0], (1, 1, 1))
    assert fgsm(m_neg, np.array([[[0.4]]], np.float32), 0, 0.05).delta[0, 0, 0] == pytest.approx(-0.05)


def test_fgsm_linf_bound_and_box():
    rng = np.random.default_rng(42)
    models = [build_network("toy", (8, 8, 3), 4, seed=s) for s in range(10)]
    for _ in range(1000):
        m = models[rng.integers(10)]
        x = rng.random((8, 8, 3)).astype(np.float32)
        eps = float(rng.uniform(0, 0.3))
        res = fgsm(m, x, int(rng.integers(4)), eps)
        assert np.abs(res.x_adversarial - x).max() <= eps + 1e-7
        assert res.x_adversarial.min() >= 0 and res.x_adversarial.max() <= 1


def test_fgsm_sign_pattern_independent_of_epsilon():
    m = build_network("toy", (8, 8, 3), 3, seed=5)
    x = np.random.default_rng(1).uniform(0.3, 0.7, (8, 8, 3)).astype(np.float32)
    a = fgsm(m, x, 1, 0.01)
    b = fgsm(m, x, 1, 0.2)
    assert np.array_equal(np.sign(a.delta), np.sign(b.delta))


def test_fgsm_shape_mismatch():
    m = build_network("toy", (8, 8, 3), 3)
    with pytest.raises(ValueError):
        fgsm(m, np.zeros((4, 4, 3), np.float32), 0, 0.1)


# -- DeepFool ------------------------------------------------------------------------------

def test_deepfool_binary_linear_closed_form():
    w = np.array([[0.3, -0.5], [-0.2, 0.4], [0.1, 0.2]])  # 3 features, 2 classes
    b = np.array([0.05, -0.1])
    m = linear_model(w, b, (1, 1, 3))
    x = np.array([0.5, 0.4, 0.6])
    cfg = AttackConfig("deepfool", overshoot=0.02)
    res = deepfool(m, x.reshape(1, 1, 3).astype(np.float32), cfg)
    # f(x) = f_1 - f_0 is affine with normal w1 - w0; closed-form projection onto f = 0
    normal = w[:, 1] - w[:, 0]
    f = x @ normal + (b[1] - b[0])
    assert f < 0  # starts in class 0
    projection = -f / (normal @ normal) * normal
    assert res.iterations == 1 and res.success
    assert np.abs(res.delta.ravel() - 1.02 * projection).max() < 1e-5


def test_deepfool_three_class_near_minimal():
    w = np.array([[1.0, -0.6, 0.2], [0.3, 0.9, -1.1]])
    b = np.array([0.0, -0.1, 0.15])
    m = linear_model(w, b, (1, 1, 2))
    x = np.array([0.55, 0.45])
    res = deepfool(m, x.reshape(1, 1, 2).astype(np.float32), AttackConfig("deepfool"))
    oracle = brute_force_min_flip(m, x)
    assert res.success
    assert res.l2_norm <= 1.05 * oracle
    assert res.l2_norm >= oracle * (1 - 1e-4)


def test_deepfool_already_misclassified():
    m = linear_model([[0.0, 3.0]], [0.0, 0.0], (1, 1, 1))
    x = np.array([[[0.8]]], np.float32)  # predicted class 1
    res = deepfool(m, x, y_true=0)
    assert res.iterations == 0 and res.success
    assert not res.delta.any()


def test_deepfool_degenerate_gradients_fail():
    m = linear_model(np.zeros((3, 3)), [1.0, 0.0, 0.0], (1, 1, 3))
    res = deepfool(m, np.full((1, 1, 3), 0.5, np.float32))
    assert not res.success
    assert not res.delta.any()


def test_deepfool_invariants_on_toy_network():
    cfg = AttackConfig("deepfool", max_iter=10)
    rng = np.random.default_rng(3)
    for seed in range(5):
        m = build_network("toy", (8, 8, 3), 4, seed=seed)
        x = rng.random((8, 8, 3)).astype(np.float32)
        res = deepfool(m, x, cfg)
        again = deepfool(m, x, cfg)
        assert np.array_equal(res.x_adversarial, again.x_adversarial)
        assert res.iterations <= cfg.max_iter
        assert 0 <= res.x_adversarial.min() and res.x_adversarial.max() <= 1
        assert np.allclose(res.x_adversarial, x + res.delta, atol=1e-7)
        assert res.l2_norm == pytest.approx(float(np.linalg.norm(res.delta)))
        after = int(logits(m, res.x_adversarial[None])[0].argmax())
        assert res.label_after == after
        if res.success:
            assert after != int(logits(m, x[None])[0].argmax())


def test_deepfool_quantized_stays_adversarial():
    m = build_network("toy", (8, 8, 3), 4, seed=2)
    img = np.random.default_rng(0).integers(0, 256, (8, 8, 3), dtype=np.uint8)
    res = deepfool(m, img, AttackConfig("deepfool"), quantize=True)
    stored = np.round(res.x_adversarial * 255)
    assert np.allclose(stored, res.x_adversarial * 255, atol=1e-3)
    if res.success:
        assert res.label_after != res.label_before


@pytest.mark.parametrize("kwargs", [dict(method="pgd"), dict(epsilon=-0.1), dict(overshoot=-1),
                                    dict(max_iter=0)])
def test_attack_config_validation(kwargs):
    with pytest.raises(ValueError):
        AttackConfig(**kwargs)


# -- dataset level ------------------------------------------------------------------------

def threshold_model():
    """Predicts class 1 when the red channel exceeds one half."""
    w = np.zeros((3, 2), np.float32)
    w[0, 1] = 1.0
    return linear_model(w, [0.0, -0.5], (1, 1, 3))


def pixels(values):
    img = np.zeros((len(values), 1, 1, 3), np.uint8)
    img[:, 0, 0, 0] = values
    return img


def test_misclassification_success_hand_count():
    m = threshold_model()
    labels = np.array([0] * 5 + [1] * 5 + [0] * 5)
    clean = pixels([10] * 5 + [250] * 5 + [250] * 5)      # 10 correct, 5 wrong
    adv = clean.copy()
    adv[[0, 1, 5, 6], 0, 0, 0] = [250, 250, 10, 10]        # flip 4 of the correct ones
    adv[10:, 0, 0, 0] = 10                                 # originally wrong ones do not count
    rate = misclassification_success(m, Dataset(clean, labels, 2), Dataset(adv, labels, 2))
    assert rate == pytest.approx(0.4)


def test_misclassification_success_edges():
    m = threshold_model()
    labels = np.array([0, 1, 1])
    clean = Dataset(pixels([10, 250, 250]), labels, 2)
    assert misclassification_success(m, clean, clean) == 0.0
    flipped = Dataset(pixels([250, 10, 10]), labels, 2)
    assert misclassification_success(m, clean, flipped) == 1.0
    with pytest.raises(ValueError):
        misclassification_success(m, clean, Dataset(pixels([1, 2]), labels[:2], 2))
    wrong = Dataset(pixels([250, 10, 10]), labels, 2)
    with pytest.raises(ValueError):
        misclassification_success(m, wrong, wrong)
    with pytest.raises(ValueError):
        success_rate([0, 1], [0], [0, 1])


def test_attack_dataset_all_misclassified_passthrough():
    m = threshold_model()
    ds = Dataset(pixels([250, 10, 200]), [0, 1, 0], 2)
    for cfg in (AttackConfig("fgsm", 0.1), AttackConfig("deepfool")):
        adv, results = attack_dataset(m, ds, cfg)
        assert np.array_equal(adv.images, ds.images)
        assert results == [None, None, None]


def test_attack_dataset_zero_epsilon(toy_world):
    adv, _ = attack_dataset(toy_world.model, toy_world.test, AttackConfig("fgsm", 0.0))
    assert np.array_equal(adv.images, toy_world.test.images)
    assert adv.meta["attack"] == "fgsm"


def test_attack_dataset_fgsm_bound_and_order(toy_world):
    eps = 6 / 255
    adv, results = attack_dataset(toy_world.model, toy_world.test, AttackConfig("fgsm", eps))
    diff = np.abs(adv.images.astype(int) - toy_world.test.images.astype(int))
    assert diff.max() <= 6
    for i, r in enumerate(results):
        if r is None:
            assert not diff[i].any()
        else:
            assert r.linf_norm <= eps + 1e-7


def test_calibrated_fgsm_reaches_half(toy_world):
    eps, rate = calibrate_epsilon(toy_world.model, toy_world.test, 0.5)
    assert rate >= 0.5
    adv, _ = attack_dataset(toy_world.model, toy_world.test, AttackConfig("fgsm", eps))
    assert misclassification_success(toy_world.model, toy_world.test, adv) == pytest.approx(rate)


def test_attack_dataset_deepfool_threads_match(toy_world):
    small = toy_world.test.subset(np.arange(24))
    cfg = AttackConfig("deepfool")
    a, ra = attack_dataset(toy_world.model, small, cfg, threads=1)
    b, rb = attack_dataset(toy_world.model, small, cfg, threads=3)
    assert np.array_equal(a.images, b.images)
    assert [r and r.iterations for r in ra] == [r and r.iterations for r in rb]
    assert misclassification_success(toy_world.model, small, a) > 0.8
