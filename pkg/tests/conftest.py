import time
from types import SimpleNamespace

import pytest

from jpegdefense.attacks import AttackConfig, attack_dataset, calibrate_epsilon
from jpegdefense.data_io import generate_synthetic
from jpegdefense.defense import QualityGrid, vaccinate
from jpegdefense.nn import TrainConfig, build_network, train

BASE_EPOCHS = 50
SEED = 1


@pytest.fixture(scope="session")
def toy_world():
    """4-class synthetic 32x32 data and a toy-architecture model trained on it."""
    start = time.perf_counter()
    train_set = generate_synthetic(4, 100, (32, 32), seed=SEED, name="train")
    test_set = generate_synthetic(4, 50, (32, 32), seed=SEED + 100, name="test")
    model = train(build_network("toy", (32, 32, 3), 4, seed=SEED), train_set,
                  TrainConfig(epochs=BASE_EPOCHS, batch_size=32, seed=SEED))
    return SimpleNamespace(train=train_set, test=test_set, model=model,
                           elapsed=time.perf_counter() - start)


@pytest.fixture(scope="session")
def toy_pipeline(toy_world):
    """Vaccinated suite plus FGSM (calibrated to >= 50% success) and DeepFool test sets."""
    start = time.perf_counter()
    eps, fgsm_rate = calibrate_epsilon(toy_world.model, toy_world.test, 0.5)
    fgsm_set, _ = attack_dataset(toy_world.model, toy_world.test, AttackConfig("fgsm", eps))
    df_set, _ = attack_dataset(toy_world.model, toy_world.test, AttackConfig("deepfool"))
    attack_elapsed = time.perf_counter() - start
    suite = vaccinate(toy_world.model, toy_world.train, QualityGrid(),
                      TrainConfig(epochs=BASE_EPOCHS // 4, batch_size=32, seed=SEED))
    return SimpleNamespace(world=toy_world, suite=suite, epsilon=eps, fgsm_rate=fgsm_rate,
                           fgsm=fgsm_set, deepfool=df_set, attack_elapsed=attack_elapsed)


ACCEPTANCE_LINES: list[str] = []


def pytest_terminal_summary(terminalreporter):
    if ACCEPTANCE_LINES:
        terminalreporter.section("acceptance criteria")
        for line in ACCEPTANCE_LINES:
            terminalreporter.write_line(line)


@pytest.fixture(scope="session")
def acceptance_log():
    return ACCEPTANCE_LINES
