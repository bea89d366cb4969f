import numpy as np
import pytest
import torch

from endp.data import Dataset, subset_and_batch
from endp.network import ConvSpec, EnDPNet, NetworkSpec
from endp.training import TrainConfig, new_state, train

torch.set_num_threads(1)

# one line per exit criterion, printed at the end of the session
ACCEPTANCE_LINES = []


def pytest_terminal_summary(terminalreporter):
    if ACCEPTANCE_LINES:
        terminalreporter.section("acceptance criteria")
        for line in sorted(ACCEPTANCE_LINES, key=lambda l: int(l.split(":")[0].split()[-1])):
            terminalreporter.write_line(line)


def stripes(n, seed=0, side=8):
    """Two linearly separable classes: bright left half (0) or bright right half (1)."""
    r = np.random.default_rng(seed)
    labels = np.arange(n) % 2
    img = r.uniform(0.0, 0.3, (n, 1, side, side))
    half = side // 2
    img[labels == 0, :, :, :half] += 0.6
    img[labels == 1, :, :, half:] += 0.6
    return Dataset(np.clip(img, 0, 1).astype(np.float32), labels, "stripes", num_classes=2)


def toy_spec(kind="endp", n=20):
    return NetworkSpec((1, 8, 8), [ConvSpec(2, 3, "relu", n, (2, 2))], 2, kind, "diag", 0.05)


def train_toy(kind, steps=200, seed=0, batch=10):
    ds = stripes(batch * 20, seed)
    model = EnDPNet(toy_spec(kind), seed=seed)
    cfg = TrainConfig(epochs=steps // 20, batch_size=batch, learning_rate=1e-2, global_seed=seed, audit=False,
                      micro_batch=batch)
    model, records = train(new_state(model, cfg), subset_and_batch(ds, None, batch, seed), cfg)
    return model, records


@pytest.fixture(scope="session")
def toy_endp():
    return train_toy("endp")


@pytest.fixture(scope="session")
def toy_baseline():
    return train_toy("baseline")
