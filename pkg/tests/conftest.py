import numpy as np
import pytest

from melink.channel import DEFAULT_NOISE_RMS, LinkConfig
from melink.mlp import TrainConfig, train_mlp
from melink.transducer import reference_model
from melink.uplink import FrameSimulator, window_from_capture

F0 = 331e3
T0 = 1.0 / F0


@pytest.fixture(scope="session")
def ref1():
    return reference_model(order=1)


@pytest.fixture(scope="session")
def ref3():
    return reference_model(order=3)


@pytest.fixture(scope="session")
def sim1(ref1):
    return FrameSimulator(ref1)


@pytest.fixture(scope="session")
def sim3(ref3):
    return FrameSimulator(ref3)


def build_dataset(sim, distances_cm, reps, noise_rms, windows_out, labels_out,
                  seed_base=0):
    for di, d_cm in enumerate(distances_cm):
        for code in range(sim.fmt.n_codes):
            for r in range(reps):
                seed = seed_base + (di * sim.fmt.n_codes + code) * 1009 + r
                link = LinkConfig(distance=d_cm / 100, noise_rms=noise_rms,
                                  seed=seed)
                cap = sim.capture(code, link)
                windows_out.append(window_from_capture(cap))
                labels_out.append(code)


@pytest.fixture(scope="session")
def noisy_dataset(sim3):
    """Captures from 1..5 cm at the calibrated receiver noise."""
    windows, labels = [], []
    build_dataset(sim3, (1, 2, 3, 4, 5), 40, DEFAULT_NOISE_RMS, windows, labels)
    return np.stack(windows), np.array(labels)


@pytest.fixture(scope="session")
def trained_mlp(noisy_dataset):
    """Quantized model, float model, and float training accuracy."""
    windows, labels = noisy_dataset
    return train_mlp(windows, labels, TrainConfig(epochs=40, seed=3))
