import sys

import numpy as np
import pytest

from cfgp.data import filter_and_split
from cfgp.meanmodel import init_params
from cfgp.synthetic import make_dataset
from cfgp.train import TrainConfig, train

# Fixture used wherever a trained model must drive a platoon or an
# ensemble: small SE residual, followers started off equilibrium so the gap
# feedback of the rule is identifiable.
PLATOON_FIXTURE = dict(residual="se", ell=1.0, sigma=0.25, gap_jitter=8.0, speed_jitter=3.0,
                       amp=5.0)


def random_params(H=3, seed=0, scale=0.5):
    """Initialized model with random (nonzero) biases and standardization."""
    rng = np.random.default_rng(seed)
    p = init_params(H=H, input_dim=3, seed=seed)
    for k, v in p.weights.items():
        p.weights[k] = np.asarray(v + scale * rng.standard_normal(np.shape(v)))
    p.x_mean = rng.normal(size=3)
    p.x_std = rng.uniform(0.5, 2.0, size=3)
    return p


@pytest.fixture(scope="session")
def platoon_model():
    trajs = make_dataset(100, seed=0, **PLATOON_FIXTURE)
    split = filter_and_split(trajs, n_test=10, train_frac=0.8, seed=0)
    cfg = TrainConfig(kernel="se", H=16, epochs=60, lr=1e-2, segments_per_step=32, dropout=0.0)
    params, _ = train(split, cfg)
    return params, split


def pytest_terminal_summary(terminalreporter):
    mod = sys.modules.get("test_acceptance")
    if mod is None:
        return
    terminalreporter.section("acceptance criteria")
    for n in range(1, 12):
        if n in mod.RESULTS:
            title, ok, detail = mod.RESULTS[n]
            terminalreporter.write_line(f"criterion {n:2d}: {'PASS' if ok else 'FAIL'}  {title} ({detail})")
        elif n == 11:
            terminalreporter.write_line("criterion 11: SKIP  licensed HighD protocol (data not bundled)")
        else:
            terminalreporter.write_line(f"criterion {n:2d}: NOT RUN")
