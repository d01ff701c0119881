import numpy as np
import pytest

from stctr import synthgen as sg
from stctr.model import ModelConfig

SMALL_GEN = dict(n_cities=3, n_users=60, n_items=40, n_categories=4, n_brands=3, n_profiles=2,
                 latent_dim=4, n_requests=400, impressions_per_request=5, max_behaviors=4,
                 geohash_buckets=8, embedding_dim=3, seed=5)


@pytest.fixture(scope="session")
def small_synth():
    return sg.generate(sg.GenConfig(**SMALL_GEN))


@pytest.fixture(scope="session")
def small_cfg(small_synth):
    return ModelConfig(vocab=small_synth.vocab.to_dict(), tower_widths=(8, 4), ststl_rank=3)


def random_batch(data, rng, size):
    return data.take(np.sort(rng.choice(len(data), size, replace=False)))


ACCEPTANCE_LINES = []


def record_criterion(name, passed, detail=""):
    line = f"[{'PASS' if passed else 'FAIL'}] {name}" + (f": {detail}" if detail else "")
    ACCEPTANCE_LINES.append(line)
    print(line)
    return passed


def pytest_terminal_summary(terminalreporter):
    if ACCEPTANCE_LINES:
        terminalreporter.section("acceptance criteria")
        for line in ACCEPTANCE_LINES:
            terminalreporter.write_line(line)
