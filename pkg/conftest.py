"""
Shared pytest setup: the slow marker and a central finite-difference checker.

Slow tests train models end to end; they only run with NDR_RUN_SLOW=1.
"""

import os
from typing import Callable, Sequence

import numpy as np
import pytest

import autodiff as ad


def pytest_configure(config):
    config.addinivalue_line("markers", "slow: end-to-end training runs, enabled with NDR_RUN_SLOW=1")


def pytest_collection_modifyitems(config, items):
    if os.environ.get("NDR_RUN_SLOW") == "1":
        return
    skip = pytest.mark.skip(reason="set NDR_RUN_SLOW=1 to run")
    for item in items:
        if "slow" in item.keywords:
            item.add_marker(skip)


def gradient_error(
    loss_fn: Callable[[], ad.Tensor],
    params: Sequence[ad.Parameter],
    eps: float = 1e-5,
    max_entries: int = 0,
    seed: int = 0,
) -> float:
    """Worst relative error between backward() and central differences over `params`

    `max_entries` > 0 checks a random subset of entries per parameter.
    """
    ad.backward(loss_fn(), params)
    analytic = [p.grad.copy() for p in params]
    rng = np.random.default_rng(seed)
    worst = 0.0
    for p, grad in zip(params, analytic):
        flat = p.values.reshape(-1)
        indices = np.arange(flat.size)
        if max_entries and flat.size > max_entries:
            indices = rng.choice(flat.size, max_entries, replace=False)
        numeric = np.empty(indices.size)
        for k, i in enumerate(indices):
            old = flat[i]
            flat[i] = old + eps
            up = loss_fn().item()
            flat[i] = old - eps
            down = loss_fn().item()
            flat[i] = old
            numeric[k] = (up - down) / (2.0 * eps)
        picked = grad.reshape(-1)[indices]
        scale = max(np.linalg.norm(picked), np.linalg.norm(numeric), 1e-12)
        worst = max(worst, float(np.linalg.norm(picked - numeric) / scale))
    return worst


@pytest.fixture
def rng():
    return np.random.default_rng(1234)


@pytest.fixture
def grad_error():
    return gradient_error
