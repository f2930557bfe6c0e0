import sys

import numpy as np
import pytest

from fpgrow.linalg import Rng
from fpgrow.transformer import ModelConfig, init_params


def rand_params(config, seed=0, dtype=np.float64, bias_scale=0.1):
    """Random model with non-zero biases and perturbed norms, so every path is exercised."""
    p = init_params(config, Rng(seed).child("init"), dtype=dtype)
    r = Rng(seed).child("extra")
    for name, arr in p.items():
        if arr.ndim == 1:
            base = 1.0 if name.endswith(".g") else 0.0
            arr[...] = base + r.child(name).normal(arr.shape, bias_scale)
    return p


def fd_check(loss_fn, params, grads, eps=1e-4, names=None):
    """Worst (abs_err, rel_err) over all coordinates of the named tensors."""
    worst = []
    for name in names or list(params):
        arr = params.tensors[name]
        g = grads[name]
        for idx in np.ndindex(arr.shape):
            old = arr[idx]
            arr[idx] = old + eps
            lp = loss_fn()
            arr[idx] = old - eps
            lm = loss_fn()
            arr[idx] = old
            num = (lp - lm) / (2 * eps)
            a = float(g[idx])
            err = abs(a - num)
            worst.append((name, idx, a, num, err, err / max(abs(a), abs(num), 1e-300)))
    return worst


@pytest.fixture
def tiny_config():
    return ModelConfig.uniform(2, 16, 32, 4, 12, 10, seed=3)


def pytest_terminal_summary(terminalreporter):
    mod = sys.modules.get("test_acceptance")
    lines = getattr(mod, "LINES", None)
    if lines:
        terminalreporter.section("acceptance criteria")
        for line in lines:
            terminalreporter.write_line(line)
