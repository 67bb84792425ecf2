import sys

import numpy as np
import pytest

from gradsep import evalio, nets


def jacobi_eig(a, sweeps=60, tol=1e-14):
    """Cyclic Jacobi eigen-solver, used only as an independent oracle for sym_eig."""
    a = np.array(a, dtype=np.float64)
    n = a.shape[0]
    v = np.eye(n)
    for _ in range(sweeps):
        off = np.sqrt(np.sum(np.tril(a, -1) ** 2))
        if off < tol * max(1.0, np.abs(a).max()):
            break
        for p in range(n - 1):
            for q in range(p + 1, n):
                if abs(a[p, q]) < 1e-300:
                    continue
                theta = (a[q, q] - a[p, p]) / (2.0 * a[p, q])
                t = np.sign(theta) / (abs(theta) + np.sqrt(theta * theta + 1.0)) if theta != 0 else 1.0
                c = 1.0 / np.sqrt(t * t + 1.0)
                s = t * c
                rot = np.eye(n)
                rot[p, p] = rot[q, q] = c
                rot[p, q], rot[q, p] = s, -s
                a = rot.T @ a @ rot
                v = v @ rot
    vals = np.diag(a)
    order = np.argsort(vals)[::-1]
    return vals[order], v[:, order]


@pytest.fixture(scope="session")
def synth_small():
    return evalio.synth_dataset(64, seed=0)


@pytest.fixture(scope="session")
def fc2_net():
    return nets.fc2(3 * 32 * 32, 10, seed=0)


@pytest.fixture(scope="session")
def tiny_conv():
    """ConvNet-S on 8x8 inputs: same layer stack, cheap enough for finite differences."""
    return nets.convnet_s(4, seed=1, input_shape=(3, 8, 8))


def pytest_terminal_summary(terminalreporter):
    module = sys.modules.get("test_acceptance")
    lines = getattr(module, "RESULTS", None)
    if lines:
        terminalreporter.section("acceptance criteria")
        for line in sorted(lines, key=lambda s: int(s.split(":")[0].split()[1])):
            terminalreporter.write_line(line)
