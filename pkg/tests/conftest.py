import numpy as np
import pytest

from offgrid.core import Camera, GaussianModel, quat_normalize


def numeric_grad(f, x, eps=1e-6):
    """Central finite differences of scalar ``f`` wrt every entry of array ``x`` (modified in place, restored)."""
    g = np.zeros_like(x, dtype=np.float64)
    flat, gf = x.reshape(-1), g.reshape(-1)
    for i in range(flat.size):
        old = flat[i]
        flat[i] = old + eps
        fp = f()
        flat[i] = old - eps
        fm = f()
        flat[i] = old
        gf[i] = (fp - fm) / (2 * eps)
    return g


def rel_err(a, b):
    a, b = np.asarray(a, dtype=np.float64), np.asarray(b, dtype=np.float64)
    return float(np.linalg.norm(a - b) / max(np.linalg.norm(a), np.linalg.norm(b), 1e-12))


def random_rotation(rng):
    q = quat_normalize(rng.normal(size=4))
    from offgrid.core import quat_to_matrix
    return quat_to_matrix(q)


def random_camera(rng, width=28, height=28, f=None):
    f = f or float(width)
    return Camera(f * rng.uniform(0.9, 1.1), f * rng.uniform(0.9, 1.1), width / 2 + rng.uniform(-2, 2),
                  height / 2 + rng.uniform(-2, 2), random_rotation(rng), rng.normal(size=3), width, height)


def model_in_front(rng, cam, n, depth=(1.5, 3.0), scale=(0.02, 0.08), margin=0.1):
    """Random world-frame Gaussians whose means project inside ``cam``."""
    u = rng.uniform(margin * cam.width, (1 - margin) * cam.width, n)
    v = rng.uniform(margin * cam.height, (1 - margin) * cam.height, n)
    d = rng.uniform(*depth, n)
    pc = np.stack([(u - cam.cx) / cam.fx * d, (v - cam.cy) / cam.fy * d, d], -1)
    means = (pc - cam.t) @ cam.R
    return GaussianModel(means, rng.uniform(*scale, (n, 3)), quat_normalize(rng.normal(size=(n, 4))),
                         rng.uniform(0.2, 0.9, n), rng.uniform(0.3, 1.0, n), rng.uniform(0, 1, (n, 3)))


@pytest.fixture
def rng():
    return np.random.default_rng(1234)


# one summary line per acceptance criterion, filled in by test_acceptance.py
ACCEPTANCE_LINES: list = []


def pytest_terminal_summary(terminalreporter):
    if ACCEPTANCE_LINES:
        terminalreporter.section("acceptance criteria")
        for line in sorted(ACCEPTANCE_LINES):
            terminalreporter.write_line(line)
