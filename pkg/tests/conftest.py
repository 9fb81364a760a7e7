from __future__ import annotations

import numpy as np
import pytest

from matryoshka.dataio import EmbeddingStore


def random_store(rng: np.random.Generator, n: int, d: int, num_classes: int) -> EmbeddingStore:
    vecs = rng.standard_normal((n, d)).astype(np.float32).astype(np.float64)
    return EmbeddingStore(vecs, rng.integers(0, num_classes, n), num_classes)


@pytest.fixture
def nprng() -> np.random.Generator:
    return np.random.default_rng(12345)


def max_fd_rel_error(head, z, label, h: float = 1e-5) -> float:
    """Worst entrywise relative error of mrl_loss gradients (head params and
    z) against central finite differences."""
    from matryoshka.mrl import mrl_loss

    _, grads, gz = mrl_loss(head, z, label)
    worst = 0.0
    targets = list(zip(head.params(), grads)) + [(z, gz)]
    for arr, g in targets:
        flat, gflat = arr.reshape(-1), g.reshape(-1)
        for i in range(flat.size):
            old = flat[i]
            flat[i] = old + h
            up = mrl_loss(head, z, label)[0]
            flat[i] = old - h
            down = mrl_loss(head, z, label)[0]
            flat[i] = old
            fd = (up - down) / (2 * h)
            err = abs(fd - gflat[i]) / max(abs(fd) + abs(gflat[i]), 1e-7)
            worst = max(worst, err)
    return worst


# Acceptance criteria append "(number, passed, detail)" here; the summary hook
# prints one line per criterion after the run.
ACCEPTANCE_LOG: list[tuple[int, bool, str]] = []


def pytest_terminal_summary(terminalreporter):
    if not ACCEPTANCE_LOG:
        return
    terminalreporter.section("acceptance criteria")
    for num, ok, detail in sorted(ACCEPTANCE_LOG):
        terminalreporter.write_line(f"criterion {num:2d}: {'PASS' if ok else 'FAIL'}  {detail}")
