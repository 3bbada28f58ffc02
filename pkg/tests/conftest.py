import numpy as np
import pytest

from lcmembrane.grid import Grid2D


def band_limited(grid, kmax, rng, m=None, decay=0.0, gauss=None):
    """Random real field (or bundle of ``m`` fields) with modes |k|_inf <= kmax."""
    shape = (grid.n1, grid.n2) if m is None else (m, grid.n1, grid.n2)
    i1, i2 = grid.mode_index
    mask = (np.maximum(abs(i1), abs(i2)) <= kmax).astype(float)
    if decay:
        mask = mask * np.exp(-decay * np.hypot(i1, i2))
    if gauss:
        mask = mask * np.exp(-(i1**2 + i2**2) / gauss**2)
    noise = rng.standard_normal(shape) + 1j * rng.standard_normal(shape)
    f = np.fft.ifft2(noise * mask, axes=(-2, -1)).real
    return f / np.max(np.abs(f))


@pytest.fixture
def rng():
    return np.random.default_rng(20240611)


@pytest.fixture
def grid32():
    return Grid2D.square(32)


@pytest.fixture
def grid64():
    return Grid2D.square(64)


ACCEPTANCE_LINES: list[str] = []


@pytest.fixture
def criterion():
    """Record one PASS/FAIL line per acceptance criterion, then assert."""

    def record(number: int, passed: bool, detail: str):
        line = f"criterion {number:2d}: {'PASS' if passed else 'FAIL'}  {detail}"
        ACCEPTANCE_LINES.append(line)
        print(line)
        assert passed, line

    return record


def pytest_terminal_summary(terminalreporter):
    if ACCEPTANCE_LINES:
        terminalreporter.section("acceptance criteria")
        for line in sorted(ACCEPTANCE_LINES):
            terminalreporter.write_line(line)
