import numpy as np
import pytest
from hypothesis import HealthCheck, settings

settings.register_profile("default", max_examples=30, deadline=None,
                          suppress_health_check=[HealthCheck.too_slow])
settings.load_profile("default")


@pytest.fixture
def rng():
    return np.random.default_rng(1234)


def smooth_video(frames=12, h=32, w=32, channels=3, drift=0.3, seed=0):
    """Slowly drifting sinusoid pattern in [0.1, 0.9]; temporally coherent by construction."""
    r = np.random.default_rng(seed)
    y, x = np.mgrid[0:h, 0:w].astype(np.float64)
    phase = r.uniform(0, 2 * np.pi, size=(channels, 2))
    freq = r.uniform(0.08, 0.2, size=(channels, 2))
    out = np.empty((frames, channels, h, w))
    for t in range(frames):
        for c in range(channels):
            out[t, c] = 0.5 + 0.2 * np.sin(freq[c, 0] * (x - drift * t) + phase[c, 0]) \
                + 0.2 * np.cos(freq[c, 1] * (y + 0.5 * drift * t) + phase[c, 1])
    return out.astype(np.float32)


ACCEPTANCE_LINES: list[str] = []


def pytest_terminal_summary(terminalreporter):
    if ACCEPTANCE_LINES:
        terminalreporter.section("acceptance criteria")
        for line in sorted(ACCEPTANCE_LINES, key=lambda s: int(s.split()[1].rstrip(":"))):
            terminalreporter.write_line(line)
