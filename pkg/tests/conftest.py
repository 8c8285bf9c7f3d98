import numpy as np
import pytest
from hypothesis import HealthCheck, settings

settings.register_profile(
    "default", deadline=None, suppress_health_check=[HealthCheck.too_slow], derandomize=True
)
settings.load_profile("default")


ACCEPTANCE_LINES: dict[int, str] = {}


def pytest_terminal_summary(terminalreporter):
    if ACCEPTANCE_LINES:
        terminalreporter.section("acceptance criteria")
        for n in sorted(ACCEPTANCE_LINES):
            terminalreporter.write_line(ACCEPTANCE_LINES[n])


@pytest.fixture
def rng():
    return np.random.default_rng(1234)


def central_diff(fn, arr, step=1e-6):
    """Numeric gradient of scalar ``fn()`` w.r.t. every entry of ``arr`` (mutated in place)."""
    out = np.zeros_like(arr)
    for i in np.ndindex(arr.shape):
        old = arr[i]
        arr[i] = old + step
        up = fn()
        arr[i] = old - step
        down = fn()
        arr[i] = old
        out[i] = (up - down) / (2 * step)
    return out


def tiny_config(**changes):
    """A 16x16, 15-keypoint configuration that trains in well under a second per step."""
    from cmpose.config import ExperimentConfig

    base = dict(
        image_height=16, image_width=16, patch_size=4, embed_dim=8, num_keypoints=15, heads=2,
        num_clusters=2, knn_k=2, heatmap_height=16, heatmap_width=16, head_hidden=8,
        epochs=1, batch_size=4, train_count=8, val_count=3, probe_count=4, eval_batch_size=8,
        lr_decay_epochs=(), dtype="float64",
    )
    base.update(changes)
    return ExperimentConfig(**base)
