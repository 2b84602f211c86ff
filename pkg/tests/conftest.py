import numpy as np
import pytest
import torch

from ecgcode.grid_codec import Grid
from ecgcode.model import ModelConfig

torch.set_num_threads(1)

TINY = ModelConfig(n_leads=1, n_mel=8, n_frames=8, n_intervals=2, stem_channels=4, blocks=((4, 2), (4, 2)))


@pytest.fixture
def tiny_config():
    return TINY


def random_target(rng, n_intervals):
    """Target grid with random presence and well-ordered fractions."""
    values = np.zeros((n_intervals, 3, 3))
    present = rng.integers(0, 2, (n_intervals, 3)).astype(bool)
    values[..., 0] = present
    values[..., 1] = np.where(present, rng.uniform(0.0, 0.5, (n_intervals, 3)), 0.0)
    values[..., 2] = np.where(present, rng.uniform(0.5, 1.0, (n_intervals, 3)), 0.0)
    return Grid(values)


def clean_annotations(rng, record_len=10000, record_id="clean", min_len=50, min_gap=301, max_len=400):
    """Random AnnotationSet with lengths >= min_len and same-class gaps >= min_gap."""
    from ecgcode.signal_io import AnnotationSet, Segment, WAVE_CLASSES

    segs = []
    for cls in WAVE_CLASSES:
        pos = int(rng.integers(0, 600))
        while True:
            length = int(rng.integers(min_len, max_len + 1))
            if pos + length > record_len:
                break
            segs.append(Segment(cls, pos, pos + length))
            pos += length + int(rng.integers(min_gap, min_gap + 1500))
    return AnnotationSet(record_id, tuple(segs))


def as_prediction(target, eps=1e-3):
    """Read a target grid as a confident prediction: conf 1-eps / eps."""
    values = target.values.copy()
    values[..., 0] = np.where(values[..., 0] > 0.5, 1 - eps, eps)
    return Grid(values, target.mask.copy())


def spans(annotations):
    return [(s.wave_class.value, s.onset, s.offset) for s in annotations.segments]


ACCEPTANCE_LINES: list[str] = []


def pytest_terminal_summary(terminalreporter):
    if ACCEPTANCE_LINES:
        terminalreporter.section("acceptance criteria")
        for line in sorted(ACCEPTANCE_LINES):
            terminalreporter.write_line(line)
