import numpy as np
import pytest

from mams.data import SynthConfig, generate_synthetic, split
from mams.model import ModelConfig


@pytest.fixture
def rng():
    return np.random.default_rng(1234)


@pytest.fixture
def tiny_config():
    return ModelConfig(input_size=(16, 16), backbone_stage_widths=(8, 16), c_out=16,
                       fusion_reduction=4, head_hidden=32, num_classes=5)


@pytest.fixture(scope="session")
def small_synth():
    """1200 images of 16x16 over 5 classes."""
    cfg = SynthConfig(num_classes=5, num_images=1200, image_size=16, tail_ratio=0.6, seed=7)
    return generate_synthetic(cfg)


@pytest.fixture
def small_split(small_synth):
    return split(small_synth, (0.7, 0.1, 0.2), seed=0)


_ACCEPTANCE_KEY = pytest.StashKey[list]()


@pytest.fixture
def acceptance_line(request):
    """Records one PASS/FAIL line per acceptance criterion for the terminal summary."""
    lines = request.config.stash.setdefault(_ACCEPTANCE_KEY, [])

    def record(line: str) -> None:
        print(line)
        lines.append(line)

    return record


def pytest_terminal_summary(terminalreporter, exitstatus, config):
    lines = config.stash.get(_ACCEPTANCE_KEY, [])
    if lines:
        terminalreporter.section("acceptance criteria")
        for line in sorted(lines, key=lambda s: int(s.split("criterion ")[1].split(":")[0])):
            terminalreporter.write_line(line)
