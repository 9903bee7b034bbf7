import pytest
import torch

from irbaf.dataset import SynthConfig, generate_synthetic

torch.set_num_threads(1)

_VERDICTS = pytest.StashKey[list]()


def pytest_configure(config):
    config.stash[_VERDICTS] = []


def pytest_terminal_summary(terminalreporter, config):
    lines = config.stash.get(_VERDICTS, [])
    if lines:
        terminalreporter.section("acceptance criteria")
        for _, line in sorted(lines, key=lambda t: t[0]):
            terminalreporter.write_line(line)


@pytest.fixture
def verdict(request):
    """``verdict(n, text, ok)`` prints and records one PASS/FAIL line, then asserts ``ok``."""

    def _verdict(n, text, ok, detail=""):
        line = f"[{'PASS' if ok else 'FAIL'}] criterion {n:>2}: {text}" + (f" ({detail})" if detail else "")
        print(line)
        request.config.stash[_VERDICTS].append((n, line))
        assert ok, line

    return _verdict


@pytest.fixture(scope="session")
def small_data(tmp_path_factory):
    """Tiny 32x32 two-domain set shared by the fast tests."""
    root = tmp_path_factory.mktemp("synth")
    cfg = SynthConfig(seed=3, images_per_class={1: 6, 2: 5, 3: 5}, image_size=(32, 32), style_gap=0.8)
    source, target = generate_synthetic(cfg, root)
    return source, target


@pytest.fixture(scope="session")
def pipe_data(tmp_path_factory):
    """Like ``small_data`` but with enough target images to blend 10 and still test."""
    root = tmp_path_factory.mktemp("synth_pipe")
    cfg = SynthConfig(
        seed=5,
        images_per_class={1: 6, 2: 5, 3: 5},
        target_images_per_class={1: 16, 2: 14, 3: 14},
        image_size=(32, 32),
        style_gap=0.8,
    )
    return generate_synthetic(cfg, root)
