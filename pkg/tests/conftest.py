import numpy as np
import pytest

from sthar.data import SplitSpec
from sthar.models import tiny_config
from sthar.synth import SyntheticSpec, synth_generate
from sthar.training import TrainConfig

OVERFIT_SPEC = SyntheticSpec(clips_per_class=2, frame_shape=(1, 16, 16), clip_length=12, subjects=2, max_context=12)
SMALL_SPEC = SyntheticSpec(clips_per_class=5, frame_shape=(1, 16, 16), clip_length=14, subjects=5, max_context=12)


def overfit_model_config(kind="hybrid", **overrides):
    """The tiny configuration used by the overfit-sanity fixture (float32 training)."""
    base = dict(num_classes=6, context=12, contexts=(12,), precision="float32")
    base.update(overrides)
    return tiny_config(kind, **base)


def overfit_train_config(**overrides):
    base = dict(batch_size=12, epochs=500, max_steps=500, window="center")
    base.update(overrides)
    return TrainConfig(**base)


@pytest.fixture(scope="session")
def overfit_manifest():
    """12 clips: six classes, two clips each, every clip used for training."""
    return synth_generate(OVERFIT_SPEC)


@pytest.fixture(scope="session")
def overfit_split(overfit_manifest):
    return SplitSpec(tuple(overfit_manifest.subjects()), (), ())


@pytest.fixture(scope="session")
def small_manifest():
    return synth_generate(SMALL_SPEC)


@pytest.fixture
def rng():
    return np.random.default_rng(1234)


@pytest.fixture(scope="session")
def overfit_run(overfit_manifest, overfit_split):
    """(checkpoint, metrics) of the overfit-sanity training run, shared across tests."""
    from sthar.training import train

    return train(overfit_model_config(), overfit_manifest, overfit_split, overfit_train_config())


class _Criterion:
    def __init__(self, name, lines):
        self.name, self.lines, self.details = name, lines, []
        self.passed = True

    def check(self, ok, detail):
        self.details.append(("" if ok else "NOT ") + detail)
        self.passed = self.passed and bool(ok)

    def __enter__(self):
        return self

    def __exit__(self, exc_type, exc, tb):
        if exc is not None:
            self.check(False, f"raised {exc_type.__name__}: {exc}")
        line = f"{'PASS' if self.passed else 'FAIL'}  {self.name}: {'; '.join(self.details)}"
        self.lines.append(line)
        print(line)
        if exc is None:
            assert self.passed, line
        return False


@pytest.fixture
def criterion(request):
    """``with criterion("name") as c: c.check(ok, detail)`` records one acceptance line."""
    lines = request.config.__dict__.setdefault("_sthar_acceptance", [])
    return lambda name: _Criterion(name, lines)


def pytest_terminal_summary(terminalreporter, exitstatus, config):
    lines = config.__dict__.get("_sthar_acceptance")
    if lines:
        terminalreporter.section("acceptance criteria")
        for line in lines:
            terminalreporter.write_line(line)
