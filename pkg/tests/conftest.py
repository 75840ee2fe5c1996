import importlib.util
import os

import numpy as np
import pytest

from fwdadapt.checkpoint import load_checkpoint, save_checkpoint
from fwdadapt.data import SyntheticDataset
from fwdadapt.models import build_model

HAS_AUTODIFF = importlib.util.find_spec("fwdadapt.autodiff") is not None

VIT_EPOCHS = 5
CNN_EPOCHS = 3

ACCEPTANCE_LINES: list[str] = []


def _pretrained(arch: str, epochs: int, env: str, cache_dir):
    path = os.environ.get(env)
    if path:
        return load_checkpoint(path).model, path
    if not HAS_AUTODIFF:
        pytest.fail(f"autodiff is excluded and {env} is not set; a pretrained checkpoint is required")
    from fwdadapt.autodiff import sgd_train

    ds = SyntheticDataset(0)
    x, y = ds.full_split("source_train")
    model, _ = sgd_train(build_model(arch, 0), x, y, epochs, 0.05, 0)
    path = str(cache_dir / f"{arch}.fwd")
    save_checkpoint(path, model)
    return model, path


@pytest.fixture(scope="session")
def dataset():
    return SyntheticDataset(0)


@pytest.fixture(scope="session")
def _vit(tmp_path_factory):
    return _pretrained("vit", VIT_EPOCHS, "FWDADAPT_VIT_CHECKPOINT", tmp_path_factory.mktemp("vit"))


@pytest.fixture(scope="session")
def _cnn(tmp_path_factory):
    return _pretrained("cnn", CNN_EPOCHS, "FWDADAPT_CNN_CHECKPOINT", tmp_path_factory.mktemp("cnn"))


@pytest.fixture
def pretrained_vit(_vit):
    """A fresh copy per test so adaptation never leaks between tests."""
    return _vit[0].copy()


@pytest.fixture
def pretrained_cnn(_cnn):
    return _cnn[0].copy()


@pytest.fixture(scope="session")
def checkpoint_paths(_vit, _cnn):
    return {"vit": _vit[1], "cnn": _cnn[1]}


@pytest.fixture
def rng():
    return np.random.default_rng(1234)


@pytest.fixture
def acceptance_report():
    def report(number: int, passed: bool, detail: str):
        line = f"criterion {number:2d}: {'PASS' if passed else 'FAIL'}  {detail}"
        ACCEPTANCE_LINES.append(line)
        print(line)

    return report


def pytest_terminal_summary(terminalreporter):
    if ACCEPTANCE_LINES:
        terminalreporter.section("acceptance criteria")
        for line in sorted(ACCEPTANCE_LINES):
            terminalreporter.write_line(line)
