import pytest

from trajssl.data.dataset import ImageSource
from trajssl.data.manifest import DatasetConfig, build_manifest
from trajssl.data.shapes import FAMILY_NAMES
from trajssl.pipeline.evaluate import EvalConfig
from trajssl.pipeline.train import TrainConfig

TINY_DATASET = DatasetConfig(FAMILY_NAMES[:2], FAMILY_NAMES[2:3], instances_per_family=5, train_per_family=4)
TINY_TRAIN = TrainConfig(epochs=1, batch_size=4, passes_per_epoch=1, seed=5)
TINY_EVAL = EvalConfig(k=5, probe_epochs=2, train_pairs=8, eval_pairs=8)


@pytest.fixture(scope="session")
def tiny_manifest():
    return build_manifest(TINY_DATASET, seed=5)


@pytest.fixture(scope="session")
def tiny_source(tiny_manifest):
    return ImageSource(tiny_manifest)


def tiny_config_doc(**train):
    return {
        "seed": 5,
        "dataset": {"in_domain_families": list(FAMILY_NAMES[:2]), "out_of_domain_families": [FAMILY_NAMES[2]],
                    "instances_per_family": 5, "train_per_family": 4},
        "train": {"epochs": 1, "batch_size": 4, "passes_per_epoch": 1, **train},
        "eval": {"k": 5, "probe_epochs": 2, "train_pairs": 8, "eval_pairs": 8},
    }


# acceptance bookkeeping ---------------------------------------------------------

_CRITERIA_KEY = pytest.StashKey[dict]()


def pytest_configure(config):
    config.stash[_CRITERIA_KEY] = {}


@pytest.fixture
def record_criterion(request):
    """Store ``(passed, detail)`` for a numbered criterion; printed in the terminal summary."""
    store = request.config.stash[_CRITERIA_KEY]

    def record(number, passed: bool, detail: str):
        store[number] = (bool(passed), detail)
        return bool(passed)

    return record


def pytest_terminal_summary(terminalreporter, exitstatus, config):
    store = config.stash.get(_CRITERIA_KEY, {})
    if not store:
        return
    terminalreporter.write_sep("=", "acceptance criteria")
    for number in sorted(store, key=lambda n: (isinstance(n, str), n)):
        passed, detail = store[number]
        label = f"criterion {number:>2}" if isinstance(number, int) else f"{number:>12}"
        status = "PASS" if passed else "FAIL"
        if isinstance(number, str):
            status = "INFO"
        terminalreporter.write_line(f"{label} {status}  {detail}")
