import pytest

from salguard import reference_checkpoint_path
from salguard.checkpoint import load_checkpoint
from salguard.harness.task import gen_corpus


@pytest.fixture(scope="session")
def reference_model():
    return load_checkpoint(reference_checkpoint_path())


@pytest.fixture(scope="session")
def corpus():
    return gen_corpus(999, 40, 2)
