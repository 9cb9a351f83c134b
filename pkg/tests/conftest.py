import numpy as np
import pytest

from kwsaug.augment import AugmentSpec
from kwsaug.features import FrontendConfig
from kwsaug.prepare import CorpusConfig, Workspace, prepare_workspace
from kwsaug.toygen import generate


@pytest.fixture()
def rng():
    return np.random.default_rng(12345)


@pytest.fixture(scope="session")
def frontend():
    return FrontendConfig()


@pytest.fixture(scope="session")
def aug_spec():
    return AugmentSpec()


@pytest.fixture(scope="session")
def toy_corpus(tmp_path_factory):
    """Raw toy corpus tree: 4 target words, 2 fillers, noise files."""
    root = tmp_path_factory.mktemp("toyraw")
    generate(root, clips_per_word=24, seed=0)
    return root


@pytest.fixture(scope="session")
def toy_workspace(tmp_path_factory, toy_corpus, frontend, aug_spec):
    """Prepared (corrupted + featurized) toy workspace shared across tests."""
    out = tmp_path_factory.mktemp("toyws")
    return prepare_workspace(toy_corpus, out, seed=0, frontend=frontend, spec=aug_spec,
                             corpus=CorpusConfig(targets=("yes", "no", "up", "down")))
