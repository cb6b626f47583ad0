import numpy as np
import pytest
from hypothesis import settings

import artifacts

settings.register_profile("suite", deadline=None, max_examples=30, derandomize=True)
settings.load_profile("suite")


@pytest.fixture(scope="session")
def digits_train():
    return artifacts.digits_train()


@pytest.fixture(scope="session")
def digits_test():
    return artifacts.digits_test()


@pytest.fixture(scope="session")
def clf():
    return artifacts.classifier()


@pytest.fixture(scope="session")
def cgan():
    return artifacts.contranet()


@pytest.fixture(scope="session")
def metric_net():
    return artifacts.metric_net()


@pytest.fixture(scope="session")
def saec_det():
    return artifacts.saec_detector()


@pytest.fixture(scope="session")
def sp_det():
    return artifacts.sp_detector()


@pytest.fixture()
def rng():
    return np.random.Generator(np.random.PCG64(12345))
