import pytest
from hypothesis import HealthCheck, settings

from helpers import tiny_config
from multiflow.model import MultiFlowModel

settings.register_profile("default", deadline=None, max_examples=60,
                          suppress_health_check=[HealthCheck.too_slow])
settings.load_profile("default")


@pytest.fixture
def tiny_model():
    return MultiFlowModel(tiny_config(), seed=3)
