import logging

import pytest


@pytest.fixture(autouse=True)
def _quiet_warnings(caplog):
    # Pipeline modules log expected skips/drops at WARNING; keep test output readable.
    logging.getLogger("desklm").setLevel(logging.ERROR)
    yield
