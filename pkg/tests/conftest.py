"""Test setup: put the repository root on ``sys.path`` so ``src`` imports resolve,
and silence INFO logging from the toolkit while tests run."""
import logging
import os
import sys

import pytest

ROOT = os.path.abspath(os.path.join(os.path.dirname(__file__), ".."))
if ROOT not in sys.path:
    sys.path.insert(0, ROOT)


@pytest.fixture(autouse=True)
def quiet_toolkit_loggers():
    loggers = [logging.getLogger(name) for name in list(logging.root.manager.loggerDict) if name.startswith("src.")]
    levels = [lg.level for lg in loggers]
    for lg in loggers:
        lg.setLevel(logging.WARNING)
    yield
    for lg, level in zip(loggers, levels):
        lg.setLevel(level)
