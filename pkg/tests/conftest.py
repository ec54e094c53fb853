"""Shared fixtures; file logging is switched off before any src import."""

import os

os.environ["LOG_TO_FILE"] = "0"

import numpy as np
import pytest

from src.tensor.core import RngStream


@pytest.fixture
def rng():
    return np.random.default_rng(42)


@pytest.fixture
def stream():
    return RngStream(42)

