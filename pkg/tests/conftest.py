"""Shared fixtures: one default world per session plus its subspaces."""

import json
import os

import pytest

from hda.worlds import build_world, build_world_subspaces, default_world_config

DATA_DIR = os.path.join(os.path.dirname(__file__), "data")


@pytest.fixture(scope="session")
def world():
    return build_world(default_world_config())


@pytest.fixture(scope="session")
def subspaces(world):
    return build_world_subspaces(world)


@pytest.fixture(scope="session")
def baselines():
    with open(os.path.join(DATA_DIR, "regression_baselines.json"), encoding="utf8") as fh:
        return json.load(fh)
