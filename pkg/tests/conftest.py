import pathlib

import pytest

from tpsim import load_config

CONFIG_DIR = pathlib.Path(__file__).resolve().parent.parent / "configs"


@pytest.fixture(scope="session")
def ref_cfg():
    """The reference two-domain system.  Runs never mutate it."""
    return load_config(CONFIG_DIR / "reference.yaml")


@pytest.fixture(scope="session")
def adv_cfg():
    return load_config(CONFIG_DIR / "adversarial.yaml")


@pytest.fixture(scope="session")
def config_dir():
    return CONFIG_DIR
