"""Python access to the mimic core: attention decomposition, configs, models."""

import json

from ._core import (
    ConfigError,
    Model as _Model,
    decompose,
    mu,
    standard_attention,
    version,
)
from . import _core

__all__ = [
    "ConfigError",
    "Model",
    "config_hash",
    "decompose",
    "desk_config",
    "mu",
    "normalize_config",
    "standard_attention",
    "verify",
    "version",
]


def desk_config():
    return json.loads(_core.desk_config_json())


def normalize_config(config):
    """Fills absent keys with desk values; raises ConfigError on bad documents."""
    return json.loads(_core.normalize_config_json(json.dumps(config)))


def config_hash(config):
    return _core.config_hash(json.dumps(config))


def verify(seed=0, corrupt_op=None):
    return json.loads(_core.verify_json(seed, corrupt_op))


class Model(_Model):
    def __init__(self, config=None):
        if config is None:
            config = desk_config()["model"]
        super().__init__(json.dumps(config))

    @property
    def config(self):
        return json.loads(self.config_json)
