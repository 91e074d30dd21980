"""
Experiment configuration.

Values come from, in increasing priority, the built-in defaults,
a named preset, a key=value config file and explicit settings
(command-line flags).
"""
from __future__ import annotations
import copy
import numbers
from logging import getLogger
from pathlib import Path
from typing import Any, List, Union

from deltasparse.encoding import ConstructionStrategy
from deltasparse.engine import Scenario
from deltasparse.exceptions import ConfigError
from deltasparse.hybrid import HybridConfig

logger = getLogger(__name__)

KEY_PROCESSES = ('iid-gaussian', 'random-walk', 'file')

DEFAULTS = {
    'seed': 0,
    'n': 128,
    'd_head': 32,
    'heads': 4,
    'decode_steps': 16,
    'theta': 0.1,
    'gamma': 0.05,
    'w_max': 64,
    'w_d': 4,
    'strategy': 'top-down-key',
    'key_process': 'random-walk',
    'sigma': 0.05,
    'scenario': 'end-to-end',
    'q_file': '',
    'k_file': '',
    'v_file': '',
    'workers': 1,
}

PRESETS = {
    'prefill-theta-sweep': {
        'scenario': 'prefill-only',
        'decode_steps': 0,
        'n': 256,
        'd_head': 32,
        'key_process': 'random-walk',
        'sigma': 0.05,
        'gamma': 0.05,
    },
    'prefill-gamma-sweep': {
        'scenario': 'prefill-only',
        'decode_steps': 0,
        'n': 256,
        'd_head': 32,
        'key_process': 'random-walk',
        'sigma': 0.05,
        'theta': 0.6,
    },
    'end-to-end': {
        'scenario': 'end-to-end',
        'n': 128,
        'decode_steps': 64,
        'd_head': 32,
        'key_process': 'random-walk',
        'sigma': 0.05,
        'theta': 0.6,
        'gamma': 0.1,
        'w_d': 4,
    },
}


def load_config_file(path: Union[str, Path]) -> dict:
    """
    Read a flat key=value config file.

    Parameters
    ----------
    path: str, Path
        The file. Blank lines and lines starting with '#' are ignored.
        Hyphens in keys are read as underscores and quotes around
        values are removed.

    Returns
    -------
    dict
        The raw (string) values by key.
    """
    values = {}
    with open(path, 'r', encoding='utf-8') as f:
        for lineno, line in enumerate(f, start=1):
            line = line.strip()
            if line == '' or line.startswith('#'):
                continue

            if '=' not in line:
                raise ConfigError(
                    "{}:{}: expected 'key = value'.".format(path, lineno))

            key, value = line.split('=', 1)
            values[key.strip().replace('-', '_')] = value.strip().strip('"\'')

    return values


class ExperimentConfig(object):
    """
    The parameters of one experiment.

    Note
    ----
    The possible keys and their meanings are as follows.

    - seed: int (default = 0)
        Seed of the synthetic generator.
    - n: int (default = 128)
        Prompt length.
    - d_head: int (default = 32)
        Head dimension.
    - heads: int (default = 4)
        Number of independent heads.
    - decode_steps: int (default = 16)
        Number of tokens decoded after the prompt.
    - theta, gamma, w_max, w_d, strategy
        Tunables of the hybrid mechanism, see `HybridConfig`.
    - key_process: str (default = 'random-walk')
        'iid-gaussian', 'random-walk' or 'file'.
    - sigma: float (default = 0.05)
        Step size of the random-walk keys.
    - scenario: str (default = 'end-to-end')
        'prefill-only' or 'end-to-end'.
    - q_file, k_file, v_file: str
        Tensor files read when key_process is 'file'.
    - workers: int (default = 1)
        Threads used to run heads in parallel.
    """

    def __init__(self, **kwargs):
        self.config = copy.deepcopy(DEFAULTS)
        self.set_config(**kwargs)

    @classmethod
    def from_sources(
            cls,
            preset: Union[str, None] = None,
            config_file: Union[str, Path, None] = None,
            overrides: Union[dict, None] = None) -> ExperimentConfig:
        """
        Build a configuration from a preset, a file and overrides.
        """
        config = cls()
        if preset:
            config.apply_preset(preset)

        if config_file:
            config.set_config(**load_config_file(config_file))

        if overrides:
            config.set_config(**overrides)

        return config

    def apply_preset(self, name: str) -> None:
        if name not in PRESETS:
            raise ConfigError(
                "'{}' is not a preset; choose from {}.".format(
                    name, ', '.join(sorted(PRESETS))))

        self.set_config(**PRESETS[name])

    def set_config(self, **kwargs) -> None:
        """
        Set configuration parameters.
        """
        for k, v in kwargs.items():
            self._set_config(k.replace('-', '_'), v)

    def validate_config(self, key: str, value: Any) -> None:
        """
        Validate a configuration key and its value.

        Notes
        -----
        If the key-value pair is not valid, raise ConfigError.
        """
        if key in ('n', 'd_head', 'heads', 'w_max', 'w_d', 'workers'):
            if value < 1:
                raise ConfigError(
                    "'{}' must be >= 1 but {}.".format(key, value))

        elif key in ('decode_steps', 'seed'):
            if value < 0:
                raise ConfigError(
                    "'{}' must be >= 0 but {}.".format(key, value))

        elif key in ('theta', 'sigma'):
            if not 0.0 <= value < float('inf'):
                raise ConfigError(
                    "'{}' must be a finite value >= 0 but {}.".format(
                        key, value))

        elif key == 'gamma':
            if not 0.0 < value < 1.0:
                raise ConfigError(
                    "'gamma' must be in (0, 1) but {}.".format(value))

        elif key == 'strategy':
            ConstructionStrategy.from_name(value)

        elif key == 'scenario':
            Scenario.from_name(value)

        elif key == 'key_process':
            if value not in KEY_PROCESSES:
                raise ConfigError(
                    "'{}' is not a valid key process.".format(value))

    def _set_config(self, key: str, value: Any) -> None:
        curval = self._get_config(key)
        if isinstance(curval, str):
            if value is None:
                value = ''
            elif not isinstance(value, str):
                value = str(value)

            value = value.strip()
        elif isinstance(curval, int):
            if isinstance(value, bool):
                msg = "The value for '{}' must be an int but {}."
                raise ConfigError(msg.format(key, type(value)))
            elif isinstance(value, numbers.Integral):
                value = int(value)
            elif isinstance(value, str):
                try:
                    value = int(value)
                except ValueError:
                    msg = "The value '{}' for '{}' is not an int."
                    raise ConfigError(msg.format(value, key))
            else:
                msg = "The value for '{}' must be an int but {}."
                raise ConfigError(msg.format(key, type(value)))
        elif isinstance(curval, float):
            if isinstance(value, bool):
                msg = "The value for '{}' must be a float but {}."
                raise ConfigError(msg.format(key, type(value)))

            try:
                value = float(value)
            except (TypeError, ValueError):
                msg = "The value '{}' for '{}' is not a number."
                raise ConfigError(msg.format(value, key))

        self.validate_config(key, value)
        self.config[key] = value
        logger.debug("Set config '{}' to {}".format(key, value))

    def get_config(self, keys: Union[str, List[str], None] = None):
        """
        Get configurable parameter(s).

        Parameters
        ----------
        keys: str, List[str], optional
            If a name of parameter is specified, return its value.
            Otherwise, a dict of specified key and its value pairs
            will be returned.
        """
        if keys is None:
            return self.config

        if isinstance(keys, str):
            return self._get_config(keys)

        return {k: self._get_config(k) for k in keys}

    def _get_config(self, key: str):
        if key not in self.config:
            raise ConfigError(
                "The config key '{}' does not exist.".format(key))

        return self.config[key]

    def __getattr__(self, key: str):
        config = self.__dict__.get('config')
        if config is not None and key in config:
            return config[key]

        raise AttributeError(key)

    def check(self) -> None:
        """
        Check the combination of values.
        """
        strategy = ConstructionStrategy.from_name(self.strategy)
        scenario = Scenario.from_name(self.scenario)
        if scenario is Scenario.END_TO_END and self.decode_steps > 0 and \
                strategy is not ConstructionStrategy.TOP_DOWN_KEY:
            raise ConfigError(
                "The '{}' strategy cannot be used for decoding.".format(
                    strategy.value))

        if self.key_process == 'file' and not (
                self.q_file and self.k_file and self.v_file):
            raise ConfigError(
                "key_process 'file' needs q_file, k_file and v_file.")

    def hybrid(self) -> HybridConfig:
        """
        The tunables of the hybrid mechanism.
        """
        return HybridConfig(
            theta=self.theta,
            gamma=self.gamma,
            w_max=self.w_max,
            w_d=self.w_d,
            strategy=ConstructionStrategy.from_name(self.strategy))

    def as_dict(self) -> dict:
        return copy.deepcopy(self.config)

    def copy(self, **overrides) -> ExperimentConfig:
        config = ExperimentConfig()
        config.config = self.as_dict()
        config.set_config(**overrides)
        return config

    def __repr__(self) -> str:
        return "ExperimentConfig({})".format(self.config)
