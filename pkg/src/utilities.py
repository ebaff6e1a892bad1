import hashlib
import json
import logging
import math
import os
import tempfile
from pathlib import Path

from exceptions import ConfigError

__version__ = "0.3.0"

CONFIG_ENV_VAR = "KNEE_KL_CONFIG"

logger = logging.getLogger(__name__)


class RunningStat:
    """ Keeps the running mean and standard deviation of a stream of values.

    Methods
    -------
    update():
        Add a value (optionally with a count) to the running statistics.
    """

    def __init__(self):
        self.count = None
        self.sum = None
        self.sum_sq = None
        self.reset()

    def reset(self):
        self.count, self.sum, self.sum_sq = [0.] * 3

    def update(self, val, count=1):
        self.count += count
        self.sum += count * val
        self.sum_sq += count * val * val

    @property
    def avg(self):
        return self.sum / self.count if self.count else None

    @property
    def std(self):
        if not self.count:
            return None
        var = max(self.sum_sq / self.count - self.avg ** 2, 0.0)
        return math.sqrt(var)


def setup_logging(verbose=False):
    """ Configures the root logger once for command-line use. """

    level = logging.DEBUG if verbose else logging.WARNING
    logging.basicConfig(level=level, format="%(asctime)s %(levelname)s %(name)s: %(message)s")


def canonical_json(payload):
    """ Serializes a document deterministically (sorted keys, fixed separators). """

    return json.dumps(payload, sort_keys=True, indent=2, allow_nan=False) + "\n"


def sha256_hex(data):
    if isinstance(data, str):
        data = data.encode("utf-8")
    return hashlib.sha256(data).hexdigest()


def config_hash(config):
    """ Hashes the result-relevant part of a configuration.

    Parameters
    ----------
    config : <class 'dict'>
        effective configuration; values must be JSON serializable

    Returns
    -------
    Hex SHA-256 digest of the canonical JSON form
    """

    return sha256_hex(json.dumps(config, sort_keys=True, separators=(",", ":")))


def write_atomic(path, data):
    """ Writes bytes or text to `path` through a temporary file and a rename. """

    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    if isinstance(data, str):
        data = data.encode("utf-8")
    fd, tmp_name = tempfile.mkstemp(dir=path.parent, prefix=f".{path.name}.")
    try:
        with os.fdopen(fd, "wb") as handle:
            handle.write(data)
        os.replace(tmp_name, path)
    except BaseException:
        if os.path.exists(tmp_name):
            os.unlink(tmp_name)
        raise


def read_json(path, error_cls=ConfigError):
    """ Loads a JSON document, converting read and decode failures to `error_cls`. """

    try:
        with open(path, "r", encoding="utf-8") as handle:
            return json.load(handle)
    except (OSError, json.JSONDecodeError) as err:
        raise error_cls(f"cannot read document {path}: {err}") from err


def load_config(path=None):
    """ Loads the JSON config document named by `path` or by $KNEE_KL_CONFIG.

    Returns
    -------
    Dictionary of flag defaults (empty when no config is configured)
    """

    path = path or os.environ.get(CONFIG_ENV_VAR)
    if not path:
        return {}
    config = read_json(path)
    if not isinstance(config, dict):
        raise ConfigError(f"config document {path} must be a JSON object")
    logger.info("Loaded config from %s", path)
    return config
