import re
from pathlib import Path
from types import SimpleNamespace

import logging
logger = logging.getLogger(__name__)


FILE = Path(__file__).resolve()
ROOT = FILE.parents[1]
CFG_DIR = ROOT / "cfg"
DEFAULT_CFG_PATH = CFG_DIR / "default.yaml"


class IterableSimpleNamespace(SimpleNamespace):
    """
    An iterable SimpleNamespace holding one configuration section.

    Configuration files are loaded with `YAML.load` and wrapped in this namespace before being turned into typed
    configs. Nested sections stay plain dicts so they can be handed to the `from_dict` constructors of the dataclass
    configs.

    Examples:
        >>> cfg = IterableSimpleNamespace(gamma=0.9, epoch_ftq=12)
        >>> for k, v in cfg:
        ...     print(f"{k}: {v}")
        gamma: 0.9
        epoch_ftq: 12
        >>> cfg.get("n_seeds", 1)
        1
    """

    def __iter__(self):
        """Return an iterator of key-value pairs from the namespace's attributes."""
        return iter(vars(self).items())

    def __str__(self):
        """Return a human-readable string representation of the object."""
        return "\n".join(f"{k}={v}" for k, v in vars(self).items())

    def __getattr__(self, attr):
        """Provide a custom attribute access error message with helpful information."""
        name = self.__class__.__name__
        raise AttributeError(
            f"'{name}' object has no attribute '{attr}'. The key is missing from the configuration file; "
            f"see {DEFAULT_CFG_PATH} for the full list of keys and their defaults."
        )

    def get(self, key, default=None):
        """Return the value of the specified key if it exists; otherwise, return the default value."""
        return getattr(self, key, default)

    def to_dict(self) -> dict:
        """Return a plain dict copy, suitable for `YAML.save`."""
        return dict(vars(self))


def colorstr(*input):
    """
    Color a string with ANSI escape codes, e.g. colorstr("bold", "black", "text") or colorstr("text") (blue, bold).

    Args:
        *input (str | Path): Color and style names followed by the string to color.

    Returns:
        (str): The input string wrapped with ANSI escape codes.
    """
    *args, string = input if len(input) > 1 else ("blue", "bold", input[0])
    colors = {
        "black": "\033[30m",
        "red": "\033[31m",
        "green": "\033[32m",
        "yellow": "\033[33m",
        "blue": "\033[34m",
        "end": "\033[0m",
        "bold": "\033[1m",
        "underline": "\033[4m",
    }
    return "".join(colors[x] for x in args) + f"{string}" + colors["end"]


class YAML:
    """
    YAML utility class for configuration files, using PyYAML's C implementation when available.

    JSON documents are valid YAML, so `.json` configuration files are read by the same loader. The class is a lazily
    created singleton used through its class methods.

    Examples:
        >>> data = YAML.load("corridors.yaml")
        >>> data["gamma"] = 0.9
        >>> YAML.save("resolved_config.yaml", data)
    """

    _instance = None
    SUFFIXES = (".yaml", ".yml", ".json")

    @classmethod
    def _get_instance(cls):
        """Initialize singleton instance on first use."""
        if cls._instance is None:
            cls._instance = cls()
        return cls._instance

    def __init__(self):
        """Initialize with optimal YAML implementation (C-based when available)."""
        import yaml

        self.yaml = yaml
        try:
            self.SafeLoader = yaml.CSafeLoader
            self.SafeDumper = yaml.CSafeDumper
        except (AttributeError, ImportError):
            self.SafeLoader = yaml.SafeLoader
            self.SafeDumper = yaml.SafeDumper

    @classmethod
    def save(cls, file="data.yaml", data=None, header=""):
        """
        Save a dict as a YAML file, creating parent directories.

        Args:
            file (str | Path): Path to save YAML file.
            data (dict | None): Dict or compatible object to save. Non-serializable values are stored as strings.
            header (str): Optional string to add at file beginning.
        """
        instance = cls._get_instance()
        data = {} if data is None else _plain(data)

        file = Path(file)
        file.parent.mkdir(parents=True, exist_ok=True)
        with open(file, "w", errors="ignore", encoding="utf-8") as f:
            if header:
                f.write(header)
            instance.yaml.dump(data, f, sort_keys=False, allow_unicode=True, Dumper=instance.SafeDumper)

    @classmethod
    def load(cls, file="data.yaml"):
        """
        Load a YAML (or JSON) file to a dict.

        Args:
            file (str | Path): Path to the configuration file.

        Returns:
            (dict): Loaded content.
        """
        instance = cls._get_instance()
        file = Path(file)
        if not file.exists():
            raise FileNotFoundError(f"Configuration file not found: {file}")
        assert file.suffix in cls.SUFFIXES, f"Not a YAML or JSON file: {file}"

        with open(file, errors="ignore", encoding="utf-8") as f:
            s = f.read()

        try:
            data = instance.yaml.load(s, Loader=instance.SafeLoader) or {}
        except Exception:
            # Remove problematic characters and retry
            s = re.sub(r"[^\x09\x0A\x0D\x20-\x7E\x85\xA0-퟿-�\U00010000-\U0010ffff]+", "", s)
            data = instance.yaml.load(s, Loader=instance.SafeLoader) or {}

        # Check for accidental user-error None strings (should be 'null' in YAML)
        if "None" in data.values():
            data = {k: None if v == "None" else v for k, v in data.items()}

        return data


def _plain(value):
    """Convert tuples, numpy scalars and nested containers into YAML-safe builtins."""
    if isinstance(value, dict):
        return {str(k): _plain(v) for k, v in value.items()}
    if isinstance(value, (list, tuple)):
        return [_plain(v) for v in value]
    if isinstance(value, (bool, int, float, str)) or value is None:
        return value
    if hasattr(value, "tolist"):
        return _plain(value.tolist())
    if hasattr(value, "to_dict"):
        return _plain(value.to_dict())
    return str(value)


def config_from_dict(cls, mapping, **overrides):
    """
    Build a dataclass config from a mapping whose keys follow the parameter tables.

    The dataclass declares a `KEYMAP` class attribute mapping file keys to field names; field names are accepted as
    keys too. Unknown keys raise `ConfigError` instead of being dropped.

    Args:
        cls (type): Dataclass with a `KEYMAP` dict and an optional `_convert(field, value)` static hook.
        mapping (dict | IterableSimpleNamespace | None): Configuration section.
        **overrides: Field values taking precedence over `mapping`.

    Returns:
        (cls): The constructed configuration.

    Examples:
        >>> spec = config_from_dict(RegressorSpec, {"architecture": [64, 32], "learning_rate": 1e-3})
    """
    from dataclasses import fields

    from budgetedrl.solvers.errors import ConfigError

    if isinstance(mapping, IterableSimpleNamespace):
        mapping = mapping.to_dict()
    mapping = dict(mapping or {})
    names = {f.name for f in fields(cls)}
    keymap = getattr(cls, "KEYMAP", {})
    kwargs = {}
    for key, value in mapping.items():
        name = keymap.get(key, key)
        if name not in names:
            raise ConfigError(f"{cls.__name__}: unknown configuration key '{key}'")
        convert = getattr(cls, "_convert", None)
        kwargs[name] = convert(name, value) if convert is not None else value
    kwargs.update(overrides)
    try:
        return cls(**kwargs)
    except (TypeError, ValueError) as e:
        raise ConfigError(f"{cls.__name__}: {e}") from e


def config_to_dict(config) -> dict:
    """Inverse of `config_from_dict`: a dataclass config as a mapping keyed like the parameter tables."""
    from dataclasses import fields, is_dataclass

    inverse = {v: k for k, v in getattr(config, "KEYMAP", {}).items()}
    out = {}
    for f in fields(config):
        value = getattr(config, f.name)
        out[inverse.get(f.name, f.name)] = config_to_dict(value) if is_dataclass(value) else _plain(value)
    return out
