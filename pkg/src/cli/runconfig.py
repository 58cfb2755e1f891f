"""
Run config files and option precedence.

A run config is INI: ``[section]`` headers with ``key = value`` lines where
keys are flag names without dashes (``batch_size = 4`` or ``batch-size = 4``).
Sections are organisational only and are flattened. Precedence per option is
flags > file > defaults.
"""
import configparser
from pathlib import Path
from types import SimpleNamespace
from typing import Any, Dict, Optional, Union

from src.errors import ConfigError

from .flags import Flag, default_of, flag_by_dest, flags_for


def read_run_config(path: Union[str, Path]) -> Dict[str, str]:
    """
    Flattened ``dest -> raw value`` mapping.

    Raises:
        ConfigError: unreadable file, duplicate keys across sections, or a
            key that is not a configurable flag.
    """
    path = Path(path)
    parser = configparser.ConfigParser(interpolation=None)
    try:
        with path.open(encoding="utf-8") as fh:
            parser.read_file(fh)
    except (OSError, configparser.Error, UnicodeDecodeError) as exc:
        raise ConfigError(f"unreadable run config {path}: {exc}") from exc

    values: Dict[str, str] = {}
    for section in parser.sections():
        for key, raw in parser.items(section):
            dest = key.strip().replace("-", "_")
            try:
                flag = flag_by_dest(dest)
            except KeyError:
                raise ConfigError(f"{path}: unknown key '{key}' in [{section}]") from None
            if not flag.configurable:
                raise ConfigError(f"{path}: '{key}' can only be given on the command line")
            if dest in values:
                raise ConfigError(f"{path}: '{key}' set in more than one section")
            values[dest] = raw
    return values


def _convert(flag: Flag, raw: Any, origin: str) -> Any:
    try:
        return flag.convert(raw)
    except Exception as exc:
        raise ConfigError(f"{origin}: invalid value for {flag.name}: {exc}") from exc


def resolve(command: str, args: Any, file_values: Optional[Dict[str, str]] = None) -> SimpleNamespace:
    """
    Final options for ``command``.

    Raises:
        ConfigError: a file value does not convert.
    """
    file_values = dict(file_values or {})
    flags = {f.dest: f for f in flags_for(command)}
    # keys of other commands are ignored
    file_values = {k: v for k, v in file_values.items() if k in flags}

    options: Dict[str, Any] = {}
    for dest, flag in flags.items():
        from_flag = getattr(args, dest, None)
        if from_flag is not None:
            options[dest] = from_flag
        elif dest in file_values:
            options[dest] = _convert(flag, file_values[dest], "run config")
        else:
            options[dest] = default_of(flag)
    options["command"] = command
    return SimpleNamespace(**options)


def write_run_config(options: SimpleNamespace, path: Union[str, Path]) -> Path:
    """Snapshot of resolved options in the same INI format (re-readable by ``read_run_config``)."""
    parser = configparser.ConfigParser(interpolation=None)
    for flag in flags_for(options.command):
        if not flag.configurable:
            continue
        value = getattr(options, flag.dest)
        if value is None:
            continue
        if isinstance(value, (tuple, list)):
            value = ",".join(str(v) for v in value)
        if not parser.has_section(flag.section):
            parser.add_section(flag.section)
        parser.set(flag.section, flag.dest, str(value))
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    with path.open("w", encoding="utf-8") as fh:
        parser.write(fh)
    return path
