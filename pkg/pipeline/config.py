# pipeline/config.py
"""Run configuration: settings defaults, a config file, then --set overrides.

File grammar::

    # comment
    [section]
    key = value

Values take the type of the default they replace. List-valued keys are
comma-separated strings and are split by ``RunConfig.list``.
"""
import copy
import logging
from pathlib import Path

from django.conf import settings

from ticon_lab.exceptions import ConfigError

logger = logging.getLogger(__name__)

_TRUE = {'1', 'true', 'yes', 'on'}
_FALSE = {'0', 'false', 'no', 'off'}


def coerce(default, raw, where):
    raw = raw.strip()
    try:
        if isinstance(default, bool):
            lowered = raw.lower()
            if lowered in _TRUE:
                return True
            if lowered in _FALSE:
                return False
            raise ValueError(raw)
        if isinstance(default, int):
            return int(raw)
        if isinstance(default, float):
            return float(raw)
    except ValueError:
        raise ConfigError(f'{where}: cannot read {raw!r} as {type(default).__name__}') from None
    return raw


def format_value(value):
    if isinstance(value, bool):
        return 'true' if value else 'false'
    if isinstance(value, float):
        return repr(value)
    return str(value)


class RunConfig:
    def __init__(self, values=None):
        self.values = copy.deepcopy(values if values is not None else settings.TICON)

    def section(self, name):
        try:
            return self.values[name]
        except KeyError:
            raise ConfigError(f'unknown config section [{name}]') from None

    def get(self, section, key):
        values = self.section(section)
        if key not in values:
            raise ConfigError(f'unknown config key {section}.{key}')
        return values[key]

    def set(self, section, key, raw, where=None):
        default = self.get(section, key)
        self.values[section][key] = coerce(default, str(raw), where or f'{section}.{key}')

    def list(self, section, key, cast=str):
        raw = self.get(section, key)
        items = [part.strip() for part in str(raw).split(',') if part.strip()]
        try:
            return [cast(item) for item in items]
        except ValueError:
            raise ConfigError(f'{section}.{key}: cannot read {raw!r} as a list of {cast.__name__}') from None

    @property
    def seed(self):
        return self.get('run', 'seed')

    def load_text(self, text, source='<config>'):
        section = None
        for lineno, line in enumerate(text.splitlines(), start=1):
            where = f'{source}:{lineno}'
            line = line.split('#', 1)[0].strip()
            if not line:
                continue
            if line.startswith('[') and line.endswith(']'):
                section = line[1:-1].strip()
                self.section(section)
                continue
            if section is None:
                raise ConfigError(f'{where}: key outside of any [section]')
            if '=' not in line:
                raise ConfigError(f'{where}: expected "key = value", got {line!r}')
            key, raw = line.split('=', 1)
            key = key.strip()
            if key not in self.section(section):
                raise ConfigError(f'{where}: unknown config key {section}.{key}')
            self.set(section, key, raw, where)
        return self

    def load_file(self, path):
        path = Path(path)
        if not path.exists():
            raise ConfigError(f'config file {path} does not exist')
        return self.load_text(path.read_text(), source=str(path))

    def apply_overrides(self, overrides):
        """Apply ``section.key=value`` strings in order."""
        for item in overrides or ():
            if '=' not in item or '.' not in item.split('=', 1)[0]:
                raise ConfigError(f'override {item!r} is not of the form section.key=value')
            name, raw = item.split('=', 1)
            section, key = name.strip().split('.', 1)
            self.set(section, key, raw, where=f'--set {item}')
        return self

    def dumps(self):
        lines = []
        for section in sorted(self.values):
            lines.append(f'[{section}]')
            for key in sorted(self.values[section]):
                lines.append(f'{key} = {format_value(self.values[section][key])}')
            lines.append('')
        return '\n'.join(lines)

    def write(self, directory):
        directory = Path(directory)
        directory.mkdir(parents=True, exist_ok=True)
        path = directory / 'resolved.cfg'
        path.write_text(self.dumps())
        return path

    @classmethod
    def resolve(cls, config_path=None, overrides=None, seed=None, threads=None):
        cfg = cls()
        if config_path:
            cfg.load_file(config_path)
        cfg.apply_overrides(overrides)
        if seed is not None:
            cfg.values['run']['seed'] = int(seed)
        if threads is not None:
            if threads < 1:
                raise ConfigError(f'--threads must be at least 1, got {threads}')
            cfg.values['run']['threads'] = int(threads)
        return cfg
