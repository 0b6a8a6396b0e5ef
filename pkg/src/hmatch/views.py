import collections.abc

from hmatch.parser import ConfigError, ConfigParser


def parse_bool(text):
    lowered = text.lower()
    if lowered in ('1', 'true', 'yes', 'on'):
        return True
    if lowered in ('0', 'false', 'no', 'off'):
        return False
    raise ValueError(f'not a boolean: {text!r}')


def parse_int(text):
    # 64-bit seeds are written in decimal or 0x-hex
    return int(text, 0)


KEY_TYPES = {
    'mode': str,
    'loss': str,
    'lambda': float,
    'iterations': parse_int,
    'sigma': float,
    'lr': float,
    'steps': parse_int,
    'seed': parse_int,
    'n': parse_int,
    'K': parse_int,
    'H': parse_int,
    'W': parse_int,
    'r': float,
    'g': float,
    'demander': str,
    'width': parse_int,
    'init_scale': float,
    'convention': str,
    'record_every': parse_int,
    'safeguard': parse_bool,
    'tol': float,
    'gradient': str,
}


class ConfigView(collections.abc.Mapping):
    """ A read-only mapping of run configuration keys to typed values.

    Initialize with a dict/mapping of keys to parsed ConfigEntry statements. Values are
    converted with KEY_TYPES on access; the raw statements stay reachable through
    `entries` and `entry(key)` (e.g. for the line number of a bad value).

    Unknown keys are rejected at construction with ConfigError.
    """

    def __init__(self, entries):
        unknown = sorted(set(entries) - set(KEY_TYPES))
        if unknown:
            lines = ', '.join(f'{key!r} (line {entries[key].line})' for key in unknown)
            raise ConfigError(f'unknown configuration keys: {lines}')
        self.entries = entries

    @classmethod
    def from_text(cls, text):
        return cls(ConfigParser(text).entries)

    @classmethod
    def from_file(cls, file, encoding='utf-8'):
        with open(file, encoding=encoding) as f:
            return cls.from_text(f.read())

    def entry(self, key):
        return self.entries[key]

    def __getitem__(self, key):
        entry = self.entries[key]
        try:
            return KEY_TYPES[key](entry.value)
        except ValueError:
            raise ConfigError(f'bad value {entry.value!r} for {key!r} at line {entry.line}') from None

    def __len__(self):
        return len(self.entries)

    def __iter__(self):
        yield from self.entries

    def text(self):
        """ Rebuild the configuration text from its entries (comments and blank lines dropped)."""
        return ''.join(str(self.entries[key]) for key in self)
