""" Text formats: heatmap grids, run configuration files and keypoint lists.

Heatmap text format::

    H W g
    v00 v01 ... v0(W-1)
    ...
    v(H-1)0 ... v(H-1)(W-1)

Run configuration format: one ``key = value`` per line, ``#`` starts a comment line,
blank lines are ignored.

Keypoint format: a JSON array of ``{"x": .., "y": .., "visible": ..}`` objects.
"""
import abc
import collections
import itertools
import json
import logging
import math

from hmatch.grid import GridGeometry, Heatmap, Keypoint

logger = logging.getLogger(__name__)

COMMENT_START = '#'
ENTRY_SEP = '='
WHITESPACE_CHARS = (' ', '\t', '\n', '\r')


class ParseError(ValueError):
    pass


class MissingTokenError(ParseError):
    def __init__(self, token, line=None):
        msg = f'missing token "{token}"'
        if line is not None:
            msg += f' at line {line}'
        super().__init__(msg)
        self.token = token
        self.line = line


class ConfigError(ParseError):
    pass


class PeekableIter:
    """ Iterator that can peek N steps ahead through a peek(n) method."""
    def __init__(self, iterable):
        self.iterable = iter(iterable)
        self.queue = collections.deque()

    def __iter__(self):
        return self

    def __next__(self):
        if self.queue:
            return self.queue.popleft()
        return next(self.iterable)

    def peek(self, n=1):
        """ Peek n steps ahead. Raises StopIteration past the end of the iterable."""
        if n <= 0:
            raise ValueError(f'n argument must be a positive non-zero integer, got {n} instead')
        while len(self.queue) < n:
            self.queue.append(next(self.iterable))
        return self.queue[n - 1]


def take_line(iterable):
    """ Advance the iterable past the next newline and return the passed characters (newline excluded)."""
    return ''.join(itertools.takewhile(lambda c: c != '\n', iterable))


def parse_real(token, line):
    try:
        value = float(token)
    except ValueError:
        raise ParseError(f"'{token}' is not a real number at line {line}") from None
    if not math.isfinite(value):
        raise ParseError(f"non-finite value '{token}' at line {line}")
    return value


def format_real(value):
    """ Shortest decimal text that reads back to the identical float."""
    return repr(float(value))


class Statement(abc.ABC):
    """ One parsed line of a text file."""

    @property
    def line(self):
        return self._line

    @classmethod
    @abc.abstractmethod
    def from_iter(cls, iterable, linenum):
        raise NotImplementedError()

    @abc.abstractmethod
    def __str__(self):
        raise NotImplementedError()

    def __repr__(self):
        return f'{self.__class__.__name__}(line={self.line})'


class Whitespace(Statement):
    def __init__(self, line_string, line):
        if any(c not in WHITESPACE_CHARS for c in line_string):
            raise ValueError(f'line "{line_string}" has non whitespace characters')
        self.line_string = line_string
        self._line = line

    @classmethod
    def from_iter(cls, iterable, linenum):
        line = take_line(iterable)
        try:
            return cls(line_string=line + '\n', line=linenum)
        except ValueError:
            raise ParseError(f"line '{line}' at {linenum} has non whitespace characters") from None

    def __str__(self):
        return self.line_string


class CommentStatement(Statement):
    def __init__(self, comment, line):
        self.comment = comment
        self._line = line

    @classmethod
    def from_iter(cls, iterable, linenum):
        line = take_line(iterable)
        if not line.startswith(COMMENT_START):
            raise ParseError(f"Incorrect comment statement '{line}' at line {linenum}")
        return cls(comment=line[1:], line=linenum)

    def __str__(self):
        return f'{COMMENT_START}{self.comment}\n'

    def __repr__(self):
        return f'{self.__class__.__name__}(comment={self.comment!r}, line={self.line})'


class ConfigEntry(Statement):
    def __init__(self, key, value, line):
        self.key = key
        self.value = value
        self._line = line

    @classmethod
    def from_iter(cls, iterable, linenum):
        line = take_line(iterable)
        key, sep, value = line.partition(ENTRY_SEP)
        if not sep:
            raise MissingTokenError(ENTRY_SEP, line=linenum)
        key, value = key.strip(), value.strip()
        if not key or not value or any(c in WHITESPACE_CHARS for c in key):
            raise ParseError(f"Incorrect entry '{line}' at line {linenum}")
        return cls(key=key, value=value, line=linenum)

    def __str__(self):
        return f'{self.key} {ENTRY_SEP} {self.value}\n'

    def __repr__(self):
        return f'{self.__class__.__name__}(key={self.key}, value={self.value}, line={self.line})'


class HeaderStatement(Statement):
    def __init__(self, height, width, pixel_size, line=0):
        self.height = height
        self.width = width
        self.pixel_size = pixel_size
        self._line = line

    @classmethod
    def from_iter(cls, iterable, linenum):
        tokens = take_line(iterable).split()
        if len(tokens) != 3:
            raise ParseError(f"header must read 'H W g', got {len(tokens)} tokens at line {linenum}")
        try:
            height, width = int(tokens[0]), int(tokens[1])
        except ValueError:
            raise ParseError(f'grid size must be integers at line {linenum}') from None
        return cls(height=height, width=width, pixel_size=parse_real(tokens[2], linenum), line=linenum)

    def __str__(self):
        return f'{self.height} {self.width} {format_real(self.pixel_size)}\n'


class RowStatement(Statement):
    def __init__(self, values, line):
        self.values = values
        self._line = line

    @classmethod
    def from_iter(cls, iterable, linenum):
        tokens = take_line(iterable).split()
        return cls(values=[parse_real(t, linenum) for t in tokens], line=linenum)

    def __str__(self):
        return ' '.join(format_real(v) for v in self.values) + '\n'


class ConfigParser:
    """ Parse ``key = value`` run configuration text.

    After parsing, `entries` maps keys to ConfigEntry statements (a repeated key keeps
    its last entry), `comments` and `whitespace` keep the remaining lines.
    """

    def __init__(self, text_iterable=None):
        self.current_line = 0
        self.peek_iter = None
        self.entries = {}
        self.comments = []
        self.whitespace = []

        if text_iterable:
            self.parse(text_iterable)

    def clear(self):
        self.peek_iter = None
        self.current_line = 0
        self.entries.clear()
        self.comments.clear()
        self.whitespace.clear()

    def parse(self, text_iterable):
        self.clear()
        self.peek_iter = PeekableIter(text_iterable)
        lines = []
        while True:
            try:
                self.peek_iter.peek()
            except StopIteration:
                break
            lines.append(self.parse_method_for()())
            self.current_line += 1
        return lines

    def parse_method_for(self):
        next_char = self.peek_iter.peek()
        if next_char == COMMENT_START:
            return self.parse_comment
        elif next_char in WHITESPACE_CHARS and self._rest_of_line_blank():
            return self.parse_white_space
        else:
            return self.parse_entry

    def _rest_of_line_blank(self):
        n = 1
        while True:
            try:
                c = self.peek_iter.peek(n)
            except StopIteration:
                return True
            if c == '\n':
                return True
            if c not in WHITESPACE_CHARS:
                return False
            n += 1

    def parse_entry(self):
        entry = ConfigEntry.from_iter(self.peek_iter, linenum=self.current_line)
        if entry.key in self.entries:
            logger.info('config key %r at line %d overrides line %d', entry.key, entry.line,
                        self.entries[entry.key].line)
        self.entries[entry.key] = entry
        return entry

    def parse_comment(self):
        cs = CommentStatement.from_iter(self.peek_iter, linenum=self.current_line)
        self.comments.append(cs)
        return cs

    def parse_white_space(self):
        ws = Whitespace.from_iter(self.peek_iter, linenum=self.current_line)
        self.whitespace.append(ws)
        return ws


def parse_heatmap(text, image_scale=1.0):
    """ Parse the heatmap text format into a Heatmap."""
    lines = text.splitlines()
    if not lines:
        raise MissingTokenError('H W g', line=0)
    header = HeaderStatement.from_iter(lines[0], linenum=0)
    try:
        geometry = GridGeometry(width=header.width, height=header.height, pixel_size=header.pixel_size,
                                image_scale=image_scale)
    except ValueError as e:
        raise ParseError(f'bad header at line 0: {e}') from None
    rows = [RowStatement.from_iter(line, linenum) for linenum, line in enumerate(lines[1:], start=1)
            if line.strip()]
    if len(rows) != geometry.height:
        raise ParseError(f'expected {geometry.height} rows, found {len(rows)}')
    for row in rows:
        if len(row.values) != geometry.width:
            raise ParseError(f'expected {geometry.width} values at line {row.line}, found {len(row.values)}')
    return Heatmap(geometry=geometry, values=[row.values for row in rows])


def format_heatmap(heatmap):
    geometry = heatmap.geometry
    header = HeaderStatement(height=geometry.height, width=geometry.width, pixel_size=geometry.pixel_size)
    rows = (RowStatement(values=list(row), line=i) for i, row in enumerate(heatmap.values, start=1))
    return str(header) + ''.join(map(str, rows))


def load_heatmap(file, image_scale=1.0, encoding='utf-8'):
    with open(file, encoding=encoding) as f:
        return parse_heatmap(f.read(), image_scale=image_scale)


def dump_heatmap(heatmap, file):
    with open(file, mode='w', encoding='utf-8') as f:
        f.write(format_heatmap(heatmap))


def parse_keypoints(text):
    try:
        raw = json.loads(text)
    except json.JSONDecodeError as e:
        raise ParseError(f'keypoints are not valid JSON: {e}') from None
    if not isinstance(raw, list):
        raise ParseError('keypoints must be a JSON array')
    keypoints = []
    for i, obj in enumerate(raw):
        if not isinstance(obj, dict):
            raise ParseError(f'keypoint {i} is not an object')
        for token in ('x', 'y', 'visible'):
            if token not in obj:
                raise MissingTokenError(token, line=i)
        if isinstance(obj['x'], bool) or isinstance(obj['y'], bool) or not isinstance(obj['visible'], bool):
            raise ParseError(f'keypoint {i} has ill-typed fields')
        try:
            x, y = float(obj['x']), float(obj['y'])
        except (TypeError, ValueError):
            raise ParseError(f'keypoint {i} coordinates must be numbers') from None
        if not (math.isfinite(x) and math.isfinite(y)):
            raise ParseError(f'keypoint {i} coordinates must be finite')
        keypoints.append(Keypoint(x=x, y=y, visible=obj['visible']))
    return keypoints


def format_keypoints(keypoints):
    return json.dumps([{'x': float(kp.x), 'y': float(kp.y), 'visible': bool(kp.visible)} for kp in keypoints])


def load_keypoints(file, encoding='utf-8'):
    with open(file, encoding=encoding) as f:
        return parse_keypoints(f.read())
