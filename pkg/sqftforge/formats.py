from collections.abc import Iterable, Mapping, Reversible
from io import IOBase, StringIO
from json import dumps
from re import compile as regcomp
from typing import Callable, Optional, Sequence

import numpy as np

_newline_split = regcomp(r'\r?\n').split


class KeyValue(dict):
    newline = '\n'
    key_separator = ' = '
    value_separator: Optional[str] = ' '
    continuation_indent = "\t"
    buffer_io_class: Callable[[], IOBase] = StringIO

    print = print

    def newline_split(self, value):
        return _newline_split(value)

    def print_empty_value(self, fh: IOBase, key: str) -> None:
        self.print(key, end=self.newline, file=fh)

    def print_single_value(self, fh: IOBase, key: str, value: str) -> None:
        iterator = iter(self.newline_split(value))

        newline = self.newline
        self.print(key, next(iterator), sep=self.key_separator, end=newline, file=fh)
        continuation_indent = self.continuation_indent
        for line in iterator:
            self.print(continuation_indent, line, sep='', end=newline, file=fh)

    def print_value(self, fh, key, value) -> None:
        if value is None:
            self.print_empty_value(fh, key)
        elif isinstance(value, Iterable) and not isinstance(value, str):
            self.print_list_value(fh, key, value)
        else:
            self.print_single_value(fh, key, str(value))

    def print_list_value(self, fh, key, values) -> None:
        if not isinstance(values, Reversible):
            # unordered collections are sorted so the output is reproducible
            values = sorted(values)
        value_separator = self.value_separator
        if value_separator is None:
            for value in values:
                self.print_value(fh, key, value)
        else:
            self.print_single_value(fh, key, value_separator.join(map(str, values)))

    def __str__(self):
        with self.buffer_io_class() as fh:
            for key, value in self.items():
                self.print_value(fh, key, value)
            return fh.getvalue()


class Metadata(KeyValue):
    """Checkpoint metadata: one key=value line per entry, lists joined by commas.

    Values come back as strings; the typed getters parse them."""

    key_separator = '='
    value_separator = ','
    continuation_indent = ''

    def print_single_value(self, fh: IOBase, key: str, value: str) -> None:
        if '\n' in value or '=' in key or '\n' in key:
            raise ValueError(f"metadata entry {key!r} cannot be stored on one line")
        super().print_single_value(fh, key, value)

    @classmethod
    def parse(cls, text: str) -> 'Metadata':
        metadata = cls()
        for line in text.splitlines():
            if not line:
                continue
            key, separator, value = line.partition(cls.key_separator)
            metadata[key] = value if separator else None
        return metadata

    def text(self, key: str, default: Optional[str] = None) -> Optional[str]:
        value = self.get(key)
        if value is None:
            return default
        if isinstance(value, str):
            return value
        with StringIO() as fh:
            self.print_value(fh, key, value)
            return fh.getvalue()[len(key) + len(self.key_separator) :].rstrip('\n')

    def integers(self, key: str) -> list[int]:
        value = self.text(key, '')
        return [int(item) for item in value.split(self.value_separator) if item]

    def number(self, key: str, default: Optional[float] = None) -> Optional[float]:
        value = self.text(key)
        return default if value is None or value == '' else float(value)


def _plain(value):
    if isinstance(value, np.generic):
        return value.item()
    elif isinstance(value, np.ndarray):
        return value.tolist()
    elif isinstance(value, Mapping):
        return {str(key): _plain(item) for key, item in value.items()}
    elif isinstance(value, (list, tuple, set, frozenset)):
        return [_plain(item) for item in value]
    return value


class JSONLines(list):
    """One JSON object per line."""

    def __str__(self):
        return ''.join(dumps(_plain(record), ensure_ascii=False) + '\n' for record in self)


def _cell(value) -> str:
    value = _plain(value)
    if value is None:
        return '-'
    elif isinstance(value, bool):
        return 'yes' if value else 'no'
    elif isinstance(value, float):
        return f"{value:.6g}"
    elif isinstance(value, list):
        return ','.join(map(_cell, value))
    return str(value)


class Table(list):
    """Aligned text table of records; columns default to the first record's keys."""

    def __init__(self, records: Iterable[Mapping] = (), columns: Optional[Sequence[str]] = None):
        super().__init__(records)
        self.columns = columns

    def __str__(self):
        if not self:
            return ''
        columns = list(self.columns or self[0].keys())
        rows = [columns] + [[_cell(record.get(column)) for column in columns] for record in self]
        widths = [max(len(row[i]) for row in rows) for i in range(len(columns))]
        lines = ['  '.join(cell.ljust(width) for cell, width in zip(row, widths)).rstrip() for row in rows]
        lines.insert(1, '  '.join('-' * width for width in widths))
        return '\n'.join(lines) + '\n'


def render(records: Sequence[Mapping], format: str = 'text', columns: Optional[Sequence[str]] = None) -> str:
    if format == 'json-lines':
        return str(JSONLines(records))
    return str(Table(records, columns))


__all__ = (
    'JSONLines',
    'KeyValue',
    'Metadata',
    'Table',
    'render',
)
