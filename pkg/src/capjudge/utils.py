import base64
import hashlib
import json
import mimetypes
import zlib
from contextlib import contextmanager
from typing import Any, Dict, Iterable, Iterator, List, Tuple

import numpy as np

__all__ = ['DatasetError', 'wrap_record_error', 'read_records', 'read_lines', 'write_records',
           'derive_rng', 'encode_image', 'text_digest', 'format_table']


class DatasetError(ValueError):
    def __init__(self, path: str, lineno: int, message: str):
        super().__init__(f'{path}:{lineno}: {message}')
        self.path = path
        self.lineno = lineno
        self.message = message


@contextmanager
def wrap_record_error(path: str, lineno: int):
    try:
        yield
    except DatasetError:
        raise
    except KeyError as e:
        raise DatasetError(path, lineno, f'missing field {e}') from None
    except (TypeError, ValueError) as e:
        raise DatasetError(path, lineno, str(e)) from None


def read_lines(path: str) -> Iterator[Tuple[int, str]]:
    """
    Yields (1-based line number, stripped line) for every non-blank line.
    """
    with open(path, 'r', encoding='utf-8') as f:
        for lineno, line in enumerate(f, 1):
            line = line.strip()
            if line:
                yield lineno, line


def read_records(path: str) -> Iterator[Tuple[int, Dict[str, Any]]]:
    for lineno, line in read_lines(path):
        try:
            record = json.loads(line)
        except json.JSONDecodeError as e:
            raise DatasetError(path, lineno, f'malformed record: {e.msg}') from None
        if not isinstance(record, dict):
            raise DatasetError(path, lineno, 'malformed record: expected an object')
        yield lineno, record


def write_records(path: str, records: Iterable[Dict[str, Any]]) -> int:
    count = 0
    with open(path, 'w', encoding='utf-8', newline='\n') as f:
        for record in records:
            f.write(json.dumps(record, ensure_ascii=False))
            f.write('\n')
            count += 1
    return count


def derive_rng(seed: int, purpose: str) -> np.random.Generator:
    # crc32 keeps the stream stable across interpreter runs, unlike hash()
    return np.random.default_rng(np.random.SeedSequence([seed, zlib.crc32(purpose.encode())]))


def encode_image(image_ref: str) -> str:
    if image_ref.startswith('data:'):
        return image_ref
    mime = mimetypes.guess_type(image_ref)[0] or 'image/jpeg'
    with open(image_ref, 'rb') as f:
        payload = base64.b64encode(f.read()).decode()
    return f'data:{mime};base64,{payload}'


def text_digest(*parts: str) -> str:
    return hashlib.sha1(b'\0'.join(p.encode() for p in parts)).hexdigest()


def format_table(lines: List[List[str]], left: int = 1) -> str:
    """
    Aligned text table; the first `left` columns are left-justified, the rest right-justified.
    """
    widths = [max(len(line[i]) for line in lines) for i in range(len(lines[0]))]
    return '\n'.join('  '.join(cell.ljust(w) if i < left else cell.rjust(w)
                               for i, (cell, w) in enumerate(zip(line, widths))).rstrip()
                     for line in lines)
