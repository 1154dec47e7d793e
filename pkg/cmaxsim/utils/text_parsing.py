from pathlib import Path
from typing import Iterator, List, Tuple

from cmaxsim.core.errors import EventParseError


def iter_data_lines(path: str | Path) -> Iterator[Tuple[int, List[str]]]:
    """Yield (1-based line number, whitespace tokens), skipping blanks and '#' comments."""
    with open(path, "r", encoding="utf-8") as f:
        for line_no, raw in enumerate(f, start=1):
            line = raw.strip()
            if not line or line.startswith("#"):
                continue
            yield line_no, line.split()


def parse_float(token: str, path: str | Path, line_no: int, what: str) -> float:
    try:
        return float(token)
    except ValueError:
        raise EventParseError(f"{what}: cannot parse {token!r} as a number", str(path), line_no) from None


def parse_int(token: str, path: str | Path, line_no: int, what: str) -> int:
    try:
        return int(token)
    except ValueError:
        # Some exports write integer pixel coordinates as "96.0"
        value = parse_float(token, path, line_no, what)
        if not value.is_integer():
            raise EventParseError(f"{what}: expected an integer, got {token!r}", str(path), line_no) from None
        return int(value)


def read_numbers(path: str | Path) -> List[float]:
    numbers: List[float] = []
    for line_no, tokens in iter_data_lines(path):
        numbers.extend(parse_float(t, path, line_no, "value") for t in tokens)
    return numbers
