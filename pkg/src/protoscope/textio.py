"""Line-oriented text serialization for checkpoints and other artifacts.

One format family: a header line ``protoscope-<kind> v1 key=value ...``
followed by named blocks. Float blocks open with ``array <name> <rows>
<cols>`` and carry one space-separated row per line; integer blocks are
``ints <name> <n>`` with a single line of values. Files are UTF-8 with
'\\n' separators, and floats are written with full round-trip precision.
"""

from __future__ import annotations

import numpy as np

from .errors import FormatError

FORMAT_VERSION = "v1"


def format_float(x: float) -> str:
    return repr(float(x))


def _format_meta(meta: dict) -> str:
    parts = []
    for key, value in meta.items():
        text = str(value)
        if " " in text or "=" in text or "\n" in text:
            raise ValueError(f"meta value for '{key}' must not contain spaces: {text!r}")
        parts.append(f"{key}={text}")
    return " ".join(parts)


def parse_meta(fields: list[str], line: int) -> dict:
    meta = {}
    for field in fields:
        if "=" not in field:
            raise FormatError(f"expected key=value, got {field!r}", line=line)
        key, _, value = field.partition("=")
        meta[key] = value
    return meta


def write_blocks(path, kind: str, meta: dict, arrays: dict | None = None,
                 ints: dict | None = None) -> None:
    lines = [f"protoscope-{kind} {FORMAT_VERSION} {_format_meta(meta)}".rstrip()]
    for name, arr in (arrays or {}).items():
        mat = np.atleast_2d(np.asarray(arr, dtype=np.float64))
        lines.append(f"array {name} {mat.shape[0]} {mat.shape[1]}")
        for row in mat:
            lines.append(" ".join(format_float(x) for x in row))
    for name, values in (ints or {}).items():
        vec = np.asarray(values, dtype=np.int64).ravel()
        lines.append(f"ints {name} {vec.size}")
        lines.append(" ".join(str(int(v)) for v in vec))
    with open(path, "w", encoding="utf-8", newline="\n") as fh:
        fh.write("\n".join(lines) + "\n")


def read_blocks(path, kind: str):
    """Read a block file; returns (meta, arrays, ints).

    Raises FormatError with the offending line number on any structural
    problem, including truncation.
    """
    with open(path, encoding="utf-8") as fh:
        lines = fh.read().split("\n")
    if lines and lines[-1] == "":
        lines.pop()
    if not lines:
        raise FormatError("empty file", line=1)

    header = lines[0].split(" ")
    expected = f"protoscope-{kind}"
    if len(header) < 2 or header[0] != expected or header[1] != FORMAT_VERSION:
        raise FormatError(
            f"expected header '{expected} {FORMAT_VERSION} ...', got {lines[0]!r}",
            line=1,
        )
    meta = parse_meta(header[2:], line=1)

    arrays: dict[str, np.ndarray] = {}
    ints: dict[str, np.ndarray] = {}
    i = 1
    while i < len(lines):
        fields = lines[i].split(" ")
        if fields[0] == "array":
            if len(fields) != 4:
                raise FormatError(f"malformed array block header {lines[i]!r}", line=i + 1)
            name, rows, cols = fields[1], _int(fields[2], i + 1), _int(fields[3], i + 1)
            data = np.empty((rows, cols), dtype=np.float64)
            for r in range(rows):
                lineno = i + 1 + r
                if lineno >= len(lines):
                    raise FormatError(f"array '{name}' truncated", line=lineno)
                row = lines[lineno].split(" ")
                if len(row) != cols:
                    raise FormatError(
                        f"array '{name}' row has {len(row)} fields, expected {cols}",
                        line=lineno + 1,
                    )
                try:
                    data[r] = [float(x) for x in row]
                except ValueError as exc:
                    raise FormatError(str(exc), line=lineno + 1) from exc
            arrays[name] = data
            i += 1 + rows
        elif fields[0] == "ints":
            if len(fields) != 3:
                raise FormatError(f"malformed ints block header {lines[i]!r}", line=i + 1)
            name, count = fields[1], _int(fields[2], i + 1)
            if i + 1 >= len(lines):
                raise FormatError(f"ints '{name}' truncated", line=i + 1)
            row = lines[i + 1].split(" ") if count else []
            if len(row) != count:
                raise FormatError(
                    f"ints '{name}' has {len(row)} values, expected {count}",
                    line=i + 2,
                )
            try:
                ints[name] = np.array([int(x) for x in row], dtype=np.int64)
            except ValueError as exc:
                raise FormatError(str(exc), line=i + 2) from exc
            i += 2
        else:
            raise FormatError(f"unexpected block {lines[i]!r}", line=i + 1)
    return meta, arrays, ints


def _int(text: str, line: int) -> int:
    try:
        return int(text)
    except ValueError as exc:
        raise FormatError(f"expected integer, got {text!r}", line=line) from exc
