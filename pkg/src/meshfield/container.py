"""Named-array binary container shared by head assets and checkpoints.

Layout::

    <magic>\\n
    meta <nbytes>\\n
    <utf-8 JSON, nbytes long>\\n
    array <name> <dtype> <shape> <nbytes>\\n
    <raw little-endian payload>\\n
    ...
    end\\n

``shape`` is ``x``-joined (``642x3x2``); a scalar uses ``-``.
"""

from __future__ import annotations

import json
from pathlib import Path

import numpy as np

_DTYPES = {"f4": "<f4", "f8": "<f8", "i4": "<i4", "i8": "<i8"}


class ContainerError(ValueError):
    """Raised for malformed or truncated container files."""


def write_container(path, magic: str, arrays: dict, meta: dict | None = None) -> None:
    path = Path(path)
    chunks = [magic.encode("ascii") + b"\n"]
    meta_bytes = json.dumps(meta or {}, sort_keys=True).encode("utf-8")
    chunks.append(b"meta %d\n" % len(meta_bytes))
    chunks.append(meta_bytes + b"\n")
    for name, (arr, code) in arrays.items():
        if code not in _DTYPES:
            raise ValueError(f"unsupported dtype code {code!r} for array {name!r}")
        if " " in name or not name:
            raise ValueError(f"bad array name {name!r}")
        data = np.ascontiguousarray(arr, dtype=_DTYPES[code])
        shape = "x".join(str(s) for s in data.shape) or "-"
        payload = data.tobytes()
        chunks.append(f"array {name} {code} {shape} {len(payload)}\n".encode("ascii"))
        chunks.append(payload + b"\n")
    chunks.append(b"end\n")
    tmp = path.with_name(path.name + ".tmp")
    tmp.write_bytes(b"".join(chunks))
    tmp.replace(path)


def read_container(path, magic: str) -> tuple[dict, dict]:
    """Return ``(arrays, meta)``; raises :class:`ContainerError` with context."""
    path = Path(path)
    try:
        raw = path.read_bytes()
    except FileNotFoundError:
        raise
    pos = 0
    line_no = 0

    def next_line():
        nonlocal pos, line_no
        end = raw.find(b"\n", pos)
        if end < 0:
            raise ContainerError(f"{path}: line {line_no + 1}: unexpected end of file")
        line = raw[pos:end]
        pos = end + 1
        line_no += 1
        try:
            return line.decode("ascii")
        except UnicodeDecodeError:
            raise ContainerError(f"{path}: line {line_no}: non-ascii header line") from None

    def take(n, what):
        nonlocal pos
        if pos + n + 1 > len(raw):
            raise ContainerError(f"{path}: {what}: truncated payload "
                                 f"(need {n} bytes, have {max(len(raw) - pos - 1, 0)})")
        chunk = raw[pos:pos + n]
        if raw[pos + n:pos + n + 1] != b"\n":
            raise ContainerError(f"{path}: {what}: missing payload terminator")
        pos += n + 1
        return chunk

    head = next_line()
    if head != magic:
        raise ContainerError(f"{path}: line 1: bad magic {head[:40]!r}, expected {magic!r}")

    fields = next_line().split()
    if len(fields) != 2 or fields[0] != "meta" or not fields[1].isdigit():
        raise ContainerError(f"{path}: line {line_no}: expected 'meta <nbytes>'")
    try:
        meta = json.loads(take(int(fields[1]), "meta").decode("utf-8"))
    except (json.JSONDecodeError, UnicodeDecodeError) as exc:
        raise ContainerError(f"{path}: meta: invalid JSON ({exc})") from None

    arrays = {}
    while True:
        fields = next_line().split()
        if fields == ["end"]:
            break
        if len(fields) != 5 or fields[0] != "array":
            raise ContainerError(f"{path}: line {line_no}: expected 'array <name> <dtype> <shape> <nbytes>'")
        _, name, code, shape_s, nbytes_s = fields
        if code not in _DTYPES:
            raise ContainerError(f"{path}: line {line_no}: field {name}: unknown dtype {code!r}")
        try:
            shape = () if shape_s == "-" else tuple(int(s) for s in shape_s.split("x"))
            nbytes = int(nbytes_s)
        except ValueError:
            raise ContainerError(f"{path}: line {line_no}: field {name}: bad shape/size") from None
        dtype = np.dtype(_DTYPES[code])
        if int(np.prod(shape, dtype=np.int64)) * dtype.itemsize != nbytes:
            raise ContainerError(f"{path}: line {line_no}: field {name}: size {nbytes} "
                                 f"does not match shape {shape_s}")
        payload = take(nbytes, f"field {name}")
        arrays[name] = np.frombuffer(payload, dtype=dtype).reshape(shape).copy()
    if pos != len(raw):
        raise ContainerError(f"{path}: trailing bytes after 'end'")
    return arrays, meta
