"""Weight archives and checkpoints.

Layout (all text ASCII, one record per line, fields separated by single spaces)::

    PMWA 1
    tensor <name> f32 <d0,d1,...|scalar> <byte-offset> <byte-length>
    ...
    meta <key> <value to end of line>
    ...
    end
    <blob: little-endian float32 data, offsets relative to the first byte after "end\\n">

Tensor names and meta keys contain no whitespace. Any external converter that
writes this header followed by the raw blobs produces a loadable archive.
"""

from __future__ import annotations

import os
import tempfile
from pathlib import Path

import numpy as np

MAGIC = "PMWA 1"


class ArchiveError(ValueError):
    pass


def write_archive(path: str | Path, tensors: dict[str, np.ndarray], meta: dict[str, str] | None = None) -> None:
    """Write atomically (temp file + rename) so readers never see a partial archive."""
    lines = [MAGIC]
    blobs = []
    offset = 0
    for name, arr in tensors.items():
        if not name or any(c.isspace() for c in name):
            raise ArchiveError(f"invalid tensor name {name!r}")
        data = np.ascontiguousarray(np.asarray(arr, dtype="<f4")).tobytes()
        shape = ",".join(str(d) for d in np.shape(arr)) or "scalar"
        lines.append(f"tensor {name} f32 {shape} {offset} {len(data)}")
        blobs.append(data)
        offset += len(data)
    for key, value in (meta or {}).items():
        if not key or any(c.isspace() for c in key) or "\n" in str(value):
            raise ArchiveError(f"invalid meta entry {key!r}")
        lines.append(f"meta {key} {value}")
    lines.append("end")
    payload = ("\n".join(lines) + "\n").encode("ascii") + b"".join(blobs)
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    fd, tmp = tempfile.mkstemp(dir=path.parent, prefix=path.name, suffix=".tmp")
    try:
        with os.fdopen(fd, "wb") as fh:
            fh.write(payload)
        os.replace(tmp, path)
    except BaseException:
        if os.path.exists(tmp):
            os.unlink(tmp)
        raise


def read_archive(path: str | Path) -> tuple[dict[str, np.ndarray], dict[str, str]]:
    raw = Path(path).read_bytes()
    marker = raw.find(b"\nend\n")
    if not raw.startswith(MAGIC.encode() + b"\n") or marker < 0:
        raise ArchiveError(f"{path}: not a weight archive (bad magic or missing end marker)")
    header = raw[:marker].decode("ascii").split("\n")[1:]
    blob = raw[marker + len(b"\nend\n") :]
    tensors: dict[str, np.ndarray] = {}
    meta: dict[str, str] = {}
    expected = 0
    for line in header:
        kind, _, rest = line.partition(" ")
        if kind == "meta":
            key, _, value = rest.partition(" ")
            meta[key] = value
            continue
        if kind != "tensor":
            raise ArchiveError(f"{path}: unexpected header line {line!r}")
        try:
            name, dtype, shape_s, off_s, len_s = rest.split(" ")
            off, nbytes = int(off_s), int(len_s)
        except ValueError:
            raise ArchiveError(f"{path}: malformed tensor line {line!r}") from None
        if dtype != "f32":
            raise ArchiveError(f"{path}: unsupported dtype {dtype} for {name}")
        shape = () if shape_s == "scalar" else tuple(int(d) for d in shape_s.split(","))
        if nbytes != 4 * int(np.prod(shape, dtype=np.int64)):
            raise ArchiveError(f"{path}: {name} declares {nbytes} bytes for shape {shape}")
        if off + nbytes > len(blob):
            raise ArchiveError(f"{path}: {name} runs past the end of the blob section")
        tensors[name] = np.frombuffer(blob, dtype="<f4", count=nbytes // 4, offset=off).astype(np.float32).reshape(shape)
        expected += nbytes
    if expected != len(blob):
        raise ArchiveError(f"{path}: manifest covers {expected} bytes but blob section has {len(blob)}")
    return tensors, meta
