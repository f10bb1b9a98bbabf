"""Atomic, deterministic file output."""

from __future__ import annotations

import csv
import hashlib
import io
import json
import os
import tempfile
from pathlib import Path
from typing import Iterable, Mapping, Sequence


def dumps(obj) -> str:
    return json.dumps(obj, sort_keys=True, separators=(",", ":"))


def write_text_atomic(path: Path | str, text: str) -> bool:
    """Write via temp file + rename. Returns False when the file already holds ``text``."""
    path = Path(path)
    data = text.encode()
    if path.exists() and hashlib.sha256(path.read_bytes()).digest() == hashlib.sha256(data).digest():
        return False
    path.parent.mkdir(parents=True, exist_ok=True)
    fd, tmp = tempfile.mkstemp(dir=path.parent, prefix=f".{path.name}.", suffix=".tmp")
    try:
        with os.fdopen(fd, "wb") as f:
            f.write(data)
        os.replace(tmp, path)
    except BaseException:
        if os.path.exists(tmp):
            os.unlink(tmp)
        raise
    return True


def write_json(path, obj) -> bool:
    return write_text_atomic(path, dumps(obj) + "\n")


def read_json(path):
    with open(path) as f:
        return json.load(f)


def write_jsonl(path, records: Iterable[Mapping]) -> bool:
    return write_text_atomic(path, "".join(dumps(r) + "\n" for r in records))


def read_jsonl(path) -> list[dict]:
    with open(path) as f:
        return [json.loads(line) for line in f if line.strip()]


def write_csv(path, header: Sequence[str], rows: Iterable[Sequence]) -> bool:
    buf = io.StringIO()
    w = csv.writer(buf, lineterminator="\n")
    w.writerow(header)
    for row in rows:
        w.writerow([f"{v:.6f}" if isinstance(v, float) else v for v in row])
    return write_text_atomic(path, buf.getvalue())


def file_digest(path) -> str:
    return hashlib.sha256(Path(path).read_bytes()).hexdigest()
