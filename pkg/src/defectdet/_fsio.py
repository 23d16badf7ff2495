"""Atomic file writes: everything lands fully or not at all."""

import os
from pathlib import Path


def atomic_write_bytes(path, data: bytes):
    """Write via a sibling temp file and rename, so readers never see a
    partial file and a crash leaves the old content intact."""
    path = Path(path)
    tmp = path.with_name(path.name + ".tmp")
    with open(tmp, "wb") as f:
        f.write(data)
        f.flush()
        os.fsync(f.fileno())
    os.replace(tmp, path)


def atomic_write_text(path, text: str):
    atomic_write_bytes(path, text.encode("utf-8"))
