"""Binary training-state checkpoints with bit-exact round-trips.

Layout: magic "DKPT", a u32 format version, a length-prefixed JSON manifest
naming every tensor (kind, name, dtype, shape), the raw little-endian
float64 payloads in manifest order, and a length-prefixed JSON footer
holding iteration, phase, sampler state, RNG state, and the config hash.
Tensor names are sorted, JSON is canonical, and writes are atomic, so
save(load(save(x))) is byte-identical and a crash never leaves a torn file.
"""

import io
import json
import struct
from dataclasses import dataclass, field

import numpy as np

from ._fsio import atomic_write_bytes
from .errors import CheckpointError

MAGIC = b"DKPT"
VERSION = 1
_DTYPE = "<f8"


@dataclass
class TrainState:
    """Everything needed to continue training exactly where it stopped."""
    params: dict                 # name -> float64 ndarray
    velocity: dict               # name -> float64 ndarray (zeros if untouched)
    rng_state: dict              # numpy BitGenerator state
    iteration: int = 0
    phase: str = ""
    epoch_order: np.ndarray = field(default_factory=lambda: np.empty(0, np.intp))
    cursor: int = 0
    config_hash: str = ""


def _canonical(obj):
    return json.dumps(obj, sort_keys=True, separators=(",", ":")).encode("utf-8")


def save_checkpoint(state: TrainState, path):
    names = sorted(state.params)
    entries = []
    payloads = []
    for kind, table in (("param", state.params), ("velocity", state.velocity)):
        for name in names:
            arr = table.get(name)
            if arr is None:
                arr = np.zeros_like(state.params[name])
            arr = np.ascontiguousarray(arr, dtype=np.float64)
            entries.append({"kind": kind, "name": name, "dtype": _DTYPE,
                            "shape": list(arr.shape)})
            payloads.append(arr.astype(_DTYPE, copy=False).tobytes())
    manifest = _canonical({"tensors": entries})
    order = state.epoch_order
    footer = _canonical({
        "iteration": int(state.iteration),
        "phase": state.phase,
        "cursor": int(state.cursor),
        "epoch_order": [int(i) for i in np.asarray(order).reshape(-1)],
        "rng_state": state.rng_state,
        "config_hash": state.config_hash,
    })
    buf = io.BytesIO()
    buf.write(MAGIC)
    buf.write(struct.pack("<I", VERSION))
    buf.write(struct.pack("<I", len(manifest)))
    buf.write(manifest)
    for p in payloads:
        buf.write(p)
    buf.write(struct.pack("<I", len(footer)))
    buf.write(footer)
    atomic_write_bytes(path, buf.getvalue())


def _read_exact(f, n, what):
    data = f.read(n)
    if len(data) != n:
        raise CheckpointError(f"truncated checkpoint: short read in {what}")
    return data


def load_checkpoint(path) -> TrainState:
    """Parse and validate a checkpoint; any corruption raises, nothing partial."""
    with open(path, "rb") as f:
        if _read_exact(f, 4, "magic") != MAGIC:
            raise CheckpointError(f"{path}: not a checkpoint file (bad magic)")
        (version,) = struct.unpack("<I", _read_exact(f, 4, "version"))
        if version != VERSION:
            raise CheckpointError(
                f"{path}: unsupported checkpoint version {version} "
                f"(expected {VERSION})")
        (mlen,) = struct.unpack("<I", _read_exact(f, 4, "manifest length"))
        try:
            manifest = json.loads(_read_exact(f, mlen, "manifest"))
        except json.JSONDecodeError as e:
            raise CheckpointError(f"{path}: corrupt manifest ({e.msg})") from e
        params, velocity = {}, {}
        for entry in manifest.get("tensors", []):
            kind, name = entry.get("kind"), entry.get("name")
            dtype, shape = entry.get("dtype"), tuple(entry.get("shape", ()))
            if kind not in ("param", "velocity") or dtype != _DTYPE:
                raise CheckpointError(
                    f"{path}: bad manifest entry {name!r} ({kind}/{dtype})")
            nbytes = int(np.prod(shape, dtype=np.int64)) * 8
            raw = _read_exact(f, nbytes, f"tensor {name}")
            arr = np.frombuffer(raw, dtype=_DTYPE).reshape(shape).copy()
            (params if kind == "param" else velocity)[name] = arr
        (flen,) = struct.unpack("<I", _read_exact(f, 4, "footer length"))
        try:
            footer = json.loads(_read_exact(f, flen, "footer"))
        except json.JSONDecodeError as e:
            raise CheckpointError(f"{path}: corrupt footer ({e.msg})") from e
        if f.read(1):
            raise CheckpointError(f"{path}: trailing bytes after footer")
    if set(params) != set(velocity):
        raise CheckpointError(f"{path}: param/velocity name mismatch")
    return TrainState(
        params=params,
        velocity=velocity,
        rng_state=footer["rng_state"],
        iteration=int(footer["iteration"]),
        phase=footer["phase"],
        epoch_order=np.asarray(footer["epoch_order"], dtype=np.intp),
        cursor=int(footer["cursor"]),
        config_hash=footer["config_hash"],
    )


def generator_from_state(rng_state) -> np.random.Generator:
    """Rebuild the exact generator a checkpoint captured."""
    bg = np.random.PCG64()
    bg.state = rng_state
    return np.random.Generator(bg)


def generator_state(rng: np.random.Generator) -> dict:
    return rng.bit_generator.state
