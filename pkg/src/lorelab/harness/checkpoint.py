"""Binary checkpoints for encoder, multiplier network and prototype head.

Layout: ``b"LORE"``, a u8 version, then one group per named array:
u32 name length, UTF-8 name, u32 rank, rank x u32 dims, float32 payload.
All integers and floats are little-endian.
"""

from __future__ import annotations

import os
import struct
import tempfile
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from ..models import DualNetParams, EncoderParams, PrototypeHead, ScalarDual

MAGIC = b"LORE"
VERSION = 1
DUAL_NAMES = ("dual.0.weight", "dual.0.bias", "dual.1.weight", "dual.1.bias")


class CheckpointError(ValueError):
    pass


@dataclass
class Checkpoint:
    theta: EncoderParams
    omega: DualNetParams | ScalarDual | None
    head: PrototypeHead | None
    theta0: EncoderParams | None = None


def encode_groups(groups: list[tuple[str, np.ndarray]]) -> bytes:
    parts = [MAGIC, struct.pack("<B", VERSION)]
    for name, array in groups:
        a = np.ascontiguousarray(array, dtype="<f4")
        raw = name.encode("utf-8")
        parts.append(struct.pack("<I", len(raw)) + raw)
        parts.append(struct.pack("<I", a.ndim) + struct.pack(f"<{a.ndim}I", *a.shape))
        parts.append(a.tobytes())
    return b"".join(parts)


def decode_groups(buf: bytes) -> list[tuple[str, np.ndarray]]:
    if len(buf) < 5 or buf[:4] != MAGIC:
        raise CheckpointError("bad magic")
    if buf[4] != VERSION:
        raise CheckpointError(f"version mismatch: file has {buf[4]}, reader supports {VERSION}")
    pos, out = 5, []

    def take(n):
        nonlocal pos
        if pos + n > len(buf):
            raise CheckpointError("truncated payload")
        chunk = buf[pos:pos + n]
        pos += n
        return chunk

    while pos < len(buf):
        (name_len,) = struct.unpack("<I", take(4))
        name = take(name_len).decode("utf-8")
        (rank,) = struct.unpack("<I", take(4))
        dims = struct.unpack(f"<{rank}I", take(4 * rank))
        count = int(np.prod(dims, dtype=np.int64))
        data = np.frombuffer(take(4 * count), dtype="<f4").astype(np.float32).reshape(dims)
        out.append((name, data))
    return out


def _groups(ckpt: Checkpoint) -> list[tuple[str, np.ndarray]]:
    groups = ckpt.theta.named()
    if ckpt.theta0 is not None:
        groups += [("reference" + n[len("encoder"):], a) for n, a in ckpt.theta0.named()]
    if ckpt.omega is not None:
        groups += ckpt.omega.named()
    if ckpt.head is not None:
        groups += [("head.prototypes", ckpt.head.prototypes), ("head.tau", np.array([ckpt.head.tau]))]
    return groups


def _encoder(table: dict, prefix: str) -> EncoderParams | None:
    weights, biases, i = [], [], 0
    while f"{prefix}.{i}.weight" in table:
        weights.append(table[f"{prefix}.{i}.weight"])
        biases.append(table.get(f"{prefix}.{i}.bias"))
        i += 1
    if not weights:
        return None
    if any(b is None for b in biases):
        raise CheckpointError(f"{prefix}: missing bias group")
    try:
        return EncoderParams(weights, biases)
    except ValueError as exc:
        raise CheckpointError(f"dim mismatch in {prefix}: {exc}") from exc


def save_checkpoint(path, theta: EncoderParams, omega=None, head: PrototypeHead | None = None,
                    theta0: EncoderParams | None = None) -> None:
    """Write atomically: a temp file in the target directory, then rename."""
    write_atomic(path, encode_groups(_groups(Checkpoint(theta, omega, head, theta0))))


def load_checkpoint(path, dims=None) -> Checkpoint:
    """Read a checkpoint; ``dims`` optionally declares the expected encoder widths."""
    table = dict(decode_groups(Path(path).read_bytes()))
    theta = _encoder(table, "encoder")
    if theta is None:
        raise CheckpointError("no encoder groups")
    if dims is not None and list(dims) != theta.dims:
        raise CheckpointError(f"dim mismatch: declared {list(dims)}, file has {theta.dims}")
    theta0 = _encoder(table, "reference")
    if theta0 is not None and theta0.dims != theta.dims:
        raise CheckpointError(f"dim mismatch: reference {theta0.dims} vs encoder {theta.dims}")

    omega = None
    try:
        if "dual.scalar" in table:
            omega = ScalarDual(table["dual.scalar"])
        elif "dual.0.weight" in table:
            omega = DualNetParams(*(table[n] for n in DUAL_NAMES))
            if omega.embed_dim != theta.embed_dim:
                raise CheckpointError(f"dim mismatch: dual input {omega.embed_dim} vs embedding {theta.embed_dim}")
    except (KeyError, ValueError) as exc:
        if isinstance(exc, CheckpointError):
            raise
        raise CheckpointError(f"bad dual groups: {exc}") from exc

    head = None
    if "head.prototypes" in table:
        protos = table["head.prototypes"]
        if protos.ndim != 2 or protos.shape[1] != theta.embed_dim:
            raise CheckpointError(f"dim mismatch: prototypes {protos.shape} vs embedding {theta.embed_dim}")
        head = PrototypeHead(protos, float(table["head.tau"].reshape(-1)[0]))
    return Checkpoint(theta, omega, head, theta0)


def write_atomic(path, data: bytes | str) -> None:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    fd, tmp = tempfile.mkstemp(dir=path.parent, prefix=f".{path.name}.")
    try:
        with os.fdopen(fd, "wb") as fh:
            fh.write(data.encode("utf-8") if isinstance(data, str) else data)
        os.replace(tmp, path)
    except BaseException:
        if os.path.exists(tmp):
            os.unlink(tmp)
        raise
