"""Versioned binary checkpoints.

Layout (little-endian):
    magic "MVCF" | u32 version | u32 header_len | header JSON (utf-8)
    | parameter blocks (float32, manifest order) | u32 CRC32

The header carries the model topology, parameter manifest, training state
and config snapshot, so a checkpoint rebuilds the model without external
context.  The CRC covers all preceding bytes.  Parameters are stored in
32 bits; the documented round-trip loss on metrics is <= 1e-4 relative.
"""

from __future__ import annotations

import json
import struct
import zlib

import numpy as np

MAGIC = b"MVCF"
VERSION = 1


class CheckpointError(RuntimeError):
    """Unreadable, corrupt, or incompatible checkpoint."""


def save_checkpoint(path, model, epoch=0, optimizer_state=None, config=None):
    from .model import MVAEModel  # local import to avoid a cycle

    assert isinstance(model, MVAEModel)
    manifest = [[name, list(t.shape)] for name, t in model.params.items()]
    opt_blocks = []
    opt_header = None
    if optimizer_state is not None:
        opt_header = {"t": optimizer_state["t"], "keys": sorted(optimizer_state["m"])}
        for key in opt_header["keys"]:
            opt_blocks.append(np.asarray(optimizer_state["m"][key], dtype="<f4"))
            opt_blocks.append(np.asarray(optimizer_state["v"][key], dtype="<f4"))

    header = {
        "topology": model.topology(),
        "manifest": manifest,
        "train_state": {"epoch": int(epoch), "optimizer": opt_header},
        "config": config or {},
    }
    header_bytes = json.dumps(header, sort_keys=True).encode("utf-8")

    body = bytearray()
    body += MAGIC
    body += struct.pack("<I", VERSION)
    body += struct.pack("<I", len(header_bytes))
    body += header_bytes
    for name, _ in manifest:
        body += np.ascontiguousarray(model.params[name].data, dtype="<f4").tobytes()
    for block in opt_blocks:
        body += np.ascontiguousarray(block).tobytes()
    body += struct.pack("<I", zlib.crc32(bytes(body)) & 0xFFFFFFFF)
    with open(path, "wb") as fh:
        fh.write(bytes(body))


def load_checkpoint(path):
    """Returns (model, train_state dict, config dict)."""
    from .model import MVAEModel

    with open(path, "rb") as fh:
        raw = fh.read()
    if len(raw) < 16 or raw[:4] != MAGIC:
        raise CheckpointError(f"{path}: missing MVCF magic")
    stored_crc = struct.unpack("<I", raw[-4:])[0]
    if zlib.crc32(raw[:-4]) & 0xFFFFFFFF != stored_crc:
        raise CheckpointError(f"{path}: checksum mismatch")
    version = struct.unpack("<I", raw[4:8])[0]
    if version != VERSION:
        raise CheckpointError(f"{path}: unsupported version {version}")
    header_len = struct.unpack("<I", raw[8:12])[0]
    header = json.loads(raw[12 : 12 + header_len].decode("utf-8"))

    model = MVAEModel.from_topology(header["topology"])
    offset = 12 + header_len
    for name, shape in header["manifest"]:
        count = int(np.prod(shape)) if shape else 1
        block = np.frombuffer(raw, dtype="<f4", count=count, offset=offset)
        offset += 4 * count
        if name not in model.params:
            raise CheckpointError(f"{path}: unknown parameter {name!r}")
        model.params[name].data = block.astype(np.float64).reshape(shape)

    train_state = header["train_state"]
    opt_header = train_state.get("optimizer")
    if opt_header is not None:
        m, v = {}, {}
        shapes = dict((n, s) for n, s in header["manifest"])
        for key in opt_header["keys"]:
            count = int(np.prod(shapes[key])) if shapes[key] else 1
            m[key] = np.frombuffer(raw, dtype="<f4", count=count, offset=offset)
            m[key] = m[key].astype(np.float64).reshape(shapes[key])
            offset += 4 * count
            v[key] = np.frombuffer(raw, dtype="<f4", count=count, offset=offset)
            v[key] = v[key].astype(np.float64).reshape(shapes[key])
            offset += 4 * count
        train_state = {
            "epoch": train_state["epoch"],
            "optimizer": {"t": opt_header["t"], "m": m, "v": v},
        }
    if offset != len(raw) - 4:
        raise CheckpointError(
            f"{path}: trailing bytes (offset {offset}, payload ends {len(raw) - 4})"
        )
    return model, train_state, header.get("config", {})
