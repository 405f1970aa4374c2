"""Binary checkpoint format.

Layout (all integers little-endian)::

    b"P2I1"                      magic
    32 bytes                     SHA-256 of the network spec
    repeated, conv ids sorted:
        uint32 id length, id bytes (utf-8)
        4 x uint32 kernel extents (C_out, C_in, k_h, k_w)
        float32 kernels (C-order), then float32 biases
"""

from __future__ import annotations

import hashlib
import struct

import numpy as np

from .graph import ParameterSet, check_params
from .ops import LayerParams

MAGIC = b"P2I1"


class CheckpointError(ValueError):
    pass


def dumps(params, spec_hash):
    if len(spec_hash) != 32:
        raise CheckpointError("spec hash must be 32 bytes")
    parts = [MAGIC, bytes(spec_hash)]
    for key in sorted(params):
        p = params[key]
        name = key.encode("utf-8")
        parts.append(struct.pack("<I", len(name)))
        parts.append(name)
        parts.append(struct.pack("<4I", *p.kernels.shape))
        parts.append(np.ascontiguousarray(p.kernels, dtype="<f4").tobytes())
        parts.append(np.ascontiguousarray(p.biases, dtype="<f4").tobytes())
    return b"".join(parts)


def loads(blob):
    """Parse checkpoint bytes into ``(ParameterSet, spec_hash)``."""
    if blob[:4] != MAGIC:
        raise CheckpointError("not a checkpoint file (bad magic)")
    if len(blob) < 36:
        raise CheckpointError("truncated checkpoint header")
    spec_hash = blob[4:36]
    pos = 36
    params = ParameterSet()
    try:
        while pos < len(blob):
            (n,) = struct.unpack_from("<I", blob, pos)
            pos += 4
            key = blob[pos : pos + n].decode("utf-8")
            pos += n
            shape = struct.unpack_from("<4I", blob, pos)
            pos += 16
            count = int(np.prod(shape))
            kernels = np.frombuffer(blob, dtype="<f4", count=count, offset=pos).reshape(shape)
            pos += 4 * count
            biases = np.frombuffer(blob, dtype="<f4", count=shape[0], offset=pos)
            pos += 4 * shape[0]
            params[key] = LayerParams(kernels.astype(np.float32), biases.astype(np.float32))
    except (struct.error, ValueError) as exc:
        raise CheckpointError(f"corrupt checkpoint: {exc}") from exc
    return params, spec_hash


def save(path, params, spec):
    blob = dumps(params, spec.hash())
    with open(path, "wb") as fh:
        fh.write(blob)
    return hashlib.sha256(blob).hexdigest()


def load(path, spec=None):
    """Read a checkpoint; when ``spec`` is given, its hash and shapes must match."""
    with open(path, "rb") as fh:
        params, spec_hash = loads(fh.read())
    if spec is not None:
        if spec_hash != spec.hash():
            raise CheckpointError(
                f"{path}: checkpoint was written for a different network spec"
            )
        check_params(spec, params)
    return params


def file_hash(path):
    with open(path, "rb") as fh:
        return hashlib.sha256(fh.read()).hexdigest()
