"""On-disk formats.

``FHT1`` binary layout (all integers little-endian ``uint32`` unless noted)::

    b"FHT1"                 magic
    uint8                   version (1)
    L
    uint8                   has control leg
    n_legs                  = 2**L (+1 with control leg)
    n_legs x (float64 lo, float64 hi, uint32 n)   leaf bases, then control basis
    n_nodes
    n_nodes x (level, block, ndim, ndim x extent)
    payloads                float64, row-major, node-table order

Sample sets are flat little-endian float64 records of ``2d + 2`` fields
``(x_1, x'_1, ..., x_d, x'_d, o, r)`` with a JSON sidecar.
"""

from __future__ import annotations

import io
import json
import struct
from pathlib import Path

import numpy as np

from .basis import legendre_basis
from .fht import FHT, DyadicTree

MAGIC = b"FHT1"
VERSION = 1


class FormatError(ValueError):
    pass


def fht_to_bytes(f: FHT) -> bytes:
    t = f.tree
    buf = io.BytesIO()
    buf.write(MAGIC)
    buf.write(struct.pack("<BIB", VERSION, t.L, 1 if t.has_control else 0))
    legs = list(f.leaf_bases) + ([f.root_basis] if f.root_basis is not None else [])
    buf.write(struct.pack("<I", len(legs)))
    for b in legs:
        buf.write(struct.pack("<ddI", b.lo, b.hi, b.n))
    buf.write(struct.pack("<I", t.n_nodes))
    for i, c in enumerate(f.cores):
        buf.write(struct.pack("<III", t.level(i), t.block(i), c.ndim))
        buf.write(struct.pack(f"<{c.ndim}I", *c.shape))
    for c in f.cores:
        buf.write(np.ascontiguousarray(c, dtype="<f8").tobytes())
    return buf.getvalue()


def fht_from_bytes(data: bytes) -> FHT:
    if data[:4] != MAGIC:
        raise FormatError("not an FHT1 stream")
    off = 4
    version, L, has_ctrl = struct.unpack_from("<BIB", data, off)
    off += struct.calcsize("<BIB")
    if version != VERSION:
        raise FormatError(f"unsupported FHT1 version {version}")
    (n_legs,) = struct.unpack_from("<I", data, off)
    off += 4
    bases = []
    for _ in range(n_legs):
        lo, hi, n = struct.unpack_from("<ddI", data, off)
        off += struct.calcsize("<ddI")
        bases.append(legendre_basis(n - 1, lo, hi))
    (n_nodes,) = struct.unpack_from("<I", data, off)
    off += 4
    shapes = []
    levels = []
    for _ in range(n_nodes):
        lvl, _blk, ndim = struct.unpack_from("<III", data, off)
        off += 12
        levels.append(lvl)
        shapes.append(struct.unpack_from(f"<{ndim}I", data, off))
        off += 4 * ndim
    cores = []
    for s in shapes:
        size = int(np.prod(s)) if s else 1
        cores.append(np.frombuffer(data, dtype="<f8", count=size, offset=off).reshape(s).astype(float))
        off += 8 * size
    if off != len(data):
        raise FormatError("trailing bytes in FHT1 stream")
    d = 1 << L
    leaf_bases = tuple(bases[:d])
    root_basis = bases[d] if has_ctrl else None
    ranks = [0] * n_nodes
    for i in range(1, n_nodes):
        ranks[i] = shapes[i][0] if levels[i] == L else shapes[i][2]
    tree = DyadicTree(L, tuple(b.n for b in leaf_bases), tuple(ranks), root_basis.n if root_basis else None)
    return FHT(tree, cores, leaf_bases, root_basis)


def save_fht(f: FHT, path) -> None:
    Path(path).write_bytes(fht_to_bytes(f))


def load_fht(path) -> FHT:
    return fht_from_bytes(Path(path).read_bytes())


def save_samples(path, z: np.ndarray, o: np.ndarray, r: np.ndarray, meta: dict) -> None:
    """Write transition samples (interlaced states, action, cost) plus a JSON sidecar."""
    z = np.asarray(z, dtype=float)
    rec = np.column_stack([z, np.asarray(o, dtype=float), np.asarray(r, dtype=float)])
    path = Path(path)
    path.write_bytes(rec.astype("<f8").tobytes())
    side = dict(meta)
    side.update({"d": z.shape[1] // 2, "count": int(rec.shape[0]), "fields": int(rec.shape[1])})
    path.with_suffix(path.suffix + ".json").write_text(json.dumps(side, indent=2, sort_keys=True))


def load_samples(path) -> tuple[np.ndarray, np.ndarray, np.ndarray, dict]:
    path = Path(path)
    meta = json.loads(path.with_suffix(path.suffix + ".json").read_text())
    rec = np.frombuffer(path.read_bytes(), dtype="<f8").reshape(-1, meta["fields"]).astype(float)
    d = meta["d"]
    return rec[:, : 2 * d], rec[:, 2 * d], rec[:, 2 * d + 1], meta
