"""Binary model checkpoints.

Layout, all integers and floats little-endian::

    b"PGNNCKPT"                 magic, 8 bytes
    uint32                      format version (1)
    uint64                      header length in bytes
    header                      UTF-8 JSON, keys sorted
    float64[...]                member 1 tensors in declared order, C order,
                                then member 2, ...
    float64[F], float64[F]      feature means, feature stds (if present)
    sha256                      32-byte digest of everything above

The header holds ``net`` (layers, hidden, lr, seed, max_epochs),
``feature_dim``, ``n_members``, ``tensors`` (``[name, shape]`` pairs in
declared order), ``feature_names`` (or null when no statistics are stored)
and ``graph`` (epsilon, decoy prefix).
"""
from __future__ import annotations

import hashlib
import json
import struct
from dataclasses import asdict

import numpy as np

from .gnn import ModelParams, NetConfig, param_shapes
from .graph import GraphBuildConfig
from .psm import FeatureStats
from .trainer import ModelEnsemble

MAGIC = b"PGNNCKPT"
VERSION = 1
_F8 = np.dtype("<f8")


class CheckpointError(ValueError):
    pass


def dumps(ensemble: ModelEnsemble, graph_config: GraphBuildConfig | None = None) -> bytes:
    first = ensemble.members[0]
    stats = ensemble.feature_stats
    header = {
        "net": asdict(ensemble.net),
        "feature_dim": first.feature_dim,
        "n_members": len(ensemble.members),
        "tensors": [[n, list(s)] for n, s in param_shapes(first.layers, first.hidden, first.feature_dim)],
        "feature_names": list(stats.feature_names) if stats is not None else None,
        "graph": asdict(graph_config or GraphBuildConfig()),
    }
    head = json.dumps(header, sort_keys=True, separators=(",", ":")).encode()
    parts = [MAGIC, struct.pack("<IQ", VERSION, len(head)), head]
    for member in ensemble.members:
        member.check_shapes()
        for name in member.names():
            parts.append(np.ascontiguousarray(member[name], dtype=_F8).tobytes())
    if stats is not None:
        parts.append(np.asarray(stats.mean, dtype=_F8).tobytes())
        parts.append(np.asarray(stats.std, dtype=_F8).tobytes())
    body = b"".join(parts)
    return body + hashlib.sha256(body).digest()


def loads(data: bytes) -> tuple[ModelEnsemble, GraphBuildConfig]:
    if len(data) < len(MAGIC) + 12 + 32 or data[: len(MAGIC)] != MAGIC:
        raise CheckpointError("not a protgnn checkpoint")
    body, digest = data[:-32], data[-32:]
    if hashlib.sha256(body).digest() != digest:
        raise CheckpointError("checksum mismatch; checkpoint is corrupt")
    version, head_len = struct.unpack_from("<IQ", body, len(MAGIC))
    if version != VERSION:
        raise CheckpointError(f"unsupported checkpoint version {version}")
    off = len(MAGIC) + 12
    try:
        header = json.loads(body[off : off + head_len])
    except ValueError as exc:
        raise CheckpointError(f"unreadable header: {exc}") from None
    off += head_len
    payload = np.frombuffer(body, dtype=_F8, offset=off)

    net = NetConfig(**header["net"])
    feature_dim = header["feature_dim"]
    shapes = [(n, tuple(s)) for n, s in header["tensors"]]
    if shapes != param_shapes(net.layers, net.hidden, feature_dim):
        raise CheckpointError("tensor layout does not match the network configuration")
    pos = 0
    members = []
    for _ in range(header["n_members"]):
        tensors = {}
        for name, shape in shapes:
            size = int(np.prod(shape))
            tensors[name] = payload[pos : pos + size].reshape(shape).copy()
            pos += size
        members.append(ModelParams(net.layers, net.hidden, feature_dim, tensors))
    stats = None
    if header["feature_names"] is not None:
        n = len(header["feature_names"])
        stats = FeatureStats(
            tuple(header["feature_names"]),
            payload[pos : pos + n].copy(),
            payload[pos + n : pos + 2 * n].copy(),
        )
        pos += 2 * n
    if pos != len(payload):
        raise CheckpointError("payload size does not match header")
    return ModelEnsemble(members, net, stats), GraphBuildConfig(**header["graph"])


def save(path, ensemble: ModelEnsemble, graph_config: GraphBuildConfig | None = None) -> None:
    with open(path, "wb") as fh:
        fh.write(dumps(ensemble, graph_config))


def load(path) -> tuple[ModelEnsemble, GraphBuildConfig]:
    with open(path, "rb") as fh:
        return loads(fh.read())
