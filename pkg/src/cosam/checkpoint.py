"""Binary checkpoint container.

Layout (all integers and floats little-endian)::

    magic      8 bytes   b"COSAM01\\0"
    version    u32       1
    nsections  u32
    table      nsections x (tag: 4 ASCII bytes, offset: u64, length: u64)
    payloads   concatenated in table order

Sections:

    CONF  UTF-8 ``key = value`` training config
    FPRT  32-byte SHA-256 of the dataset's user and item vocab files
    SAMP  c1 f64, c2 f64, l_max u32, multiplier f64, edge count u64,
          logits f32[edge count] in the graph's CSR edge order (optional)
    RECO  d u32, n u32, m u32, reg f64, user embeddings f32[n*d],
          item embeddings f32[m*d], both row-major
"""

from __future__ import annotations

import hashlib
import struct
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from .graph import InteractionGraph
from .recommender import RecommenderModel
from .sampler import SamplerConfig, SamplerModel

MAGIC = b"COSAM01\0"
VERSION = 1
_ENTRY = struct.Struct("<4sQQ")


class CheckpointError(ValueError):
    pass


@dataclass
class Checkpoint:
    config_text: str
    fingerprint: bytes
    recommender: RecommenderModel
    sampler_config: SamplerConfig | None = None
    logits: np.ndarray | None = None

    def sampler_model(self, graph: InteractionGraph) -> SamplerModel | None:
        if self.logits is None:
            return None
        if len(self.logits) != len(graph.indices):
            raise CheckpointError(
                f"checkpoint has {len(self.logits)} edge logits, graph has {len(graph.indices)}")
        return SamplerModel(graph, self.sampler_config, self.logits.astype(np.float64))


def fingerprint_files(*paths) -> bytes:
    h = hashlib.sha256()
    for p in paths:
        h.update(Path(p).read_bytes())
    return h.digest()


def _f32(a: np.ndarray) -> bytes:
    return np.ascontiguousarray(a, dtype="<f4").tobytes()


def encode(ckpt: Checkpoint) -> bytes:
    rec = ckpt.recommender
    sections = [(b"CONF", ckpt.config_text.encode("utf-8")), (b"FPRT", ckpt.fingerprint)]
    if ckpt.logits is not None:
        c = ckpt.sampler_config
        head = struct.pack("<ddIdQ", c.c1, c.c2, c.l_max, c.candidate_multiplier, len(ckpt.logits))
        sections.append((b"SAMP", head + _f32(ckpt.logits)))
    head = struct.pack("<IIId", rec.dim, rec.n, rec.m, rec.reg)
    sections.append((b"RECO", head + _f32(rec.user_emb) + _f32(rec.item_emb)))

    offset = len(MAGIC) + 8 + _ENTRY.size * len(sections)
    table, body = b"", b""
    for tag, payload in sections:
        table += _ENTRY.pack(tag, offset, len(payload))
        body += payload
        offset += len(payload)
    return MAGIC + struct.pack("<II", VERSION, len(sections)) + table + body


def decode(blob: bytes) -> Checkpoint:
    if blob[:len(MAGIC)] != MAGIC:
        raise CheckpointError("not a checkpoint (bad magic)")
    version, count = struct.unpack_from("<II", blob, len(MAGIC))
    if version != VERSION:
        raise CheckpointError(f"unsupported checkpoint version {version}")
    sections = {}
    for k in range(count):
        tag, off, length = _ENTRY.unpack_from(blob, len(MAGIC) + 8 + k * _ENTRY.size)
        if off + length > len(blob):
            raise CheckpointError(f"section {tag!r} runs past end of file")
        sections[tag] = blob[off:off + length]
    for tag in (b"CONF", b"FPRT", b"RECO"):
        if tag not in sections:
            raise CheckpointError(f"missing section {tag.decode()}")

    reco = sections[b"RECO"]
    d, n, m, reg = struct.unpack_from("<IIId", reco)
    arr = np.frombuffer(reco, dtype="<f4", offset=struct.calcsize("<IIId")).astype(np.float64)
    if len(arr) != (n + m) * d:
        raise CheckpointError("recommender section has the wrong size")
    rec = RecommenderModel(arr[:n * d].reshape(n, d).copy(), arr[n * d:].reshape(m, d).copy(),
                           reg=reg)

    scfg, logits = None, None
    if b"SAMP" in sections:
        samp = sections[b"SAMP"]
        c1, c2, l_max, mult, edges = struct.unpack_from("<ddIdQ", samp)
        scfg = SamplerConfig(c1, c2, l_max, mult)
        logits = np.frombuffer(samp, dtype="<f4", offset=struct.calcsize("<ddIdQ")).astype(np.float64)
        if len(logits) != edges:
            raise CheckpointError("sampler section has the wrong size")
    return Checkpoint(sections[b"CONF"].decode("utf-8"), sections[b"FPRT"], rec, scfg, logits)


def save(path, ckpt: Checkpoint) -> None:
    Path(path).write_bytes(encode(ckpt))


def load(path, expected_fingerprint: bytes | None = None) -> Checkpoint:
    ckpt = decode(Path(path).read_bytes())
    if expected_fingerprint is not None and ckpt.fingerprint != expected_fingerprint:
        raise CheckpointError("checkpoint was trained on a different dataset (fingerprint mismatch)")
    return ckpt
