"""Snippet-embedding index: exact cosine top-k plus a random-hyperplane
LSH accelerator with exact rerank and an exhaustive-scan fallback."""

from __future__ import annotations

import json
import struct
from dataclasses import dataclass

import numpy as np

from . import numerics as nm
from .model import ModelConfig, ModelParams, encode

INDEX_MAGIC = b"Q2QI"
INDEX_VERSION = 1

# below this corpus size an exhaustive scan beats bucket probing outright
SMALL_CORPUS_EXACT = 50_000


@dataclass
class LshConfig:
    n_tables: int = 8
    n_planes: int = 16


@dataclass
class EmbeddingIndex:
    C: np.ndarray  # (s, d), rows unit-normalized
    meta: list[dict]  # per-row {post_id, title, url}

    def __post_init__(self):
        if self.C.ndim != 2 or len(self.meta) != self.C.shape[0]:
            raise ValueError("embedding matrix and metadata rows disagree")


class LshIndex:
    """Random-hyperplane signatures; each row lands in one bucket per table."""

    def __init__(self, d: int, config: LshConfig, seed: int):
        self.config = config
        self.seed = seed
        rng = nm.make_rng(seed)
        self.hyperplanes = rng.standard_normal((config.n_tables, config.n_planes, d))
        self.buckets: list[dict[int, list[int]]] = [{} for _ in range(config.n_tables)]

    def signature(self, vec: np.ndarray, table: int) -> int:
        bits = self.hyperplanes[table] @ vec >= 0.0
        sig = 0
        for b in bits:
            sig = (sig << 1) | int(b)
        return sig

    def insert(self, row_id: int, vec: np.ndarray):
        for t in range(self.config.n_tables):
            self.buckets[t].setdefault(self.signature(vec, t), []).append(row_id)

    def candidates(self, vec: np.ndarray) -> list[int]:
        seen = set()
        for t in range(self.config.n_tables):
            seen.update(self.buckets[t].get(self.signature(vec, t), ()))
        return sorted(seen)


def embed_snippet(code_ids, params: ModelParams, config: ModelConfig) -> np.ndarray:
    """Encoder summary state, L2-normalized: the snippet's fixed-size vector."""
    if not code_ids:
        raise ValueError("cannot embed an empty snippet")
    s = encode(code_ids, None, params, config).s
    norm = np.linalg.norm(s)
    if norm == 0.0:
        raise ValueError("zero-norm snippet embedding")
    return s / norm


def build_index(
    encoded_codes, meta, params, config, lsh_config: LshConfig = None, seed: int = 0
):
    """Embed every corpus snippet and populate the LSH tables."""
    if lsh_config is None:
        lsh_config = LshConfig()
    rows = [embed_snippet(ids, params, config) for ids in encoded_codes]
    if not rows:
        raise ValueError("cannot index an empty corpus")
    C = np.stack(rows)
    emb = EmbeddingIndex(C=C, meta=list(meta))
    lsh = build_lsh(emb, lsh_config, seed)
    return emb, lsh


def build_lsh(emb: EmbeddingIndex, lsh_config: LshConfig, seed: int) -> LshIndex:
    lsh = LshIndex(emb.C.shape[1], lsh_config, seed)
    for i in range(emb.C.shape[0]):
        lsh.insert(i, emb.C[i])
    return lsh


def exact_topk(query: np.ndarray, index: EmbeddingIndex, k: int):
    """Exhaustive cosine scan; ties broken by lower row id."""
    if k < 1:
        raise ValueError("k must be >= 1")
    q = query / max(np.linalg.norm(query), 1e-12)
    sims = index.C @ q
    order = np.lexsort((np.arange(sims.shape[0]), -sims))
    return [(int(i), float(sims[i])) for i in order[:k]]


def lsh_topk(
    query: np.ndarray, emb: EmbeddingIndex, lsh: LshIndex, k: int,
    exact_below: int = SMALL_CORPUS_EXACT,
):
    """Bucket-union candidates reranked by exact cosine; falls back to the
    exhaustive scan for small corpora or when fewer than k candidates collide."""
    if k < 1:
        raise ValueError("k must be >= 1")
    if emb.C.shape[0] < exact_below:
        return exact_topk(query, emb, k)
    q = query / max(np.linalg.norm(query), 1e-12)
    cand = lsh.candidates(q)
    if len(cand) < k:
        # pass the raw query so results are bit-identical to a direct scan
        return exact_topk(query, emb, k)
    cand = np.asarray(cand)
    sims = emb.C[cand] @ q
    order = np.lexsort((cand, -sims))
    return [(int(cand[i]), float(sims[i])) for i in order[:k]]


# ---------------------------------------------------------------------------
# index file


def save_index(emb: EmbeddingIndex, lsh: LshIndex, path: str):
    with open(path, "wb") as fh:
        fh.write(INDEX_MAGIC)
        fh.write(struct.pack("<I", INDEX_VERSION))
        s, d = emb.C.shape
        fh.write(struct.pack("<QQ", s, d))
        fh.write(np.ascontiguousarray(emb.C, dtype="<f8").tobytes())
        meta_blob = "".join(
            json.dumps(m, ensure_ascii=False) + "\n" for m in emb.meta
        ).encode("utf-8")
        fh.write(struct.pack("<Q", len(meta_blob)))
        fh.write(meta_blob)
        fh.write(struct.pack("<QII", lsh.seed, lsh.config.n_tables, lsh.config.n_planes))


def load_index(path: str):
    """Returns (EmbeddingIndex, LshIndex); tables are rebuilt from the seed."""

    def need(fh, n):
        buf = fh.read(n)
        if len(buf) != n:
            raise ValueError(f"{path}: truncated index file")
        return buf

    with open(path, "rb") as fh:
        if need(fh, 4) != INDEX_MAGIC:
            raise ValueError(f"{path}: bad index magic")
        (version,) = struct.unpack("<I", need(fh, 4))
        if version != INDEX_VERSION:
            raise ValueError(f"{path}: index version {version}, expected {INDEX_VERSION}")
        s, d = struct.unpack("<QQ", need(fh, 16))
        C = np.frombuffer(need(fh, s * d * 8), dtype="<f8").reshape(s, d).copy()
        (mlen,) = struct.unpack("<Q", need(fh, 8))
        meta = [json.loads(line) for line in need(fh, mlen).decode("utf-8").splitlines()]
        seed, n_tables, n_planes = struct.unpack("<QII", need(fh, 16))
    emb = EmbeddingIndex(C=C, meta=meta)
    lsh = build_lsh(emb, LshConfig(n_tables=n_tables, n_planes=n_planes), seed)
    return emb, lsh
