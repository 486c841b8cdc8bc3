"""Offline learning: batching, Adam with gradient clipping, validation
perplexity, early stopping, and binary checkpoints."""

from __future__ import annotations

import io
import json
import struct
import time
from dataclasses import dataclass, field
from typing import Iterable, Optional

import numpy as np

from . import numerics as nm
from .corpus import (
    PAD_ID,
    PairRecord,
    Vocabulary,
    encode_title_ext_ids,
    encode_with_extended_vocab,
)
from .model import EncodedPair, ModelConfig, ModelParams, sequence_loss_vars

CHECKPOINT_MAGIC = b"Q2Q1"
CHECKPOINT_VERSION = 1


@dataclass
class TrainConfig:
    batch_size: int = 8
    epochs: int = 100
    learning_rate: float = 1e-3
    grad_clip_norm: float = 5.0
    seed: int = 0
    warmup_fraction: float = 0.5  # epochs with coverage loss off
    early_stop_patience: int = 50

    def __post_init__(self):
        if min(self.batch_size, self.epochs, self.early_stop_patience) <= 0:
            raise ValueError("batch_size, epochs, early_stop_patience must be positive")
        if self.learning_rate <= 0 or self.grad_clip_norm <= 0:
            raise ValueError("learning_rate and grad_clip_norm must be positive")
        if not 0.0 <= self.warmup_fraction <= 1.0:
            raise ValueError("warmup_fraction must be in [0, 1]")


@dataclass
class Batch:
    code_ids: np.ndarray  # (B, Tmax) padded with PAD_ID
    code_mask: np.ndarray  # (B, Tmax) bool
    title_ext_ids: np.ndarray  # (B, Lmax) padded
    title_mask: np.ndarray  # (B, Lmax) bool
    pairs: list[EncodedPair]  # per-example views (incl. ExtendedVocab)


def encode_pair(pair: PairRecord, code_vocab: Vocabulary, title_vocab: Vocabulary) -> EncodedPair:
    code_ids = [code_vocab.lookup(t) for t in pair.code_tokens]
    _, src_ext_ids, ext = encode_with_extended_vocab(pair.code_tokens, title_vocab)
    title_ext = encode_title_ext_ids(pair.title_tokens, title_vocab, ext)
    return EncodedPair(
        code_ids=code_ids,
        src_ext_ids=src_ext_ids,
        title_ext_ids=title_ext,
        n_oov=len(ext),
        ext=ext,
    )


def make_batches(pairs: list, batch_size: int, seed: int) -> list[Batch]:
    """Length-bucketed, seeded-shuffle batching over EncodedPairs."""
    if not pairs:
        raise ValueError("cannot batch an empty corpus")
    rng = nm.make_rng(seed)
    buckets: dict[int, list] = {}
    for p in pairs:
        buckets.setdefault(len(p.code_ids) // 16, []).append(p)
    batches = []
    for key in sorted(buckets):
        group = buckets[key]
        order = rng.permutation(len(group))
        shuffled = [group[i] for i in order]
        for i in range(0, len(shuffled), batch_size):
            chunk = shuffled[i : i + batch_size]
            tmax = max(len(p.code_ids) for p in chunk)
            lmax = max(len(p.title_ext_ids) for p in chunk)
            code = np.full((len(chunk), tmax), PAD_ID, dtype=np.int64)
            cmask = np.zeros((len(chunk), tmax), dtype=bool)
            title = np.full((len(chunk), lmax), PAD_ID, dtype=np.int64)
            tmask = np.zeros((len(chunk), lmax), dtype=bool)
            for j, p in enumerate(chunk):
                code[j, : len(p.code_ids)] = p.code_ids
                cmask[j, : len(p.code_ids)] = True
                title[j, : len(p.title_ext_ids)] = p.title_ext_ids
                tmask[j, : len(p.title_ext_ids)] = True
            batches.append(
                Batch(code_ids=code, code_mask=cmask, title_ext_ids=title, title_mask=tmask, pairs=chunk)
            )
    return batches


class Adam:
    """Adaptive moment estimation over a fixed parameter list."""

    def __init__(self, params, lr=1e-3, beta1=0.9, beta2=0.999, eps=1e-8):
        self.params = params
        self.lr = lr
        self.beta1, self.beta2, self.eps = beta1, beta2, eps
        self.t = 0
        self.m = [np.zeros_like(p.value) for p in params]
        self.v = [np.zeros_like(p.value) for p in params]

    def step(self):
        self.t += 1
        b1, b2 = self.beta1, self.beta2
        for p, m, v in zip(self.params, self.m, self.v):
            g = p.grad
            m *= b1
            m += (1 - b1) * g
            v *= b2
            v += (1 - b2) * g * g
            mhat = m / (1 - b1 ** self.t)
            vhat = v / (1 - b2 ** self.t)
            p.value -= self.lr * mhat / (np.sqrt(vhat) + self.eps)


def clip_gradients(params, max_norm: float) -> float:
    """Scale all gradients so the global norm is <= max_norm; returns pre-clip norm."""
    total = 0.0
    for p in params:
        total += float(np.sum(p.grad * p.grad))
    norm = float(np.sqrt(total))
    if norm > max_norm:
        factor = max_norm / norm
        for p in params:
            p.grad *= factor
    return norm


def validate(pairs: Iterable[EncodedPair], params: ModelParams, config: ModelConfig) -> float:
    """exp(mean teacher-forced NLL per target token); coverage term excluded."""
    pairs = list(pairs)
    if not pairs:
        raise ValueError("validation set is empty")
    nll, tokens = 0.0, 0
    for pair in pairs:
        _, diags = sequence_loss_vars(pair, params, config, lam=0.0)
        nll += diags["nll_sum"]
        tokens += diags["n_steps"]
    return float(np.exp(nll / tokens))


def clone_values(params: ModelParams) -> dict[str, np.ndarray]:
    return {p.name: p.value.copy() for p in params.all()}


def restore_values(params: ModelParams, snapshot: dict[str, np.ndarray]):
    for p in params.all():
        p.value[...] = snapshot[p.name]


def train(
    train_pairs: list[EncodedPair],
    valid_pairs: list[EncodedPair],
    config: ModelConfig,
    tconfig: TrainConfig,
    metrics_path: Optional[str] = None,
    log=None,
):
    """Full training loop; returns (params, metrics list of per-epoch dicts)."""
    if not train_pairs or not valid_pairs:
        raise ValueError("train and validation sets must be non-empty")
    params = ModelParams(config, seed=tconfig.seed)
    plist = params.all()
    opt = Adam(plist, lr=tconfig.learning_rate)
    warmup_epochs = int(tconfig.epochs * tconfig.warmup_fraction)

    best_ppl = float("inf")
    best_snapshot = clone_values(params)
    since_best = 0
    metrics = []
    mfh = open(metrics_path, "w", encoding="utf-8") if metrics_path else None
    try:
        for epoch in range(1, tconfig.epochs + 1):
            t0 = time.monotonic()
            lam = 0.0 if epoch <= warmup_epochs else config.coverage_weight
            drop_rng = nm.make_rng((tconfig.seed << 20) + epoch)
            batches = make_batches(train_pairs, tconfig.batch_size, tconfig.seed + epoch)
            total_loss, total_tokens = 0.0, 0
            for bi, batch in enumerate(batches):
                params.zero_grads()
                batch_tokens = sum(len(p.title_ext_ids) + 1 for p in batch.pairs)
                for pair in batch.pairs:
                    loss, diags = sequence_loss_vars(
                        pair, params, config, lam=lam, dropout_rng=drop_rng
                    )
                    # per-token weighting across the whole batch
                    weight = diags["n_steps"] / batch_tokens
                    nm.backward(loss, seed=weight)
                    lv = float(loss.value)
                    if not np.isfinite(lv):
                        raise FloatingPointError(
                            f"non-finite loss in epoch {epoch}, batch {bi}"
                        )
                    total_loss += lv * diags["n_steps"]
                    total_tokens += diags["n_steps"]
                clip_gradients(plist, tconfig.grad_clip_norm)
                opt.step()
            train_loss = total_loss / total_tokens
            valid_ppl = validate(valid_pairs, params, config)
            row = {
                "epoch": epoch,
                "train_loss": train_loss,
                "valid_ppl": valid_ppl,
                "lr": tconfig.learning_rate,
                "seconds": time.monotonic() - t0,
            }
            metrics.append(row)
            if mfh:
                mfh.write(json.dumps(row) + "\n")
                mfh.flush()
            if log:
                log(f"epoch {epoch}: train_loss={train_loss:.4f} valid_ppl={valid_ppl:.4f}")
            if valid_ppl < best_ppl:
                best_ppl = valid_ppl
                best_snapshot = clone_values(params)
                since_best = 0
            else:
                since_best += 1
                if since_best >= tconfig.early_stop_patience:
                    break
    finally:
        if mfh:
            mfh.close()
    restore_values(params, best_snapshot)
    return params, metrics


# ---------------------------------------------------------------------------
# checkpoints


def save_checkpoint(params: ModelParams, config: ModelConfig, path: str):
    with open(path, "wb") as fh:
        fh.write(CHECKPOINT_MAGIC)
        fh.write(struct.pack("<I", CHECKPOINT_VERSION))
        blob = config.to_kv().encode("utf-8")
        fh.write(struct.pack("<I", len(blob)))
        fh.write(blob)
        for p in params.all():
            nm.write_tensor_block(fh, p.name, p.value)


def load_checkpoint(path: str):
    """Returns (params, config); validates every expected tensor name/shape."""
    with open(path, "rb") as fh:
        magic = fh.read(4)
        if magic != CHECKPOINT_MAGIC:
            raise ValueError(f"{path}: bad checkpoint magic {magic!r}")
        head = fh.read(4)
        if len(head) != 4:
            raise ValueError(f"{path}: truncated checkpoint header")
        (version,) = struct.unpack("<I", head)
        if version != CHECKPOINT_VERSION:
            raise ValueError(
                f"{path}: checkpoint version {version}, expected {CHECKPOINT_VERSION}"
            )
        (clen,) = struct.unpack("<I", fh.read(4))
        config = ModelConfig.from_kv(fh.read(clen).decode("utf-8"))
        params = ModelParams(config, seed=0)
        expected = {p.name: p for p in params.all()}
        seen = set()
        while True:
            block = nm.read_tensor_block(fh)
            if block is None:
                break
            name, arr = block
            if name not in expected:
                raise ValueError(f"{path}: unexpected tensor {name!r}")
            p = expected[name]
            if p.value.shape != arr.shape:
                raise ValueError(
                    f"{path}: tensor {name!r} shape {arr.shape}, expected {p.value.shape}"
                )
            p.value[...] = arr
            seen.add(name)
        missing = sorted(set(expected) - seen)
        if missing:
            raise ValueError(f"{path}: checkpoint missing tensors {missing}")
    return params, config
