"""Online generation: greedy decoding and copy-aware beam search with
END-token termination and length-normalized ranking."""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from .corpus import BOS_ID, END_ID, PAD_ID, UNK_ID, ExtendedVocab, Vocabulary
from .model import (
    DecoderState,
    EncoderOutput,
    ModelConfig,
    ModelParams,
    decode_step,
    encode,
    init_decoder,
)
from .training import encode_pair  # noqa: F401  (re-export convenience)


@dataclass
class BeamHypothesis:
    ext_token_ids: list[int]
    log_prob: float
    state: DecoderState
    finished: bool = False

    def payload_len(self) -> int:
        """Generated tokens, excluding BOS and a trailing END."""
        n = len(self.ext_token_ids) - 1
        if self.ext_token_ids[-1] == END_ID:
            n -= 1
        return n

    def normalized_score(self) -> float:
        return self.log_prob / max(self.payload_len(), 1)


def detokenize(ext_ids, vocab: Vocabulary, ext: ExtendedVocab) -> list[str]:
    """Extended ids back to tokens, stripping BOS/END/PAD."""
    out = []
    total = len(vocab) + len(ext)
    for i in ext_ids:
        if i >= total:
            raise IndexError(f"id {i} outside extended vocabulary of size {total}")
        if i in (BOS_ID, END_ID, PAD_ID):
            continue
        out.append(ext.token(i))
    return out


def _prepare(code_ids, src_ext_ids, ext, params, config):
    enc = encode(code_ids, None, params, config)
    state = init_decoder(enc, params)
    return enc, state


def _feed_id(ext_id: int, title_vocab_size: int) -> int:
    """Free-running feedback: copied OOV ids have no embedding, feed UNK."""
    return ext_id if ext_id < title_vocab_size else UNK_ID


def greedy_decode(
    code_ids, src_ext_ids, ext: ExtendedVocab, params: ModelParams,
    config: ModelConfig, max_len: int = 16, min_len: int = 1,
) -> list[int]:
    """Argmax decoding (ties -> lowest id); returns extended ids without BOS/END.

    END is suppressed while fewer than min_len tokens have been generated,
    matching the beam-search contract so that beam=1 reduces to this path.
    """
    if max_len < 1:
        raise ValueError("max_len must be >= 1")
    enc, state = _prepare(code_ids, src_ext_ids, ext, params, config)
    y_prev = BOS_ID
    out: list[int] = []
    for _ in range(max_len):
        step = decode_step(y_prev, state, enc, ext, src_ext_ids, params, config)
        dist = step.dist.copy()
        dist[PAD_ID] = -np.inf  # structural tokens are never emitted
        dist[BOS_ID] = -np.inf
        if len(out) < min_len:
            dist[END_ID] = -np.inf
        nxt = int(np.argmax(dist))  # argmax takes the lowest id on ties
        if nxt == END_ID:
            break
        out.append(nxt)
        y_prev = _feed_id(nxt, config.title_vocab_size)
        state = step.new_state
    return out


def beam_search(
    code_ids, src_ext_ids, ext: ExtendedVocab, params: ModelParams,
    config: ModelConfig, beam: int = 5, min_len: int = 4, max_len: int = 16,
    k: int = 5,
) -> list[tuple[list[int], float]]:
    """Returns up to k (ext_ids, normalized_score) pairs, best first.

    END is suppressed until min_len generated tokens; hypotheses finish on
    END or at max_len; ranking is log_prob / length.
    """
    if beam < 1:
        raise ValueError("beam must be >= 1")
    if not 1 <= min_len < max_len:
        raise ValueError("need 1 <= min_len < max_len")
    if k > beam:
        raise ValueError("k must be <= beam")
    enc, state = _prepare(code_ids, src_ext_ids, ext, params, config)
    live = [BeamHypothesis(ext_token_ids=[BOS_ID], log_prob=0.0, state=state)]
    done: list[BeamHypothesis] = []

    for _ in range(max_len):
        candidates: list[tuple[float, int, int, BeamHypothesis]] = []
        steps = {}
        for hi, hyp in enumerate(live):
            y_prev = _feed_id(hyp.ext_token_ids[-1], config.title_vocab_size)
            step = decode_step(y_prev, hyp.state, enc, ext, src_ext_ids, params, config)
            if not np.all(np.isfinite(step.dist)):
                raise FloatingPointError("non-finite decoder distribution")
            steps[hi] = step
            logp = np.log(step.dist + 1e-12)
            logp[PAD_ID] = -np.inf  # structural tokens are never emitted
            logp[BOS_ID] = -np.inf
            if hyp.payload_len() < min_len:
                logp[END_ID] = -np.inf
            top = np.argsort(-logp, kind="stable")[: beam + 1]
            for tok in top:
                if not np.isfinite(logp[tok]):
                    continue
                candidates.append((hyp.log_prob + float(logp[tok]), int(tok), hi))
        if not candidates:
            break
        # deterministic order: score desc, then token id asc, then beam slot
        candidates.sort(key=lambda c: (-c[0], c[1], c[2]))
        next_live = []
        for score, tok, hi in candidates:
            hyp = live[hi]
            new = BeamHypothesis(
                ext_token_ids=hyp.ext_token_ids + [tok],
                log_prob=score,
                # the post-step state does not depend on the chosen token
                state=steps[hi].new_state,
                finished=(tok == END_ID),
            )
            if new.finished:
                done.append(new)
            else:
                next_live.append(new)
            if len(next_live) >= beam:
                break
        live = next_live
        if len(done) >= beam or not live:
            break

    for hyp in live:  # max_len reached without END
        if hyp.payload_len() >= max_len:
            hyp.finished = True
            done.append(hyp)
    done.sort(key=lambda h: (-h.normalized_score(), h.ext_token_ids))
    return [(h.ext_token_ids, h.normalized_score()) for h in done[:k]]


def beam_search_titles(
    code_ids, src_ext_ids, ext, title_vocab, params, config,
    beam=5, min_len=4, max_len=16, k=5,
):
    """beam_search plus detokenization to (tokens, score)."""
    results = beam_search(
        code_ids, src_ext_ids, ext, params, config,
        beam=beam, min_len=min_len, max_len=max_len, k=k,
    )
    return [(detokenize(ids, title_vocab, ext), score) for ids, score in results]
