"""Attention/copy/coverage sequence-to-sequence network.

Two-layer bidirectional LSTM encoder over code tokens, single-layer LSTM
decoder with additive attention (coverage feature), a soft generate/copy
gate, and the per-step mixture distribution over the extended vocabulary.

Public entry points return plain numpy values; the ``*_vars`` variants
return tape nodes and are what training differentiates through.
"""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import Optional

import numpy as np

from . import numerics as nm
from .corpus import BOS_ID, END_ID, UNK_ID, ExtendedVocab
from .numerics import LstmParams, Parameter, Var


@dataclass
class ModelConfig:
    emb_dim: int
    enc_hidden: int
    dec_hidden: int
    code_vocab_size: int
    title_vocab_size: int
    coverage_weight: float = 1.0
    dropout_rate: float = 0.2
    enc_layers: int = 2
    dec_layers: int = 1

    def __post_init__(self):
        if min(self.emb_dim, self.enc_hidden, self.dec_hidden) <= 0:
            raise ValueError("all model dimensions must be positive")
        if self.enc_layers != 2 or self.dec_layers != 1:
            raise ValueError("encoder is fixed at 2 layers, decoder at 1")
        if self.coverage_weight < 0:
            raise ValueError("coverage_weight must be >= 0")
        if not 0.0 <= self.dropout_rate < 1.0:
            raise ValueError("dropout_rate must be in [0, 1)")

    def to_kv(self) -> str:
        keys = [
            "emb_dim", "enc_hidden", "dec_hidden", "code_vocab_size",
            "title_vocab_size", "coverage_weight", "dropout_rate",
            "enc_layers", "dec_layers",
        ]
        return "".join(f"{k}={getattr(self, k)}\n" for k in keys)

    @staticmethod
    def from_kv(text: str) -> "ModelConfig":
        kv = {}
        for line in text.splitlines():
            if not line.strip():
                continue
            k, v = line.split("=", 1)
            kv[k] = v
        return ModelConfig(
            emb_dim=int(kv["emb_dim"]),
            enc_hidden=int(kv["enc_hidden"]),
            dec_hidden=int(kv["dec_hidden"]),
            code_vocab_size=int(kv["code_vocab_size"]),
            title_vocab_size=int(kv["title_vocab_size"]),
            coverage_weight=float(kv["coverage_weight"]),
            dropout_rate=float(kv["dropout_rate"]),
            enc_layers=int(kv["enc_layers"]),
            dec_layers=int(kv["dec_layers"]),
        )


class ModelParams:
    """Every trainable tensor, keyed by name."""

    def __init__(self, config: ModelConfig, seed: int = 0):
        rng = nm.make_rng(seed)
        e, he, hd = config.emb_dim, config.enc_hidden, config.dec_hidden
        a = hd  # attention inner dimension
        u = lambda *shape: rng.uniform(-0.1, 0.1, shape)

        self.code_emb = Parameter("code_emb", u(config.code_vocab_size, e))
        self.title_emb = Parameter("title_emb", u(config.title_vocab_size, e))

        self.enc_l1_f = LstmParams("enc_l1_f", e, he, rng)
        self.enc_l1_b = LstmParams("enc_l1_b", e, he, rng)
        self.enc_l2_f = LstmParams("enc_l2_f", 2 * he, he, rng)
        self.enc_l2_b = LstmParams("enc_l2_b", 2 * he, he, rng)

        self.bridge_Wh = Parameter("bridge_Wh", u(hd, 2 * he))
        self.bridge_bh = Parameter("bridge_bh", np.zeros(hd))
        self.bridge_Wc = Parameter("bridge_Wc", u(hd, 2 * he))
        self.bridge_bc = Parameter("bridge_bc", np.zeros(hd))

        self.dec = LstmParams("dec", e + 2 * he, hd, rng)

        self.attn_WH = Parameter("attn_WH", u(a, 2 * he))
        self.attn_Ws = Parameter("attn_Ws", u(a, hd))
        self.attn_wc = Parameter("attn_wc", u(a))
        self.attn_b = Parameter("attn_b", np.zeros(a))
        self.attn_v = Parameter("attn_v", u(a))

        self.out_W = Parameter("out_W", u(config.title_vocab_size, hd + 2 * he))
        self.out_b = Parameter("out_b", np.zeros(config.title_vocab_size))

        self.gate_wc = Parameter("gate_wc", u(2 * he))
        self.gate_wh = Parameter("gate_wh", u(hd))
        self.gate_wx = Parameter("gate_wx", u(e))
        self.gate_b = Parameter("gate_b", np.zeros(()))

    def all(self) -> list[Parameter]:
        out = [self.code_emb, self.title_emb]
        for cell in (self.enc_l1_f, self.enc_l1_b, self.enc_l2_f, self.enc_l2_b, self.dec):
            out.extend(cell.parameters())
        out.extend(
            [
                self.bridge_Wh, self.bridge_bh, self.bridge_Wc, self.bridge_bc,
                self.attn_WH, self.attn_Ws, self.attn_wc, self.attn_b, self.attn_v,
                self.out_W, self.out_b,
                self.gate_wc, self.gate_wh, self.gate_wx, self.gate_b,
            ]
        )
        return out

    def named(self) -> dict[str, np.ndarray]:
        return {p.name: p.value for p in self.all()}

    def zero_grads(self):
        for p in self.all():
            p.zero_grad()


@dataclass
class EncoderOutput:
    H: np.ndarray  # (T, 2*enc_hidden) annotations, forward||backward
    s: np.ndarray  # (2*enc_hidden,) summary state
    mask: np.ndarray  # (T,) bool


@dataclass
class DecoderState:
    h: np.ndarray
    c: np.ndarray
    coverage: np.ndarray  # (T,), running sum of past attention


@dataclass
class StepOutput:
    dist: np.ndarray  # extended-vocab probabilities
    attn: np.ndarray
    p_cg: float
    new_state: DecoderState


# Var-side twins used while a graph is alive.
@dataclass
class EncoderVars:
    H: Var
    s: Var
    mask: np.ndarray


@dataclass
class DecoderVars:
    h: Var
    c: Var
    coverage: Var


@dataclass
class StepVars:
    dist: Var
    attn: Var
    p_cg: Var
    new_state: DecoderVars


class Dropout:
    """Per-forward dropout masks; inactive when rng is None."""

    def __init__(self, rate: float, rng: Optional[np.random.Generator]):
        self.rate = rate if rng is not None else 0.0
        self.rng = rng

    def __call__(self, x: Var) -> Var:
        if self.rng is None or self.rate <= 0.0:
            return x
        return nm.apply_mask(x, nm.dropout_mask(self.rng, x.value.shape, self.rate))


def _run_lstm(xs: list[Var], cell: LstmParams):
    """Run a cell over a sequence from zero state; returns (hs, final_h, final_c)."""
    h = nm.const(np.zeros(cell.hidden))
    c = nm.const(np.zeros(cell.hidden))
    hs = []
    for x in xs:
        h, c = nm.lstm_cell(x, h, c, cell)
        hs.append(h)
    return hs, h, c


def encode_vars(
    code_ids, mask, params: ModelParams, config: ModelConfig,
    dropout_rng: Optional[np.random.Generator] = None,
) -> EncoderVars:
    code_ids = list(code_ids)
    T = len(code_ids)
    mask = np.ones(T, dtype=bool) if mask is None else np.asarray(mask, dtype=bool)
    if T == 0 or not mask.any():
        raise ValueError("encoder input is empty or fully masked")
    live = int(mask.sum())
    if not mask[:live].all():
        raise ValueError("mask must be a contiguous prefix of real tokens")
    drop = Dropout(config.dropout_rate, dropout_rng)

    table = nm.pv(params.code_emb)
    embs = [drop(nm.gather_row(table, code_ids[t])) for t in range(live)]

    f1, _, _ = _run_lstm(embs, params.enc_l1_f)
    b1_rev, _, _ = _run_lstm(embs[::-1], params.enc_l1_b)
    b1 = b1_rev[::-1]
    l1 = [drop(nm.concat([f1[t], b1[t]])) for t in range(live)]

    f2, f2_last, _ = _run_lstm(l1, params.enc_l2_f)
    b2_rev, b2_last, _ = _run_lstm(l1[::-1], params.enc_l2_b)
    b2 = b2_rev[::-1]

    rows = [drop(nm.concat([f2[t], b2[t]])) for t in range(live)]
    zero = nm.const(np.zeros(2 * config.enc_hidden))
    rows.extend([zero] * (T - live))
    H = nm.stack_rows(rows)
    s = nm.concat([f2_last, b2_last])
    return EncoderVars(H=H, s=s, mask=mask)


def encode(code_ids, mask, params, config) -> EncoderOutput:
    ev = encode_vars(code_ids, mask, params, config)
    return EncoderOutput(H=ev.H.value.copy(), s=ev.s.value.copy(), mask=ev.mask)


def init_decoder_vars(enc: EncoderVars, params: ModelParams) -> DecoderVars:
    h = nm.tanh(nm.affine(enc.s, nm.pv(params.bridge_Wh), nm.pv(params.bridge_bh)))
    c = nm.tanh(nm.affine(enc.s, nm.pv(params.bridge_Wc), nm.pv(params.bridge_bc)))
    T = enc.mask.shape[0]
    return DecoderVars(h=h, c=c, coverage=nm.const(np.zeros(T)))


def init_decoder(enc: EncoderOutput, params: ModelParams) -> DecoderState:
    ev = EncoderVars(H=nm.const(enc.H), s=nm.const(enc.s), mask=enc.mask)
    dv = init_decoder_vars(ev, params)
    return DecoderState(h=dv.h.value.copy(), c=dv.c.value.copy(), coverage=dv.coverage.value.copy())


def attention_vars(state: DecoderVars, enc: EncoderVars, params: ModelParams):
    """Additive attention with a coverage feature; returns (attn, context)."""
    scores_in = nm.add_rowvec(
        nm.linear_rows(enc.H, nm.pv(params.attn_WH)),
        nm.add(nm.matvec(nm.pv(params.attn_Ws), state.h), nm.pv(params.attn_b)),
    )
    scores_in = nm.add(scores_in, nm.outer_colvec(state.coverage, nm.pv(params.attn_wc)))
    e = nm.matvec(nm.tanh(scores_in), nm.pv(params.attn_v))
    attn = nm.softmax_masked(e, enc.mask)
    context = nm.mat_t_vec(enc.H, attn)
    return attn, context


def attention(state: DecoderState, enc: EncoderOutput, params: ModelParams):
    sv = DecoderVars(h=nm.const(state.h), c=nm.const(state.c), coverage=nm.const(state.coverage))
    ev = EncoderVars(H=nm.const(enc.H), s=nm.const(enc.s), mask=enc.mask)
    attn, context = attention_vars(sv, ev, params)
    return attn.value.copy(), context.value.copy()


def final_distribution_vars(vocab_dist: Var, attn: Var, p_cg: Var, src_ext_ids, ext_size: int) -> Var:
    gen = nm.scale(nm.pad_to(vocab_dist, ext_size), p_cg)
    copy = nm.scale(nm.scatter_sum(attn, src_ext_ids, ext_size), nm.one_minus(p_cg))
    return nm.add(gen, copy)


def final_distribution(vocab_dist, attn, p_cg: float, src_ext_ids, ext_size: int) -> np.ndarray:
    return final_distribution_vars(
        nm.const(vocab_dist), nm.const(attn), nm.const(p_cg), src_ext_ids, ext_size
    ).value


def decode_step_vars(
    y_prev_id: int, state: DecoderVars, enc: EncoderVars, src_ext_ids,
    ext_size: int, params: ModelParams, config: ModelConfig,
    drop: Optional[Dropout] = None,
) -> StepVars:
    if not 0 <= y_prev_id < config.title_vocab_size:
        raise IndexError(
            f"decoder input id {y_prev_id} out of range [0, {config.title_vocab_size})"
        )
    if drop is None:
        drop = Dropout(0.0, None)
    emb = drop(nm.gather_row(nm.pv(params.title_emb), y_prev_id))

    attn, context = attention_vars(state, enc, params)
    h, c = nm.lstm_cell(nm.concat([emb, context]), state.h, state.c, params.dec)

    out_in = nm.concat([drop(h), context])
    vocab_dist = nm.softmax(nm.affine(out_in, nm.pv(params.out_W), nm.pv(params.out_b)))

    gate_in = nm.add(
        nm.add(nm.dot(nm.pv(params.gate_wc), context), nm.dot(nm.pv(params.gate_wh), h)),
        nm.add(nm.dot(nm.pv(params.gate_wx), emb), nm.pv(params.gate_b)),
    )
    p_cg = nm.sigmoid(gate_in)

    dist = final_distribution_vars(vocab_dist, attn, p_cg, src_ext_ids, ext_size)
    new_state = DecoderVars(h=h, c=c, coverage=nm.add(state.coverage, attn))
    return StepVars(dist=dist, attn=attn, p_cg=p_cg, new_state=new_state)


def decode_step(
    y_prev_id: int, state: DecoderState, enc: EncoderOutput, ext: ExtendedVocab,
    src_ext_ids, params: ModelParams, config: ModelConfig,
) -> StepOutput:
    sv = DecoderVars(h=nm.const(state.h), c=nm.const(state.c), coverage=nm.const(state.coverage))
    ev = EncoderVars(H=nm.const(enc.H), s=nm.const(enc.s), mask=enc.mask)
    out = decode_step_vars(y_prev_id, sv, ev, src_ext_ids, ext.total_size(), params, config)
    return StepOutput(
        dist=out.dist.value.copy(),
        attn=out.attn.value.copy(),
        p_cg=float(out.p_cg.value),
        new_state=DecoderState(
            h=out.new_state.h.value.copy(),
            c=out.new_state.c.value.copy(),
            coverage=out.new_state.coverage.value.copy(),
        ),
    )


def step_loss_vars(step: StepVars, target_ext_id: int, prev_coverage: Var, lam: float) -> Var:
    loss = nm.neg_log_eps(nm.gather_scalar(step.dist, target_ext_id))
    if lam > 0.0:
        cov = nm.vsum(nm.minimum(step.attn, prev_coverage))
        loss = nm.add(loss, nm.scale(cov, nm.const(lam)))
    return loss


def step_loss(step: StepOutput, target_ext_id: int, prev_coverage, lam: float) -> float:
    sv = StepVars(
        dist=nm.const(step.dist), attn=nm.const(step.attn),
        p_cg=nm.const(step.p_cg), new_state=None,
    )
    return float(step_loss_vars(sv, target_ext_id, nm.const(prev_coverage), lam).value)


@dataclass
class EncodedPair:
    """A PairRecord resolved against both vocabularies, ready for the model."""

    code_ids: list[int]  # code-vocab ids for the encoder
    src_ext_ids: list[int]  # title-vocab/extended ids of source tokens (copy targets)
    title_ext_ids: list[int]  # gold title in extended ids (no BOS/END)
    n_oov: int
    ext: ExtendedVocab


def sequence_loss_vars(
    pair: EncodedPair, params: ModelParams, config: ModelConfig,
    lam: Optional[float] = None, teacher_forcing: bool = True,
    dropout_rng: Optional[np.random.Generator] = None,
):
    """Mean per-step loss over BOS...END framing; returns (loss Var, diagnostics)."""
    if lam is None:
        lam = config.coverage_weight
    ext_size = config.title_vocab_size + pair.n_oov
    enc = encode_vars(pair.code_ids, None, params, config, dropout_rng)
    state = init_decoder_vars(enc, params)
    drop = Dropout(config.dropout_rate, dropout_rng)

    targets = list(pair.title_ext_ids) + [END_ID]
    y_prev = BOS_ID
    losses = []
    nll_total = 0.0
    for t, target in enumerate(targets):
        step = decode_step_vars(
            y_prev, state, enc, pair.src_ext_ids, ext_size, params, config, drop
        )
        losses.append(step_loss_vars(step, target, state.coverage, lam))
        nll_total += -np.log(step.dist.value[target] + 1e-12)
        if teacher_forcing:
            y_prev = targets[t]
        else:
            y_prev = int(np.argmax(step.dist.value))
        if y_prev >= config.title_vocab_size:  # copied OOV feeds back as UNK
            y_prev = UNK_ID
        state = step.new_state

    mean = nm.scale(losses[0], nm.const(1.0 / len(targets)))
    for ls in losses[1:]:
        mean = nm.add(mean, nm.scale(ls, nm.const(1.0 / len(targets))))
    diags = {"n_steps": len(targets), "nll_sum": nll_total}
    return mean, diags


def sequence_loss(pair, params, config, lam=None, teacher_forcing=True):
    loss, diags = sequence_loss_vars(pair, params, config, lam, teacher_forcing)
    return float(loss.value), diags
