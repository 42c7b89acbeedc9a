"""Incremental decoding without key/value caches.

Because transparent variants read self-attention keys and values from the
static embeddings, a decode step never needs previous layers' hidden
states: the windowed variant keeps a ring buffer of the last k static
rows (k * d_model floats, constant in sequence length), the unwindowed
transparent variant keeps the full static history (d_model floats per
token, no per-layer growth), and both compute only the new row per step.
The contextual variant has no such shortcut; it keeps the same static
history and recomputes the whole prefix stack every step.

Per-step instrumentation counts attention scores actually computed so the
closed-form complexity report can be checked against reality.
"""

from __future__ import annotations

from collections import deque
from dataclasses import dataclass, field

import numpy as np

from .model import (
    BOS_ID,
    EOS_ID,
    Model,
    ModelConfig,
    _ffn,
    _residual_block,
    build_mask,
    decode_hidden,
    embed_target_static,
    encode,
    output_logits,
)
from .attention import multi_head_attention, transparent_self_attention
from .tensor import Tensor, layer_norm, no_grad


@dataclass
class DecoderState:
    """Everything one partial translation needs between decode steps.

    ``history`` holds static embedding rows only. For a windowed
    transparent model it is a deque capped at k entries, so resident state
    stays at k * d_model floats no matter how long generation runs. The
    encoder memory is shared and constant; it is not part of the per-token
    accounting.
    """

    model: Model
    memory: np.ndarray  # (m, d) encoder output, read-only
    history: "deque[np.ndarray] | list[np.ndarray]"
    step: int = 0  # tokens pushed so far; also the next absolute position
    counts: dict = field(default_factory=dict)

    def resident_floats(self) -> int:
        """Float count of per-token decoder state currently held."""
        return len(self.history) * self.model.config.d_model

    def push(self, token_id: int) -> None:
        """Append one token's static embedding at the next position."""
        cfg = self.model.config
        if self.step >= cfg.max_len:
            raise ValueError(f"decoded past max_len={cfg.max_len}")
        with no_grad():
            row = embed_target_static(
                self.model, np.asarray([token_id], dtype=np.int64), offset=self.step
            ).data[0]
        self.history.append(row)
        self.step += 1

    def clone(self) -> "DecoderState":
        if isinstance(self.history, deque):
            hist: deque | list = deque(self.history, maxlen=self.history.maxlen)
        else:
            hist = list(self.history)
        return DecoderState(
            model=self.model,
            memory=self.memory,
            history=hist,
            step=self.step,
            counts=dict(self.counts),
        )


def init_state(model: Model, src_ids) -> DecoderState:
    """Encode the source and seed the decoder with BOS."""
    cfg = model.config
    with no_grad():
        memory = encode(model, src_ids).data
    if cfg.variant == "MAT" and cfg.is_transparent():
        history: deque | list = deque(maxlen=cfg.k)
    else:
        history = []
    state = DecoderState(model=model, memory=memory, history=history)
    state.push(BOS_ID)
    return state


def _row_hidden(model: Model, row: Tensor, kv: Tensor, memory: Tensor, counts: dict) -> Tensor:
    """Decoder stack for a single new position over static keys/values."""
    cfg = model.config
    h = row
    for layer in model.params.dec:
        h = _residual_block(
            h,
            lambda z: transparent_self_attention(z, kv, layer.self_attn, None, counts),
            layer.ln_self,
            cfg,
            False,
            None,
        )
        h = _residual_block(
            h,
            lambda z: multi_head_attention(z, memory, layer.cross_attn, None),
            layer.ln_cross,
            cfg,
            False,
            None,
        )
        h = _residual_block(h, lambda z: _ffn(z, layer.ffn), layer.ln_ffn, cfg, False, None)
    if model.params.dec_final_ln is not None:
        h = layer_norm(h, model.params.dec_final_ln.gain, model.params.dec_final_ln.bias)
    return h


def incremental_step(state: DecoderState) -> np.ndarray:
    """Logits (V,) for the next token given everything pushed so far."""
    model = state.model
    cfg = model.config
    with no_grad():
        memory = Tensor(state.memory)
        if cfg.is_transparent():
            # only the newest row is computed; K/V come straight from the
            # static history (the ring buffer IS the banded window)
            row = Tensor(state.history[-1][None, :])
            kv = Tensor(np.stack(state.history))
            hidden = _row_hidden(model, row, kv, memory, state.counts)
            return output_logits(model, hidden).data[0]
        # contextual keys/values force a full prefix recompute
        static = Tensor(np.stack(state.history))
        n = static.shape[0]
        if cfg.variant == "MAT":
            allow = build_mask("banded", n, cfg.k)
        else:
            allow = build_mask("causal", n)
        hidden = decode_hidden(model, static, memory, allow, counts=state.counts)
        return output_logits(model, hidden).data[-1]


def greedy_decode(model: Model, src_ids, max_new: int | None = None) -> list[int]:
    """Argmax decoding; ties break toward the lowest token id.

    Returns generated ids without BOS/EOS; an immediate EOS gives [].
    """
    state = init_state(model, src_ids)
    budget = model.config.max_len - 1
    if max_new is not None:
        budget = min(budget, max_new)
    out: list[int] = []
    for _ in range(budget):
        logits = incremental_step(state)
        token = int(np.argmax(logits))
        if token == EOS_ID:
            break
        out.append(token)
        state.push(token)
    return out


def _log_softmax(logits: np.ndarray) -> np.ndarray:
    z = logits - logits.max()
    return z - np.log(np.exp(z).sum())


def length_penalty(length: int, alpha: float) -> float:
    """GNMT-style penalty ((5 + length) / 6) ** alpha; 1.0 when alpha is 0."""
    return ((5.0 + length) / 6.0) ** alpha


@dataclass
class BeamHypothesis:
    tokens: list[int]
    logp: float
    score: float  # logp / length_penalty


@dataclass
class BeamResult:
    tokens: list[int]
    logp: float
    score: float
    n_best: list[BeamHypothesis]


def beam_decode(
    model: Model,
    src_ids,
    beam_size: int = 4,
    alpha: float = 0.0,
    max_new: int | None = None,
) -> BeamResult:
    """Beam search over accumulated log probability.

    Each step ranks every live hypothesis's top extensions together; an EOS
    extension that ranks inside the cut finalizes its hypothesis into the
    pool, and the best non-EOS extensions refill the beam. Final ranking
    divides by the length penalty (length counts the EOS). With beam_size 1
    and alpha 0 this reduces to greedy decoding, tie-breaking and all: an
    EOS that would stop greedy outranks every extension of the runner-up
    branch, so the greedy hypothesis wins the pool.
    """
    if beam_size < 1:
        raise ValueError("beam_size must be >= 1")
    if alpha < 0:
        raise ValueError("length penalty alpha must be >= 0")
    budget = model.config.max_len - 1
    if max_new is not None:
        budget = min(budget, max_new)

    root = init_state(model, src_ids)
    live: list[tuple[list[int], float, DecoderState]] = [([], 0.0, root)]
    finished: list[BeamHypothesis] = []

    for _ in range(budget):
        candidates: list[tuple[float, int, int]] = []  # (total logp, hyp idx, token)
        for hi, (tokens, logp, state) in enumerate(live):
            logits = incremental_step(state)
            total = logp + _log_softmax(logits)
            order = np.argsort(-total, kind="stable")  # descending, ties by lowest id
            # beam_size non-EOS tokens can rank above EOS, so beam_size + 1
            # candidates per hypothesis always suffice to fill the beam
            for token in order[: beam_size + 1]:
                candidates.append((float(total[token]), hi, int(token)))
        # highest logp first; ties prefer earlier hypothesis, then lower id
        candidates.sort(key=lambda c: (-c[0], c[1], c[2]))
        next_live = []
        for total_logp, hi, token in candidates:
            if len(next_live) >= beam_size:
                break
            tokens, _, state = live[hi]
            if token == EOS_ID:
                finished.append(
                    BeamHypothesis(
                        tokens=list(tokens),
                        logp=total_logp,
                        score=total_logp / length_penalty(len(tokens) + 1, alpha),
                    )
                )
                continue
            new_state = state.clone()
            new_state.push(token)
            next_live.append((tokens + [token], total_logp, new_state))
        if not next_live:
            break
        live = next_live

    for tokens, logp, _ in live:
        # ran out of budget without EOS; score it by its generated length
        finished.append(
            BeamHypothesis(
                tokens=list(tokens),
                logp=logp,
                score=logp / length_penalty(max(len(tokens), 1), alpha),
            )
        )
    finished.sort(key=lambda h: (-h.score, len(h.tokens), h.tokens))
    best = finished[0]
    return BeamResult(tokens=best.tokens, logp=best.logp, score=best.score, n_best=finished[: beam_size])


def count_decode_ops(model_or_config: Model | ModelConfig, n: int) -> dict:
    """Closed-form decode cost for generating ``n`` target positions.

    ``self_attn_scores`` counts decoder self-attention scores per layer per
    head, summed over steps t = 1..n: step t scores the current window
    (min(t, k) for the banded variant, t otherwise). ``kv_*_resident``
    measures the per-token decoder state a cache-free decoder must hold,
    assuming the variant's canonical key/value source. The totals multiply
    in layers and heads and are what the instrumented decoder counters
    report for transparent variants.
    """
    cfg = model_or_config.config if isinstance(model_or_config, Model) else model_or_config
    if n < 1:
        raise ValueError("n must be >= 1")
    if cfg.variant == "MAT":
        k = cfg.k
        if n <= k:
            per = n * (n + 1) // 2
        else:
            per = k * (k + 1) // 2 + (n - k) * k
        resident = min(n, k) * cfg.d_model
    else:
        per = n * (n + 1) // 2
        resident = n * cfg.d_model
    return {
        "variant": cfg.variant,
        "k": cfg.window(),
        "n": n,
        "self_attn_scores": per,
        "total_self_attn_scores": per * cfg.dec_layers * cfg.heads,
        "kv_floats_resident": resident,
        "kv_bytes_resident": resident * 4,
    }
