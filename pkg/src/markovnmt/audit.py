"""Perturbation audit of the decoder's conditioning context.

The claim under test: with a window of k over static keys/values, the
logits at target position t depend on the source and on target tokens
y_{t-k+1..t} only. The audit takes it literally: replace one target-side
input token, rerun the full forward pass, and require the logits at every
position outside that token's influence window to be *exactly* unchanged
(bitwise, not within a tolerance). Exactness is achievable because masked
attention weights are hard zeros and x + 0.0 leaves floats untouched.

A contextual-KV decoder with the same banded mask fails this audit at
depth >= 2: layer one mixes the window into its hidden states, layer two
reads those, and a token drifts outside its window.
"""

from __future__ import annotations

import json
from dataclasses import asdict, dataclass, field

import numpy as np

from .model import BOS_ID, EOS_ID, Model, UNK_ID, decode_forward, encode
from .tensor import no_grad


@dataclass
class Violation:
    sentence: int
    perturbed_position: int  # 1-based target input position that was edited
    logit_row: int  # decoder row whose logits moved
    delta: float


@dataclass
class AuditReport:
    """Outcome of an exhaustive single-token perturbation audit."""

    variant: str
    k: int | None
    dec_layers: int
    transparent: bool
    n_sentences: int
    n_forwards: int
    n_rows_checked: int
    max_out_of_window_delta: float
    passed: bool
    violations: list[Violation] = field(default_factory=list)

    def to_json(self) -> str:
        doc = asdict(self)
        doc["violations"] = doc["violations"][:50]  # keep reports readable
        return json.dumps(doc, indent=2, sort_keys=True)


def influence_window(cfg_k: int | None, j: int, n: int) -> np.ndarray:
    """Boolean mask over decoder rows that MAY legitimately change when
    target input position j is edited.

    Any causal decoder allows rows t >= j. A window of k further requires
    t - j < k: the edited token leaves row t's conditioning context k
    steps later.
    """
    t = np.arange(n)
    allowed = t >= j
    if cfg_k is not None:
        allowed &= (t - j) < cfg_k
    return allowed


def audit_sentence(
    model: Model,
    src_ids,
    tgt_ids,
    replacement_ids=None,
) -> tuple[float, list[tuple[int, int, float]], int, int]:
    """Exhaustively perturb each target token of one sentence.

    Returns (max out-of-window delta, violation triples, forwards, rows
    checked). ``replacement_ids`` defaults to every non-reserved id in the
    target vocabulary (UNK included).
    """
    cfg = model.config
    tgt_in = np.asarray([BOS_ID] + list(tgt_ids), dtype=np.int64)
    n = tgt_in.shape[0]
    if replacement_ids is None:
        replacement_ids = range(UNK_ID, cfg.tgt_vocab_size)
    with no_grad():
        memory = encode(model, src_ids)
        base = decode_forward(model, memory, tgt_in).data
    window = cfg.window()
    worst = 0.0
    violations: list[tuple[int, int, float]] = []
    forwards = 1
    rows_checked = 0
    for j in range(1, n):  # position 0 is BOS, never perturbed
        frozen_rows = ~influence_window(window, j, n)
        original = tgt_in[j]
        for repl in replacement_ids:
            if repl == original:
                continue
            tgt_in[j] = repl
            with no_grad():
                out = decode_forward(model, memory, tgt_in).data
            forwards += 1
            deltas = np.abs(out - base).max(axis=-1)  # (n,)
            frozen_delta = deltas[frozen_rows]
            rows_checked += int(frozen_rows.sum())
            if frozen_delta.size and float(frozen_delta.max()) > 0.0:
                worst = max(worst, float(frozen_delta.max()))
                for t in np.flatnonzero(frozen_rows):
                    if deltas[t] > 0.0:
                        violations.append((j, int(t), float(deltas[t])))
        tgt_in[j] = original
    return worst, violations, forwards, rows_checked


def audit_model(
    model: Model,
    n_sentences: int = 3,
    src_len: int = 6,
    tgt_len: int = 8,
    seed: int = 0,
) -> AuditReport:
    """Run the perturbation audit on random token sequences.

    Random ids exercise arbitrary logit landscapes; the property is
    architectural, so it must hold for any parameters and any ids.
    """
    cfg = model.config
    if tgt_len + 1 > cfg.max_len or src_len + 1 > cfg.max_len:
        raise ValueError("audit sentence lengths exceed max_len")
    rng = np.random.Generator(np.random.PCG64(seed))
    worst = 0.0
    violations: list[Violation] = []
    forwards = 0
    rows_checked = 0
    for s in range(n_sentences):
        src = rng.integers(UNK_ID, cfg.src_vocab_size, size=src_len).tolist() + [EOS_ID]
        tgt = rng.integers(UNK_ID, cfg.tgt_vocab_size, size=tgt_len).tolist()
        w, v, f, r = audit_sentence(model, src, tgt)
        worst = max(worst, w)
        forwards += f
        rows_checked += r
        violations.extend(
            Violation(sentence=s, perturbed_position=j, logit_row=t, delta=d) for j, t, d in v
        )
    return AuditReport(
        variant=cfg.variant,
        k=cfg.window(),
        dec_layers=cfg.dec_layers,
        transparent=cfg.is_transparent(),
        n_sentences=n_sentences,
        n_forwards=forwards,
        n_rows_checked=rows_checked,
        max_out_of_window_delta=worst,
        passed=not violations,
        violations=violations,
    )
