"""Greedy transducer decoding and token error rate.

Decoding runs on plain numpy arrays (parameter values, no graph): it is a
read-only consumer of a trained model, and the per-step numpy math mirrors
the graph-building predictor and joiner exactly.
"""

from __future__ import annotations

from typing import Callable

import numpy as np

from .errors import EmptyReferenceError, LengthMismatchError
from .model import CollabModelParams, build_attention_mask, encode
from .transducer import BLANK_ID

MAX_SYMBOLS_PER_FRAME = 4


def _sigmoid(x: np.ndarray) -> np.ndarray:
    out = np.empty_like(x)
    pos = x >= 0
    out[pos] = 1.0 / (1.0 + np.exp(-x[pos]))
    ex = np.exp(x[~pos])
    out[~pos] = ex / (1.0 + ex)
    return out


def predictor_init(params: CollabModelParams) -> np.ndarray:
    return np.zeros((1, params.config.predictor_dim))


def predictor_step(
    params: CollabModelParams, hidden: np.ndarray, token_id: int
) -> tuple[np.ndarray, np.ndarray]:
    """Advance the recurrent label state by one input id (0 = start symbol).

    Returns (joint-space output row, new hidden state).
    """
    p = params.tensors
    d = params.config.predictor_dim
    x = p["pred.embed"].value[token_id : token_id + 1]
    gx = x @ p["pred.wx"].value + p["pred.bx"].value
    gh = hidden @ p["pred.wh"].value + p["pred.bh"].value
    update = _sigmoid(gx[:, :d] + gh[:, :d])
    reset = _sigmoid(gx[:, d : 2 * d] + gh[:, d : 2 * d])
    cand = np.tanh(gx[:, 2 * d :] + reset * gh[:, 2 * d :])
    new_hidden = cand + update * (hidden - cand)
    out = new_hidden @ p["pred.out_w"].value + p["pred.out_b"].value
    return out[0], new_hidden


def joint_step(
    params: CollabModelParams, enc_row: np.ndarray, pred_row: np.ndarray
) -> np.ndarray:
    """Joint logits for a single (frame, label-state) pair."""
    p = params.tensors
    hidden = np.maximum(enc_row + pred_row, 0.0)
    return hidden @ p["joiner.w"].value + p["joiner.b"].value


def greedy_loop(
    num_frames: int,
    emit: Callable[[int, list[int]], int],
    max_symbols_per_frame: int = MAX_SYMBOLS_PER_FRAME,
) -> list[int]:
    """Greedy decoding shell.

    ``emit(t, history)`` returns the best token id for frame ``t`` given the
    tokens decoded so far; blank advances to the next frame. The per-frame
    symbol cap bounds the output even for a degenerate emitter.
    """
    history: list[int] = []
    for t in range(num_frames):
        for _ in range(max_symbols_per_frame):
            tok = emit(t, history)
            if tok == BLANK_ID:
                break
            history.append(tok)
    return history


def greedy_decode(
    params: CollabModelParams, features: np.ndarray, branch: int = 0
) -> list[int]:
    """Greedy decode one utterance (encoder-rate features) with one branch."""
    enc_cfg = params.config.encoder
    mask = build_attention_mask(
        features.shape[0],
        enc_cfg.chunk_frames,
        enc_cfg.lookahead_frames,
        enc_cfg.left_context,
    )
    enc = encode(params, features, branch, mask).projected.value

    # Incremental predictor state, advanced only when history grows.
    state = {"hidden": predictor_init(params), "row": None, "len": -1}

    def emit(t: int, history: list[int]) -> int:
        if state["len"] < len(history):
            if state["len"] < 0:
                row, hidden = predictor_step(params, state["hidden"], 0)
                state.update(hidden=hidden, row=row, len=0)
            while state["len"] < len(history):
                tok = history[state["len"]]
                row, hidden = predictor_step(params, state["hidden"], tok)
                state.update(hidden=hidden, row=row, len=state["len"] + 1)
        logits = joint_step(params, enc[t], state["row"])
        return int(np.argmax(logits))

    return greedy_loop(enc.shape[0], emit)


def levenshtein(hyp: list[int], ref: list[int]) -> int:
    """Edit distance with unit costs."""
    prev = list(range(len(ref) + 1))
    for i, h in enumerate(hyp, start=1):
        cur = [i]
        for j, r in enumerate(ref, start=1):
            cur.append(min(prev[j] + 1, cur[j - 1] + 1, prev[j - 1] + (h != r)))
        prev = cur
    return prev[-1]


def token_error_rate(hyps: list[list[int]], refs: list[list[int]]) -> float:
    """Sum of edit distances over the sum of reference lengths."""
    if len(hyps) != len(refs):
        raise LengthMismatchError(
            f"{len(hyps)} hypotheses against {len(refs)} references"
        )
    total_ref = sum(len(r) for r in refs)
    if total_ref == 0:
        raise EmptyReferenceError("no reference tokens to score against")
    total_err = sum(levenshtein(h, r) for h, r in zip(hyps, refs))
    return total_err / total_ref
