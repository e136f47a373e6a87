"""Sequence transducer loss on the T x (U+1) emission lattice.

Forward-backward recursions run in the log domain with -inf standing in
for log(0). From lattice cell (t, u) a blank emission advances time to
(t+1, u) and a label emission advances the target position to (t, u+1);
the final arc is always the blank taken at (T-1, U). Gradients are
returned with respect to the raw joint logits, with the log-softmax
folded into the analytic formula.

An optional alignment band restricts each frame t to target positions
inside [u_min(t), u_max(t)]; cells outside the band keep alpha = beta =
-inf and receive zero gradient.
"""

from __future__ import annotations

import itertools
import math
from dataclasses import dataclass

import numpy as np

from .autodiff import GraphNode, Tensor, log_add_exp, log_softmax
from .errors import (
    BandDisconnectedError,
    EnumerationBoundError,
    LengthMismatchError,
    NonFiniteError,
    NonMonotoneReferenceError,
    ShapeMismatchError,
    TokenRangeError,
)

__all__ = [
    "AlignmentBand",
    "Lattice",
    "TransducerLossResult",
    "ar_transducer_loss",
    "brute_force_loss",
    "build_band",
    "lattice_consistency",
    "transducer_loss",
    "transducer_loss_node",
]

BLANK_ID = 0

# Path enumeration is exponential; keep requests small.
ENUMERATION_LIMIT = 14


@dataclass
class Lattice:
    """Forward and backward log-mass over the emission grid."""

    alpha: Tensor  # (T, U+1)
    beta: Tensor  # (T, U+1)
    loss: float


@dataclass
class TransducerLossResult:
    loss: float
    logit_gradients: Tensor  # (T, U+1, V+1), d loss / d raw logit
    lattice: Lattice


@dataclass
class AlignmentBand:
    """Per-frame target-position window around a reference alignment."""

    u_min: Tensor  # (T,) int
    u_max: Tensor  # (T,) int
    left_buffer: int
    right_buffer: int
    reference: Tensor  # (T,) int, the monotone map t -> u*(t)


def _validate_grid(logits: Tensor, targets: list[int]) -> tuple[int, int, int]:
    if logits.ndim != 3:
        raise ShapeMismatchError(f"joint logits must be (T, U+1, V+1), got {logits.shape}")
    t_len, u_rows, symbols = logits.shape
    u_len = len(targets)
    if u_rows != u_len + 1:
        raise ShapeMismatchError(
            f"grid has {u_rows} target rows but {u_len} targets require {u_len + 1}"
        )
    if t_len < 1:
        raise ShapeMismatchError("grid needs at least one frame")
    for y in targets:
        if not (1 <= y <= symbols - 1):
            raise TokenRangeError(
                f"target id {y} outside [1, {symbols - 1}] (0 is reserved for blank)"
            )
    return t_len, u_len, symbols


def _band_arrays(
    band: AlignmentBand | None, t_len: int, u_len: int
) -> tuple[Tensor, Tensor]:
    if band is None:
        return (
            np.zeros(t_len, dtype=np.int64),
            np.full(t_len, u_len, dtype=np.int64),
        )
    if len(band.u_min) != t_len or len(band.u_max) != t_len:
        raise LengthMismatchError(
            f"band covers {len(band.u_min)} frames but the grid has {t_len}"
        )
    if band.u_max.max() > u_len or band.u_min.min() < 0:
        raise ShapeMismatchError(
            f"band positions must lie in [0, {u_len}], got "
            f"[{band.u_min.min()}, {band.u_max.max()}]"
        )
    return band.u_min, band.u_max


def _lattice_forward_backward(
    logits: Tensor, targets: list[int], band: AlignmentBand | None
) -> tuple[Lattice, Tensor, Tensor, Tensor, Tensor]:
    t_len, u_len, _ = _validate_grid(logits, targets)
    u_min, u_max = _band_arrays(band, t_len, u_len)

    log_probs = log_softmax(logits, axis=2)
    lp_blank = log_probs[:, :, BLANK_ID]
    # lp_label[t, u] scores emitting targets[u] from cell (t, u).
    lp_label = np.full((t_len, u_len + 1), -np.inf)
    if u_len:
        tgt = np.asarray(targets, dtype=np.int64)
        lp_label[:, :u_len] = log_probs[:, np.arange(u_len), tgt]

    neg_inf = -np.inf
    alpha = np.full((t_len, u_len + 1), neg_inf)
    if u_min[0] == 0:
        alpha[0, 0] = 0.0
    for t in range(t_len):
        for u in range(int(u_min[t]), int(u_max[t]) + 1):
            if t == 0 and u == 0:
                continue
            from_blank = neg_inf
            if t > 0:
                from_blank = alpha[t - 1, u] + lp_blank[t - 1, u]
            from_label = neg_inf
            if u > 0:
                from_label = alpha[t, u - 1] + lp_label[t, u - 1]
            alpha[t, u] = log_add_exp(from_blank, from_label)

    beta = np.full((t_len, u_len + 1), neg_inf)
    if u_max[t_len - 1] == u_len:
        beta[t_len - 1, u_len] = lp_blank[t_len - 1, u_len]
    for t in range(t_len - 1, -1, -1):
        for u in range(int(u_max[t]), int(u_min[t]) - 1, -1):
            if t == t_len - 1 and u == u_len:
                continue
            via_blank = neg_inf
            if t + 1 < t_len:
                via_blank = lp_blank[t, u] + beta[t + 1, u]
            via_label = neg_inf
            if u + 1 <= u_len:
                via_label = lp_label[t, u] + beta[t, u + 1]
            beta[t, u] = log_add_exp(via_blank, via_label)

    log_z = alpha[t_len - 1, u_len] + lp_blank[t_len - 1, u_len]
    if np.isnan(log_z):
        raise NonFiniteError("transducer lattice produced NaN; check the input logits")
    if not np.isfinite(log_z):
        raise BandDisconnectedError(
            "no valid path through the lattice; the band disconnects start from end"
        )
    lattice = Lattice(alpha=alpha, beta=beta, loss=-float(log_z))
    return lattice, log_probs, lp_blank, lp_label, np.asarray(targets, dtype=np.int64)


def _logit_gradients(
    lattice: Lattice, log_probs: Tensor, lp_blank: Tensor, lp_label: Tensor, targets: Tensor
) -> Tensor:
    t_len, u_rows = lattice.alpha.shape
    u_len = u_rows - 1
    log_z = -lattice.loss
    alpha, beta = lattice.alpha, lattice.beta

    # Posterior mass of each arc out of each cell.
    gamma_blank = np.zeros((t_len, u_rows))
    gamma_label = np.zeros((t_len, u_rows))
    if t_len > 1:
        gamma_blank[: t_len - 1] = np.exp(
            alpha[: t_len - 1] + lp_blank[: t_len - 1] + beta[1:] - log_z
        )
    gamma_blank[t_len - 1, u_len] = np.exp(
        alpha[t_len - 1, u_len] + lp_blank[t_len - 1, u_len] - log_z
    )
    if u_len:
        gamma_label[:, :u_len] = np.exp(
            alpha[:, :u_len] + lp_label[:, :u_len] + beta[:, 1:] - log_z
        )
    occupancy = gamma_blank + gamma_label

    grads = np.exp(log_probs) * occupancy[:, :, None]
    grads[:, :, BLANK_ID] -= gamma_blank
    if u_len:
        rows = np.arange(t_len)[:, None]
        cols = np.arange(u_len)[None, :]
        np.subtract.at(
            grads,
            (rows, cols, np.broadcast_to(targets[None, :], (t_len, u_len))),
            gamma_label[:, :u_len],
        )
    return grads


def transducer_loss(logits: Tensor, targets: list[int]) -> TransducerLossResult:
    """Negative log-probability of ``targets`` summed over all monotone
    blank/label interleavings, with gradients for the raw logits."""
    lattice, log_probs, lp_blank, lp_label, tgt = _lattice_forward_backward(
        logits, targets, band=None
    )
    grads = _logit_gradients(lattice, log_probs, lp_blank, lp_label, tgt)
    return TransducerLossResult(loss=lattice.loss, logit_gradients=grads, lattice=lattice)


def ar_transducer_loss(
    logits: Tensor, targets: list[int], band: AlignmentBand
) -> TransducerLossResult:
    """Transducer loss restricted to the alignment band.

    Identical recursion to :func:`transducer_loss`; cells outside the
    band keep alpha = beta = -inf and contribute no gradient."""
    lattice, log_probs, lp_blank, lp_label, tgt = _lattice_forward_backward(
        logits, targets, band=band
    )
    grads = _logit_gradients(lattice, log_probs, lp_blank, lp_label, tgt)
    return TransducerLossResult(loss=lattice.loss, logit_gradients=grads, lattice=lattice)


def build_band(
    reference: Tensor | list[int], left_buffer: int, right_buffer: int, u_len: int
) -> AlignmentBand:
    """Band [u*(t) - left_buffer, u*(t) + right_buffer] clipped to [0, U].

    ``reference`` must be a non-decreasing map from frames to target
    positions that starts at 0 and ends at ``u_len``."""
    ref = np.asarray(reference, dtype=np.int64)
    if ref.ndim != 1 or len(ref) < 1:
        raise NonMonotoneReferenceError("reference must be a non-empty 1-d sequence")
    if np.any(np.diff(ref) < 0):
        raise NonMonotoneReferenceError("reference alignment must be non-decreasing")
    if ref[0] != 0 or ref[-1] != u_len:
        raise NonMonotoneReferenceError(
            f"reference must start at 0 and end at {u_len}, got {ref[0]}..{ref[-1]}"
        )
    if left_buffer < 0 or right_buffer < 0:
        raise ValueError("band buffers must be non-negative")
    u_min = np.maximum(0, ref - left_buffer)
    u_max = np.minimum(u_len, ref + right_buffer)
    return AlignmentBand(
        u_min=u_min,
        u_max=u_max,
        left_buffer=left_buffer,
        right_buffer=right_buffer,
        reference=ref,
    )


def _path_in_band(band: AlignmentBand | None, t: int, u: int) -> bool:
    if band is None:
        return True
    return band.u_min[t] <= u <= band.u_max[t]


def brute_force_loss(
    logits: Tensor, targets: list[int], band: AlignmentBand | None = None
) -> float:
    """Loss by explicit enumeration of every monotone path.

    A path interleaves T blank arcs with U label arcs; the last arc is
    necessarily the blank taken at (T-1, U), so the prefix enumerates
    C(T-1+U, U) interleavings. Only usable for T+U within the
    enumeration limit."""
    t_len, u_len, _ = _validate_grid(logits, targets)
    if t_len + u_len > ENUMERATION_LIMIT:
        raise EnumerationBoundError(
            f"T+U = {t_len + u_len} exceeds the enumeration limit {ENUMERATION_LIMIT}"
        )
    log_probs = log_softmax(logits, axis=2)
    lp_blank = log_probs[:, :, BLANK_ID]

    total = -math.inf
    prefix_arcs = t_len - 1 + u_len
    for label_slots in itertools.combinations(range(prefix_arcs), u_len):
        label_set = set(label_slots)
        t, u = 0, 0
        logp = 0.0
        valid = _path_in_band(band, 0, 0)
        for arc in range(prefix_arcs):
            if not valid:
                break
            if arc in label_set:
                logp += log_probs[t, u, targets[u]]
                u += 1
            else:
                logp += lp_blank[t, u]
                t += 1
            valid = _path_in_band(band, t, u)
        if not valid:
            continue
        logp += lp_blank[t_len - 1, u_len]
        total = log_add_exp(total, logp)
    if total == -math.inf:
        raise BandDisconnectedError("no enumerated path stays inside the band")
    return -total


def lattice_consistency(lattice: Lattice) -> float:
    """Max over anti-diagonals of |logadd(alpha + beta) - (-loss)|.

    Every surviving path crosses each anti-diagonal t + u = d exactly
    once, so the log-mass along any anti-diagonal must reproduce the
    total log-probability."""
    t_len, u_rows = lattice.alpha.shape
    target_log_z = -lattice.loss
    worst = 0.0
    for d in range(t_len + u_rows - 1):
        acc = -math.inf
        for t in range(t_len):
            u = d - t
            if 0 <= u < u_rows:
                acc = log_add_exp(acc, float(lattice.alpha[t, u] + lattice.beta[t, u]))
        worst = max(worst, abs(acc - target_log_z))
    return worst


def transducer_loss_node(
    logits: GraphNode, targets: list[int], band: AlignmentBand | None = None
) -> GraphNode:
    """Graph wrapper: scalar loss node whose backward scatters the
    analytic logit gradients."""
    if band is None:
        result = transducer_loss(logits.value, targets)
    else:
        result = ar_transducer_loss(logits.value, targets, band)
    out = GraphNode(result.loss, (logits,), op="transducer_loss")

    def _backward():
        logits.grad += out.grad * result.logit_gradients

    out._backward = _backward
    return out
