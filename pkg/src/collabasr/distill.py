"""Loss composition for collaborative multi-branch training.

Per utterance the total is

    L = sum_i L_Trans,i + lambda * (L_CE + L_KL)

where L_CE sums every branch's frame cross-entropy against the class
alignment and L_KL sums, over the non-teacher branches, the divergence
from the teacher's frame posteriors to the student's. The teacher is
the deepest branch (ties break toward the lowest index). Frame terms
are summed, not averaged, so utterance length scales the encoder losses
the same way it scales the transducer term.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from . import autodiff as ad
from .autodiff import GraphNode
from .errors import ConfigError, DistributionError, LengthMismatchError, TokenRangeError
from .model import BranchSpec
from .transducer import AlignmentBand, transducer_loss_node

__all__ = [
    "FactorToggles",
    "LossBreakdown",
    "LossWeights",
    "ce_frame_loss",
    "kl_codistill_loss",
    "select_teacher",
    "total_loss",
]


@dataclass
class LossWeights:
    lam: float = 0.1
    teacher_grad_mode: str = "stopped"  # or "flowing"
    ce_scale: float = 1.0
    kl_scale: float = 1.0

    def validate(self) -> None:
        if self.lam < 0:
            raise ConfigError(f"lambda must be >= 0, got {self.lam}")
        if self.teacher_grad_mode not in ("stopped", "flowing"):
            raise ConfigError(
                f"teacher_grad_mode must be 'stopped' or 'flowing', got "
                f"{self.teacher_grad_mode!r}"
            )


@dataclass
class FactorToggles:
    use_aux_ce: bool = True
    use_kl: bool = True


@dataclass
class LossBreakdown:
    per_branch_trans: list[float]
    per_branch_ce: list[float]
    per_branch_kl: list[float]
    teacher_index: int
    total: float

    @property
    def trans_sum(self) -> float:
        return float(sum(self.per_branch_trans))

    @property
    def ce_sum(self) -> float:
        return float(sum(self.per_branch_ce))

    @property
    def kl_sum(self) -> float:
        return float(sum(self.per_branch_kl))


def _check_rows_normalized(log_probs: np.ndarray, who: str) -> None:
    row_mass = np.exp(log_probs).sum(axis=-1)
    worst = np.abs(row_mass - 1.0).max()
    if worst > 1e-6:
        raise DistributionError(
            f"{who} rows are not normalized log-probabilities (max deviation {worst:.3e})"
        )


def ce_frame_loss(log_probs: GraphNode, class_targets) -> GraphNode:
    """Summed negative log-probability of the aligned class per frame."""
    targets = np.asarray(class_targets, dtype=np.int64)
    t_len, n_classes = log_probs.shape
    if targets.ndim != 1 or len(targets) != t_len:
        raise LengthMismatchError(
            f"{len(targets)} frame targets for {t_len} log-prob rows"
        )
    if targets.size and (targets.min() < 0 or targets.max() >= n_classes):
        raise TokenRangeError(
            f"class targets must lie in [0, {n_classes - 1}], got "
            f"[{targets.min()}, {targets.max()}]"
        )
    one_hot = np.zeros((t_len, n_classes))
    one_hot[np.arange(t_len), targets] = 1.0
    picked = log_probs * ad.constant(one_hot)
    return -ad.sum_all(picked)


def kl_codistill_loss(
    student_log_probs: GraphNode, teacher_log_probs: GraphNode, teacher_grad_mode: str
) -> GraphNode:
    """sum_t sum_c P_teacher (log P_teacher - log P_student).

    With mode "stopped" the teacher side is treated as a constant; with
    "flowing" gradients also reach the teacher's parameters."""
    if student_log_probs.shape != teacher_log_probs.shape:
        raise LengthMismatchError(
            f"student {student_log_probs.shape} and teacher "
            f"{teacher_log_probs.shape} disagree"
        )
    _check_rows_normalized(student_log_probs.value, "student")
    _check_rows_normalized(teacher_log_probs.value, "teacher")
    if teacher_grad_mode == "stopped":
        teacher_log_probs = ad.detach(teacher_log_probs)
    elif teacher_grad_mode != "flowing":
        raise ValueError(f"unknown teacher_grad_mode {teacher_grad_mode!r}")
    teacher_probs = ad.exp(teacher_log_probs)
    return ad.sum_all(teacher_probs * (teacher_log_probs - student_log_probs))


def select_teacher(branches: list[BranchSpec], trunk_layers: int = 0) -> int:
    """Index of the deepest branch; ties break toward the lowest index."""
    if not branches:
        raise ValueError("no branches to select a teacher from")
    depths = [trunk_layers + spec.layers for spec in branches]
    best = 0
    for i, depth in enumerate(depths):
        if depth > depths[best]:
            best = i
    return best


def total_loss(
    grids: list[GraphNode],
    aux_log_probs: list[GraphNode] | None,
    targets: list[int],
    class_targets,
    branches: list[BranchSpec],
    weights: LossWeights,
    toggles: FactorToggles,
    band: AlignmentBand | None = None,
    trunk_layers: int = 0,
    teacher_override: np.ndarray | None = None,
) -> tuple[LossBreakdown, GraphNode]:
    """Compose the per-utterance training loss over all branches.

    ``grids`` holds one joint logit grid per branch; ``aux_log_probs``
    one frame log-probability matrix per branch (may be None when both
    encoder-loss toggles are off). Returns the breakdown (floats) and
    the scalar loss node for backpropagation.

    ``teacher_override`` pins the matching target to a fixed
    log-probability array instead of the live teacher branch. Finite
    difference checks of the stopped-gradient mode need this: the loss
    treats the target as a constant, so the probe must hold it fixed."""
    weights.validate()
    if len(grids) != len(branches):
        raise LengthMismatchError(
            f"{len(grids)} grids for {len(branches)} branches"
        )
    shape0 = grids[0].shape
    for g in grids[1:]:
        if g.shape != shape0:
            raise LengthMismatchError(
                f"branch grids disagree on utterance geometry: {g.shape} vs {shape0}"
            )

    need_aux = toggles.use_aux_ce or toggles.use_kl
    if need_aux:
        if aux_log_probs is None or len(aux_log_probs) != len(branches):
            raise LengthMismatchError(
                "encoder losses are enabled but per-branch frame log-probs are missing"
            )
        t_frames = grids[0].shape[0]
        for a in aux_log_probs:
            if a.shape[0] != t_frames:
                raise LengthMismatchError(
                    f"frame log-probs cover {a.shape[0]} frames, grids cover {t_frames}"
                )

    n = len(branches)
    teacher = select_teacher(branches, trunk_layers)

    trans_nodes = [transducer_loss_node(g, targets, band) for g in grids]
    per_trans = [float(node.value) for node in trans_nodes]
    total_node = trans_nodes[0]
    for node in trans_nodes[1:]:
        total_node = total_node + node

    per_ce = [0.0] * n
    per_kl = [0.0] * n
    enc_node: GraphNode | None = None
    if toggles.use_aux_ce:
        for i in range(n):
            ce = ce_frame_loss(aux_log_probs[i], class_targets)
            per_ce[i] = float(ce.value)
            scaled = ce * weights.ce_scale if weights.ce_scale != 1.0 else ce
            enc_node = scaled if enc_node is None else enc_node + scaled
    if toggles.use_kl:
        target = aux_log_probs[teacher] if aux_log_probs else None
        if teacher_override is not None:
            target = ad.constant(np.asarray(teacher_override, dtype=np.float64))
        for i in range(n):
            if i == teacher:
                continue
            kl = kl_codistill_loss(
                aux_log_probs[i], target, weights.teacher_grad_mode
            )
            per_kl[i] = float(kl.value)
            scaled = kl * weights.kl_scale if weights.kl_scale != 1.0 else kl
            enc_node = scaled if enc_node is None else enc_node + scaled

    if enc_node is not None and weights.lam != 0.0:
        total_node = total_node + enc_node * weights.lam

    breakdown = LossBreakdown(
        per_branch_trans=per_trans,
        per_branch_ce=per_ce,
        per_branch_kl=per_kl,
        teacher_index=teacher,
        total=float(total_node.value),
    )
    return breakdown, total_node
