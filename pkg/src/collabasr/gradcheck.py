"""Finite-difference verification of backpropagated gradients.

The checker perturbs each parameter element in both directions, rebuilds
the loss, and compares the central difference against the analytic
gradient. Large parameter sets are subsampled with a seeded generator so
runtime stays bounded while coverage stays reproducible.
"""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import Callable

import numpy as np

from .autodiff import GraphNode, backpropagate, zero_gradients
from .errors import NonDeterministicLossError

__all__ = ["GradCheckReport", "check_gradients", "SUBSAMPLE_LIMIT"]

# Above this many total elements, a seeded subsample is checked instead
# of every coordinate.
SUBSAMPLE_LIMIT = 5000


@dataclass
class GradCheckReport:
    max_relative_error: float
    tolerance: float
    entries: list[tuple[str, float, float, float]] = field(default_factory=list)
    checked_elements: int = 0

    @property
    def passed(self) -> bool:
        return self.max_relative_error < self.tolerance


def _relative_error(analytic: float, numeric: float) -> float:
    # The 1e-5 floor keeps near-zero gradients comparable on an absolute
    # scale: a central difference of an O(1) loss at step 1e-5 carries
    # roundoff around 1e-10, so demanding relative agreement below that
    # would only measure noise. A genuinely wrong gradient still exceeds
    # the floored ratio by orders of magnitude.
    return abs(analytic - numeric) / max(abs(analytic), abs(numeric), 1e-5)


def check_gradients(
    loss_builder: Callable[[], GraphNode],
    params: dict[str, GraphNode],
    step: float = 1e-5,
    tolerance: float = 1e-4,
    seed: int = 0,
) -> GradCheckReport:
    """Compare analytic gradients of ``loss_builder`` against central
    finite differences over ``params``.

    ``loss_builder`` must rebuild the loss graph from the current
    parameter values on every call and must be deterministic; the two
    initial evaluations are required to agree bit-for-bit.
    """
    first = float(loss_builder().value)
    second = float(loss_builder().value)
    if first != second:
        raise NonDeterministicLossError(
            f"loss builder returned {first!r} then {second!r} for identical inputs"
        )

    zero_gradients(params.values())
    root = loss_builder()
    backpropagate(root)
    analytic = {name: node.grad.copy() for name, node in params.items()}

    total = sum(node.value.size for node in params.values())
    rng = np.random.default_rng(seed)
    plan: list[tuple[str, np.ndarray]] = []
    if total <= SUBSAMPLE_LIMIT:
        for name, node in params.items():
            plan.append((name, np.arange(node.value.size)))
    else:
        # Proportional seeded subsample; every parameter keeps >= 1 element.
        for name, node in params.items():
            size = node.value.size
            quota = max(1, int(round(SUBSAMPLE_LIMIT * size / total)))
            quota = min(quota, size)
            plan.append((name, rng.choice(size, size=quota, replace=False)))

    worst = 0.0
    entries: list[tuple[str, float, float, float]] = []
    checked = 0
    for name, flat_indices in plan:
        node = params[name]
        flat_value = node.value.reshape(-1)
        flat_grad = analytic[name].reshape(-1)
        param_worst = (f"{name}[?]", 0.0, 0.0, -1.0)
        for i in flat_indices:
            original = flat_value[i]
            flat_value[i] = original + step
            up = float(loss_builder().value)
            flat_value[i] = original - step
            down = float(loss_builder().value)
            flat_value[i] = original
            numeric = (up - down) / (2.0 * step)
            err = _relative_error(float(flat_grad[i]), numeric)
            checked += 1
            if err > param_worst[3]:
                idx = np.unravel_index(int(i), node.value.shape)
                param_worst = (
                    f"{name}{list(idx)}",
                    float(flat_grad[i]),
                    numeric,
                    err,
                )
        entries.append(param_worst)
        worst = max(worst, param_worst[3])

    return GradCheckReport(
        max_relative_error=worst,
        tolerance=tolerance,
        entries=entries,
        checked_elements=checked,
    )
