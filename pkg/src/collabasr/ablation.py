"""Ablation grid over loss weight, factor toggles, and branch count.

Every cell is one full training run; the grid writes one CSV with a row
per (run, branch). Deltas against the separate baselines are reported,
never judged: deciding whether a delta is good is the reader's job.

Toggle strings name four factors in a fixed order:
    position 0  shared-trunk collaborative training
    position 1  alignment-restricted transducer loss
    position 2  frame-level class cross-entropy
    position 3  branch-to-teacher distribution matching
A letter is 'y' when the factor is on, '-' when it is off.
"""

from __future__ import annotations

import csv
import math
import time
from dataclasses import replace
from pathlib import Path

from .errors import BandDisconnectedError, ConfigError, NonFiniteLossError
from .model import BranchSpec, EncoderConfig, ModelConfig, effective_depth
from .training import (
    LossSection,
    OptimSection,
    RunConfig,
    default_run_config,
    train_run,
)

CSV_COLUMNS = [
    "group",
    "toggles",
    "branch_depth",
    "lambda",
    "final_loss",
    "ter",
    "wall_ms_per_step",
    "ter_vs_separate",
    "status",
]

LAMBDA_SWEEP = [0.05, 0.1, 0.2, 0.3]
SEPARATE_LAMBDA = 0.6

# Effective depths (trunk + branch) for each branch-count variant. The
# four-branch set is the widest; the separate baselines cover its union.
FOUR_BRANCH_DEPTHS = [6, 5, 4, 3]
THREE_BRANCH_DEPTHS = [6, 4, 3]
TWO_BRANCH_DEPTHS = [6, 4]
SHARED_TRUNK_LAYERS = 2

FOUR_BRANCH_TOGGLES = ["y---", "y-y-", "y-yy", "yy--", "yyy-", "yyyy"]
THREE_BRANCH_TOGGLES = ["y-yy", "yyyy"]
TWO_BRANCH_TOGGLES = ["yyyy"]
SEPARATE_TOGGLES = ["----", "--y-"]


def _toggle_loss(toggles: str, lam: float) -> LossSection:
    if len(toggles) != 4 or any(c not in "y-" for c in toggles):
        raise ValueError(f"bad toggle string {toggles!r}")
    use_ce = toggles[2] == "y"
    use_kl = toggles[3] == "y"
    return LossSection(
        lam=lam if (use_ce or use_kl) else 0.0,
        use_aux_ce=use_ce,
        use_kl=use_kl,
        use_ar=toggles[1] == "y",
    )


def _model_for_depths(base: RunConfig, depths: list[int], shared: bool) -> ModelConfig:
    trunk = SHARED_TRUNK_LAYERS if shared else 0
    for d in depths:
        if d <= trunk:
            raise ValueError(f"effective depth {d} leaves no branch layers")
    enc = replace(base.model.encoder, trunk_layers=trunk)
    branches = [BranchSpec(i, d - trunk) for i, d in enumerate(depths)]
    return replace(base.model, encoder=enc, branches=branches)


def _steps_per_epoch(config: RunConfig) -> int:
    return math.ceil(config.data.utterances / config.optim.batch_size)


def _run_cell(config: RunConfig) -> tuple[list[float], list[float], float]:
    """Train one cell; returns (per-branch held-out loss, per-branch TER,
    wall ms per step)."""
    t0 = time.perf_counter()
    result = train_run(config)
    elapsed_ms = (time.perf_counter() - t0) * 1000.0
    steps = max(config.optim.epochs * _steps_per_epoch(config), 1)
    eval_rows = [r for r in result.records if r.kind == "eval"]
    if eval_rows:
        final_loss = eval_rows[-1].trans
        ter = eval_rows[-1].ter
    else:
        final_loss = [float("nan")] * len(config.model.branches)
        ter = [float("nan")] * len(config.model.branches)
    return final_loss, ter, elapsed_ms / steps


def run_ablation(
    out_dir: str | Path,
    epochs: int = 30,
    utterances: int = 200,
    eval_utterances: int = 20,
    seed: int = 0,
) -> list[dict]:
    """Run the full grid and write ablation.csv under ``out_dir``."""
    out_dir = Path(out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)

    base = default_run_config(str(out_dir / "cells"))
    base.data = replace(base.data, utterances=utterances)
    base.optim = replace(base.optim, epochs=epochs)
    base.eval_utterances = eval_utterances
    base.seed = seed

    rows: list[dict] = []
    cell_idx = 0

    def run_and_append(group: str, toggles: str, lam: float,
                       depths: list[int], shared: bool) -> None:
        nonlocal cell_idx
        cfg = replace(
            base,
            model=_model_for_depths(base, depths, shared),
            loss=_toggle_loss(toggles, lam),
            out_dir=str(out_dir / "cells" / f"cell{cell_idx:03d}"),
        )
        cell_idx += 1
        try:
            loss, ter, wall = _run_cell(cfg)
            for b, depth in enumerate(depths):
                rows.append({
                    "group": group,
                    "toggles": toggles,
                    "branch_depth": depth,
                    "lambda": cfg.loss.lam,
                    "final_loss": float(loss[b]),
                    "ter": float(ter[b]),
                    "wall_ms_per_step": float(wall),
                    "ter_vs_separate": "",
                    "status": "ok",
                })
        except (NonFiniteLossError, BandDisconnectedError, ConfigError) as exc:
            for depth in depths:
                rows.append({
                    "group": group,
                    "toggles": toggles,
                    "branch_depth": depth,
                    "lambda": lam,
                    "final_loss": "",
                    "ter": "",
                    "wall_ms_per_step": "",
                    "ter_vs_separate": "",
                    "status": f"failed: {type(exc).__name__}",
                })

    # Loss-weight sweep on the default three-branch recipe.
    for lam in LAMBDA_SWEEP:
        run_and_append("lambda", "yyyy", lam, [5, 4, 3], shared=True)

    # Separate baselines: one single-branch model per depth in the union.
    for toggles in SEPARATE_TOGGLES:
        lam = SEPARATE_LAMBDA if toggles[2] == "y" else 0.0
        for depth in FOUR_BRANCH_DEPTHS:
            run_and_append("factor", toggles, lam, [depth], shared=False)

    # Collaborative variants.
    for toggles in FOUR_BRANCH_TOGGLES:
        run_and_append("factor", toggles, 0.1, FOUR_BRANCH_DEPTHS, shared=True)
    for toggles in THREE_BRANCH_TOGGLES:
        run_and_append("factor", toggles, 0.1, THREE_BRANCH_DEPTHS, shared=True)
    for toggles in TWO_BRANCH_TOGGLES:
        run_and_append("factor", toggles, 0.1, TWO_BRANCH_DEPTHS, shared=True)

    # Delta column against the plain separate baseline at matching depth.
    sep_ter = {
        r["branch_depth"]: r["ter"]
        for r in rows
        if r["toggles"] == "----" and r["status"] == "ok"
    }
    for r in rows:
        if r["toggles"] != "----" and r["status"] == "ok":
            base_ter = sep_ter.get(r["branch_depth"])
            if base_ter is not None:
                r["ter_vs_separate"] = r["ter"] - base_ter

    with open(out_dir / "ablation.csv", "w", newline="") as fh:
        writer = csv.DictWriter(fh, fieldnames=CSV_COLUMNS)
        writer.writeheader()
        writer.writerows(rows)
    return rows


def wall_time_comparison(
    utterances: int = 50,
    epochs: int = 2,
    seed: int = 0,
    repeats: int = 3,
) -> dict[str, float]:
    """Per-step wall time of a shared-trunk model against a no-sharing
    model with the same effective depths [5, 4, 3]. Best of ``repeats``
    to damp scheduler noise."""
    base = default_run_config("runs/walltime")
    base.data = replace(base.data, utterances=utterances)
    base.optim = replace(base.optim, epochs=epochs)
    base.eval_utterances = 0
    base.seed = seed

    def best_wall(shared: bool, tag: str) -> float:
        cfg = replace(
            base,
            model=_model_for_depths(base, [5, 4, 3], shared),
            out_dir=f"/tmp/collabasr-walltime-{tag}",
        )
        walls = []
        for _ in range(repeats):
            _, _, wall = _run_cell(cfg)
            walls.append(wall)
        return min(walls)

    return {
        "shared_ms_per_step": best_wall(True, "shared"),
        "separate_ms_per_step": best_wall(False, "separate"),
    }
