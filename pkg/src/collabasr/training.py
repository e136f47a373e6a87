"""Run configuration, the training loop, and run artifacts.

Everything a run writes is reproducible byte for byte from the config:
metrics.csv carries no timestamps or wall times (those go to the
timings.csv sidecar, which is allowed to differ between runs).
"""

from __future__ import annotations

import csv
import json
import time
from dataclasses import asdict, dataclass, field, fields, replace
from pathlib import Path

import numpy as np

from . import autodiff as ad
from .autodiff import GraphNode
from .data import (
    FeaturePipelineConfig,
    SyntheticCorpusConfig,
    Utterance,
    align_to_encoder_rate,
    band_reference,
    generate_corpus,
    make_projection,
    mask_augment,
    stack_frames,
)
from .decoding import greedy_decode, token_error_rate
from .distill import FactorToggles, LossBreakdown, LossWeights, total_loss
from .errors import ConfigError, NonFiniteError, NonFiniteLossError
from .model import (
    BranchSpec,
    CollabModelParams,
    EncoderConfig,
    ModelConfig,
    build_attention_mask,
    extract_branch,
    forward_branches,
    init_params,
    join,
    predict,
    aux_project,
    save_checkpoint,
)
from .optim import OptimizerState, adam_step
from .transducer import build_band

CONFIG_FORMAT_VERSION = 1


# ---------------------------------------------------------------------------
# Configuration


@dataclass
class LossSection:
    lam: float = 0.1
    ce_scale: float = 1.0
    kl_scale: float = 1.0
    teacher_grad_mode: str = "stopped"
    use_aux_ce: bool = True
    use_kl: bool = True
    use_ar: bool = True
    band_left: int = 1
    band_right: int = 2

    def weights(self) -> LossWeights:
        return LossWeights(
            lam=self.lam,
            teacher_grad_mode=self.teacher_grad_mode,
            ce_scale=self.ce_scale,
            kl_scale=self.kl_scale,
        )

    def toggles(self) -> FactorToggles:
        return FactorToggles(use_aux_ce=self.use_aux_ce, use_kl=self.use_kl)


@dataclass
class OptimSection:
    base_lr: float = 1e-3
    warmup_steps: int = 100
    clip_norm: float | None = None
    batch_size: int = 5
    epochs: int = 30


@dataclass
class RunConfig:
    model: ModelConfig
    data: SyntheticCorpusConfig
    pipeline: FeaturePipelineConfig
    loss: LossSection
    optim: OptimSection
    seed: int = 0
    out_dir: str = "runs/default"
    eval_utterances: int = 20

    def validate(self) -> None:
        self.model.validate()
        self.data.validate()
        self.pipeline.validate()
        self.loss.weights().validate()
        if self.optim.batch_size < 1 or self.optim.epochs < 0:
            raise ConfigError("batch_size must be >= 1 and epochs >= 0")
        if self.optim.base_lr <= 0:
            raise ConfigError("base_lr must be positive")
        if self.eval_utterances < 0:
            raise ConfigError("eval_utterances must be >= 0")
        need = self.pipeline.stride * self.pipeline.projection_dim
        if self.model.input_dim != need:
            raise ConfigError(
                f"model input_dim {self.model.input_dim} does not match the "
                f"stacked feature width {need}"
            )

    def to_dict(self) -> dict:
        return {
            "format_version": CONFIG_FORMAT_VERSION,
            "seed": self.seed,
            "out_dir": self.out_dir,
            "eval_utterances": self.eval_utterances,
            "model": self.model.to_dict(),
            "data": asdict(self.data),
            "pipeline": asdict(self.pipeline),
            "loss": asdict(self.loss),
            "optim": asdict(self.optim),
        }


def _build_section(cls, raw: dict, section: str):
    allowed = {f.name for f in fields(cls)}
    unknown = set(raw) - allowed
    if unknown:
        raise ConfigError(
            f"unknown key(s) {sorted(unknown)} in config section '{section}'"
        )
    return cls(**raw)


def run_config_from_dict(raw: dict) -> RunConfig:
    raw = dict(raw)
    version = raw.pop("format_version", None)
    if version != CONFIG_FORMAT_VERSION:
        raise ConfigError(
            f"unsupported config format_version {version!r}, "
            f"expected {CONFIG_FORMAT_VERSION}"
        )
    sections = {"model", "data", "pipeline", "loss", "optim"}
    scalars = {"seed", "out_dir", "eval_utterances"}
    unknown = set(raw) - sections - scalars
    if unknown:
        raise ConfigError(f"unknown top-level config key(s) {sorted(unknown)}")
    missing = sections - set(raw)
    if missing:
        raise ConfigError(f"missing config section(s) {sorted(missing)}")
    try:
        model = ModelConfig.from_dict(raw["model"])
    except TypeError as exc:
        raise ConfigError(f"bad model section: {exc}") from exc
    cfg = RunConfig(
        model=model,
        data=_build_section(SyntheticCorpusConfig, raw["data"], "data"),
        pipeline=_build_section(FeaturePipelineConfig, raw["pipeline"], "pipeline"),
        loss=_build_section(LossSection, raw["loss"], "loss"),
        optim=_build_section(OptimSection, raw["optim"], "optim"),
        seed=int(raw.get("seed", 0)),
        out_dir=str(raw.get("out_dir", "runs/default")),
        eval_utterances=int(raw.get("eval_utterances", 20)),
    )
    cfg.validate()
    return cfg


def load_run_config(path: str | Path) -> RunConfig:
    try:
        raw = json.loads(Path(path).read_text())
    except json.JSONDecodeError as exc:
        raise ConfigError(f"config file {path} is not valid JSON: {exc}") from exc
    if not isinstance(raw, dict):
        raise ConfigError(f"config file {path} must hold a JSON object")
    return run_config_from_dict(raw)


def save_run_config(config: RunConfig, path: str | Path) -> None:
    Path(path).write_text(json.dumps(config.to_dict(), indent=2) + "\n")


def default_run_config(out_dir: str = "runs/default") -> RunConfig:
    """Desk-scale defaults: three shared-trunk branches over a synthetic
    separable corpus, small enough to converge in well under five minutes."""
    return RunConfig(
        model=ModelConfig(
            encoder=EncoderConfig(
                model_dim=32,
                num_heads=4,
                ffn_dim=64,
                trunk_layers=2,
                chunk_frames=4,
                lookahead_frames=1,
            ),
            branches=[BranchSpec(0, 3), BranchSpec(1, 2), BranchSpec(2, 1)],
            vocab_size=8,
            num_classes=8,
            input_dim=32,
            joint_dim=32,
            predictor_dim=32,
            aux_hidden=32,
        ),
        data=SyntheticCorpusConfig(utterances=200),
        pipeline=FeaturePipelineConfig(projection_dim=8, stride=4),
        loss=LossSection(),
        optim=OptimSection(base_lr=3e-3, warmup_steps=30),
        seed=0,
        out_dir=out_dir,
    )


# ---------------------------------------------------------------------------
# Per-utterance loss assembly


def utterance_loss(
    params: CollabModelParams,
    utt: Utterance,
    config: RunConfig,
    projection: np.ndarray | None,
    augment_rng: np.random.Generator | None = None,
) -> tuple[LossBreakdown, GraphNode]:
    """Stack features, encode every branch, and compose the joint loss."""
    feats = utt.features
    if augment_rng is not None:
        feats = mask_augment(feats, config.pipeline, augment_rng)
    stacked = stack_frames(feats, config.pipeline.stride, projection)

    enc = config.model.encoder
    mask = build_attention_mask(
        stacked.shape[0], enc.chunk_frames, enc.lookahead_frames, enc.left_context
    )
    outs = forward_branches(params, stacked, mask)
    h_pred = predict(params, utt.tokens)
    grids = [join(params, o.projected, h_pred) for o in outs]

    toggles = config.loss.toggles()
    aux = None
    if toggles.use_aux_ce or toggles.use_kl:
        aux = [aux_project(params, o.features) for o in outs]
    class_targets = align_to_encoder_rate(utt.alignment, config.pipeline.stride)

    band = None
    if config.loss.use_ar:
        ref = band_reference(utt, config.data.num_classes, config.pipeline.stride)
        band = build_band(
            ref, config.loss.band_left, config.loss.band_right, len(utt.tokens)
        )

    return total_loss(
        grids,
        aux,
        utt.tokens,
        class_targets,
        config.model.branches,
        config.loss.weights(),
        toggles,
        band=band,
        trunk_layers=enc.trunk_layers,
    )


# ---------------------------------------------------------------------------
# Metrics


@dataclass
class MetricsRecord:
    step: int
    kind: str  # "train" or "eval"
    lr: float
    trans: list[float]
    ce: list[float]
    kl: list[float]
    ter: list[float] = field(default_factory=list)


def _metrics_header(num_branches: int) -> list[str]:
    cols = ["step", "kind", "lr"]
    for stat in ("trans", "ce", "kl", "ter"):
        cols.extend(f"{stat}_{i}" for i in range(num_branches))
    return cols


def write_metrics(records: list[MetricsRecord], num_branches: int, path: Path) -> None:
    with open(path, "w", newline="") as fh:
        writer = csv.writer(fh)
        writer.writerow(_metrics_header(num_branches))
        for rec in records:
            # repr(float(v)) is the shortest round-trip decimal; numpy
            # scalars must be unwrapped first or their repr leaks the type.
            row: list[str] = [str(rec.step), rec.kind, repr(float(rec.lr))]
            for stat in (rec.trans, rec.ce, rec.kl):
                row.extend(repr(float(v)) for v in stat)
            if rec.ter:
                row.extend(repr(float(v)) for v in rec.ter)
            else:
                row.extend([""] * num_branches)
            writer.writerow(row)


# ---------------------------------------------------------------------------
# Training loop


@dataclass
class TrainResult:
    params: CollabModelParams
    records: list[MetricsRecord]
    eval_ter: list[float]
    checkpoint_path: Path
    metrics_path: Path


def build_corpora(config: RunConfig) -> tuple[list[Utterance], list[Utterance]]:
    """Training corpus plus a held-out corpus drawn from the next seed."""
    train = generate_corpus(config.data)
    held_out = generate_corpus(
        replace(config.data, seed=config.data.seed + 1, utterances=config.eval_utterances)
    )
    return train, held_out


def _feature_projection(config: RunConfig) -> np.ndarray | None:
    if config.data.feature_dim == config.pipeline.projection_dim:
        return None
    return make_projection(
        config.data.feature_dim, config.pipeline.projection_dim, seed=config.seed
    )


def evaluate_losses(
    params: CollabModelParams, corpus: list[Utterance], config: RunConfig
) -> list[float]:
    """Mean per-utterance unrestricted transducer loss per branch."""
    eval_cfg = replace(
        config, loss=replace(config.loss, lam=0.0, use_ar=False)
    )
    projection = _feature_projection(config)
    totals = np.zeros(len(config.model.branches))
    for utt in corpus:
        breakdown, _ = utterance_loss(params, utt, eval_cfg, projection)
        totals += np.asarray(breakdown.per_branch_trans)
    return list(totals / max(len(corpus), 1))


def evaluate_ter(
    params: CollabModelParams, corpus: list[Utterance], config: RunConfig
) -> list[float]:
    """Greedy-decoding token error rate per branch on a corpus, each branch
    scored through its extracted single-branch model."""
    projection = _feature_projection(config)
    ters = []
    for b in range(len(config.model.branches)):
        single = extract_branch(params, b)
        hyps = []
        refs = []
        for utt in corpus:
            stacked = stack_frames(utt.features, config.pipeline.stride, projection)
            hyps.append(greedy_decode(single, stacked))
            refs.append(list(utt.tokens))
        ters.append(token_error_rate(hyps, refs))
    return ters


def train_run(config: RunConfig, progress: bool = False) -> TrainResult:
    config.validate()
    out_dir = Path(config.out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)

    train, held_out = build_corpora(config)
    projection = _feature_projection(config)
    params = init_params(config.model, seed=config.seed)
    state = OptimizerState(
        base_lr=config.optim.base_lr,
        warmup_steps=config.optim.warmup_steps,
        clip_norm=config.optim.clip_norm,
    )

    num_branches = len(config.model.branches)
    records: list[MetricsRecord] = []
    timings: list[tuple[int, float]] = []
    step = 0
    for epoch in range(config.optim.epochs):
        order = np.random.default_rng([config.seed, epoch]).permutation(len(train))
        augment_rng = None
        if config.pipeline.time_mask_count or config.pipeline.feature_mask_count:
            augment_rng = np.random.default_rng([config.seed, epoch, 0x3A5C])
        for lo in range(0, len(order), config.optim.batch_size):
            batch = [train[i] for i in order[lo : lo + config.optim.batch_size]]
            t0 = time.perf_counter()

            ad.zero_gradients(params.tensors.values())
            nodes = []
            sums = {"trans": np.zeros(num_branches), "ce": np.zeros(num_branches),
                    "kl": np.zeros(num_branches)}
            for utt in batch:
                try:
                    breakdown, node = utterance_loss(
                        params, utt, config, projection, augment_rng
                    )
                    nodes.append(node)
                except NonFiniteError as exc:
                    _dump_abort(out_dir, step, epoch, batch, str(exc))
                    raise NonFiniteLossError(
                        f"non-finite loss at step {step}: {exc}",
                        utterance_ids=[u.utt_id for u in batch],
                    ) from exc
                sums["trans"] += np.asarray(breakdown.per_branch_trans)
                sums["ce"] += np.asarray(breakdown.per_branch_ce)
                sums["kl"] += np.asarray(breakdown.per_branch_kl)

            batch_sum = nodes[0]
            for other in nodes[1:]:
                batch_sum = batch_sum + other
            mean_node = ad.scale(batch_sum, 1.0 / len(batch))
            try:
                ad.evaluate_graph(mean_node)
                ad.backpropagate(mean_node)
                lr = adam_step(state, params.tensors)
            except NonFiniteError as exc:
                _dump_abort(out_dir, step, epoch, batch, str(exc))
                raise NonFiniteLossError(
                    f"non-finite loss at step {step}: {exc}",
                    utterance_ids=[u.utt_id for u in batch],
                ) from exc

            n = len(batch)
            records.append(MetricsRecord(
                step=step,
                kind="train",
                lr=lr,
                trans=list(sums["trans"] / n),
                ce=list(sums["ce"] / n),
                kl=list(sums["kl"] / n),
            ))
            timings.append((step, (time.perf_counter() - t0) * 1000.0))
            step += 1
        if progress:
            last = records[-1]
            print(f"epoch {epoch}: trans={['%.3f' % v for v in last.trans]}")

    eval_ter: list[float] = []
    if held_out and config.optim.epochs > 0:
        eval_ter = evaluate_ter(params, held_out, config)
        eval_trans = evaluate_losses(params, held_out, config)
        records.append(MetricsRecord(
            step=step,
            kind="eval",
            lr=0.0,
            trans=eval_trans,
            ce=[0.0] * num_branches,
            kl=[0.0] * num_branches,
            ter=eval_ter,
        ))

    metrics_path = out_dir / "metrics.csv"
    write_metrics(records, num_branches, metrics_path)
    with open(out_dir / "timings.csv", "w", newline="") as fh:
        writer = csv.writer(fh)
        writer.writerow(["step", "wall_ms"])
        for s, ms in timings:
            writer.writerow([s, f"{ms:.3f}"])
    checkpoint_path = out_dir / "model.json"
    save_checkpoint(params, checkpoint_path)
    save_run_config(config, out_dir / "config.json")

    return TrainResult(
        params=params,
        records=records,
        eval_ter=eval_ter,
        checkpoint_path=checkpoint_path,
        metrics_path=metrics_path,
    )


def _dump_abort(
    out_dir: Path, step: int, epoch: int, batch: list[Utterance], reason: str
) -> None:
    payload = {
        "step": step,
        "epoch": epoch,
        "utterance_ids": [u.utt_id for u in batch],
        "reason": reason,
    }
    (out_dir / "abort.json").write_text(json.dumps(payload, indent=2) + "\n")
