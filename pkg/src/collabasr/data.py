"""Synthetic aligned corpus and the raw-to-encoder feature pipeline.

Each utterance draws tokens uniformly from [1, V]; every token emits a
run of frames clustered around its class center, so the frame-level
class alignment is known by construction. With center separation well
above the noise scale the frame classification task is separable, which
keeps desk-scale training runs short and their accuracy interpretable.
"""

from __future__ import annotations

import json
from dataclasses import asdict, dataclass
from pathlib import Path

import numpy as np

from .autodiff import Tensor
from .errors import ConfigError, LengthMismatchError

__all__ = [
    "FeaturePipelineConfig",
    "SyntheticCorpusConfig",
    "Utterance",
    "align_to_encoder_rate",
    "band_reference",
    "class_centers",
    "class_of_token",
    "generate_corpus",
    "make_projection",
    "mask_augment",
    "read_corpus",
    "stack_frames",
    "write_corpus",
]


@dataclass
class SyntheticCorpusConfig:
    vocab_size: int = 8
    num_classes: int = 8
    feature_dim: int = 8
    utterances: int = 50
    min_tokens: int = 2
    max_tokens: int = 5
    min_frames_per_token: int = 4
    max_frames_per_token: int = 8
    center_separation: float = 5.0
    noise_scale: float = 0.5
    distinct_adjacent: bool = True
    seed: int = 0

    def validate(self) -> None:
        if self.vocab_size < 1:
            raise ConfigError("vocab_size must be positive")
        if self.num_classes < self.vocab_size:
            raise ConfigError(
                f"num_classes ({self.num_classes}) must be >= vocab_size "
                f"({self.vocab_size}) so every token keeps its own class"
            )
        if self.feature_dim < 1:
            raise ConfigError("feature_dim must be positive")
        if self.utterances < 0:
            raise ConfigError("utterances must be >= 0")
        if not (1 <= self.min_tokens <= self.max_tokens):
            raise ConfigError("need 1 <= min_tokens <= max_tokens")
        if not (1 <= self.min_frames_per_token <= self.max_frames_per_token):
            raise ConfigError("need 1 <= min_frames_per_token <= max_frames_per_token")
        if self.noise_scale < 0 or self.center_separation < 0:
            raise ConfigError("noise_scale and center_separation must be >= 0")
        if self.distinct_adjacent and self.vocab_size < 2 and self.max_tokens > 1:
            raise ConfigError(
                "distinct_adjacent needs vocab_size >= 2 for multi-token utterances"
            )


@dataclass
class Utterance:
    utt_id: str
    features: Tensor  # (T_raw, feature_dim)
    tokens: list[int]
    alignment: Tensor  # (T_raw,) int class ids


@dataclass
class FeaturePipelineConfig:
    projection_dim: int = 8
    stride: int = 4
    time_mask_width: int = 0
    time_mask_count: int = 0
    feature_mask_width: int = 0
    feature_mask_count: int = 0

    def validate(self) -> None:
        if self.projection_dim < 1 or self.stride < 1:
            raise ConfigError("projection_dim and stride must be positive")
        for name in (
            "time_mask_width",
            "time_mask_count",
            "feature_mask_width",
            "feature_mask_count",
        ):
            if getattr(self, name) < 0:
                raise ConfigError(f"{name} must be >= 0")


def class_of_token(token: int, num_classes: int) -> int:
    return (token - 1) % num_classes


def class_centers(config: SyntheticCorpusConfig) -> Tensor:
    """Deterministic class centers. With num_classes <= feature_dim the
    centers sit on scaled coordinate axes; otherwise on seeded unit rows."""
    c, d = config.num_classes, config.feature_dim
    if c <= d:
        centers = np.zeros((c, d))
        centers[np.arange(c), np.arange(c)] = 1.0
    else:
        rng = np.random.default_rng([config.seed, 0xCE17E5])
        centers = rng.normal(size=(c, d))
        centers /= np.linalg.norm(centers, axis=1, keepdims=True)
    return centers * config.center_separation


def generate_corpus(config: SyntheticCorpusConfig) -> list[Utterance]:
    config.validate()
    centers = class_centers(config)
    rng = np.random.default_rng([config.seed, 0xDA7A])
    corpus: list[Utterance] = []
    for i in range(config.utterances):
        n_tokens = int(rng.integers(config.min_tokens, config.max_tokens + 1))
        tokens: list[int] = []
        for _ in range(n_tokens):
            tok = int(rng.integers(1, config.vocab_size + 1))
            # Duration is the only cue separating two adjacent same-class
            # tokens from one long token, so the default corpus avoids them.
            while config.distinct_adjacent and tokens and tok == tokens[-1]:
                tok = int(rng.integers(1, config.vocab_size + 1))
            tokens.append(tok)
        run_lengths = rng.integers(
            config.min_frames_per_token, config.max_frames_per_token + 1, size=n_tokens
        )
        classes = [class_of_token(t, config.num_classes) for t in tokens]
        alignment = np.repeat(classes, run_lengths).astype(np.int64)
        noise = rng.normal(0.0, config.noise_scale, size=(len(alignment), config.feature_dim))
        features = centers[alignment] + noise
        corpus.append(
            Utterance(
                utt_id=f"utt-{i:04d}",
                features=features,
                tokens=tokens,
                alignment=alignment,
            )
        )
    return corpus


def make_projection(feature_dim: int, projection_dim: int, seed: int = 0) -> Tensor:
    """Fixed per-frame projection for the stacking pipeline; identity
    when the dimensions already match."""
    if feature_dim == projection_dim:
        return np.eye(feature_dim)
    rng = np.random.default_rng([seed, 0x9407])
    m = rng.normal(size=(feature_dim, max(feature_dim, projection_dim)))
    q, _ = np.linalg.qr(m)
    return q[:, :projection_dim]


def stack_frames(features: Tensor, stride: int, projection: Tensor | None = None) -> Tensor:
    """Project each frame, then concatenate groups of ``stride`` frames.

    The tail group is zero-padded, so the output always has
    ceil(T_raw / stride) rows of width stride * projection_dim."""
    feats = np.asarray(features, dtype=np.float64)
    if feats.ndim != 2 or feats.shape[0] < 1:
        raise ConfigError(f"features must be a non-empty 2-d array, got {feats.shape}")
    if stride < 1:
        raise ConfigError(f"stride must be positive, got {stride}")
    if projection is not None:
        if projection.shape[0] != feats.shape[1]:
            raise LengthMismatchError(
                f"projection expects {projection.shape[0]} input dims, features have "
                f"{feats.shape[1]}"
            )
        feats = feats @ projection
    t_raw, d = feats.shape
    t_enc = -(-t_raw // stride)
    padded = np.zeros((t_enc * stride, d))
    padded[:t_raw] = feats
    return padded.reshape(t_enc, stride * d)


def align_to_encoder_rate(alignment: Tensor, stride: int) -> Tensor:
    """Downsample a frame alignment by taking the first frame of each
    stride group; length matches the stacked feature rows."""
    arr = np.asarray(alignment)
    if arr.ndim != 1 or arr.shape[0] < 1:
        raise ConfigError("alignment must be a non-empty 1-d array")
    if stride < 1:
        raise ConfigError(f"stride must be positive, got {stride}")
    return arr[::stride].copy()


def band_reference(utt: Utterance, num_classes: int, stride: int) -> Tensor:
    """Monotone map from encoder frame to completed-token count.

    Run boundaries inside a merged run of equal-class tokens are not
    recoverable from the alignment, so tokens there are assumed to split
    the run evenly. The first entry is clamped to 0 so the map always
    spans 0..U."""
    classes = [class_of_token(t, num_classes) for t in utt.tokens]
    groups: list[tuple[int, int]] = []  # (class, token count)
    for c in classes:
        if groups and groups[-1][0] == c:
            groups[-1] = (c, groups[-1][1] + 1)
        else:
            groups.append((c, 1))

    runs: list[tuple[int, int]] = []  # (class, frame count)
    for c in utt.alignment:
        c = int(c)
        if runs and runs[-1][0] == c:
            runs[-1] = (c, runs[-1][1] + 1)
        else:
            runs.append((c, 1))
    if len(runs) != len(groups) or any(r[0] != g[0] for r, g in zip(runs, groups)):
        raise LengthMismatchError(
            f"alignment runs do not match the token class sequence for {utt.utt_id}"
        )

    completed = np.zeros(len(utt.alignment), dtype=np.int64)
    done = 0
    frame = 0
    for (_, n_frames), (_, n_tokens) in zip(runs, groups):
        completed[frame:frame + n_frames] = done
        for k in range(1, n_tokens + 1):
            end = max(frame + int(round(k * n_frames / n_tokens)) - 1, frame)
            completed[end:frame + n_frames] = done + k
        done += n_tokens
        frame += n_frames

    ref = completed[::stride].copy()
    # Clamp both ends: the first stride group may already contain a token
    # end, and the last group's lead frame may precede the final token end.
    ref[0] = 0
    ref[-1] = len(utt.tokens)
    return ref


def mask_augment(
    features: Tensor,
    pipeline: FeaturePipelineConfig,
    rng: np.random.Generator,
) -> Tensor:
    """Zero out the configured number of time bands and feature bands."""
    pipeline.validate()
    out = np.asarray(features, dtype=np.float64).copy()
    t_raw, d = out.shape
    for _ in range(pipeline.time_mask_count):
        width = min(pipeline.time_mask_width, t_raw)
        if width < 1:
            continue
        start = int(rng.integers(0, t_raw - width + 1))
        out[start:start + width, :] = 0.0
    for _ in range(pipeline.feature_mask_count):
        width = min(pipeline.feature_mask_width, d)
        if width < 1:
            continue
        start = int(rng.integers(0, d - width + 1))
        out[:, start:start + width] = 0.0
    return out


def write_corpus(corpus: list[Utterance], path: str | Path) -> None:
    """One JSON record per line: id, feature rows, tokens, alignment."""
    with Path(path).open("w") as fh:
        for utt in corpus:
            record = {
                "id": utt.utt_id,
                "features": utt.features.tolist(),
                "tokens": list(utt.tokens),
                "alignment": utt.alignment.tolist(),
            }
            fh.write(json.dumps(record) + "\n")


def read_corpus(path: str | Path) -> list[Utterance]:
    corpus: list[Utterance] = []
    with Path(path).open() as fh:
        for line_no, line in enumerate(fh, start=1):
            line = line.strip()
            if not line:
                continue
            try:
                record = json.loads(line)
            except json.JSONDecodeError as exc:
                raise ConfigError(f"{path}:{line_no}: invalid JSON record: {exc}") from exc
            for key in ("id", "features", "tokens", "alignment"):
                if key not in record:
                    raise ConfigError(f"{path}:{line_no}: record missing '{key}'")
            features = np.asarray(record["features"], dtype=np.float64)
            alignment = np.asarray(record["alignment"], dtype=np.int64)
            if features.shape[0] != alignment.shape[0]:
                raise LengthMismatchError(
                    f"{path}:{line_no}: {features.shape[0]} feature rows vs "
                    f"{alignment.shape[0]} alignment entries"
                )
            corpus.append(
                Utterance(
                    utt_id=str(record["id"]),
                    features=features,
                    tokens=[int(t) for t in record["tokens"]],
                    alignment=alignment,
                )
            )
    return corpus
