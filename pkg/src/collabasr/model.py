"""Multi-branch streaming encoder with a shared predictor and joiner.

The encoder is a shared trunk of pre-layer-norm transformer blocks
followed by one block stack per branch. All branches share the joint
projection, the label predictor, the joiner, and (during training) the
frame classification head.

Chunked attention: frame t may attend to frames up to the end of its
chunk plus the configured look-ahead. Look-ahead frames are processed
as provisional copies attached to the chunk that peeks at them, so the
receptive field stays exactly chunk-end + look-ahead at every depth and
the incremental (streaming) computation matches the full-sequence one.
"""

from __future__ import annotations

import json
from dataclasses import asdict, dataclass, field
from pathlib import Path

import numpy as np

from . import autodiff as ad
from .autodiff import GraphNode, Tensor
from .errors import BranchIndexError, ConfigError, ShapeMismatchError, TokenRangeError

__all__ = [
    "AttentionMask",
    "BranchOutput",
    "BranchSpec",
    "CollabModelParams",
    "EncoderConfig",
    "ModelConfig",
    "algorithmic_latency",
    "aux_project",
    "build_attention_mask",
    "count_params",
    "effective_depth",
    "encode",
    "encode_streaming",
    "extract_branch",
    "forward_branches",
    "init_params",
    "join",
    "load_checkpoint",
    "predict",
    "save_checkpoint",
]

CHECKPOINT_VERSION = 1


@dataclass
class EncoderConfig:
    model_dim: int = 32
    num_heads: int = 4
    ffn_dim: int = 64
    trunk_layers: int = 2
    chunk_frames: int = 4
    lookahead_frames: int = 1
    frame_ms: float = 40.0
    dropout: float = 0.0
    left_context: int | None = None


@dataclass
class BranchSpec:
    branch_id: int
    layers: int


@dataclass
class ModelConfig:
    encoder: EncoderConfig
    branches: list[BranchSpec]
    vocab_size: int = 8
    num_classes: int = 8
    input_dim: int = 32
    joint_dim: int = 32
    predictor_dim: int = 32
    aux_hidden: int = 32

    def validate(self) -> None:
        enc = self.encoder
        if enc.model_dim < 1 or enc.model_dim % enc.num_heads != 0:
            raise ConfigError(
                f"model_dim {enc.model_dim} must be a positive multiple of "
                f"num_heads {enc.num_heads}"
            )
        if enc.trunk_layers < 0:
            raise ConfigError("trunk_layers must be >= 0")
        if enc.chunk_frames < 1:
            raise ConfigError(f"chunk_frames must be positive, got {enc.chunk_frames}")
        if enc.lookahead_frames < 0:
            raise ConfigError("lookahead_frames must be >= 0")
        if not self.branches:
            raise ConfigError("at least one branch is required")
        for spec in self.branches:
            if spec.layers < 1:
                raise ConfigError(f"branch {spec.branch_id} needs >= 1 layers")
        if self.vocab_size < 1 or self.num_classes < 1:
            raise ConfigError("vocab_size and num_classes must be positive")
        for name in ("input_dim", "joint_dim", "predictor_dim", "aux_hidden"):
            if getattr(self, name) < 1:
                raise ConfigError(f"{name} must be positive")

    def to_dict(self) -> dict:
        return asdict(self)

    @classmethod
    def from_dict(cls, raw: dict) -> "ModelConfig":
        data = dict(raw)
        enc = EncoderConfig(**data.pop("encoder"))
        branches = [BranchSpec(**b) for b in data.pop("branches")]
        cfg = cls(encoder=enc, branches=branches, **data)
        cfg.validate()
        return cfg


@dataclass
class CollabModelParams:
    """Named parameter leaves plus the structural config they realize."""

    config: ModelConfig
    tensors: dict[str, GraphNode]

    @property
    def has_aux_head(self) -> bool:
        return "aux.w1" in self.tensors

    def __getitem__(self, name: str) -> GraphNode:
        return self.tensors[name]


@dataclass
class BranchOutput:
    branch_id: int
    features: GraphNode  # (T_enc, model_dim), pre-projection
    projected: GraphNode  # (T_enc, joint_dim)


@dataclass
class AttentionMask:
    """Boolean window matrix plus the chunk geometry that produced it."""

    matrix: Tensor  # (T_enc, T_enc) bool
    chunk_frames: int
    lookahead_frames: int
    left_context: int | None = None


def build_attention_mask(
    t_len: int,
    chunk_frames: int,
    lookahead_frames: int,
    left_context: int | None = None,
) -> AttentionMask:
    """Entry (t, j) is True iff frame t may attend to frame j."""
    if t_len < 1:
        raise ShapeMismatchError("attention mask needs a positive sequence length")
    if chunk_frames < 1:
        raise ConfigError(f"chunk_frames must be positive, got {chunk_frames}")
    if lookahead_frames < 0:
        raise ConfigError("lookahead_frames must be >= 0")
    t_idx = np.arange(t_len)
    chunk_end = (t_idx // chunk_frames + 1) * chunk_frames - 1
    horizon = np.minimum(chunk_end + lookahead_frames, t_len - 1)
    cols = np.arange(t_len)[None, :]
    matrix = cols <= horizon[:, None]
    if left_context is not None:
        chunk_start = (t_idx // chunk_frames) * chunk_frames
        floor = np.maximum(chunk_start - left_context, 0)
        matrix &= cols >= floor[:, None]
    return AttentionMask(
        matrix=matrix,
        chunk_frames=chunk_frames,
        lookahead_frames=lookahead_frames,
        left_context=left_context,
    )


# ---------------------------------------------------------------------------
# Parameter construction


def _layer_names(prefix: str) -> list[tuple[str, str]]:
    return [
        (f"{prefix}.ln1.gain", "gain"),
        (f"{prefix}.ln1.bias", "bias"),
        (f"{prefix}.attn.wq", "dxd"),
        (f"{prefix}.attn.bq", "bias_d"),
        # No key bias: softmax is invariant to a per-query constant shift,
        # so a key bias would be a dead parameter.
        (f"{prefix}.attn.wk", "dxd"),
        (f"{prefix}.attn.wv", "dxd"),
        (f"{prefix}.attn.bv", "bias_d"),
        (f"{prefix}.attn.wo", "dxd"),
        (f"{prefix}.attn.bo", "bias_d"),
        (f"{prefix}.ln2.gain", "gain"),
        (f"{prefix}.ln2.bias", "bias"),
        (f"{prefix}.ffn.w1", "dxf"),
        (f"{prefix}.ffn.b1", "bias_f"),
        (f"{prefix}.ffn.w2", "fxd"),
        (f"{prefix}.ffn.b2", "bias_d"),
    ]


def init_params(config: ModelConfig, seed: int = 0, with_aux: bool = True) -> CollabModelParams:
    """Seeded parameter initialization; weights scale with 1/sqrt(fan_in)."""
    config.validate()
    rng = np.random.default_rng([seed, 0xC011AB])
    d = config.encoder.model_dim
    tensors: dict[str, GraphNode] = {}

    def mat(name: str, fan_in: int, fan_out: int) -> None:
        w = rng.normal(0.0, fan_in**-0.5, size=(fan_in, fan_out))
        tensors[name] = ad.parameter(w, name)

    def vec(name: str, size: int, value: float = 0.0) -> None:
        tensors[name] = ad.parameter(np.full(size, value), name)

    def block(prefix: str) -> None:
        for name, kind in _layer_names(prefix):
            if kind == "gain":
                vec(name, d, 1.0)
            elif kind == "bias":
                vec(name, d, 0.0)
            elif kind == "dxd":
                mat(name, d, d)
            elif kind == "bias_d":
                vec(name, d, 0.0)
            elif kind == "dxf":
                mat(name, d, config.encoder.ffn_dim)
            elif kind == "bias_f":
                vec(name, config.encoder.ffn_dim, 0.0)
            elif kind == "fxd":
                mat(name, config.encoder.ffn_dim, d)

    mat("input_proj.w", config.input_dim, d)
    vec("input_proj.b", d)
    for i in range(config.encoder.trunk_layers):
        block(f"trunk.{i}")
    for b, spec in enumerate(config.branches):
        for i in range(spec.layers):
            block(f"branch{b}.{i}")
        vec(f"branch{b}.final_ln.gain", d, 1.0)
        vec(f"branch{b}.final_ln.bias", d, 0.0)
    mat("proj.w", d, config.joint_dim)
    vec("proj.b", config.joint_dim)

    h = config.predictor_dim
    emb = rng.normal(0.0, h**-0.5, size=(config.vocab_size + 1, h))
    tensors["pred.embed"] = ad.parameter(emb, "pred.embed")
    mat("pred.wx", h, 3 * h)
    mat("pred.wh", h, 3 * h)
    vec("pred.bx", 3 * h)
    vec("pred.bh", 3 * h)
    mat("pred.out_w", h, config.joint_dim)
    vec("pred.out_b", config.joint_dim)

    mat("joiner.w", config.joint_dim, config.vocab_size + 1)
    vec("joiner.b", config.vocab_size + 1)

    if with_aux:
        mat("aux.w1", d, config.aux_hidden)
        vec("aux.b1", config.aux_hidden)
        mat("aux.w2", config.aux_hidden, config.num_classes)
        vec("aux.b2", config.num_classes)

    return CollabModelParams(config=config, tensors=tensors)


# ---------------------------------------------------------------------------
# Chunked attention with provisional look-ahead copies


@dataclass
class _Augmentation:
    source: Tensor  # (N,) int, original frame index feeding each row
    mask: Tensor  # (N, N) bool
    orig_rows: int  # first orig_rows rows are the real frames


def _build_augmentation(t_len: int, mask: AttentionMask) -> _Augmentation:
    chunk = mask.chunk_frames
    la = mask.lookahead_frames
    cap = mask.left_context
    n_chunks = (t_len + chunk - 1) // chunk

    source = list(range(t_len))
    row_chunk = [t // chunk for t in range(t_len)]
    copy_chunk: list[int] = []
    for c in range(n_chunks):
        lo = min((c + 1) * chunk, t_len)
        hi = min((c + 1) * chunk - 1 + la, t_len - 1)
        for p in range(lo, hi + 1):
            source.append(p)
            copy_chunk.append(c)
    row_chunk.extend(copy_chunk)

    n = len(source)
    src_arr = np.asarray(source, dtype=np.int64)
    row_chunk_arr = np.asarray(row_chunk, dtype=np.int64)
    chunk_end = (row_chunk_arr + 1) * chunk - 1
    is_copy = np.zeros(n, dtype=bool)
    is_copy[t_len:] = True

    cols_src = src_arr[None, :]
    allowed = np.zeros((n, n), dtype=bool)
    # Original columns: within the row's chunk horizon.
    allowed[:, :t_len] = cols_src[:, :t_len] <= chunk_end[:, None]
    if cap is not None:
        floor = np.maximum(row_chunk_arr * chunk - cap, 0)
        allowed[:, :t_len] &= cols_src[:, :t_len] >= floor[:, None]
    # Copy columns: visible only to rows of the same chunk.
    if n > t_len:
        allowed[:, t_len:] = row_chunk_arr[t_len:][None, :] == row_chunk_arr[:, None]
    return _Augmentation(source=src_arr, mask=allowed, orig_rows=t_len)


def _block_forward(
    params: CollabModelParams,
    prefix: str,
    x: GraphNode,
    kv: GraphNode,
    mask: Tensor,
    dropout_rng: np.random.Generator | None,
) -> GraphNode:
    """One pre-layer-norm transformer block.

    ``x`` holds the query rows; ``kv`` the context rows (a superset that
    starts with or equals x's positions). ``mask`` is (rows(x), rows(kv)).
    """
    p = params.tensors
    cfg = params.config.encoder
    normed_q = ad.layer_norm(x, p[f"{prefix}.ln1.gain"], p[f"{prefix}.ln1.bias"])
    if kv is x:
        normed_kv = normed_q
    else:
        normed_kv = ad.layer_norm(kv, p[f"{prefix}.ln1.gain"], p[f"{prefix}.ln1.bias"])
    q = ad.matmul(normed_q, p[f"{prefix}.attn.wq"]) + p[f"{prefix}.attn.bq"]
    k = ad.matmul(normed_kv, p[f"{prefix}.attn.wk"])
    v = ad.matmul(normed_kv, p[f"{prefix}.attn.wv"]) + p[f"{prefix}.attn.bv"]
    att = ad.masked_attention(q, k, v, mask, cfg.num_heads)
    att = ad.matmul(att, p[f"{prefix}.attn.wo"]) + p[f"{prefix}.attn.bo"]
    if dropout_rng is not None and cfg.dropout > 0.0:
        att = ad.dropout(att, cfg.dropout, dropout_rng)
    x = x + att

    normed = ad.layer_norm(x, p[f"{prefix}.ln2.gain"], p[f"{prefix}.ln2.bias"])
    h = ad.relu(ad.matmul(normed, p[f"{prefix}.ffn.w1"]) + p[f"{prefix}.ffn.b1"])
    h = ad.matmul(h, p[f"{prefix}.ffn.w2"]) + p[f"{prefix}.ffn.b2"]
    if dropout_rng is not None and cfg.dropout > 0.0:
        h = ad.dropout(h, cfg.dropout, dropout_rng)
    return x + h


def _check_features(params: CollabModelParams, features: Tensor) -> Tensor:
    feats = np.asarray(features, dtype=np.float64)
    if feats.ndim != 2 or feats.shape[1] != params.config.input_dim:
        raise ShapeMismatchError(
            f"features must be (T_enc, {params.config.input_dim}), got {feats.shape}"
        )
    if feats.shape[0] < 1:
        raise ShapeMismatchError("need at least one input frame")
    return feats


def _check_branch(params: CollabModelParams, branch: int) -> None:
    if not (0 <= branch < len(params.config.branches)):
        raise BranchIndexError(
            f"branch {branch} out of range; model has {len(params.config.branches)} branches"
        )


def _encode_trunk_augmented(
    params: CollabModelParams,
    features: Tensor,
    mask: AttentionMask,
    dropout_rng: np.random.Generator | None,
) -> tuple[GraphNode, _Augmentation]:
    feats = _check_features(params, features)
    t_len = feats.shape[0]
    if mask.matrix.shape != (t_len, t_len):
        raise ShapeMismatchError(
            f"mask covers {mask.matrix.shape[0]} frames but input has {t_len}"
        )
    aug = _build_augmentation(t_len, mask)
    p = params.tensors
    x = ad.constant(feats[aug.source], name="features")
    x = ad.matmul(x, p["input_proj.w"]) + p["input_proj.b"]
    for i in range(params.config.encoder.trunk_layers):
        x = _block_forward(params, f"trunk.{i}", x, x, aug.mask, dropout_rng)
    return x, aug


def _encode_branch_from_trunk(
    params: CollabModelParams,
    trunk_out: GraphNode,
    aug: _Augmentation,
    branch: int,
    dropout_rng: np.random.Generator | None,
) -> BranchOutput:
    p = params.tensors
    x = trunk_out
    for i in range(params.config.branches[branch].layers):
        x = _block_forward(params, f"branch{branch}.{i}", x, x, aug.mask, dropout_rng)
    rows = ad.slice_rows(x, 0, aug.orig_rows)
    feats = ad.layer_norm(
        rows, p[f"branch{branch}.final_ln.gain"], p[f"branch{branch}.final_ln.bias"]
    )
    projected = ad.matmul(feats, p["proj.w"]) + p["proj.b"]
    return BranchOutput(
        branch_id=params.config.branches[branch].branch_id,
        features=feats,
        projected=projected,
    )


def encode(
    params: CollabModelParams,
    features: Tensor,
    branch: int,
    mask: AttentionMask,
    dropout_rng: np.random.Generator | None = None,
) -> BranchOutput:
    """Full-sequence encode of one branch (trunk + branch stack + shared
    projection)."""
    _check_branch(params, branch)
    trunk_out, aug = _encode_trunk_augmented(params, features, mask, dropout_rng)
    return _encode_branch_from_trunk(params, trunk_out, aug, branch, dropout_rng)


def forward_branches(
    params: CollabModelParams,
    features: Tensor,
    mask: AttentionMask,
    dropout_rng: np.random.Generator | None = None,
) -> list[BranchOutput]:
    """Encode every branch, computing the shared trunk exactly once."""
    trunk_out, aug = _encode_trunk_augmented(params, features, mask, dropout_rng)
    return [
        _encode_branch_from_trunk(params, trunk_out, aug, b, dropout_rng)
        for b in range(len(params.config.branches))
    ]


def encode_streaming(
    params: CollabModelParams,
    features: Tensor,
    branch: int,
    mask: AttentionMask,
) -> BranchOutput:
    """Chunk-incremental encode; matches :func:`encode` element-wise.

    Each chunk is processed together with provisional copies of its
    look-ahead frames; per-layer histories keep only finalized rows, so
    no frame beyond the window can influence the output.
    """
    _check_branch(params, branch)
    feats = _check_features(params, features)
    t_len = feats.shape[0]
    chunk = mask.chunk_frames
    la = mask.lookahead_frames
    cap = mask.left_context
    p = params.tensors

    prefixes = [f"trunk.{i}" for i in range(params.config.encoder.trunk_layers)]
    prefixes += [
        f"branch{branch}.{i}" for i in range(params.config.branches[branch].layers)
    ]

    history: list[GraphNode | None] = [None] * len(prefixes)
    out_chunks: list[GraphNode] = []
    n_chunks = (t_len + chunk - 1) // chunk
    for c in range(n_chunks):
        start = c * chunk
        end = min(start + chunk, t_len)
        la_end = min(start + chunk - 1 + la, t_len - 1)
        copy_lo = min(start + chunk, t_len)
        block_rows = list(range(start, end)) + list(range(copy_lo, la_end + 1))
        n_keep = end - start

        x = ad.constant(feats[block_rows])
        x = ad.matmul(x, p["input_proj.w"]) + p["input_proj.b"]
        for layer_idx, prefix in enumerate(prefixes):
            hist = history[layer_idx]
            if cap is not None and hist is not None:
                floor = max(start - cap, 0)
                hist = ad.slice_rows(hist, floor, hist.shape[0]) if floor > 0 else hist
            if hist is None:
                kv = x
            else:
                kv = ad.concat_rows([hist, x])
            block_mask = np.ones((x.shape[0], kv.shape[0]), dtype=bool)
            new_x = _block_forward(params, prefix, x, kv, block_mask, None)
            finalized = ad.slice_rows(x, 0, n_keep)
            history[layer_idx] = (
                finalized
                if history[layer_idx] is None
                else ad.concat_rows([history[layer_idx], finalized])
            )
            x = new_x
        out_chunks.append(ad.slice_rows(x, 0, n_keep))

    rows = ad.concat_rows(out_chunks)
    feats_out = ad.layer_norm(
        rows, p[f"branch{branch}.final_ln.gain"], p[f"branch{branch}.final_ln.bias"]
    )
    projected = ad.matmul(feats_out, p["proj.w"]) + p["proj.b"]
    return BranchOutput(
        branch_id=params.config.branches[branch].branch_id,
        features=feats_out,
        projected=projected,
    )


# ---------------------------------------------------------------------------
# Predictor, joiner, auxiliary head


def predict(params: CollabModelParams, targets: list[int]) -> GraphNode:
    """Label predictor: start symbol plus targets through an embedding,
    one gated recurrent layer, and the joint projection. Row u depends
    only on targets[:u]."""
    v = params.config.vocab_size
    for y in targets:
        if not (1 <= y <= v):
            raise TokenRangeError(f"token id {y} outside [1, {v}]")
    p = params.tensors
    h_dim = params.config.predictor_dim
    ids = [0] + list(targets)
    x = ad.take_rows(p["pred.embed"], ids)

    h = ad.constant(np.zeros((1, h_dim)))
    rows: list[GraphNode] = []
    for u in range(len(ids)):
        x_u = ad.slice_rows(x, u, u + 1)
        gx = ad.matmul(x_u, p["pred.wx"]) + p["pred.bx"]
        gh = ad.matmul(h, p["pred.wh"]) + p["pred.bh"]
        update = ad.sigmoid(ad.slice_cols(gx, 0, h_dim) + ad.slice_cols(gh, 0, h_dim))
        reset = ad.sigmoid(
            ad.slice_cols(gx, h_dim, 2 * h_dim) + ad.slice_cols(gh, h_dim, 2 * h_dim)
        )
        cand = ad.tanh(
            ad.slice_cols(gx, 2 * h_dim, 3 * h_dim)
            + reset * ad.slice_cols(gh, 2 * h_dim, 3 * h_dim)
        )
        h = cand + update * (h - cand)
        rows.append(h)
    stacked = ad.concat_rows(rows)
    return ad.matmul(stacked, p["pred.out_w"]) + p["pred.out_b"]


def join(params: CollabModelParams, h_enc: GraphNode, h_pred: GraphNode) -> GraphNode:
    """Joint logits l(t, u, k) = W . relu(h_enc(t) + h_pred(u)) + b."""
    t_len, dj = h_enc.shape
    u_rows = h_pred.shape[0]
    if h_pred.shape[1] != dj or dj != params.config.joint_dim:
        raise ShapeMismatchError(
            f"join: encoder {h_enc.shape} and predictor {h_pred.shape} must both "
            f"end in joint_dim {params.config.joint_dim}"
        )
    grid = ad.reshape(h_enc, (t_len, 1, dj)) + ad.reshape(h_pred, (1, u_rows, dj))
    return ad.matmul(ad.relu(grid), params.tensors["joiner.w"]) + params.tensors["joiner.b"]


def aux_project(params: CollabModelParams, branch_features: GraphNode) -> GraphNode:
    """Frame-level class log-probabilities from pre-projection features."""
    if not params.has_aux_head:
        raise ConfigError("model has no auxiliary head (it was extracted away)")
    p = params.tensors
    h = ad.relu(ad.matmul(branch_features, p["aux.w1"]) + p["aux.b1"])
    return ad.log_softmax(ad.matmul(h, p["aux.w2"]) + p["aux.b2"])


# ---------------------------------------------------------------------------
# Extraction, accounting, checkpoints


def effective_depth(config: ModelConfig, branch: int) -> int:
    return config.encoder.trunk_layers + config.branches[branch].layers


def extract_branch(params: CollabModelParams, branch: int) -> CollabModelParams:
    """Deployable single-branch model: trunk + branch layers + shared
    projection, predictor, and joiner. The auxiliary head is dropped."""
    _check_branch(params, branch)
    spec = params.config.branches[branch]
    cfg = params.config
    new_config = ModelConfig(
        encoder=EncoderConfig(**asdict(cfg.encoder)),
        branches=[BranchSpec(branch_id=spec.branch_id, layers=spec.layers)],
        vocab_size=cfg.vocab_size,
        num_classes=cfg.num_classes,
        input_dim=cfg.input_dim,
        joint_dim=cfg.joint_dim,
        predictor_dim=cfg.predictor_dim,
        aux_hidden=cfg.aux_hidden,
    )
    tensors: dict[str, GraphNode] = {}
    old_prefix = f"branch{branch}."
    for name, node in params.tensors.items():
        if name.startswith("aux."):
            continue
        if name.startswith("branch"):
            if not name.startswith(old_prefix):
                continue
            new_name = "branch0." + name[len(old_prefix):]
        else:
            new_name = name
        tensors[new_name] = ad.parameter(node.value.copy(), new_name)
    return CollabModelParams(config=new_config, tensors=tensors)


def count_params(params: CollabModelParams) -> int:
    return sum(node.value.size for node in params.tensors.values())


def algorithmic_latency(chunk_ms: float, lookahead_ms: float) -> float:
    """Mean decision delay: half the chunk plus the look-ahead."""
    if chunk_ms <= 0:
        raise ConfigError(f"chunk duration must be positive, got {chunk_ms}")
    if lookahead_ms < 0:
        raise ConfigError("look-ahead duration must be >= 0")
    return chunk_ms / 2.0 + lookahead_ms


def save_checkpoint(params: CollabModelParams, path: str | Path) -> None:
    payload = {
        "format_version": CHECKPOINT_VERSION,
        "model": params.config.to_dict(),
        "tensors": {
            name: {
                "shape": list(node.value.shape),
                "data": node.value.reshape(-1).tolist(),
            }
            for name, node in sorted(params.tensors.items())
        },
    }
    Path(path).write_text(json.dumps(payload))


def load_checkpoint(path: str | Path) -> CollabModelParams:
    try:
        payload = json.loads(Path(path).read_text())
    except json.JSONDecodeError as exc:
        raise ConfigError(f"checkpoint {path} is not valid JSON: {exc}") from exc
    if not isinstance(payload, dict) or "format_version" not in payload:
        raise ConfigError(f"checkpoint {path} is missing its format version")
    version = payload["format_version"]
    if version != CHECKPOINT_VERSION:
        raise ConfigError(
            f"checkpoint format version {version} unsupported (expected {CHECKPOINT_VERSION})"
        )
    config = ModelConfig.from_dict(payload["model"])
    tensors: dict[str, GraphNode] = {}
    for name, entry in payload["tensors"].items():
        arr = np.asarray(entry["data"], dtype=np.float64).reshape(entry["shape"])
        tensors[name] = ad.parameter(arr, name)
    return CollabModelParams(config=config, tensors=tensors)
