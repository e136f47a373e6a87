"""Command-line entry points.

Exit codes: 0 success, 1 usage, 2 configuration or file problems,
3 numerical failures (non-finite losses, failed gradient checks).
"""

from __future__ import annotations

import argparse
import sys
from dataclasses import replace
from pathlib import Path

from .ablation import run_ablation
from .data import (
    SyntheticCorpusConfig,
    generate_corpus,
    read_corpus,
    stack_frames,
    write_corpus,
)
from .decoding import greedy_decode, token_error_rate
from .errors import (
    BranchIndexError,
    ConfigError,
    NonDeterministicLossError,
    NonFiniteError,
)
from .gradcheck import check_gradients
from .model import extract_branch, load_checkpoint, save_checkpoint
from .training import (
    default_run_config,
    load_run_config,
    train_run,
    utterance_loss,
    _feature_projection,
)

EXIT_OK = 0
EXIT_USAGE = 1
EXIT_CONFIG = 2
EXIT_NUMERICAL = 3


def _cmd_train(args: argparse.Namespace) -> int:
    if args.config:
        config = load_run_config(args.config)
    else:
        config = default_run_config()
    if args.out_dir:
        config.out_dir = args.out_dir
    if args.epochs is not None:
        config.optim = replace(config.optim, epochs=args.epochs)
    config.validate()
    result = train_run(config, progress=args.progress)
    print(f"wrote {result.checkpoint_path} and {result.metrics_path}")
    if result.eval_ter:
        ters = " ".join(f"{t:.4f}" for t in result.eval_ter)
        print(f"held-out token error rate per branch: {ters}")
    return EXIT_OK


def _cmd_extract(args: argparse.Namespace) -> int:
    params = load_checkpoint(args.checkpoint)
    single = extract_branch(params, args.branch)
    save_checkpoint(single, args.out)
    total = sum(t.value.size for t in single.tensors.values())
    print(f"wrote branch {args.branch} ({total} parameters) to {args.out}")
    return EXIT_OK


def _cmd_decode(args: argparse.Namespace) -> int:
    params = load_checkpoint(args.checkpoint)
    corpus = read_corpus(args.corpus)
    stride = args.stride
    proj_dim = params.config.input_dim // stride
    if params.config.input_dim % stride:
        raise ConfigError(
            f"model input width {params.config.input_dim} is not divisible "
            f"by stride {stride}"
        )
    hyps = []
    refs = []
    for utt in corpus:
        feat_dim = utt.features.shape[1]
        projection = None
        if feat_dim != proj_dim:
            from .data import make_projection

            projection = make_projection(feat_dim, proj_dim, seed=args.seed)
        stacked = stack_frames(utt.features, stride, projection)
        hyp = greedy_decode(params, stacked, branch=args.branch)
        hyps.append(hyp)
        refs.append(list(utt.tokens))
        print(f"{utt.utt_id}\t{' '.join(map(str, hyp))}")
    if any(refs):
        print(f"token error rate: {token_error_rate(hyps, refs):.4f}")
    return EXIT_OK


def _cmd_ablate(args: argparse.Namespace) -> int:
    rows = run_ablation(
        args.out_dir,
        epochs=args.epochs,
        utterances=args.utterances,
        eval_utterances=args.eval_utterances,
        seed=args.seed,
    )
    failed = sum(1 for r in rows if r["status"] != "ok")
    print(f"wrote {len(rows)} rows to {Path(args.out_dir) / 'ablation.csv'}"
          f" ({failed} failed cells)")
    return EXIT_OK


def _cmd_gradcheck(args: argparse.Namespace) -> int:
    from .model import BranchSpec, EncoderConfig, ModelConfig, init_params

    config = default_run_config()
    config.model = ModelConfig(
        encoder=EncoderConfig(
            model_dim=8, num_heads=2, ffn_dim=16, trunk_layers=1,
            chunk_frames=2, lookahead_frames=1,
        ),
        branches=[BranchSpec(0, 1), BranchSpec(1, 1)],
        vocab_size=4, num_classes=4, input_dim=8,
        joint_dim=8, predictor_dim=8, aux_hidden=8,
    )
    config.data = SyntheticCorpusConfig(
        vocab_size=4, num_classes=4, feature_dim=4, utterances=1,
        min_tokens=2, max_tokens=2, seed=args.seed,
    )
    config.pipeline = replace(config.pipeline, projection_dim=4, stride=2)
    # A flowing teacher keeps the loss an ordinary function of every
    # parameter, which is what a finite-difference probe can see.
    config.loss = replace(config.loss, teacher_grad_mode="flowing")
    utt = generate_corpus(config.data)[0]
    params = init_params(config.model, seed=args.seed)
    projection = _feature_projection(config)

    def build():
        _, node = utterance_loss(params, utt, config, projection)
        return node

    report = check_gradients(build, params.tensors, tolerance=args.tolerance)
    print(f"max relative error {report.max_relative_error:.3e} over "
          f"{report.checked_elements} elements (tolerance {report.tolerance:.0e})")
    if not report.passed:
        for name, analytic, numeric, rel in report.entries[:5]:
            print(f"  {name}: analytic={analytic:.6e} numeric={numeric:.6e} "
                  f"rel={rel:.3e}", file=sys.stderr)
        return EXIT_NUMERICAL
    return EXIT_OK


def _cmd_gen_data(args: argparse.Namespace) -> int:
    config = SyntheticCorpusConfig(
        vocab_size=args.vocab_size,
        num_classes=args.num_classes,
        feature_dim=args.feature_dim,
        utterances=args.utterances,
        min_tokens=args.min_tokens,
        max_tokens=args.max_tokens,
        noise_scale=args.noise_scale,
        distinct_adjacent=not args.allow_adjacent_repeats,
        seed=args.seed,
    )
    corpus = generate_corpus(config)
    write_corpus(corpus, args.out)
    print(f"wrote {len(corpus)} utterances to {args.out}")
    return EXIT_OK


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="collabasr",
        description="Collaboratively trained multi-depth streaming transducers.",
    )
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("train", help="train a multi-branch model")
    p.add_argument("--config", help="run config JSON (defaults otherwise)")
    p.add_argument("--out-dir", help="override the output directory")
    p.add_argument("--epochs", type=int, default=None)
    p.add_argument("--progress", action="store_true")
    p.set_defaults(func=_cmd_train)

    p = sub.add_parser("extract", help="extract one branch as a deployable model")
    p.add_argument("--checkpoint", required=True)
    p.add_argument("--branch", type=int, required=True)
    p.add_argument("--out", required=True)
    p.set_defaults(func=_cmd_extract)

    p = sub.add_parser("decode", help="greedy-decode a corpus")
    p.add_argument("--checkpoint", required=True)
    p.add_argument("--corpus", required=True)
    p.add_argument("--branch", type=int, default=0)
    p.add_argument("--stride", type=int, default=4)
    p.add_argument("--seed", type=int, default=0,
                   help="seed for the fixed feature projection")
    p.set_defaults(func=_cmd_decode)

    p = sub.add_parser("ablate", help="run the ablation grid")
    p.add_argument("--out-dir", required=True)
    p.add_argument("--epochs", type=int, default=30)
    p.add_argument("--utterances", type=int, default=200)
    p.add_argument("--eval-utterances", type=int, default=20)
    p.add_argument("--seed", type=int, default=0)
    p.set_defaults(func=_cmd_ablate)

    p = sub.add_parser("gradcheck", help="finite-difference check on a small model")
    p.add_argument("--tolerance", type=float, default=1e-4)
    p.add_argument("--seed", type=int, default=0)
    p.set_defaults(func=_cmd_gradcheck)

    p = sub.add_parser("gen-data", help="write a synthetic corpus as JSONL")
    p.add_argument("--out", required=True)
    p.add_argument("--utterances", type=int, default=50)
    p.add_argument("--vocab-size", type=int, default=8)
    p.add_argument("--num-classes", type=int, default=8)
    p.add_argument("--feature-dim", type=int, default=8)
    p.add_argument("--min-tokens", type=int, default=2)
    p.add_argument("--max-tokens", type=int, default=5)
    p.add_argument("--noise-scale", type=float, default=0.5)
    p.add_argument("--allow-adjacent-repeats", action="store_true")
    p.add_argument("--seed", type=int, default=0)
    p.set_defaults(func=_cmd_gen_data)

    return parser


def main(argv: list[str] | None = None) -> int:
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except SystemExit as exc:
        # argparse exits 0 for --help, 2 for usage errors
        return EXIT_OK if exc.code == 0 else EXIT_USAGE
    try:
        return args.func(args)
    except (ConfigError, BranchIndexError, FileNotFoundError, IsADirectoryError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_CONFIG
    except (NonFiniteError, NonDeterministicLossError) as exc:
        print(f"numerical error: {exc}", file=sys.stderr)
        return EXIT_NUMERICAL


if __name__ == "__main__":
    sys.exit(main())
