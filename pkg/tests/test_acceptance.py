"""Acceptance gate: end-to-end properties the package must hold.

Each test covers one numbered criterion and prints a single summary
line with the measured margin. Tolerances are stated inline; timing
budgets are asserted with wall-clock measurements on the spot.
"""

from __future__ import annotations

import time
from dataclasses import replace

import numpy as np
import pytest

import collabasr.autodiff as ad
from collabasr.ablation import run_ablation, wall_time_comparison
from collabasr.data import (
    FeaturePipelineConfig,
    SyntheticCorpusConfig,
    align_to_encoder_rate,
    band_reference,
    generate_corpus,
    stack_frames,
)
from collabasr.distill import (
    kl_codistill_loss,
    ce_frame_loss,
    select_teacher,
    total_loss,
)
from collabasr.errors import BandDisconnectedError
from collabasr.gradcheck import check_gradients
from collabasr.model import (
    BranchSpec,
    EncoderConfig,
    ModelConfig,
    algorithmic_latency,
    build_attention_mask,
    count_params,
    effective_depth,
    encode,
    encode_streaming,
    extract_branch,
    forward_branches,
    init_params,
    join,
    predict,
    aux_project,
)
from collabasr.training import (
    LossSection,
    OptimSection,
    RunConfig,
    build_corpora,
    default_run_config,
    evaluate_losses,
    train_run,
)
from collabasr.transducer import (
    ar_transducer_loss,
    brute_force_loss,
    build_band,
    transducer_loss,
    transducer_loss_node,
)


# ---------------------------------------------------------------------------
# Shared helpers


def _rand_grid(rng: np.random.Generator, t: int, u: int, v: int) -> np.ndarray:
    return rng.normal(size=(t, u + 1, v + 1))


def _rand_targets(rng: np.random.Generator, u: int, v: int) -> list[int]:
    return [int(x) for x in rng.integers(1, v + 1, size=u)]


def _monotone_reference(rng: np.random.Generator, t: int, u: int) -> np.ndarray:
    ref = np.sort(rng.integers(0, u + 1, size=t))
    ref[0] = 0
    ref[-1] = u
    return ref.astype(np.int64)


def _micro_config(shared: bool = True) -> RunConfig:
    """Smallest config that still exercises every loss term: three
    branches (the first strictly deepest, so it is the teacher) over a
    one-layer trunk, or no trunk at all, on a two-token utterance."""
    return RunConfig(
        model=ModelConfig(
            encoder=EncoderConfig(
                model_dim=4,
                num_heads=2,
                ffn_dim=8,
                trunk_layers=1 if shared else 0,
                chunk_frames=2,
                lookahead_frames=1,
            ),
            branches=[BranchSpec(0, 2), BranchSpec(1, 1), BranchSpec(2, 1)],
            vocab_size=3,
            num_classes=3,
            input_dim=4,
            joint_dim=4,
            predictor_dim=4,
            aux_hidden=4,
        ),
        data=SyntheticCorpusConfig(
            vocab_size=3, num_classes=3, feature_dim=2, utterances=1,
            min_tokens=2, max_tokens=2,
            min_frames_per_token=2, max_frames_per_token=2,
        ),
        pipeline=FeaturePipelineConfig(projection_dim=2, stride=2),
        loss=LossSection(),
        optim=OptimSection(epochs=1),
        seed=0,
        out_dir="/tmp/collabasr-acceptance",
        eval_utterances=0,
    )


def _assemble_loss(params, utt, config, override=None):
    """Mirror of the training-loop loss assembly, with an optional frozen
    matching target for probing the stopped-teacher mode."""
    stacked = stack_frames(utt.features, config.pipeline.stride)
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
        teacher_override=override,
    )


# ---------------------------------------------------------------------------
# 1. Lattice loss agrees with explicit path enumeration.


def test_criterion_01_enumeration_equivalence():
    rng = np.random.default_rng(100)
    t0 = time.perf_counter()
    worst = 0.0
    for _ in range(100):
        t = int(rng.integers(1, 7))
        u = int(rng.integers(0, min(6, 12 - t) + 1))
        v = int(rng.integers(1, 7))
        grid = _rand_grid(rng, t, u, v)
        targets = _rand_targets(rng, u, v)
        got = transducer_loss(grid, targets).loss
        want = brute_force_loss(grid, targets)
        worst = max(worst, abs(got - want))
        assert abs(got - want) < 1e-9
    elapsed = time.perf_counter() - t0
    assert elapsed < 10.0
    print(f"criterion 1 ok: 100 enumeration agreements, "
          f"max |diff| {worst:.2e}, {elapsed:.1f}s")


# ---------------------------------------------------------------------------
# 2. Analytic gradients survive finite-difference probing everywhere.


def test_criterion_02_gradient_checks():
    t0 = time.perf_counter()
    rng = np.random.default_rng(200)
    worst = 0.0

    # Isolated loss nodes over raw logit grids.
    logits = ad.parameter(_rand_grid(rng, 3, 2, 3), "logits")
    targets = [1, 2]
    rep = check_gradients(
        lambda: transducer_loss_node(logits, targets), {"logits": logits},
        tolerance=1e-4,
    )
    assert rep.passed
    worst = max(worst, rep.max_relative_error)

    band = build_band([0, 1, 2], 1, 1, 2)
    rep = check_gradients(
        lambda: transducer_loss_node(logits, targets, band), {"logits": logits},
        tolerance=1e-4,
    )
    assert rep.passed
    worst = max(worst, rep.max_relative_error)

    frame_logits = ad.parameter(rng.normal(size=(4, 3)), "frames")
    rep = check_gradients(
        lambda: ce_frame_loss(ad.log_softmax(frame_logits), [0, 2, 1, 1]),
        {"frames": frame_logits},
        tolerance=1e-4,
    )
    assert rep.passed
    worst = max(worst, rep.max_relative_error)

    student = ad.parameter(rng.normal(size=(3, 4)), "student")
    teacher = ad.parameter(rng.normal(size=(3, 4)), "teacher")

    def kl_builder(mode):
        return lambda: kl_codistill_loss(
            ad.log_softmax(student), ad.log_softmax(teacher), mode
        )

    # Flowing: every parameter is probeable.
    rep = check_gradients(
        kl_builder("flowing"), {"student": student, "teacher": teacher},
        tolerance=1e-4,
    )
    assert rep.passed
    worst = max(worst, rep.max_relative_error)

    # Stopped: the teacher is a constant to the loss, so only the student
    # side is a legitimate probe target.
    rep = check_gradients(kl_builder("stopped"), {"student": student},
                          tolerance=1e-4)
    assert rep.passed
    worst = max(worst, rep.max_relative_error)

    # Full composed loss on a three-branch micro model under every
    # factor-toggle combination, trunk sharing included. The teacher
    # flows so the loss stays an ordinary function of all parameters.
    config = _micro_config()
    utt = generate_corpus(config.data)[0]
    params = init_params(config.model, seed=0)
    for shared in (True, False):
        base = _micro_config(shared)
        model_params = params if shared else init_params(base.model, seed=0)
        for use_ar in (False, True):
            for use_ce in (False, True):
                for use_kl in (False, True):
                    cfg = replace(base, loss=replace(
                        base.loss,
                        use_ar=use_ar, use_aux_ce=use_ce, use_kl=use_kl,
                        teacher_grad_mode="flowing",
                    ))
                    rep = check_gradients(
                        lambda c=cfg, p=model_params: _assemble_loss(p, utt, c)[1],
                        model_params.tensors,
                        tolerance=1e-4,
                    )
                    assert rep.passed, (shared, use_ar, use_ce, use_kl,
                                        rep.entries[:3])
                    worst = max(worst, rep.max_relative_error)

    # Stopped teacher mode: the analytic gradient treats the matching
    # target as a constant, so the probe pins it to its baseline value.
    stopped_cfg = replace(config, loss=replace(
        config.loss, use_ar=True, use_aux_ce=True, use_kl=True,
        teacher_grad_mode="stopped",
    ))
    stacked = stack_frames(utt.features, config.pipeline.stride)
    enc = config.model.encoder
    mask = build_attention_mask(
        stacked.shape[0], enc.chunk_frames, enc.lookahead_frames, enc.left_context
    )
    outs = forward_branches(params, stacked, mask)
    teacher_idx = select_teacher(config.model.branches, enc.trunk_layers)
    frozen = aux_project(params, outs[teacher_idx].features).value.copy()

    live = _assemble_loss(params, utt, stopped_cfg)[1].value
    pinned = _assemble_loss(params, utt, stopped_cfg, override=frozen)[1].value
    assert float(live) == float(pinned)  # identical at the baseline

    rep = check_gradients(
        lambda: _assemble_loss(params, utt, stopped_cfg, override=frozen)[1],
        params.tensors,
        tolerance=1e-4,
    )
    assert rep.passed, rep.entries[:3]
    worst = max(worst, rep.max_relative_error)

    elapsed = time.perf_counter() - t0
    assert elapsed < 120.0
    print(f"criterion 2 ok: all gradient checks < 1e-4 "
          f"(worst {worst:.2e}), {elapsed:.1f}s")


# ---------------------------------------------------------------------------
# 3. Alignment restriction: exact at full width, monotone as it widens.


def test_criterion_03_band_properties():
    rng = np.random.default_rng(300)
    for _ in range(50):
        t = int(rng.integers(2, 7))
        u = int(rng.integers(1, 5))
        v = int(rng.integers(1, 5))
        grid = _rand_grid(rng, t, u, v)
        targets = _rand_targets(rng, u, v)
        ref = _monotone_reference(rng, t, u)

        free = transducer_loss(grid, targets)
        full = ar_transducer_loss(grid, targets, build_band(ref, u, u, u))
        assert abs(full.loss - free.loss) <= 1e-12
        assert np.abs(full.logit_gradients - free.logit_gradients).max() <= 1e-12

    # Widening the band never increases the loss; zero width disconnects.
    grid = _rand_grid(rng, 5, 3, 4)
    targets = _rand_targets(rng, 3, 4)
    ref = _monotone_reference(rng, 5, 3)
    with pytest.raises(BandDisconnectedError):
        ar_transducer_loss(grid, targets, build_band(ref, 0, 0, 3))
    losses = [
        ar_transducer_loss(grid, targets, build_band(ref, b, b, 3)).loss
        for b in (1, 2, 3)
    ]
    assert losses[0] >= losses[1] >= losses[2]
    assert abs(losses[-1] - transducer_loss(grid, targets).loss) <= 1e-12
    print(f"criterion 3 ok: 50 full-band matches, widening "
          f"{losses[0]:.4f} >= {losses[1]:.4f} >= {losses[2]:.4f} == unrestricted")


# ---------------------------------------------------------------------------
# 4. Streaming evaluation matches full-sequence evaluation.


def test_criterion_04_streaming_equivalence():
    config = ModelConfig(
        encoder=EncoderConfig(
            model_dim=16, num_heads=2, ffn_dim=32, trunk_layers=1,
            chunk_frames=4, lookahead_frames=1,
        ),
        branches=[BranchSpec(0, 2), BranchSpec(1, 1)],
        vocab_size=5, num_classes=5, input_dim=6,
        joint_dim=12, predictor_dim=10, aux_hidden=8,
    )
    params = init_params(config, seed=4)
    rng = np.random.default_rng(400)
    worst = 0.0
    cases = 0
    for chunk, la in ((2, 0), (2, 1), (4, 1), (4, 2)):
        for _ in range(5):
            t = int(rng.integers(5, 11))
            x = rng.normal(size=(t, 6))
            mask = build_attention_mask(t, chunk, la, None)
            full = encode(params, x, 0, mask).projected.value
            stream = encode_streaming(params, x, 0, mask).projected.value
            diff = np.abs(full - stream).max()
            worst = max(worst, diff)
            assert diff < 1e-9
            cases += 1

    # Causality: frames beyond the visible window cannot move earlier rows.
    x = rng.normal(size=(12, 6))
    mask = build_attention_mask(12, 4, 1, None)
    base = encode(params, x, 0, mask).projected.value
    for edit_from, stable_rows in ((5, 4), (9, 8)):
        bumped = x.copy()
        bumped[edit_from:] += 10.0
        out = encode(params, bumped, 0, mask).projected.value
        assert np.abs(out[:stable_rows] - base[:stable_rows]).max() <= 1e-12
    print(f"criterion 4 ok: {cases} streaming matches (worst {worst:.2e}), "
          f"out-of-window edits invisible")


# ---------------------------------------------------------------------------
# 5. Branch extraction is exact.


def test_criterion_05_extraction_equivalence():
    config = ModelConfig(
        encoder=EncoderConfig(
            model_dim=16, num_heads=2, ffn_dim=32, trunk_layers=1,
            chunk_frames=4, lookahead_frames=1,
        ),
        branches=[BranchSpec(0, 2), BranchSpec(1, 1), BranchSpec(2, 1)],
        vocab_size=5, num_classes=5, input_dim=6,
        joint_dim=12, predictor_dim=10, aux_hidden=8,
    )
    params = init_params(config, seed=5)
    rng = np.random.default_rng(500)
    inputs = [rng.normal(size=(int(rng.integers(4, 9)), 6)) for _ in range(5)]
    tokens = [1, 4, 2]
    for b in range(3):
        single = extract_branch(params, b)
        assert len(single.config.branches) == 1
        assert not any(n.startswith("aux.") for n in single.tensors)

        # Extracted stack keeps exactly the trunk plus its own layers.
        layer_ids = {
            tuple(parts[:2])
            for parts in (name.split(".") for name in single.tensors)
            if parts[0] in ("trunk", "branch0") and parts[1].isdigit()
        }
        assert len(layer_ids) == effective_depth(config, b)

        for x in inputs:
            mask = build_attention_mask(x.shape[0], 4, 1, None)
            joint_grid = join(
                params, encode(params, x, b, mask).projected,
                predict(params, tokens),
            ).value
            single_grid = join(
                single, encode(single, x, 0, mask).projected,
                predict(single, tokens),
            ).value
            assert np.array_equal(joint_grid, single_grid)
    print("criterion 5 ok: 3 branches x 5 inputs, joiner logits bit-identical")


# ---------------------------------------------------------------------------
# 6. Decision-delay arithmetic.


def test_criterion_06_latency():
    got = algorithmic_latency(160.0, 40.0)
    assert got == 120.0
    print(f"criterion 6 ok: latency(160ms chunk, 40ms look-ahead) == {got}")


# ---------------------------------------------------------------------------
# 7. Deeper branches extract into strictly larger deployable models.


def test_criterion_07_size_ladder():
    config = default_run_config().model
    params = init_params(config, seed=0)
    depths = [effective_depth(config, b) for b in range(len(config.branches))]
    sizes = [count_params(extract_branch(params, b)) for b in range(len(config.branches))]
    assert depths == sorted(depths, reverse=True)
    assert all(a > b for a, b in zip(sizes, sizes[1:]))
    print(f"criterion 7 ok: depths {depths} -> parameter counts {sizes}")


# ---------------------------------------------------------------------------
# 8. Distribution-matching identities.


def test_criterion_08_distillation_identities():
    rng = np.random.default_rng(800)

    # Matching a distribution to itself costs exactly nothing.
    x = rng.normal(size=(3, 4))
    same = kl_codistill_loss(
        ad.log_softmax(ad.constant(x)), ad.log_softmax(ad.constant(x.copy())),
        "flowing",
    )
    assert float(same.value) == 0.0

    # Nonnegativity over random pairs.
    for _ in range(20):
        a = ad.log_softmax(ad.constant(rng.normal(size=(4, 5))))
        b = ad.log_softmax(ad.constant(rng.normal(size=(4, 5))))
        assert float(kl_codistill_loss(a, b, "stopped").value) >= 0.0

    config = _micro_config()
    utt = generate_corpus(config.data)[0]
    params = init_params(config.model, seed=1)

    # Zero mixing weight reduces the total to the bare transducer sum.
    lam0 = replace(config, loss=replace(config.loss, lam=0.0))
    breakdown, node = _assemble_loss(params, utt, lam0)
    assert abs(float(node.value) - breakdown.trans_sum) <= 1e-12

    # A lone branch has nothing to match against.
    solo_model = replace(config.model, branches=[BranchSpec(0, 2)])
    solo = replace(config, model=solo_model)
    solo_params = init_params(solo_model, seed=1)
    solo_breakdown, _ = _assemble_loss(solo_params, utt, solo)
    assert solo_breakdown.per_branch_kl == [0.0]

    # Gradient flowing into the shared joiner is the sum of the
    # per-branch transducer gradients.
    plain = replace(config, loss=replace(
        config.loss, lam=0.0, use_ar=False, use_aux_ce=False, use_kl=False,
    ))
    ad.zero_gradients(params.tensors.values())
    _, node = _assemble_loss(params, utt, plain)
    ad.backpropagate(node)
    joint_grad = params.tensors["joiner.w"].grad.copy()

    stacked = stack_frames(utt.features, config.pipeline.stride)
    enc = config.model.encoder
    mask = build_attention_mask(
        stacked.shape[0], enc.chunk_frames, enc.lookahead_frames, enc.left_context
    )
    summed = np.zeros_like(joint_grad)
    for b in range(len(config.model.branches)):
        ad.zero_gradients(params.tensors.values())
        out = encode(params, stacked, b, mask)
        grid = join(params, out.projected, predict(params, utt.tokens))
        ad.backpropagate(transducer_loss_node(grid, utt.tokens))
        summed += params.tensors["joiner.w"].grad
    assert np.abs(joint_grad - summed).max() < 1e-9
    print("criterion 8 ok: self-match 0, nonnegative, lam=0 collapse, "
          "solo branch, additive joiner gradient")


# ---------------------------------------------------------------------------
# 9. The default recipe converges on the synthetic corpus.


def test_criterion_09_convergence(tmp_path):
    config = default_run_config(out_dir=str(tmp_path / "run"))
    t0 = time.perf_counter()
    result = train_run(config)
    elapsed = time.perf_counter() - t0
    assert elapsed < 300.0

    train, _ = build_corpora(config)
    train_losses = evaluate_losses(result.params, train, config)
    assert all(loss < 0.5 for loss in train_losses)

    assert result.eval_ter, "training must report held-out error rates"
    largest_branch_ter = result.eval_ter[0]
    assert largest_branch_ter <= 0.05
    print(f"criterion 9 ok: train losses "
          f"{['%.4f' % v for v in train_losses]}, held-out TER "
          f"{['%.4f' % v for v in result.eval_ter]}, {elapsed:.0f}s")


# ---------------------------------------------------------------------------
# 10. The ablation grid produces the full comparison table.


def test_criterion_10_ablation_table(tmp_path):
    rows = run_ablation(tmp_path, epochs=1, utterances=10, eval_utterances=4)
    assert len(rows) == 52
    assert (tmp_path / "ablation.csv").exists()
    assert all(r["status"] == "ok" for r in rows)

    # Mixing-weight sweep: 4 weights x 3 branch depths.
    sweep = [r for r in rows if r["group"] == "lambda"]
    assert len(sweep) == 12
    assert len({r["lambda"] for r in sweep}) == 4
    assert len({r["branch_depth"] for r in sweep}) == 3

    # Factor grid: the all-on toggle row appears at four, three, and two
    # branches; separate baselines cover the whole depth union.
    yyyy_depths = sorted(r["branch_depth"] for r in rows
                         if r["group"] == "factor" and r["toggles"] == "yyyy")
    assert yyyy_depths == [3, 3, 4, 4, 4, 5, 6, 6, 6]
    separate = sorted(r["branch_depth"] for r in rows if r["toggles"] == "----")
    assert separate == [3, 4, 5, 6]

    by_toggles: dict[str, list[float]] = {}
    for r in rows:
        if r["ter_vs_separate"] != "":
            by_toggles.setdefault(r["toggles"], []).append(r["ter_vs_separate"])
    # Deltas are reported for the reader, not judged here.
    report = ", ".join(
        f"{k}: {np.mean(v):+.3f}" for k, v in sorted(by_toggles.items())
    )
    print(f"criterion 10 ok: 52 rows; mean TER deltas vs separate [{report}]")


# ---------------------------------------------------------------------------
# 11. Sharing the trunk buys wall-clock time.


def test_criterion_11_wall_time():
    got = wall_time_comparison(utterances=50, epochs=2, repeats=3)
    assert got["shared_ms_per_step"] < got["separate_ms_per_step"]
    print(f"criterion 11 ok: shared {got['shared_ms_per_step']:.1f} ms/step < "
          f"separate {got['separate_ms_per_step']:.1f} ms/step")
