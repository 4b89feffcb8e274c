"""Acceptance suite: one test per release criterion, one printed verdict each.

Run with ``pytest tests/test_acceptance.py -s`` to see the verdict lines.
The end-to-end criteria train real models; the whole module takes a couple
of minutes on a laptop-class CPU.
"""
import time
from pathlib import Path

import numpy as np
import pytest

from wtal import autodiff as ad
from wtal.cli import main as cli_main
from wtal.data import (SynthConfig, generate_synthetic, ground_truth_instances,
                       load_dataset, parse_manifest)
from wtal.evaluation import (ACTIVITYNET_GRID, THUMOS_GRID, Detection,
                             GroundTruthInstance, map_report, tiou)
from wtal.localization import (ActionInstance, LocalizeConfig, StreamScores,
                               localize_video, nms)
from wtal.losses import LossWeights, total_loss
from wtal.model import (ModelConfig, ModelParams, class_wise_branch, forward_scores,
                        init_params, mil_head, run_forward, stage_params)
from wtal.training import TrainConfig, fit

from oracles import map_reference, nms_reference


def verdict(name: str, detail: str) -> None:
    print(f"\nACCEPTANCE {name}: PASS ({detail})")


# --- criterion 1: gradient correctness ------------------------------------

def test_gradient_correctness_20_random_instances():
    rng = np.random.default_rng(202)
    weights = LossWeights(1.0, 0.1, 0.1)
    started = time.perf_counter()
    worst = 0.0
    for i in range(20):
        t = int(rng.integers(1, 9))
        c = int(rng.integers(2, 5))
        d_in = int(rng.integers(3, 17))
        config = ModelConfig(
            num_classes=c, feature_dim=d_in,
            embed_dims=(int(rng.integers(3, 7)), int(rng.integers(3, 7))),
            temperatures=(1.0, 2.0, 5.0), use_background=bool(i % 2),
            dropout_rate=0.5 if i % 3 == 0 else 0.0)
        params = init_params(config, seed=int(rng.integers(1 << 31)), dtype=np.float64)
        x = rng.normal(size=(t, d_in))
        y = np.zeros(c)
        y[rng.permutation(c)[: int(rng.integers(1, c + 1))]] = 1.0
        train_mode = i % 3 == 0
        drop_seed = int(rng.integers(1 << 31))

        def f(tensors):
            p = ModelParams(**tensors)
            tape, out = run_forward(x, p, config, train_mode=train_mode,
                                    rng_seed=drop_seed)
            loss_ref, _ = total_loss(tape, out, y, weights, config.use_background)
            return float(tape.val(loss_ref)), ad.backward(tape, loss_ref)

        result = ad.finite_diff_check(f, params.as_dict(), step=1e-5)
        assert not result.failures
        assert result.max_rel_error < 1e-4, (
            f"instance {i}: {result.max_rel_error} at {result.worst_param}")
        worst = max(worst, result.max_rel_error)
    elapsed = time.perf_counter() - started
    assert elapsed < 30.0
    verdict("gradient-correctness",
            f"20 instances, worst rel err {worst:.2e}, {elapsed:.1f}s")


# --- criterion 2: reduction identities -------------------------------------

def test_reduction_identities():
    rng = np.random.default_rng(7)
    config = ModelConfig(num_classes=3, feature_dim=6, embed_dims=(5, 4),
                         temperatures=(1.0,))
    params = init_params(config, seed=1, dtype=np.float64)
    x = rng.normal(size=(6, 6))
    tape, out = run_forward(x, params, config)
    tape2 = ad.Tape()
    refs = stage_params(tape2, params)
    x_e_ref = tape2.leaf(tape.val(out.x_e))
    s_a, attn, feat, logits = class_wise_branch(tape2, x_e_ref, refs, config, 1.0)
    assert np.abs(tape.val(out.fore_logits) - tape2.val(logits)).max() <= 1e-12
    mil = mil_head(tape2, s_a, attn)
    assert np.abs(tape.val(out.mil_logits) - tape2.val(mil)).max() <= 1e-12

    x1 = rng.normal(size=(1, 6))
    tape1, out1 = run_forward(x1, params, config)
    x_e = tape1.val(out1.x_e)
    for feat_ref in out1.feat_class:
        assert np.abs(tape1.val(feat_ref) - x_e[0]).max() <= 1e-12
    assert np.abs(tape1.val(out1.mil_logits) - tape1.val(out1.s_a)[0]).max() <= 1e-12
    verdict("reduction-identities", "tau={1.0} head and T=1 identities exact to 1e-12")


# --- criterion 3: normalization suite ---------------------------------------

def test_normalization_and_entropy_over_1000_inputs():
    rng = np.random.default_rng(99)
    config = ModelConfig(num_classes=3, feature_dim=5, embed_dims=(4, 4),
                         temperatures=(1.0, 5.0), dropout_rate=0.25)
    params = init_params(config, seed=0, dtype=np.float64)

    def entropy(p, axis=0):
        return -(p * np.log(p)).sum(axis=axis)

    for i in range(1000):
        t = int(rng.integers(1, 9))
        x = rng.normal(size=(t, 5)) * float(rng.uniform(0.1, 10))
        tape, out = run_forward(x, params, config, train_mode=bool(i % 4 == 0),
                                rng_seed=i)
        for ref in out.attn_class:
            cols = tape.val(ref).sum(axis=0)
            assert np.abs(cols - 1.0).max() < 1e-6
        for ref in out.attn_fore:
            assert abs(tape.val(ref).sum() - 1.0) < 1e-6
        for ref in (out.p_class_fore, out.p_video_class, out.p_mil):
            p = tape.val(ref)
            assert abs(p.sum() - 1.0) < 1e-6 and (p > 0).all()
        # temperatures (1.0, 5.0): entropy must not increase with tau
        h1 = entropy(tape.val(out.attn_class[0]))
        h5 = entropy(tape.val(out.attn_class[1]))
        assert (h5 <= h1 + 1e-9).all()
        assert entropy(tape.val(out.attn_fore[1])) <= entropy(tape.val(out.attn_fore[0])) + 1e-9
    verdict("normalization-suite",
            "1000 inputs: attention/probability sums within 1e-6, entropy ordered")


# --- criterion 4: scoring oracles -------------------------------------------

def test_scoring_oracles():
    rng = np.random.default_rng(404)
    for _ in range(1000):
        n = int(rng.integers(1, 13))
        triples = []
        for _ in range(n):
            start = float(rng.uniform(0, 30))
            triples.append((float(np.round(rng.random(), 3)), start,
                            start + float(rng.uniform(0.1, 12))))
        threshold = float(rng.uniform(0.1, 1.0))
        kept = nms([ActionInstance(0, q, s, e) for q, s, e in triples], threshold)
        assert [(i.score, i.start, i.end) for i in kept] == \
            nms_reference(triples, threshold)

    from test_evaluation import random_micro_dataset
    for _ in range(200):
        gts, dets = random_micro_dataset(rng)
        report = map_report(dets, gts, THUMOS_GRID, 3)
        ref_per_t, ref_avg = map_reference(
            [(d.video_id, d.class_id, d.score, d.start, d.end) for d in dets],
            [(g.video_id, g.class_id, g.start, g.end) for g in gts],
            THUMOS_GRID, 3)
        assert np.abs(np.array([report.map_at[t] for t in THUMOS_GRID])
                      - np.array(ref_per_t)).max() <= 1e-10
        assert abs(report.average_map - ref_avg) <= 1e-10

    assert tiou((0.0, 10.0), (5.0, 15.0)) == 1.0 / 3.0
    verdict("scoring-oracles",
            "NMS exact on 1000 sets, mAP within 1e-10 on 200 datasets, tiou exact")


# --- shared synthetic dataset + trained models -------------------------------

E2E_SYNTH = SynthConfig(seed=7)  # C=5, D=64, 40 train / 20 test, noise 0.1
E2E_MODEL = dict(num_classes=5, feature_dim=64, embed_dims=(128, 128),
                 kernel_size=3, delta=5.0, temperatures=(1.0, 2.0, 5.0),
                 use_background=False, dropout_rate=0.5)
E2E_TRAIN = TrainConfig(learning_rate=1e-4, epochs=100, batch_size=2, seed=3,
                        precision=32)


@pytest.fixture(scope="module")
def synthetic_dataset(tmp_path_factory):
    root = tmp_path_factory.mktemp("e2e")
    manifest = parse_manifest(generate_synthetic(E2E_SYNTH, root))
    return manifest


def train_and_localize(manifest, weights: LossWeights, use_background=None):
    model_kwargs = dict(E2E_MODEL)
    if use_background is not None:
        model_kwargs["use_background"] = use_background
    config = ModelConfig(**model_kwargs)
    dataset = load_dataset(manifest, "train", "rgb")
    params = init_params(config, seed=E2E_TRAIN.seed, dtype=E2E_TRAIN.dtype)
    result = fit(dataset, params, config, weights, E2E_TRAIN)
    trained = result.params.astype(np.float64)
    dets = []
    lc = LocalizeConfig()
    for sample in load_dataset(manifest, "test", "rgb"):
        scores = forward_scores(sample.features.astype(np.float64), trained, config)
        instances = localize_video(
            [StreamScores(scores.s_a, scores.s_f, scores.p_video_class,
                          sample.snippet_stride, sample.fps)],
            len(manifest.classes), lc)
        dets.extend(Detection(sample.video_id, i.class_id, i.score, i.start, i.end)
                    for i in instances)
    gts = [GroundTruthInstance(v, c, s, e)
           for v, c, s, e in ground_truth_instances(manifest, "test")]
    return map_report(dets, gts, THUMOS_GRID, len(manifest.classes))


@pytest.fixture(scope="module")
def e2e_full_run(synthetic_dataset):
    started = time.perf_counter()
    report = train_and_localize(synthetic_dataset, LossWeights(1.0, 0.1, 0.1))
    return report, time.perf_counter() - started


# --- criterion 5: pipeline sanity --------------------------------------------

def test_pipeline_sanity_ground_truth_maps_to_one(synthetic_dataset):
    gts = [GroundTruthInstance(v, c, s, e)
           for v, c, s, e in ground_truth_instances(synthetic_dataset, "test")]
    dets = [Detection(g.video_id, g.class_id, 1.0, g.start, g.end) for g in gts]
    for grid in (THUMOS_GRID, ACTIVITYNET_GRID):
        report = map_report(dets, gts, grid, len(synthetic_dataset.classes))
        assert all(v == 1.0 for v in report.map_at.values())
        assert report.average_map == 1.0
    verdict("pipeline-sanity", "ground truth as detections scores 1.000 on both grids")


# --- criterion 6: end-to-end desk-scale learning ------------------------------

def test_end_to_end_learning_clears_map_floor(e2e_full_run):
    report, elapsed = e2e_full_run
    # first passing run measured 0.923 average mAP; 0.80 is the frozen floor
    assert report.average_map >= 0.80, f"average mAP {report.average_map:.3f}"
    assert elapsed < 300.0
    verdict("end-to-end-learning",
            f"avg mAP {report.average_map:.3f} >= 0.80 in {elapsed:.0f}s")


# --- criterion 7: branch ablation direction -----------------------------------

def test_three_branch_model_dominates_single_branches(synthetic_dataset, e2e_full_run):
    full_report, _ = e2e_full_run
    singles = {
        "class-wise": LossWeights(1.0, 0.0, 0.0),
        "class-agnostic": LossWeights(0.0, 1.0, 0.0),
        "mil": LossWeights(0.0, 0.0, 1.0),
    }
    results = {}
    for name, weights in singles.items():
        results[name] = train_and_localize(synthetic_dataset, weights).average_map
        assert full_report.average_map >= results[name], (
            f"{name} branch ({results[name]:.3f}) beat the full model "
            f"({full_report.average_map:.3f})")
    detail = ", ".join(f"{k} {v:.3f}" for k, v in results.items())
    verdict("branch-ablation-direction",
            f"full {full_report.average_map:.3f} >= {detail}")


def test_class_wise_alone_with_background_degrades(synthetic_dataset, e2e_full_run):
    # with the auxiliary branch weights at zero and the background slot
    # enabled, the foreground scores lose their meaning; the run must still
    # complete and is only asserted to localize worse than the full model
    full_report, _ = e2e_full_run
    report = train_and_localize(synthetic_dataset, LossWeights(1.0, 0.0, 0.0),
                                use_background=True)
    assert np.isfinite(report.average_map)
    assert report.average_map <= full_report.average_map
    verdict("background-ambiguity-degradation",
            f"class-wise-only with background {report.average_map:.3f} <= "
            f"full {full_report.average_map:.3f}")


# --- criterion 8: dataset-scale numbers are out of scope ----------------------

def test_real_feature_import_path_documented(tmp_path, rng):
    # benchmark-scale results need the real backbone features, which are not
    # shipped; the import path for them must exist and be documented
    readme = Path(__file__).resolve().parents[1] / "README.md"
    assert "convert" in readme.read_text()
    blob = tmp_path / "i3d.bin"
    data = rng.normal(size=(12, 16)).astype("<f4")
    blob.write_bytes(data.tobytes())
    out = tmp_path / "i3d.facf"
    assert cli_main(["convert", "--input", str(blob), "--t", "12", "--d", "16",
                     "--output", str(out)]) == 0
    verdict("dataset-scale-out-of-scope",
            "import path for real backbone features works; no benchmark numbers asserted")


# --- criterion 9: training determinism ----------------------------------------

def test_training_determinism_bit_identical_checkpoints(tmp_path):
    data_dir = tmp_path / "data"
    generate_synthetic(SynthConfig(num_train=5, num_test=1, snippet_range=(20, 40),
                                   seed=21), data_dir)
    args = ["train", "--manifest", str(data_dir / "manifest.json"),
            "--set", "model.embed_dims=[16,16]",
            "--set", "train.epochs=3", "--set", "train.batch_size=2",
            "--set", "train.precision=64", "--set", "train.seed=11"]
    out_a, out_b = tmp_path / "a", tmp_path / "b"
    assert cli_main(args + ["--out", str(out_a)]) == 0
    assert cli_main(args + ["--out", str(out_b)]) == 0
    bytes_a = (out_a / "model_rgb.facn").read_bytes()
    bytes_b = (out_b / "model_rgb.facn").read_bytes()
    assert bytes_a == bytes_b
    verdict("determinism", "identical config and seed give bit-identical checkpoints")
