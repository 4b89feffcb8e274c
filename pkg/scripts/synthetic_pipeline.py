#!/usr/bin/env python3
"""Generate a synthetic dataset, train, localize, and print the mAP table.

Equivalent to chaining `wtal synth / train / localize / eval`, kept in one
process so the whole experiment is a single command:

    python scripts/synthetic_pipeline.py --workdir /tmp/wtal_demo
"""
import argparse
import time
from pathlib import Path

import numpy as np

from wtal.data import (SynthConfig, generate_synthetic, ground_truth_instances,
                       load_dataset, parse_manifest)
from wtal.evaluation import (THUMOS_GRID, Detection, GroundTruthInstance,
                             format_report, map_report)
from wtal.localization import LocalizeConfig, StreamScores, localize_video
from wtal.losses import LossWeights
from wtal.model import ModelConfig, forward_scores, init_params
from wtal.training import TrainConfig, fit


def main():
    parser = argparse.ArgumentParser(description=__doc__)
    parser.add_argument("--workdir", required=True)
    parser.add_argument("--epochs", type=int, default=100)
    parser.add_argument("--seed", type=int, default=7)
    parser.add_argument("--embed", type=int, default=128)
    parser.add_argument("--background", action="store_true",
                        help="train with the extra background class slot")
    args = parser.parse_args()

    workdir = Path(args.workdir)
    manifest = parse_manifest(generate_synthetic(SynthConfig(seed=args.seed), workdir / "data"))
    print(f"dataset: {len(manifest.videos)} videos, {len(manifest.classes)} classes")

    model_cfg = ModelConfig(num_classes=len(manifest.classes), feature_dim=64,
                            embed_dims=(args.embed, args.embed),
                            use_background=args.background)
    train_cfg = TrainConfig(epochs=args.epochs, batch_size=2, seed=3)
    train_set = load_dataset(manifest, "train", "rgb")
    params = init_params(model_cfg, seed=train_cfg.seed, dtype=train_cfg.dtype)

    started = time.perf_counter()
    result = fit(train_set, params, model_cfg, LossWeights(), train_cfg,
                 out_dir=workdir / "run", ckpt_prefix="model_rgb",
                 log=lambda s: print("  " + s) if "epoch" in s and s.endswith("0") else None)
    print(f"trained {args.epochs} epochs in {time.perf_counter() - started:.0f}s, "
          f"final loss {result.history[-1].loss_total:.4f}")

    trained = result.params.astype(np.float64)
    dets = []
    for sample in load_dataset(manifest, "test", "rgb"):
        scores = forward_scores(sample.features.astype(np.float64), trained, model_cfg)
        for inst in localize_video(
                [StreamScores(scores.s_a, scores.s_f, scores.p_video_class,
                              sample.snippet_stride, sample.fps)],
                len(manifest.classes), LocalizeConfig()):
            dets.append(Detection(sample.video_id, inst.class_id, inst.score,
                                  inst.start, inst.end))
    gts = [GroundTruthInstance(v, c, s, e)
           for v, c, s, e in ground_truth_instances(manifest, "test")]
    report = map_report(dets, gts, THUMOS_GRID, len(manifest.classes))
    print()
    print(format_report(report, manifest.classes))


if __name__ == "__main__":
    main()
