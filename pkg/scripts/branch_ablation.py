#!/usr/bin/env python3
"""Retrain with each branch isolated and compare average mAP.

    python scripts/branch_ablation.py --workdir /tmp/wtal_ablation
"""
import argparse
from pathlib import Path

import numpy as np

from wtal.data import (SynthConfig, generate_synthetic, ground_truth_instances,
                       load_dataset, parse_manifest)
from wtal.evaluation import THUMOS_GRID, Detection, GroundTruthInstance, map_report
from wtal.localization import LocalizeConfig, StreamScores, localize_video
from wtal.losses import LossWeights
from wtal.model import ModelConfig, forward_scores, init_params
from wtal.training import TrainConfig, fit

VARIANTS = {
    "full": LossWeights(1.0, 0.1, 0.1),
    "class-wise only": LossWeights(1.0, 0.0, 0.0),
    "class-agnostic only": LossWeights(0.0, 1.0, 0.0),
    "mil only": LossWeights(0.0, 0.0, 1.0),
}


def evaluate(manifest, weights, epochs, background):
    model_cfg = ModelConfig(num_classes=len(manifest.classes), feature_dim=64,
                            embed_dims=(128, 128), use_background=background)
    train_cfg = TrainConfig(epochs=epochs, batch_size=2, seed=3)
    params = init_params(model_cfg, seed=train_cfg.seed, dtype=train_cfg.dtype)
    result = fit(load_dataset(manifest, "train", "rgb"), params, model_cfg,
                 weights, train_cfg)
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
    return map_report(dets, gts, THUMOS_GRID, len(manifest.classes)).average_map


def main():
    parser = argparse.ArgumentParser(description=__doc__)
    parser.add_argument("--workdir", required=True)
    parser.add_argument("--epochs", type=int, default=100)
    parser.add_argument("--seed", type=int, default=7)
    parser.add_argument("--background", action="store_true")
    args = parser.parse_args()

    manifest = parse_manifest(generate_synthetic(
        SynthConfig(seed=args.seed), Path(args.workdir) / "data"))
    print(f"{'variant':24s}  avg mAP (0.1:0.1:0.7)")
    for name, weights in VARIANTS.items():
        score = evaluate(manifest, weights, args.epochs, args.background)
        print(f"{name:24s}  {score:.3f}")


if __name__ == "__main__":
    main()
