"""Command-line pipeline: synth | train | localize | eval | gradcheck | convert.

All commands read an optional JSON config file (sections: model, train,
loss, localize, synth; versioned via config_version) and accept repeated
``--set section.key=value`` overrides. Unknown sections or keys are
rejected before any work starts. Diagnostics go to stderr; exit status is 0
only when the command's postconditions hold.
"""
from __future__ import annotations

import argparse
import json
import os
import sys
import time
from dataclasses import fields
from pathlib import Path

CONFIG_VERSION = 1
CONFIG_SECTIONS = ("model", "train", "loss", "localize", "synth")


def _fail(message: str, code: int = 2) -> int:
    print(f"error: {message}", file=sys.stderr)
    return code


def load_run_config(path: str | None, overrides: list[str]) -> dict:
    from .errors import ConfigError

    cfg: dict[str, dict] = {section: {} for section in CONFIG_SECTIONS}
    if path is not None:
        with open(path) as fh:
            doc = json.load(fh)
        if doc.pop("config_version", CONFIG_VERSION) != CONFIG_VERSION:
            raise ConfigError(f"config_version must be {CONFIG_VERSION}")
        for section, mapping in doc.items():
            if section not in CONFIG_SECTIONS:
                raise ConfigError(f"unknown config section {section!r}")
            if not isinstance(mapping, dict):
                raise ConfigError(f"config section {section!r} must be an object")
            cfg[section].update(mapping)
    for item in overrides or []:
        if "=" not in item or "." not in item.split("=", 1)[0]:
            raise ConfigError(f"override {item!r} must look like section.key=value")
        key, value = item.split("=", 1)
        section, name = key.split(".", 1)
        if section not in CONFIG_SECTIONS:
            raise ConfigError(f"unknown config section {section!r}")
        try:
            cfg[section][name] = json.loads(value)
        except json.JSONDecodeError:
            cfg[section][name] = value
    return cfg


def _build(cls, mapping: dict, **fixed):
    from .errors import ConfigError

    allowed = {f.name for f in fields(cls)}
    unknown = set(mapping) - allowed
    if unknown:
        raise ConfigError(f"unknown {cls.__name__} keys: {sorted(unknown)}")
    merged = {**mapping, **fixed}
    for key in ("embed_dims", "temperatures", "proposal_thresholds", "snippet_range",
                "instances_range", "instance_len_range", "streams"):
        if key in merged and isinstance(merged[key], list):
            merged[key] = tuple(merged[key])
    return cls(**merged)


def cmd_synth(args) -> int:
    from .data import SynthConfig, generate_synthetic, parse_manifest

    cfg = load_run_config(args.config, args.set)
    synth_cfg = _build(SynthConfig, cfg["synth"])
    manifest_path = generate_synthetic(synth_cfg, args.out)
    manifest = parse_manifest(manifest_path)
    print(f"wrote {len(manifest.videos)} videos "
          f"({len(manifest.split('train'))} train / {len(manifest.split('test'))} test), "
          f"{len(manifest.classes)} classes, streams {list(manifest.streams)}")
    print(f"manifest: {manifest_path}")
    return 0


def _model_config_for(manifest, stream, cfg_model):
    from .data import read_feature_header
    from .model import ModelConfig

    entry = manifest.videos[0]
    if stream == "concat":
        dim = sum(read_feature_header(entry.features[s])[1] for s in manifest.streams)
    else:
        dim = read_feature_header(entry.features[stream])[1]
    return _build(ModelConfig, cfg_model,
                  num_classes=len(manifest.classes), feature_dim=dim)


def cmd_train(args) -> int:
    from .data import load_dataset, parse_manifest
    from .losses import LossWeights
    from .model import init_params
    from .training import TrainConfig, fit, load_train_state

    cfg = load_run_config(args.config, args.set)
    manifest = parse_manifest(args.manifest)
    train_cfg = _build(TrainConfig, cfg["train"])
    weights = _build(LossWeights, cfg["loss"])
    streams = args.streams.split(",") if args.streams else list(manifest.streams)
    out_dir = Path(args.out)
    out_dir.mkdir(parents=True, exist_ok=True)
    for i, stream in enumerate(streams):
        dataset = load_dataset(manifest, "train", stream)
        model_cfg = _model_config_for(manifest, stream, cfg["model"])
        state = None
        start_epoch = 0
        params = init_params(model_cfg, seed=train_cfg.seed + i, dtype=train_cfg.dtype)
        if args.resume:
            params, state, start_epoch = load_train_state(
                out_dir / f"model_{stream}_state.npz")
            print(f"[{stream}] resuming at epoch {start_epoch}", file=sys.stderr)
        result = fit(dataset, params, model_cfg, weights, train_cfg,
                     out_dir=out_dir, ckpt_prefix=f"model_{stream}",
                     checkpoint_interval=args.checkpoint_interval,
                     state=state, start_epoch=start_epoch,
                     log=(lambda s: print(s, file=sys.stderr)) if args.verbose else None)
        final = result.history[-1] if result.history else None
        if final is not None:
            print(f"[{stream}] {len(result.history)} epochs, "
                  f"final loss {final.loss_total:.4f} -> {out_dir / f'model_{stream}.facn'}")
    return 0


def cmd_localize(args) -> int:
    from .data import load_dataset, parse_manifest
    from .localization import (DetectionRecord, LocalizeConfig, StreamScores,
                               localize_video, write_detections_csv,
                               write_detections_json)
    from .model import forward_scores, load_checkpoint

    cfg = load_run_config(args.config, args.set)
    loc_cfg = _build(LocalizeConfig, cfg["localize"])
    manifest = parse_manifest(args.manifest)
    streams = args.streams.split(",") if args.streams else list(manifest.streams)
    model_dir = Path(args.model_dir)
    models = {}
    for stream in streams:
        params, model_cfg = load_checkpoint(model_dir / f"model_{stream}.facn")
        if model_cfg.num_classes != len(manifest.classes):
            return _fail(f"checkpoint for {stream} has {model_cfg.num_classes} classes, "
                         f"manifest has {len(manifest.classes)}")
        models[stream] = (params, model_cfg)
    datasets = {stream: {s.video_id: s for s in load_dataset(manifest, args.split, stream)}
                for stream in streams}
    out_dir = Path(args.out)
    out_dir.mkdir(parents=True, exist_ok=True)
    dump_dir = None
    if args.score_dump:
        dump_dir = Path(args.score_dump)
        dump_dir.mkdir(parents=True, exist_ok=True)
    records: list[DetectionRecord] = []
    for entry in manifest.split(args.split):
        stream_scores = []
        for stream in streams:
            sample = datasets[stream][entry.video_id]
            params, model_cfg = models[stream]
            scores = forward_scores(sample.features.astype("float64"), params, model_cfg)
            stream_scores.append(StreamScores(
                s_a=scores.s_a, s_f=scores.s_f,
                p_video_class=scores.p_video_class,
                snippet_stride=sample.snippet_stride, fps=sample.fps))
            if dump_dir is not None:
                _dump_scores(dump_dir / f"{entry.video_id}_{stream}.tsv",
                             scores, manifest.classes)
        instances = localize_video(stream_scores, len(manifest.classes), loc_cfg)
        records.extend(DetectionRecord(
            video_id=entry.video_id, class_id=inst.class_id,
            label=manifest.classes[inst.class_id], score=inst.score,
            start=inst.start, end=inst.end) for inst in instances)
    write_detections_csv(out_dir / "detections.csv", records)
    write_detections_json(out_dir / "detections.json", records)
    print(f"{len(records)} detections for {len(manifest.split(args.split))} videos "
          f"-> {out_dir / 'detections.csv'}")
    return 0


def _dump_scores(path, scores, class_names) -> None:
    with open(path, "w") as fh:
        fh.write("snippet\tfore_score\t" + "\t".join(class_names) + "\n")
        for t in range(scores.s_f.shape[0]):
            row = scores.s_a[t, :len(class_names)]
            fh.write(f"{t}\t{scores.s_f[t]!r}\t" + "\t".join(repr(v) for v in row) + "\n")


def cmd_eval(args) -> int:
    from .data import ground_truth_instances, parse_manifest
    from .evaluation import (ACTIVITYNET_GRID, THUMOS_GRID, Detection,
                             GroundTruthInstance, format_report, map_report,
                             write_report_json)
    from .localization import read_detections

    manifest = parse_manifest(args.manifest)
    grid = THUMOS_GRID if args.grid == "thumos" else ACTIVITYNET_GRID
    detections = [
        Detection(video_id=r.video_id, class_id=r.class_id, score=r.score,
                  start=r.start, end=r.end)
        for r in read_detections(args.detections, manifest.classes)
    ]
    gts = [GroundTruthInstance(video_id=v, class_id=c, start=s, end=e)
           for v, c, s, e in ground_truth_instances(manifest, args.split)]
    report = map_report(detections, gts, grid, len(manifest.classes))
    print(format_report(report, manifest.classes))
    if args.out:
        write_report_json(args.out, report, manifest.classes)
    return 0


def cmd_gradcheck(args) -> int:
    import numpy as np

    from . import autodiff as ad
    from .losses import LossWeights, total_loss
    from .model import ModelConfig, ModelParams, init_params, run_forward

    rng = np.random.default_rng(args.seed)
    weights = LossWeights()
    worst_overall = 0.0
    worst_where = "-"
    started = time.perf_counter()
    for i in range(args.instances):
        t = int(rng.integers(1, 9))
        c = int(rng.integers(2, 5))
        d_in = int(rng.integers(3, 9))
        config = ModelConfig(num_classes=c, feature_dim=d_in,
                             embed_dims=(int(rng.integers(3, 7)), int(rng.integers(3, 7))),
                             temperatures=(1.0, 2.0, 5.0),
                             use_background=bool(i % 2),
                             dropout_rate=0.5 if i % 3 == 0 else 0.0)
        params = init_params(config, seed=int(rng.integers(1 << 31)), dtype=np.float64)
        x = rng.normal(size=(t, d_in))
        y = np.zeros(c)
        y[rng.permutation(c)[:int(rng.integers(1, c + 1))]] = 1.0
        train_mode = i % 3 == 0
        drop_seed = int(rng.integers(1 << 31))

        def f(tensors):
            p = ModelParams(**tensors)
            tape, out = run_forward(x, p, config, train_mode=train_mode,
                                    rng_seed=drop_seed)
            loss_ref, _ = total_loss(tape, out, y, weights, config.use_background)
            grads = ad.backward(tape, loss_ref,
                                corrupt_op="softmax" if args.inject_bug else None)
            return float(tape.val(loss_ref)), grads

        result = ad.finite_diff_check(f, params.as_dict(), step=1e-5)
        if result.failures:
            print(f"instance {i}: non-finite evaluations: {result.failures[:3]}",
                  file=sys.stderr)
            return 1
        where = (f"{result.worst_param}{list(result.worst_index)}"
                 if result.worst_param is not None else "-")
        print(f"instance {i:2d}: T={t} C={c} max rel err {result.max_rel_error:.3e} "
              f"(worst: {where})")
        if result.max_rel_error > worst_overall:
            worst_overall = result.max_rel_error
            worst_where = where
    elapsed = time.perf_counter() - started
    print(f"worst over {args.instances} instances: {worst_overall:.3e} at {worst_where} "
          f"({elapsed:.1f}s)")
    if worst_overall >= args.tolerance:
        print(f"error: gradient check failed tolerance {args.tolerance}", file=sys.stderr)
        return 1
    return 0


def cmd_convert(args) -> int:
    from .data import convert_raw_features

    convert_raw_features(args.input, args.t, args.d, args.output)
    print(f"wrote {args.output} ({args.t}x{args.d})")
    return 0


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="wtal",
        description="Weakly supervised temporal action localization pipeline")
    parser.add_argument("--threads", type=int, default=None,
                        help="cap BLAS worker threads (set before numpy loads)")
    sub = parser.add_subparsers(dest="command", required=True)

    def common(p):
        p.add_argument("--config", default=None, help="JSON run config file")
        p.add_argument("--set", action="append", default=[], metavar="SECTION.KEY=VALUE",
                       help="override one config value (repeatable)")

    p = sub.add_parser("synth", help="generate a synthetic dataset")
    common(p)
    p.add_argument("--out", required=True, help="output dataset directory")
    p.set_defaults(func=cmd_synth)

    p = sub.add_parser("train", help="train one model per feature stream")
    common(p)
    p.add_argument("--manifest", required=True)
    p.add_argument("--out", required=True, help="checkpoint output directory")
    p.add_argument("--streams", default=None,
                   help="comma-separated stream names, or 'concat' (default: manifest streams)")
    p.add_argument("--checkpoint-interval", type=int, default=0)
    p.add_argument("--resume", action="store_true",
                   help="resume from the training-state file in --out")
    p.add_argument("--verbose", action="store_true", help="log per-epoch losses")
    p.set_defaults(func=cmd_train)

    p = sub.add_parser("localize", help="produce detections from a trained model")
    common(p)
    p.add_argument("--manifest", required=True)
    p.add_argument("--model-dir", required=True)
    p.add_argument("--out", required=True)
    p.add_argument("--split", default="test", choices=("train", "test"))
    p.add_argument("--streams", default=None)
    p.add_argument("--score-dump", default=None, metavar="DIR",
                   help="write per-video snippet score tables for plotting")
    p.set_defaults(func=cmd_localize)

    p = sub.add_parser("eval", help="score detections against ground truth")
    p.add_argument("--detections", required=True, help="detections .csv or .json")
    p.add_argument("--manifest", required=True)
    p.add_argument("--split", default="test", choices=("train", "test"))
    p.add_argument("--grid", default="thumos", choices=("thumos", "activitynet"))
    p.add_argument("--out", default=None, help="also write the report as JSON")
    p.set_defaults(func=cmd_eval)

    p = sub.add_parser("gradcheck", help="finite-difference check of the gradient engine")
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--instances", type=int, default=20)
    p.add_argument("--tolerance", type=float, default=1e-4)
    p.add_argument("--inject-bug", action="store_true",
                   help="corrupt one adjoint rule to prove harness sensitivity")
    p.set_defaults(func=cmd_gradcheck)

    p = sub.add_parser("convert", help="wrap a raw float32 blob as a feature file")
    p.add_argument("--input", required=True)
    p.add_argument("--t", type=int, required=True, help="snippet count")
    p.add_argument("--d", type=int, required=True, help="feature dimension")
    p.add_argument("--output", required=True)
    p.set_defaults(func=cmd_convert)
    return parser


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    if args.threads is not None:
        for var in ("OMP_NUM_THREADS", "OPENBLAS_NUM_THREADS", "MKL_NUM_THREADS"):
            os.environ[var] = str(args.threads)
    from .errors import (ConfigError, ContractError, FormatError, InputError,
                         ManifestError)
    from .training import NonFiniteGradientError

    try:
        return args.func(args)
    except (ConfigError, ManifestError) as exc:
        return _fail(str(exc), code=2)
    except (ContractError, InputError, FormatError, NonFiniteGradientError,
            FileNotFoundError) as exc:
        return _fail(str(exc), code=1)


if __name__ == "__main__":
    sys.exit(main())
