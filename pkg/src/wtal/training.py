"""Gradient-accumulating Adam training loop over variable-length videos."""
from __future__ import annotations

import csv
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from . import autodiff as ad
from .errors import ConfigError, ContractError
from .losses import LossWeights, total_loss
from .model import ModelConfig, ModelParams, run_forward, save_checkpoint


class NonFiniteGradientError(RuntimeError):
    def __init__(self, param_name: str, epoch: int):
        super().__init__(f"non-finite gradient for parameter {param_name!r} "
                         f"in epoch {epoch}; aborting epoch")
        self.param_name = param_name


@dataclass
class TrainConfig:
    learning_rate: float = 1e-4
    epochs: int = 100
    batch_size: int = 16
    beta1: float = 0.9
    beta2: float = 0.999
    adam_eps: float = 1e-8
    seed: int = 0
    max_snippets: int | None = None
    precision: int = 32  # 32 or 64

    def __post_init__(self):
        if self.learning_rate <= 0:
            raise ConfigError("learning_rate must be positive")
        if self.epochs < 1:
            raise ConfigError("epochs must be >= 1")
        if self.batch_size < 1:
            raise ConfigError("batch_size must be >= 1")
        if not 0 <= self.beta1 < 1 or not 0 <= self.beta2 < 1:
            raise ConfigError("adam betas must lie in [0, 1)")
        if self.precision not in (32, 64):
            raise ConfigError("precision must be 32 or 64")
        if self.seed < 0:
            raise ConfigError("seed must be non-negative")
        if self.max_snippets is not None and self.max_snippets < 1:
            raise ConfigError("max_snippets must be >= 1 when set")

    @property
    def dtype(self):
        return np.float32 if self.precision == 32 else np.float64


@dataclass
class OptimizerState:
    m: dict[str, np.ndarray]
    v: dict[str, np.ndarray]
    step: int = 0


def init_optimizer(params: ModelParams) -> OptimizerState:
    zeros = {k: np.zeros_like(v) for k, v in params.as_dict().items()}
    return OptimizerState(m=zeros, v={k: v.copy() for k, v in zeros.items()})


def adam_step(params: ModelParams, grads: dict[str, np.ndarray],
              state: OptimizerState, config: TrainConfig) -> tuple[ModelParams, OptimizerState]:
    """Bias-corrected Adam update, in place, in a fixed parameter order."""
    tensors = params.as_dict()
    if set(grads) != set(tensors):
        raise ContractError(f"gradient keys {sorted(grads)} != parameter keys {sorted(tensors)}")
    state.step += 1
    b1, b2 = config.beta1, config.beta2
    bias1 = 1.0 - b1 ** state.step
    bias2 = 1.0 - b2 ** state.step
    for name in tensors:
        g = grads[name]
        state.m[name] = b1 * state.m[name] + (1 - b1) * g
        state.v[name] = b2 * state.v[name] + (1 - b2) * g * g
        m_hat = state.m[name] / bias1
        v_hat = state.v[name] / bias2
        tensors[name] -= config.learning_rate * m_hat / (np.sqrt(v_hat) + config.adam_eps)
    return params, state


@dataclass
class EpochReport:
    epoch: int
    loss_class_wise: float
    loss_class_agnostic: float
    loss_mil: float
    loss_total: float
    num_videos: int
    skipped: int


def _video_seed(base_seed: int, epoch: int, index: int) -> np.random.SeedSequence:
    # index -1 (shuffle stream) maps to 0; videos use 1-based slots
    return np.random.SeedSequence((base_seed, epoch, index + 1))


def _maybe_subsample(features: np.ndarray, limit: int | None, rng) -> np.ndarray:
    if limit is None or features.shape[0] <= limit:
        return features
    start = int(rng.integers(0, features.shape[0] - limit + 1))
    return features[start:start + limit]


def train_epoch(dataset, params: ModelParams, state: OptimizerState,
                model_config: ModelConfig, loss_weights: LossWeights,
                train_config: TrainConfig, epoch: int) -> EpochReport:
    """One pass over the dataset: accumulate per-video gradients within each
    batch, average, and apply a single optimizer step per batch."""
    if not dataset:
        raise ConfigError("training dataset is empty")
    dtype = train_config.dtype
    order_rng = np.random.default_rng(_video_seed(train_config.seed, epoch, -1))
    order = order_rng.permutation(len(dataset))
    sums = {"class_wise": 0.0, "class_agnostic": 0.0, "mil": 0.0, "total": 0.0}
    processed = 0
    skipped = 0
    bs = train_config.batch_size
    for start in range(0, len(order), bs):
        batch = order[start:start + bs]
        acc: dict[str, np.ndarray] = {}
        in_batch = 0
        for idx in batch:
            sample = dataset[idx]
            if sample.features.shape[0] == 0:
                skipped += 1
                continue
            seed = _video_seed(train_config.seed, epoch, int(idx))
            rng = np.random.default_rng(seed)
            feats = _maybe_subsample(sample.features, train_config.max_snippets, rng)
            tape, out = run_forward(feats.astype(dtype), params, model_config,
                                    train_mode=True, rng_seed=seed.spawn(1)[0])
            loss_ref, parts = total_loss(tape, out, sample.labels, loss_weights,
                                         model_config.use_background)
            grads = ad.backward(tape, loss_ref)
            for name, g in grads.items():
                if not np.isfinite(g).all():
                    raise NonFiniteGradientError(name, epoch)
                acc[name] = acc.get(name, 0) + g
            sums["total"] += float(tape.val(loss_ref))
            for key, ref in parts.items():
                sums[key] += float(tape.val(ref))
            in_batch += 1
            processed += 1
        if in_batch:
            mean_grads = {k: v / in_batch for k, v in acc.items()}
            adam_step(params, mean_grads, state, train_config)
    n = max(processed, 1)
    return EpochReport(
        epoch=epoch,
        loss_class_wise=sums["class_wise"] / n,
        loss_class_agnostic=sums["class_agnostic"] / n,
        loss_mil=sums["mil"] / n,
        loss_total=sums["total"] / n,
        num_videos=processed,
        skipped=skipped,
    )


@dataclass
class FitResult:
    params: ModelParams
    state: OptimizerState
    history: list[EpochReport] = field(default_factory=list)


HISTORY_HEADER = ["epoch", "loss_class_wise", "loss_class_agnostic", "loss_mil", "loss_total"]


def write_history(path, history: list[EpochReport]) -> None:
    with open(path, "w", newline="") as fh:
        writer = csv.writer(fh)
        writer.writerow(HISTORY_HEADER)
        for rec in history:
            writer.writerow([rec.epoch, repr(rec.loss_class_wise),
                             repr(rec.loss_class_agnostic), repr(rec.loss_mil),
                             repr(rec.loss_total)])


def save_train_state(path, params: ModelParams, state: OptimizerState,
                     next_epoch: int) -> None:
    """Native-precision sidecar so a resumed run replays bit-identically."""
    arrays = {f"param_{k}": v for k, v in params.as_dict().items()}
    arrays.update({f"m_{k}": v for k, v in state.m.items()})
    arrays.update({f"v_{k}": v for k, v in state.v.items()})
    np.savez(path, step=state.step, next_epoch=next_epoch, **arrays)


def load_train_state(path) -> tuple[ModelParams, OptimizerState, int]:
    data = np.load(path)
    names = [k[len("param_"):] for k in data.files if k.startswith("param_")]
    params = ModelParams(**{k: data[f"param_{k}"] for k in names})
    state = OptimizerState(
        m={k: data[f"m_{k}"] for k in names},
        v={k: data[f"v_{k}"] for k in names},
        step=int(data["step"]),
    )
    return params, state, int(data["next_epoch"])


def fit(dataset, params: ModelParams, model_config: ModelConfig,
        loss_weights: LossWeights, train_config: TrainConfig,
        out_dir=None, ckpt_prefix: str = "model", checkpoint_interval: int = 0,
        state: OptimizerState | None = None, start_epoch: int = 0,
        log=None) -> FitResult:
    """Run the full schedule; optionally write checkpoints, history, and a
    resumable training-state file under out_dir."""
    if not dataset:
        raise ConfigError("training dataset is empty")
    params = params.astype(train_config.dtype)
    if state is None:
        state = init_optimizer(params)
    out_dir = Path(out_dir) if out_dir is not None else None
    if out_dir is not None:
        out_dir.mkdir(parents=True, exist_ok=True)
    history: list[EpochReport] = []
    for epoch in range(start_epoch, train_config.epochs):
        report = train_epoch(dataset, params, state, model_config, loss_weights,
                             train_config, epoch)
        history.append(report)
        if log is not None:
            log(f"epoch {epoch:3d}  total {report.loss_total:.4f}  "
                f"cw {report.loss_class_wise:.4f}  ca {report.loss_class_agnostic:.4f}  "
                f"mil {report.loss_mil:.4f}")
        if out_dir is not None and checkpoint_interval and (epoch + 1) % checkpoint_interval == 0:
            save_checkpoint(out_dir / f"{ckpt_prefix}_epoch{epoch + 1:04d}.facn",
                            params, model_config)
            save_train_state(out_dir / f"{ckpt_prefix}_state.npz", params, state, epoch + 1)
    if out_dir is not None:
        save_checkpoint(out_dir / f"{ckpt_prefix}.facn", params, model_config)
        save_train_state(out_dir / f"{ckpt_prefix}_state.npz", params, state,
                         train_config.epochs)
        write_history(out_dir / f"{ckpt_prefix}_history.csv", history)
    return FitResult(params=params, state=state, history=history)
