"""Snippet-sequence model: temporal-conv embedding plus three scoring branches.

All scores are scaled cosine similarities against two learned classifiers:
a per-class matrix (one extra row for background when enabled) and a single
foreground vector. Each branch pools snippet embeddings with a temperature
softmax over time; the hybrid head repeats the pooling at several
temperatures and averages the resulting video-level logits before the final
softmax.
"""
from __future__ import annotations

import struct
from dataclasses import dataclass, field, fields

import numpy as np

from . import autodiff as ad
from .errors import ConfigError, ContractError, FormatError

CHECKPOINT_MAGIC = b"FACN"
CHECKPOINT_VERSION = 1


@dataclass
class ModelConfig:
    num_classes: int
    feature_dim: int
    embed_dims: tuple[int, int] = (1024, 1024)
    kernel_size: int = 3
    delta: float = 5.0
    temperatures: tuple[float, ...] = (1.0, 2.0, 5.0)
    use_background: bool = True
    dropout_rate: float = 0.5

    def __post_init__(self):
        self.embed_dims = tuple(int(d) for d in self.embed_dims)
        self.temperatures = tuple(float(t) for t in self.temperatures)
        if self.num_classes < 1:
            raise ConfigError("num_classes must be >= 1")
        if self.feature_dim < 1:
            raise ConfigError("feature_dim must be >= 1")
        if len(self.embed_dims) != 2 or min(self.embed_dims) < 1:
            raise ConfigError("embed_dims must be two positive widths")
        if self.kernel_size < 1 or self.kernel_size % 2 == 0:
            raise ConfigError("kernel_size must be odd and >= 1")
        if self.delta <= 0:
            raise ConfigError("delta must be positive")
        if not self.temperatures or min(self.temperatures) <= 0:
            raise ConfigError("temperatures must be a non-empty list of positives")
        if not 0.0 <= self.dropout_rate < 1.0:
            raise ConfigError("dropout_rate must be in [0, 1)")

    @property
    def score_classes(self) -> int:
        """Number of scored classes: C, plus background slot when enabled."""
        return self.num_classes + (1 if self.use_background else 0)


@dataclass
class ModelParams:
    conv1_w: np.ndarray  # (d1, D_in, k)
    conv1_b: np.ndarray  # (d1,)
    conv2_w: np.ndarray  # (d2, d1, k)
    conv2_b: np.ndarray  # (d2,)
    w_action: np.ndarray  # (score_classes, d2)
    w_fore: np.ndarray  # (d2,)

    def as_dict(self) -> dict[str, np.ndarray]:
        return {f.name: getattr(self, f.name) for f in fields(self)}

    def astype(self, dtype) -> "ModelParams":
        return ModelParams(**{k: v.astype(dtype) for k, v in self.as_dict().items()})

    def copy(self) -> "ModelParams":
        return ModelParams(**{k: v.copy() for k, v in self.as_dict().items()})


def init_params(config: ModelConfig, seed: int, dtype=np.float64) -> ModelParams:
    """Uniform(-1/sqrt(fan_in), +1/sqrt(fan_in)) init for every tensor."""
    rng = np.random.default_rng(seed)
    d1, d2 = config.embed_dims
    k = config.kernel_size

    def uniform(shape, fan_in):
        bound = 1.0 / np.sqrt(fan_in)
        return rng.uniform(-bound, bound, size=shape).astype(dtype)

    return ModelParams(
        conv1_w=uniform((d1, config.feature_dim, k), config.feature_dim * k),
        conv1_b=uniform((d1,), config.feature_dim * k),
        conv2_w=uniform((d2, d1, k), d1 * k),
        conv2_b=uniform((d2,), d1 * k),
        w_action=uniform((config.score_classes, d2), d2),
        w_fore=uniform((d2,), d2),
    )


def validate_params(params: ModelParams, config: ModelConfig) -> None:
    d1, d2 = config.embed_dims
    k = config.kernel_size
    expected = {
        "conv1_w": (d1, config.feature_dim, k),
        "conv1_b": (d1,),
        "conv2_w": (d2, d1, k),
        "conv2_b": (d2,),
        "w_action": (config.score_classes, d2),
        "w_fore": (d2,),
    }
    for name, shape in expected.items():
        actual = getattr(params, name).shape
        if actual != shape:
            raise ContractError(f"parameter {name} has shape {actual}, expected {shape}")


@dataclass
class ParamRefs:
    conv1_w: int
    conv1_b: int
    conv2_w: int
    conv2_b: int
    w_action: int
    w_fore: int


def stage_params(tape: ad.Tape, params: ModelParams) -> ParamRefs:
    return ParamRefs(**{k: tape.leaf(v, name=k) for k, v in params.as_dict().items()})


@dataclass
class BranchOutputs:
    """Tape references for every intermediate the three branches produce."""
    x_e: int
    s_a: int           # (T, K) class activation scores
    s_f: int           # (T,) foreground activation scores
    attn_class: list[int] = field(default_factory=list)   # per head, (T, K)
    feat_class: list[int] = field(default_factory=list)   # per head, (K, D)
    fore_logits_heads: list[int] = field(default_factory=list)  # per head, (K,)
    fore_logits: int = -1     # averaged, (K,)
    p_class_fore: int = -1    # softmax of the above
    attn_fore: list[int] = field(default_factory=list)    # per head, (T,)
    feat_fore: list[int] = field(default_factory=list)    # per head, (1, D)
    class_logits_heads: list[int] = field(default_factory=list)
    class_logits: int = -1
    p_video_class: int = -1
    mil_logits_heads: list[int] = field(default_factory=list)
    mil_logits: int = -1
    p_mil: int = -1


def embed(tape: ad.Tape, x_raw: int, refs: ParamRefs, config: ModelConfig,
          train_mode: bool = False, rng_seed=0) -> int:
    """Two temporal conv layers; dropout sits before each ReLU in train mode."""
    x = tape.val(x_raw)
    if x.ndim != 2 or x.shape[1] != config.feature_dim:
        raise ContractError(
            f"embed input shape {x.shape} does not match feature_dim {config.feature_dim}")
    rng = np.random.default_rng(rng_seed)
    h = tape.temporal_conv(x_raw, refs.conv1_w, refs.conv1_b)
    h = _dropout(tape, h, config, train_mode, rng)
    h = tape.relu(h)
    h = tape.temporal_conv(h, refs.conv2_w, refs.conv2_b)
    h = _dropout(tape, h, config, train_mode, rng)
    return tape.relu(h)


def _dropout(tape: ad.Tape, ref: int, config: ModelConfig, train_mode: bool, rng) -> int:
    if not train_mode or config.dropout_rate == 0.0:
        return ref
    keep = 1.0 - config.dropout_rate
    shape = tape.val(ref).shape
    mask = (rng.random(shape) < keep).astype(tape.val(ref).dtype) / keep
    return tape.dropout(ref, mask)


def class_scores(tape: ad.Tape, x_e: int, refs: ParamRefs, config: ModelConfig) -> int:
    """S_a: scaled cosine of each snippet against every class vector."""
    return tape.cosine_rows(x_e, refs.w_action, config.delta)


def fore_scores(tape: ad.Tape, x_e: int, refs: ParamRefs, config: ModelConfig) -> int:
    """S_f: scaled cosine of each snippet against the foreground vector."""
    d = tape.val(refs.w_fore).shape[0]
    w_row = tape.reshape(refs.w_fore, (1, d))
    t = tape.val(x_e).shape[0]
    return tape.reshape(tape.cosine_rows(x_e, w_row, config.delta), (t,))


def class_wise_head(tape: ad.Tape, s_a: int, x_e: int, refs: ParamRefs,
                    config: ModelConfig, tau: float) -> tuple[int, int, int]:
    """One temperature head of the class-wise branch.

    Attention over time per class, pooled class features, then each pooled
    feature is scored against the foreground vector.
    """
    attn = tape.softmax(s_a, tau, axis=0)          # (T, K)
    feat = tape.matmul(tape.transpose(attn), x_e)  # (K, D)
    d = tape.val(refs.w_fore).shape[0]
    w_row = tape.reshape(refs.w_fore, (1, d))
    k = tape.val(feat).shape[0]
    logits = tape.reshape(tape.cosine_rows(feat, w_row, config.delta), (k,))
    return attn, feat, logits


def class_wise_branch(tape: ad.Tape, x_e: int, refs: ParamRefs, config: ModelConfig,
                      tau: float) -> tuple[int, int, int, int]:
    s_a = class_scores(tape, x_e, refs, config)
    attn, feat, logits = class_wise_head(tape, s_a, x_e, refs, config, tau)
    return s_a, attn, feat, logits


def class_agnostic_head(tape: ad.Tape, s_f: int, x_e: int, refs: ParamRefs,
                        config: ModelConfig, tau: float) -> tuple[int, int, int]:
    """One temperature head of the class-agnostic branch."""
    attn = tape.softmax(s_f, tau, axis=0)          # (T,)
    t = tape.val(attn).shape[0]
    feat = tape.matmul(tape.reshape(attn, (1, t)), x_e)  # (1, D)
    k = tape.val(refs.w_action).shape[0]
    logits = tape.reshape(tape.cosine_rows(feat, refs.w_action, config.delta), (k,))
    return attn, feat, logits


def class_agnostic_branch(tape: ad.Tape, x_e: int, refs: ParamRefs, config: ModelConfig,
                          tau: float) -> tuple[int, int, int, int]:
    s_f = fore_scores(tape, x_e, refs, config)
    attn, feat, logits = class_agnostic_head(tape, s_f, x_e, refs, config, tau)
    return s_f, attn, feat, logits


def mil_head(tape: ad.Tape, s_a: int, attn_class: int) -> int:
    """Video-level class logits: attention-weighted sum of snippet scores."""
    if tape.val(s_a).shape != tape.val(attn_class).shape:
        raise ContractError("mil_head shape mismatch between scores and attention")
    return tape.sum(tape.mul(attn_class, s_a), axis=0)


def forward_hybrid(tape: ad.Tape, x_raw: int, refs: ParamRefs, config: ModelConfig,
                   train_mode: bool = False, rng_seed=0) -> BranchOutputs:
    """Full forward pass with one head per configured temperature.

    Snippet-level scores are temperature-independent and computed once;
    per-head video-level logits are averaged before each final softmax.
    """
    x_e = embed(tape, x_raw, refs, config, train_mode, rng_seed)
    s_a = class_scores(tape, x_e, refs, config)
    s_f = fore_scores(tape, x_e, refs, config)
    out = BranchOutputs(x_e=x_e, s_a=s_a, s_f=s_f)
    for tau in config.temperatures:
        attn_a, feat_a, fore_logits = class_wise_head(tape, s_a, x_e, refs, config, tau)
        out.attn_class.append(attn_a)
        out.feat_class.append(feat_a)
        out.fore_logits_heads.append(fore_logits)
        attn_f, feat_f, class_logits = class_agnostic_head(tape, s_f, x_e, refs, config, tau)
        out.attn_fore.append(attn_f)
        out.feat_fore.append(feat_f)
        out.class_logits_heads.append(class_logits)
        out.mil_logits_heads.append(mil_head(tape, s_a, attn_a))
    out.fore_logits = tape.average(out.fore_logits_heads)
    out.p_class_fore = tape.softmax(out.fore_logits, 1.0, axis=0)
    out.class_logits = tape.average(out.class_logits_heads)
    out.p_video_class = tape.softmax(out.class_logits, 1.0, axis=0)
    out.mil_logits = tape.average(out.mil_logits_heads)
    out.p_mil = tape.softmax(out.mil_logits, 1.0, axis=0)
    return out


def run_forward(x_raw: np.ndarray, params: ModelParams, config: ModelConfig,
                train_mode: bool = False, rng_seed=0) -> tuple[ad.Tape, BranchOutputs]:
    validate_params(params, config)
    tape = ad.Tape()
    x_ref = tape.leaf(np.asarray(x_raw))
    refs = stage_params(tape, params)
    return tape, forward_hybrid(tape, x_ref, refs, config, train_mode, rng_seed)


@dataclass
class ScoreSet:
    """Evaluation-mode outputs of one video as plain arrays."""
    s_a: np.ndarray        # (T, K)
    s_f: np.ndarray        # (T,)
    p_video_class: np.ndarray  # (K,) video-level class probabilities
    p_class_fore: np.ndarray   # (K,)
    p_mil: np.ndarray      # (K,)
    fore_logits: np.ndarray
    class_logits: np.ndarray
    mil_logits: np.ndarray


def forward_scores(x_raw: np.ndarray, params: ModelParams, config: ModelConfig) -> ScoreSet:
    tape, out = run_forward(x_raw, params, config, train_mode=False)
    return ScoreSet(
        s_a=tape.val(out.s_a), s_f=tape.val(out.s_f),
        p_video_class=tape.val(out.p_video_class),
        p_class_fore=tape.val(out.p_class_fore),
        p_mil=tape.val(out.p_mil),
        fore_logits=tape.val(out.fore_logits),
        class_logits=tape.val(out.class_logits),
        mil_logits=tape.val(out.mil_logits),
    )


def save_checkpoint(path, params: ModelParams, config: ModelConfig) -> None:
    """Binary checkpoint: magic, version, config block, float32 tensors."""
    validate_params(params, config)
    with open(path, "wb") as fh:
        fh.write(CHECKPOINT_MAGIC)
        fh.write(struct.pack("<I", CHECKPOINT_VERSION))
        fh.write(struct.pack("<5I", config.num_classes, config.feature_dim,
                             config.embed_dims[0], config.embed_dims[1],
                             config.kernel_size))
        fh.write(struct.pack("<d", config.delta))
        fh.write(struct.pack("<I", len(config.temperatures)))
        fh.write(struct.pack(f"<{len(config.temperatures)}d", *config.temperatures))
        fh.write(struct.pack("<Bd", int(config.use_background), config.dropout_rate))
        tensors = params.as_dict()
        fh.write(struct.pack("<I", len(tensors)))
        for name, tensor in tensors.items():
            raw = name.encode()
            fh.write(struct.pack("<H", len(raw)))
            fh.write(raw)
            fh.write(struct.pack("<B", tensor.ndim))
            fh.write(struct.pack(f"<{tensor.ndim}I", *tensor.shape))
            fh.write(np.ascontiguousarray(tensor, dtype="<f4").tobytes())


class _Reader:
    def __init__(self, path):
        with open(path, "rb") as fh:
            self.buf = fh.read()
        self.off = 0

    def take(self, n: int, what: str) -> bytes:
        if self.off + n > len(self.buf):
            raise FormatError(
                f"truncated checkpoint: needed {n} bytes for {what} at offset {self.off}")
        out = self.buf[self.off:self.off + n]
        self.off += n
        return out

    def unpack(self, fmt: str, what: str):
        return struct.unpack(fmt, self.take(struct.calcsize(fmt), what))


def load_checkpoint(path) -> tuple[ModelParams, ModelConfig]:
    r = _Reader(path)
    if r.take(4, "magic") != CHECKPOINT_MAGIC:
        raise FormatError(f"bad checkpoint magic at offset 0 in {path}")
    (version,) = r.unpack("<I", "version")
    if version != CHECKPOINT_VERSION:
        raise FormatError(f"unsupported checkpoint version {version} at offset 4")
    num_classes, feature_dim, d1, d2, kernel = r.unpack("<5I", "config")
    (delta,) = r.unpack("<d", "delta")
    (n_temps,) = r.unpack("<I", "temperature count")
    temps = r.unpack(f"<{n_temps}d", "temperatures")
    use_bg, dropout = r.unpack("<Bd", "flags")
    config = ModelConfig(num_classes=num_classes, feature_dim=feature_dim,
                         embed_dims=(d1, d2), kernel_size=kernel, delta=delta,
                         temperatures=temps, use_background=bool(use_bg),
                         dropout_rate=dropout)
    (n_tensors,) = r.unpack("<I", "tensor count")
    tensors: dict[str, np.ndarray] = {}
    for _ in range(n_tensors):
        (name_len,) = r.unpack("<H", "tensor name length")
        name = r.take(name_len, "tensor name").decode()
        (rank,) = r.unpack("<B", "tensor rank")
        dims = r.unpack(f"<{rank}I", "tensor dims")
        count = int(np.prod(dims)) if dims else 1
        data = np.frombuffer(r.take(4 * count, f"tensor {name}"), dtype="<f4")
        tensors[name] = data.reshape(dims).copy()
    expected = {f.name for f in fields(ModelParams)}
    if set(tensors) != expected:
        raise FormatError(f"checkpoint tensors {sorted(tensors)} != expected {sorted(expected)}")
    params = ModelParams(**tensors)
    validate_params(params, config)
    return params, config
