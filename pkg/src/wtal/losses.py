"""Video-level classification losses over the three branch outputs."""
from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from . import autodiff as ad
from .errors import ConfigError, ContractError, InputError
from .model import BranchOutputs


@dataclass
class LossWeights:
    class_wise: float = 1.0
    class_agnostic: float = 0.1
    mil: float = 0.1

    def __post_init__(self):
        if min(self.class_wise, self.class_agnostic, self.mil) < 0:
            raise ConfigError("loss weights must be non-negative")


def normalized_target(y: np.ndarray, background_value: int, use_background: bool) -> np.ndarray:
    """Ground-truth label vector extended with a background slot, then normalized.

    The class-wise and class-agnostic targets use background_value 0; the
    MIL target uses 1 since every video contains background snippets.
    """
    y = np.asarray(y, dtype=np.float64)
    if y.ndim != 1:
        raise ContractError(f"label vector must be 1-d, got shape {y.shape}")
    if not np.isin(y, (0, 1)).all():
        raise InputError("label vector entries must be 0 or 1")
    if y.sum() < 1:
        raise InputError("label vector must have at least one positive class")
    if background_value not in (0, 1):
        raise ContractError(f"background_value must be 0 or 1, got {background_value}")
    if use_background:
        y = np.concatenate([y, [float(background_value)]])
    return y / y.sum()


def nce_loss(tape: ad.Tape, p_ref: int, target: np.ndarray) -> int:
    """-target . log(P), with P clamped at 1e-12 before the log."""
    p = tape.val(p_ref)
    target = np.asarray(target)
    if p.shape != target.shape:
        raise ContractError(f"probability/target length mismatch {p.shape} vs {target.shape}")
    neg_t = (-target).astype(p.dtype)
    return tape.sum(tape.mul_const(tape.log_clamped(p_ref), neg_t))


def total_loss(tape: ad.Tape, outputs: BranchOutputs, y: np.ndarray,
               weights: LossWeights, use_background: bool) -> tuple[int, dict[str, int]]:
    """Weighted sum of the three branch losses; returns (total, per-branch refs)."""
    target_fg = normalized_target(y, 0, use_background)
    target_mil = normalized_target(y, 1, use_background)
    parts = {
        "class_wise": nce_loss(tape, outputs.p_class_fore, target_fg),
        "class_agnostic": nce_loss(tape, outputs.p_video_class, target_fg),
        "mil": nce_loss(tape, outputs.p_mil, target_mil),
    }
    total = tape.add(
        tape.add(
            tape.scale(parts["class_wise"], weights.class_wise),
            tape.scale(parts["class_agnostic"], weights.class_agnostic),
        ),
        tape.scale(parts["mil"], weights.mil),
    )
    return total, parts
