"""Reverse-mode gradient tape over a fixed set of dense operations.

The op set is deliberately closed: matrix product, temporal convolution,
row-wise cosine similarity, temperature softmax, elementwise maps and
reductions. Each op records its forward value plus whatever the adjoint
needs, and ``backward`` walks the tape once in reverse with hand-written
adjoint rules. ``finite_diff_check`` is the verification harness for those
rules.
"""
from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from .errors import ContractError, InputError

NORM_EPS = 1e-8  # clamp for cosine denominators; zero-norm rows score 0
LOG_FLOOR = 1e-12


@dataclass
class Node:
    op: str
    inputs: tuple[int, ...]
    value: np.ndarray
    meta: dict
    ctx: dict
    name: str | None = None


class Tape:
    """Ordered record of one forward pass. Single-owner, single-threaded."""

    def __init__(self) -> None:
        self.nodes: list[Node] = []

    def val(self, ref: int) -> np.ndarray:
        return self.nodes[ref].value

    def _push(self, op: str, inputs: tuple[int, ...], meta: dict) -> int:
        values = [self.nodes[i].value for i in inputs]
        value, ctx = _forward(op, values, meta)
        self.nodes.append(Node(op, inputs, value, meta, ctx))
        return len(self.nodes) - 1

    def leaf(self, value, name: str | None = None) -> int:
        self.nodes.append(Node("leaf", (), np.asarray(value), {}, {}, name))
        return len(self.nodes) - 1

    def add(self, a: int, b: int) -> int:
        return self._push("add", (a, b), {})

    def mul(self, a: int, b: int) -> int:
        return self._push("mul", (a, b), {})

    def scale(self, a: int, alpha: float) -> int:
        return self._push("scale", (a,), {"alpha": float(alpha)})

    def mul_const(self, a: int, const) -> int:
        return self._push("mul_const", (a,), {"const": np.asarray(const)})

    def dropout(self, a: int, mask: np.ndarray) -> int:
        # mask entries are 0 or 1/keep_prob, precomputed by the caller
        return self._push("mul_const", (a,), {"const": np.asarray(mask)})

    def average(self, refs: list[int]) -> int:
        return self._push("average", tuple(refs), {})

    def matmul(self, a: int, b: int) -> int:
        return self._push("matmul", (a, b), {})

    def transpose(self, a: int) -> int:
        return self._push("transpose", (a,), {})

    def reshape(self, a: int, shape: tuple[int, ...]) -> int:
        return self._push("reshape", (a,), {"shape": tuple(shape)})

    def relu(self, a: int) -> int:
        return self._push("relu", (a,), {})

    def temporal_conv(self, x: int, w: int, b: int) -> int:
        return self._push("temporal_conv", (x, w, b), {})

    def cosine_rows(self, a: int, b: int, scale: float) -> int:
        return self._push("cosine_rows", (a, b), {"scale": float(scale)})

    def softmax(self, a: int, tau: float, axis: int = 0) -> int:
        return self._push("softmax", (a,), {"tau": float(tau), "axis": int(axis)})

    def log_clamped(self, a: int, floor: float = LOG_FLOOR) -> int:
        return self._push("log_clamped", (a,), {"floor": float(floor)})

    def sum(self, a: int, axis: int | None = None) -> int:
        return self._push("sum", (a,), {"axis": axis})


def _forward(op: str, values: list[np.ndarray], meta: dict):
    """Compute one primitive. Returns (value, ctx-for-backward)."""
    if op == "add":
        a, b = values
        if a.shape != b.shape:
            raise ContractError(f"add shape mismatch {a.shape} vs {b.shape}")
        return a + b, {}
    if op == "mul":
        a, b = values
        if a.shape != b.shape:
            raise ContractError(f"mul shape mismatch {a.shape} vs {b.shape}")
        return a * b, {}
    if op == "scale":
        return values[0] * meta["alpha"], {}
    if op == "mul_const":
        a, c = values[0], meta["const"]
        if c.shape != a.shape and c.ndim != 0:
            raise ContractError(f"mul_const shape mismatch {a.shape} vs {c.shape}")
        return a * c.astype(a.dtype, copy=False), {}
    if op == "average":
        if not values:
            raise ContractError("average of zero inputs")
        out = values[0].copy()
        for v in values[1:]:
            if v.shape != out.shape:
                raise ContractError("average shape mismatch")
            out += v
        return out / len(values), {}
    if op == "matmul":
        a, b = values
        if a.ndim != 2 or b.ndim != 2 or a.shape[1] != b.shape[0]:
            raise ContractError(f"matmul shapes {a.shape} x {b.shape}")
        return a @ b, {}
    if op == "transpose":
        return values[0].T.copy(), {}
    if op == "reshape":
        return values[0].reshape(meta["shape"]).copy(), {}
    if op == "relu":
        return np.maximum(values[0], 0), {}
    if op == "temporal_conv":
        return _conv_forward(*values)
    if op == "cosine_rows":
        return _cosine_forward(values[0], values[1], meta["scale"])
    if op == "softmax":
        return _softmax_forward(values[0], meta["tau"], meta["axis"])
    if op == "log_clamped":
        a, floor = values[0], meta["floor"]
        clamped = np.maximum(a, floor)
        return np.log(clamped), {"clamped": clamped}
    if op == "sum":
        return np.asarray(values[0].sum(axis=meta["axis"])), {}
    raise ContractError(f"unknown op {op!r}")


def _conv_forward(x: np.ndarray, w: np.ndarray, b: np.ndarray):
    """1-d convolution over time, stride 1, zero same-padding.

    x: (T, d_in); w: (d_out, d_in, k) with k odd; b: (d_out,) -> (T, d_out).
    """
    if x.ndim != 2 or w.ndim != 3 or b.ndim != 1:
        raise ContractError("temporal_conv rank mismatch")
    t, d_in = x.shape
    d_out, w_in, k = w.shape
    if t == 0:
        raise InputError("temporal_conv on empty sequence")
    if w_in != d_in or b.shape[0] != d_out:
        raise ContractError(
            f"temporal_conv shapes x={x.shape} w={w.shape} b={b.shape}")
    if k % 2 == 0 or k < 1:
        raise ContractError(f"kernel size {k} must be odd")
    pad = k // 2
    xp = np.zeros((t + 2 * pad, d_in), dtype=x.dtype)
    xp[pad:pad + t] = x
    # windows[t] = [xp[t], xp[t+1], ..., xp[t+k-1]] flattened
    windows = np.concatenate([xp[i:i + t] for i in range(k)], axis=1)
    wmat = w.transpose(2, 1, 0).reshape(k * d_in, d_out)
    out = windows @ wmat + b.astype(x.dtype, copy=False)
    return out, {"windows": windows, "wmat": wmat, "k": k, "pad": pad}


def _conv_backward(node: Node, g: np.ndarray, values):
    x, w, b = values
    t, d_in = x.shape
    d_out, _, k = w.shape
    pad = node.ctx["pad"]
    windows, wmat = node.ctx["windows"], node.ctx["wmat"]
    db = g.sum(axis=0)
    dwmat = windows.T @ g
    dw = dwmat.reshape(k, d_in, d_out).transpose(2, 1, 0)
    dwin = (g @ wmat.T).reshape(t, k, d_in)
    dxp = np.zeros((t + 2 * pad, d_in), dtype=g.dtype)
    for i in range(k):
        dxp[i:i + t] += dwin[:, i, :]
    return [dxp[pad:pad + t], dw, db]


def _cosine_forward(a: np.ndarray, b: np.ndarray, scale: float):
    """out[i, j] = scale * cos(a_i, b_j), norms clamped at NORM_EPS."""
    if a.ndim != 2 or b.ndim != 2 or a.shape[1] != b.shape[1]:
        raise ContractError(f"cosine_rows shapes {a.shape} vs {b.shape}")
    if a.shape[1] < 1:
        raise ContractError("cosine_rows needs at least one column")
    if scale <= 0:
        raise ContractError(f"cosine scale {scale} must be positive")
    if not (np.isfinite(a).all() and np.isfinite(b).all()):
        raise InputError("cosine_rows received non-finite input")
    na = np.linalg.norm(a, axis=1)
    nb = np.linalg.norm(b, axis=1)
    u = np.maximum(na, NORM_EPS)
    v = np.maximum(nb, NORM_EPS)
    ahat = a / u[:, None]
    bhat = b / v[:, None]
    cos = np.clip(ahat @ bhat.T, -1.0, 1.0)
    ctx = {"ahat": ahat, "bhat": bhat, "cos": cos, "u": u, "v": v,
           "a_clamped": na < NORM_EPS, "b_clamped": nb < NORM_EPS}
    return scale * cos, ctx


def _cosine_backward(node: Node, g: np.ndarray, values):
    scale = node.meta["scale"]
    c = node.ctx
    ahat, bhat, cos, u, v = c["ahat"], c["bhat"], c["cos"], c["u"], c["v"]
    s = g * cos
    # d cos_ij / d a_i = bhat_j / u_i - cos_ij * ahat_i / u_i
    # (norm-derivative term vanishes where the norm sits on the clamp)
    row_s = s.sum(axis=1)
    row_s = np.where(c["a_clamped"], 0.0, row_s)
    da = scale * ((g @ bhat) - row_s[:, None] * ahat) / u[:, None]
    col_s = s.sum(axis=0)
    col_s = np.where(c["b_clamped"], 0.0, col_s)
    db = scale * ((g.T @ ahat) - col_s[:, None] * bhat) / v[:, None]
    return [da, db]


def _softmax_forward(a: np.ndarray, tau: float, axis: int):
    if a.size == 0:
        raise ContractError("softmax of empty input")
    if tau <= 0:
        raise ContractError(f"softmax temperature {tau} must be positive")
    z = tau * a
    z = z - z.max(axis=axis, keepdims=True)
    e = np.exp(z)
    # keep entries strictly positive even when exp underflows
    e = np.maximum(e, np.finfo(e.dtype).tiny)
    s = e / e.sum(axis=axis, keepdims=True)
    return s, {}


def _softmax_backward(node: Node, g: np.ndarray, values):
    s = node.value
    tau, axis = node.meta["tau"], node.meta["axis"]
    gs = g * s
    return [tau * (gs - s * gs.sum(axis=axis, keepdims=True))]


def _sum_backward(node: Node, g: np.ndarray, values):
    (a,) = values
    axis = node.meta["axis"]
    if axis is None:
        return [np.broadcast_to(g, a.shape).astype(a.dtype, copy=True)]
    return [np.broadcast_to(np.expand_dims(g, axis), a.shape).copy()]


_BACKWARD = {
    "add": lambda n, g, v: [g, g],
    "mul": lambda n, g, v: [g * v[1], g * v[0]],
    "scale": lambda n, g, v: [g * n.meta["alpha"]],
    "mul_const": lambda n, g, v: [g * n.meta["const"].astype(g.dtype, copy=False)],
    "average": lambda n, g, v: [g / len(v) for _ in v],
    "matmul": lambda n, g, v: [g @ v[1].T, v[0].T @ g],
    "transpose": lambda n, g, v: [g.T],
    "reshape": lambda n, g, v: [g.reshape(v[0].shape)],
    "relu": lambda n, g, v: [g * (v[0] > 0)],
    "temporal_conv": _conv_backward,
    "cosine_rows": _cosine_backward,
    "softmax": _softmax_backward,
    "log_clamped": lambda n, g, v: [
        g / n.ctx["clamped"] * (v[0] > n.meta["floor"])],
    "sum": _sum_backward,
}


def backward(tape: Tape, loss_ref: int, corrupt_op: str | None = None) -> dict[str, np.ndarray]:
    """Gradients of a scalar node w.r.t. every named leaf.

    ``corrupt_op`` deliberately mis-scales the adjoint of one op kind; it
    exists so the finite-difference harness can prove its own sensitivity.
    """
    loss = tape.nodes[loss_ref]
    if loss.value.size != 1:
        raise ContractError(f"backward needs a scalar loss, got shape {loss.value.shape}")
    adjoint: list[np.ndarray | None] = [None] * len(tape.nodes)
    adjoint[loss_ref] = np.ones_like(loss.value)
    grads: dict[str, np.ndarray] = {}
    for idx in range(loss_ref, -1, -1):
        node = tape.nodes[idx]
        g = adjoint[idx]
        if node.op == "leaf":
            if node.name is not None:
                acc = np.zeros_like(node.value) if g is None else g
                grads[node.name] = grads.get(node.name, 0) + acc
            continue
        if g is None:
            continue
        in_grads = _BACKWARD[node.op](node, g, [tape.nodes[i].value for i in node.inputs])
        if corrupt_op is not None and node.op == corrupt_op:
            in_grads = [ig * 1.05 for ig in in_grads]
        for ref, ig in zip(node.inputs, in_grads):
            adjoint[ref] = ig if adjoint[ref] is None else adjoint[ref] + ig
    return grads


def replay(tape: Tape) -> list[np.ndarray]:
    """Re-run every recorded op from the leaves; used to assert bit-identity."""
    values: list[np.ndarray] = []
    for node in tape.nodes:
        if node.op == "leaf":
            values.append(node.value)
        else:
            value, _ = _forward(node.op, [values[i] for i in node.inputs], node.meta)
            values.append(value)
    return values


def replay_is_identical(tape: Tape) -> bool:
    fresh = replay(tape)
    return all(
        a.dtype == b.value.dtype and a.tobytes() == b.value.tobytes()
        for a, b in zip(fresh, tape.nodes)
    )


@dataclass
class GradCheckResult:
    max_rel_error: float
    worst_param: str | None
    worst_index: tuple | None
    failures: list[str] = field(default_factory=list)

    @property
    def ok(self) -> bool:
        return not self.failures and np.isfinite(self.max_rel_error)


def finite_diff_check(f, params: dict[str, np.ndarray], step: float,
                      grads: dict[str, np.ndarray] | None = None) -> GradCheckResult:
    """Compare analytic gradients against central finite differences.

    ``f(params)`` must return ``(scalar loss, {name: grad})`` unless
    ``grads`` is supplied, in which case it may return the scalar alone.
    Error per coordinate is |analytic - cd| / max(|analytic|, |cd|, 1e-8).
    """
    if step <= 0:
        raise ContractError(f"finite difference step {step} must be positive")

    def loss_of(p):
        out = f(p)
        return float(out[0]) if isinstance(out, tuple) else float(out)

    if grads is None:
        base = f(params)
        if not isinstance(base, tuple):
            raise ContractError("f must return (loss, grads) when grads not given")
        grads = base[1]

    worst = GradCheckResult(0.0, None, None)
    for name in sorted(params):
        p = params[name]
        g = np.asarray(grads[name])
        for idx in np.ndindex(p.shape):
            orig = p[idx]
            p[idx] = orig + step
            lp = loss_of(params)
            p[idx] = orig - step
            lm = loss_of(params)
            p[idx] = orig
            if not (np.isfinite(lp) and np.isfinite(lm) and np.isfinite(g[idx])):
                worst.failures.append(f"{name}{list(idx)}: non-finite evaluation")
                continue
            cd = (lp - lm) / (2 * step)
            rel = abs(g[idx] - cd) / max(abs(g[idx]), abs(cd), 1e-8)
            if rel > worst.max_rel_error:
                worst.max_rel_error = rel
                worst.worst_param = name
                worst.worst_index = idx
    return worst
