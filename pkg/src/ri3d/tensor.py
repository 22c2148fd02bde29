"""Dense f64 tensors with tape-based reverse-mode autodiff.

Small by design: just the operations the range-image network needs.
All values are float64; forward ops are pure, so results are
deterministic given identical inputs. Gradients are recorded on an
explicit Tape (a Wengert list); backward walks the list once, in
reverse execution order.
"""

from __future__ import annotations

import io
import struct
from dataclasses import dataclass, field

import numpy as np

__all__ = [
    "Tensor",
    "Tape",
    "ShapeError",
    "ContractError",
    "add", "sub", "mul", "neg", "matmul", "relu", "exp", "log",
    "sigmoid", "absolute", "reshape", "concat", "sum_", "mean_",
    "softmax_axis", "max_reduce", "gather_rows", "mlp_forward",
    "backward", "apply_op",
    "OptimizerState", "LrSchedule", "adam_step",
    "save_checkpoint", "load_checkpoint", "CheckpointError",
]


class ShapeError(ValueError):
    """Operand shapes do not line up."""


class ContractError(ValueError):
    """An operation was called outside its contract (e.g. non-scalar loss)."""


class Tensor:
    """A dense float64 array, optionally tracked for gradients.

    `requires_grad` marks leaves (parameters). Intermediate results
    become tracked automatically while a Tape is active.
    """

    __slots__ = ("values", "requires_grad")

    def __init__(self, values, requires_grad: bool = False):
        self.values = np.asarray(values, dtype=np.float64)
        self.requires_grad = bool(requires_grad)

    @property
    def shape(self) -> tuple:
        return self.values.shape

    @property
    def size(self) -> int:
        return self.values.size

    def reshape(self, *shape) -> "Tensor":
        return reshape(self, shape[0] if len(shape) == 1 and isinstance(shape[0], (tuple, list)) else shape)

    def sum(self, axis=None, keepdims=False) -> "Tensor":
        return sum_(self, axis=axis, keepdims=keepdims)

    def mean(self, axis=None) -> "Tensor":
        return mean_(self, axis=axis)

    def __add__(self, other): return add(self, other)
    def __radd__(self, other): return add(other, self)
    def __sub__(self, other): return sub(self, other)
    def __rsub__(self, other): return sub(other, self)
    def __mul__(self, other): return mul(self, other)
    def __rmul__(self, other): return mul(other, self)
    def __neg__(self): return neg(self)
    def __matmul__(self, other): return matmul(self, other)

    def __getitem__(self, key) -> "Tensor":
        src_shape = self.values.shape
        out = self.values[key]

        def vjp(g):
            gx = np.zeros(src_shape)
            gx[key] = g
            return (gx,)

        return apply_op(out, (self,), vjp, "getitem")

    def __repr__(self):
        return f"Tensor(shape={self.values.shape}, requires_grad={self.requires_grad})"


def _lift(x) -> Tensor:
    return x if isinstance(x, Tensor) else Tensor(np.asarray(x, dtype=np.float64))


# ---------------------------------------------------------------------------
# Tape


@dataclass
class _Entry:
    output: Tensor
    inputs: tuple
    vjp: object
    name: str


class Tape:
    """Ordered record of executed ops; backward replays it in reverse.

    Use as a context manager around the forward pass:

        with Tape() as tape:
            loss = ...
        grads = tape.gradients(loss)
    """

    def __init__(self):
        self._entries: list[_Entry] = []

    def __enter__(self):
        _TAPE_STACK.append(self)
        return self

    def __exit__(self, *exc):
        _TAPE_STACK.remove(self)
        return False

    def __len__(self):
        return len(self._entries)

    def gradients(self, loss: Tensor) -> dict:
        """Reverse sweep from a scalar loss.

        Returns a map from every tensor that participated (and required
        grad) to its gradient array. Each recorded op is visited exactly
        once, in reverse execution order; inputs are never mutated.
        """
        if loss.size != 1:
            raise ContractError(f"loss must be scalar, got shape {loss.shape}")
        grads: dict[int, np.ndarray] = {id(loss): np.ones(loss.shape)}
        by_tensor: dict[int, Tensor] = {id(loss): loss}
        for entry in reversed(self._entries):
            g = grads.get(id(entry.output))
            if g is None:
                continue
            partials = entry.vjp(g)
            for inp, gi in zip(entry.inputs, partials):
                if gi is None or not isinstance(inp, Tensor) or not inp.requires_grad:
                    continue
                key = id(inp)
                if key in grads:
                    grads[key] = grads[key] + gi
                else:
                    grads[key] = gi
                    by_tensor[key] = inp
            # Drop the output grad: no earlier entry can produce it again.
            if entry.output is not loss:
                grads.pop(id(entry.output), None)
                by_tensor.pop(id(entry.output), None)
        return {t: grads[k] for k, t in by_tensor.items() if t.requires_grad or t is loss}


_TAPE_STACK: list[Tape] = []


def _active_tape() -> Tape | None:
    return _TAPE_STACK[-1] if _TAPE_STACK else None


def apply_op(out_values: np.ndarray, inputs: tuple, vjp, name: str = "") -> Tensor:
    """Create an op output, recording it on the active tape if needed.

    `vjp(g)` must return per-input gradient arrays (or None) aligned
    with `inputs`. This is the extension point custom fused ops use.
    """
    out = Tensor(out_values)
    tape = _active_tape()
    if tape is not None and any(isinstance(i, Tensor) and i.requires_grad for i in inputs):
        out.requires_grad = True
        tape._entries.append(_Entry(out, inputs, vjp, name))
    return out


def backward(loss: Tensor, tape: Tape) -> dict:
    """Gradient map for every requires_grad tensor reachable from loss."""
    return tape.gradients(loss)


# ---------------------------------------------------------------------------
# Elementwise and structural ops


def _unbroadcast(g: np.ndarray, shape: tuple) -> np.ndarray:
    """Sum g down to `shape` (inverse of numpy broadcasting)."""
    if g.shape == shape:
        return g
    extra = g.ndim - len(shape)
    if extra > 0:
        g = g.sum(axis=tuple(range(extra)))
    axes = tuple(i for i, n in enumerate(shape) if n == 1 and g.shape[i] != 1)
    if axes:
        g = g.sum(axis=axes, keepdims=True)
    return g.reshape(shape)


def add(a, b) -> Tensor:
    a, b = _lift(a), _lift(b)
    out = a.values + b.values

    def vjp(g):
        return (_unbroadcast(g, a.values.shape) if a.requires_grad else None,
                _unbroadcast(g, b.values.shape) if b.requires_grad else None)

    return apply_op(out, (a, b), vjp, "add")


def sub(a, b) -> Tensor:
    a, b = _lift(a), _lift(b)
    out = a.values - b.values

    def vjp(g):
        return (_unbroadcast(g, a.values.shape) if a.requires_grad else None,
                _unbroadcast(-g, b.values.shape) if b.requires_grad else None)

    return apply_op(out, (a, b), vjp, "sub")


def mul(a, b) -> Tensor:
    a, b = _lift(a), _lift(b)
    out = a.values * b.values

    def vjp(g):
        return (
            _unbroadcast(g * b.values, a.values.shape) if a.requires_grad else None,
            _unbroadcast(g * a.values, b.values.shape) if b.requires_grad else None,
        )

    return apply_op(out, (a, b), vjp, "mul")


def neg(a) -> Tensor:
    a = _lift(a)
    return apply_op(-a.values, (a,), lambda g: (-g,), "neg")


def matmul(a, b) -> Tensor:
    """Matrix product; batched on leading axes like np.matmul."""
    a, b = _lift(a), _lift(b)
    if a.values.ndim < 2 or b.values.ndim < 2:
        raise ShapeError("matmul expects operands with ndim >= 2")
    if a.values.shape[-1] != b.values.shape[-2]:
        raise ShapeError(
            f"matmul inner dims disagree: {a.values.shape} vs {b.values.shape}")
    out = a.values @ b.values

    def vjp(g):
        ga = gb = None
        if a.requires_grad:
            ga = _unbroadcast(g @ np.swapaxes(b.values, -1, -2), a.values.shape)
        if b.requires_grad:
            gb = _unbroadcast(np.swapaxes(a.values, -1, -2) @ g, b.values.shape)
        return (ga, gb)

    return apply_op(out, (a, b), vjp, "matmul")


def relu(a) -> Tensor:
    a = _lift(a)
    out = np.maximum(a.values, 0.0)
    pos = a.values > 0

    def vjp(g):
        return (g * pos,)

    return apply_op(out, (a,), vjp, "relu")


def exp(a) -> Tensor:
    a = _lift(a)
    out = np.exp(a.values)

    def vjp(g):
        return (g * out,)

    return apply_op(out, (a,), vjp, "exp")


def log(a) -> Tensor:
    a = _lift(a)
    out = np.log(a.values)

    def vjp(g):
        return (g / a.values,)

    return apply_op(out, (a,), vjp, "log")


def sigmoid(a) -> Tensor:
    a = _lift(a)
    out = np.empty_like(a.values)
    pos = a.values >= 0
    out[pos] = 1.0 / (1.0 + np.exp(-a.values[pos]))
    ez = np.exp(a.values[~pos])
    out[~pos] = ez / (1.0 + ez)

    def vjp(g):
        return (g * out * (1.0 - out),)

    return apply_op(out, (a,), vjp, "sigmoid")


def absolute(a) -> Tensor:
    a = _lift(a)
    sign = np.sign(a.values)

    def vjp(g):
        return (g * sign,)

    return apply_op(np.abs(a.values), (a,), vjp, "abs")


def reshape(a, shape) -> Tensor:
    a = _lift(a)
    src = a.values.shape

    def vjp(g):
        return (g.reshape(src),)

    return apply_op(a.values.reshape(shape), (a,), vjp, "reshape")


def concat(tensors, axis: int = -1) -> Tensor:
    tensors = [_lift(t) for t in tensors]
    out = np.concatenate([t.values for t in tensors], axis=axis)
    sizes = [t.values.shape[axis] for t in tensors]
    splits = np.cumsum(sizes)[:-1]

    def vjp(g):
        return tuple(np.split(g, splits, axis=axis))

    return apply_op(out, tuple(tensors), vjp, "concat")


def sum_(a, axis=None, keepdims: bool = False) -> Tensor:
    a = _lift(a)
    out = a.values.sum(axis=axis, keepdims=keepdims)
    src = a.values.shape

    def vjp(g):
        if axis is None:
            return (np.broadcast_to(g, src).copy(),)
        if not keepdims:
            g = np.expand_dims(g, axis)
        return (np.broadcast_to(g, src).copy(),)

    return apply_op(out, (a,), vjp, "sum")


def mean_(a, axis=None) -> Tensor:
    a = _lift(a)
    n = a.values.size if axis is None else a.values.shape[axis]
    return mul(sum_(a, axis=axis), 1.0 / n)


def softmax_axis(x, axis: int, mask=None) -> Tensor:
    """Masked, max-stabilized softmax along one axis.

    Masked entries get weight exactly 0. A fully masked slice yields
    all-zero weights instead of NaN.
    """
    x = _lift(x)
    xv = x.values
    if mask is None:
        m = np.ones(xv.shape, dtype=bool)
    else:
        m = np.broadcast_to(np.asarray(mask, dtype=bool), xv.shape)
    shifted = np.where(m, xv, -np.inf)
    mx = shifted.max(axis=axis, keepdims=True)
    mx = np.where(np.isfinite(mx), mx, 0.0)
    e = np.exp(shifted - mx)  # exp(-inf) == 0 exactly at masked entries
    s = e.sum(axis=axis, keepdims=True)
    w = e / np.where(s > 0, s, 1.0)

    def vjp(g):
        inner = (g * w).sum(axis=axis, keepdims=True)
        return (w * (g - inner),)

    return apply_op(w, (x,), vjp, "softmax")


def max_reduce(x, axis: int, mask=None) -> Tensor:
    """Max over unmasked entries along `axis`; fully masked slices give 0.

    Backward routes the gradient to the first (lowest-index) argmax
    entry only.
    """
    x = _lift(x)
    xv = x.values
    if mask is None:
        m = np.ones(xv.shape, dtype=bool)
    else:
        m = np.broadcast_to(np.asarray(mask, dtype=bool), xv.shape)
    masked = np.where(m, xv, -np.inf)
    arg = np.argmax(masked, axis=axis)
    any_valid = m.any(axis=axis)
    out = np.take_along_axis(masked, np.expand_dims(arg, axis), axis=axis).squeeze(axis)
    out = np.where(any_valid, out, 0.0)

    def vjp(g):
        gx = np.zeros(xv.shape)
        np.put_along_axis(
            gx, np.expand_dims(arg, axis),
            np.expand_dims(g * any_valid, axis), axis)
        return (gx,)

    return apply_op(out, (x,), vjp, "max_reduce")


def gather_rows(x: Tensor, idx: np.ndarray) -> Tensor:
    """Row gather from a [N, D] tensor; index -1 yields a zero row.

    Output shape is idx.shape + (D,). Backward scatter-adds into x.
    """
    x = _lift(x)
    if x.values.ndim != 2:
        raise ShapeError(f"gather_rows expects [N, D] input, got {x.values.shape}")
    idx = np.asarray(idx)
    flat = idx.reshape(-1)
    valid = flat >= 0
    out = x.values[np.where(valid, flat, 0)]
    out[~valid] = 0.0
    out = out.reshape(idx.shape + (x.values.shape[1],))
    n, d = x.values.shape

    def vjp(g):
        gx = np.zeros((n, d))
        gflat = g.reshape(-1, d)
        np.add.at(gx, flat[valid], gflat[valid])
        return (gx,)

    return apply_op(out, (x,), vjp, "gather_rows")


def mlp_forward(x, layers) -> Tensor:
    """Alternating affine + ReLU; the final layer is affine only.

    `layers` is a sequence of (W, b) pairs with W shaped [D_in, D_out].
    """
    h = _lift(x)
    for i, (w, b) in enumerate(layers):
        if h.values.shape[-1] != _lift(w).values.shape[0]:
            raise ShapeError(
                f"mlp layer {i}: input width {h.values.shape[-1]} vs weight {_lift(w).values.shape}")
        h = add(matmul(h, w), b)
        if i < len(layers) - 1:
            h = relu(h)
    return h


# ---------------------------------------------------------------------------
# Adam optimizer with an exponentially decaying learning rate


@dataclass
class LrSchedule:
    """lr(e) = initial * final_fraction ** (e / total_epochs), clamped at the end."""

    initial: float = 1e-3
    final_fraction: float = 0.01
    total_epochs: int = 300

    def at(self, epoch: float) -> float:
        frac = min(max(epoch, 0.0), self.total_epochs) / self.total_epochs
        return self.initial * self.final_fraction ** frac


@dataclass
class OptimizerState:
    """Adam moments plus the step counter and lr schedule."""

    schedule: LrSchedule = field(default_factory=LrSchedule)
    step: int = 0
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8
    m: dict = field(default_factory=dict)
    v: dict = field(default_factory=dict)


def adam_step(params: dict, grads: dict, state: OptimizerState, lr: float | None = None) -> OptimizerState:
    """One Adam update, in place on the parameter tensors.

    `params` maps names to Tensors, `grads` names to arrays (missing or
    None entries are treated as zero gradient).
    """
    state.step += 1
    t = state.step
    b1, b2 = state.beta1, state.beta2
    if lr is None:
        lr = state.schedule.initial
    for name, p in params.items():
        g = grads.get(name)
        if g is None:
            g = np.zeros_like(p.values)
        if g.shape != p.values.shape:
            raise ShapeError(f"grad shape {g.shape} != param shape {p.values.shape} for {name}")
        m = state.m.setdefault(name, np.zeros_like(p.values))
        v = state.v.setdefault(name, np.zeros_like(p.values))
        m += (1 - b1) * (g - m)
        v += (1 - b2) * (g * g - v)
        mhat = m / (1 - b1 ** t)
        vhat = v / (1 - b2 ** t)
        p.values -= lr * mhat / (np.sqrt(vhat) + state.eps)
    return state


# ---------------------------------------------------------------------------
# Checkpoint container: named f64 tensors + optimizer state, little-endian.
#
# Layout:
#   magic "RI3DCKPT", u32 version
#   u32 n_params, then per tensor: u16 name_len, name utf-8, u8 ndim,
#     u32 dims..., float64 payload (little-endian, row-major)
#   u8 has_optimizer; if set: u64 step, f64 lr_initial, f64 final_fraction,
#     u32 total_epochs, then the m and v tensor sections (same record format)

_CKPT_MAGIC = b"RI3DCKPT"
_CKPT_VERSION = 1


class CheckpointError(IOError):
    """Malformed or truncated checkpoint file."""


def _write_tensor_section(f, arrays: dict):
    f.write(struct.pack("<I", len(arrays)))
    for name, arr in arrays.items():
        raw = name.encode("utf-8")
        arr = np.ascontiguousarray(np.asarray(arr, dtype="<f8"))
        f.write(struct.pack("<H", len(raw)))
        f.write(raw)
        f.write(struct.pack("<B", arr.ndim))
        f.write(struct.pack(f"<{arr.ndim}I", *arr.shape))
        f.write(arr.tobytes())


def _read_exact(f, n: int) -> bytes:
    buf = f.read(n)
    if len(buf) != n:
        raise CheckpointError("truncated checkpoint payload")
    return buf


def _read_tensor_section(f) -> dict:
    (count,) = struct.unpack("<I", _read_exact(f, 4))
    out = {}
    for _ in range(count):
        (nlen,) = struct.unpack("<H", _read_exact(f, 2))
        name = _read_exact(f, nlen).decode("utf-8")
        (ndim,) = struct.unpack("<B", _read_exact(f, 1))
        shape = struct.unpack(f"<{ndim}I", _read_exact(f, 4 * ndim))
        n = int(np.prod(shape)) if ndim else 1
        data = np.frombuffer(_read_exact(f, 8 * n), dtype="<f8").reshape(shape)
        out[name] = data.astype(np.float64)
    return out


def save_checkpoint(path, params: dict, state: OptimizerState | None = None) -> None:
    with open(path, "wb") as f:
        f.write(_CKPT_MAGIC)
        f.write(struct.pack("<I", _CKPT_VERSION))
        arrays = {k: (v.values if isinstance(v, Tensor) else v) for k, v in params.items()}
        _write_tensor_section(f, arrays)
        f.write(struct.pack("<B", 1 if state is not None else 0))
        if state is not None:
            f.write(struct.pack(
                "<QddI", state.step, state.schedule.initial,
                state.schedule.final_fraction, state.schedule.total_epochs))
            _write_tensor_section(f, state.m)
            _write_tensor_section(f, state.v)


def load_checkpoint(path):
    """Returns (params dict of arrays, OptimizerState or None)."""
    with open(path, "rb") as f:
        magic = f.read(len(_CKPT_MAGIC))
        if magic != _CKPT_MAGIC:
            raise CheckpointError(f"bad checkpoint magic {magic!r}")
        (version,) = struct.unpack("<I", _read_exact(f, 4))
        if version != _CKPT_VERSION:
            raise CheckpointError(f"unsupported checkpoint version {version}")
        params = _read_tensor_section(f)
        (has_state,) = struct.unpack("<B", _read_exact(f, 1))
        state = None
        if has_state:
            step, lr0, frac, total = struct.unpack(
                "<QddI", _read_exact(f, struct.calcsize("<QddI")))
            state = OptimizerState(schedule=LrSchedule(lr0, frac, total), step=step)
            state.m = _read_tensor_section(f)
            state.v = _read_tensor_section(f)
        return params, state
