"""Dense float64 tensors with reverse-mode automatic differentiation.

Operations record a backward closure on the active tape (a thread-local
stack of Tape objects). Execution order is a topological order of the
dataflow graph, so replaying the tape in reverse propagates gradients.
Without an active tape, ops compute forward values only, which keeps
inference cheap.

One tape per forward/backward cycle: `backward()` consumes and clears
the tape it ran on. Separate threads get separate tape stacks.
"""

from __future__ import annotations

import json
import threading
import zipfile

import numpy as np

CHECKPOINT_FORMAT_VERSION = 1


class ShapeError(ValueError):
    """Operand shapes do not conform."""


class AutodiffError(RuntimeError):
    pass


class MissingGradientError(RuntimeError):
    """A parameter had no populated gradient at optimizer step time."""


_tls = threading.local()


def _tape_stack() -> list:
    stack = getattr(_tls, "tapes", None)
    if stack is None:
        stack = []
        _tls.tapes = stack
    return stack


def active_tape():
    stack = _tape_stack()
    return stack[-1] if stack else None


class Tape:
    """Ordered record of executed primitives for one backward pass."""

    def __init__(self):
        self._backward_fns: list = []

    def __enter__(self) -> "Tape":
        _tape_stack().append(self)
        return self

    def __exit__(self, exc_type, exc, tb):
        stack = _tape_stack()
        assert stack and stack[-1] is self
        stack.pop()
        return False

    def __len__(self) -> int:
        return len(self._backward_fns)

    def record(self, fn) -> None:
        self._backward_fns.append(fn)

    def run_backward(self) -> None:
        for fn in reversed(self._backward_fns):
            fn()
        self._backward_fns.clear()


class Tensor:
    """n-dimensional float64 array, optionally tracked for gradients."""

    __slots__ = ("data", "requires_grad", "grad", "_tape")

    def __init__(self, data, requires_grad: bool = False):
        arr = np.asarray(data, dtype=np.float64)
        self.data = arr
        self.requires_grad = requires_grad
        self.grad: np.ndarray | None = None
        self._tape: Tape | None = None

    @property
    def shape(self) -> tuple:
        return self.data.shape

    @property
    def size(self) -> int:
        return self.data.size

    def item(self) -> float:
        if self.data.size != 1:
            raise ShapeError(f"item() on tensor of shape {self.shape}")
        return float(self.data.reshape(()))

    def detach(self) -> "Tensor":
        return Tensor(self.data, requires_grad=False)

    def accumulate_grad(self, g: np.ndarray) -> None:
        if self.grad is None:
            self.grad = np.zeros_like(self.data)
        self.grad += g

    def zero_grad(self) -> None:
        self.grad = None

    def backward(self) -> None:
        backward(self)

    def __repr__(self) -> str:
        return f"Tensor(shape={self.shape}, requires_grad={self.requires_grad})"

    # operator sugar; all route through the primitive functions below
    def __add__(self, other):
        return add(self, other)

    def __radd__(self, other):
        return add(other, self)

    def __sub__(self, other):
        return sub(self, other)

    def __rsub__(self, other):
        return sub(other, self)

    def __mul__(self, other):
        return mul(self, other)

    def __rmul__(self, other):
        return mul(other, self)

    def __neg__(self):
        return mul(self, -1.0)

    def __matmul__(self, other):
        return matmul(self, other)

    def __getitem__(self, key):
        return getitem(self, key)


def as_tensor(x) -> Tensor:
    return x if isinstance(x, Tensor) else Tensor(x)


def _record(out: Tensor, inputs, backward_fn) -> Tensor:
    tape = active_tape()
    if tape is not None and any(t.requires_grad for t in inputs):
        out.requires_grad = True
        out._tape = tape

        def guarded():
            # ops whose result never fed the loss receive no gradient
            if out.grad is not None:
                backward_fn()

        tape.record(guarded)
    return out


def _unbroadcast(g: np.ndarray, shape: tuple) -> np.ndarray:
    """Sum a broadcast gradient back down to `shape`."""
    while g.ndim > len(shape):
        g = g.sum(axis=0)
    for axis, extent in enumerate(shape):
        if extent == 1 and g.shape[axis] != 1:
            g = g.sum(axis=axis, keepdims=True)
    return g


def _check_elementwise(a: Tensor, b: Tensor, opname: str) -> None:
    try:
        np.broadcast_shapes(a.shape, b.shape)
    except ValueError:
        raise ShapeError(
            f"{opname}: shapes {a.shape} and {b.shape} do not conform") from None


def add(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    _check_elementwise(a, b, "add")
    out = Tensor(a.data + b.data)

    def bwd():
        if a.requires_grad:
            a.accumulate_grad(_unbroadcast(out.grad, a.shape))
        if b.requires_grad:
            b.accumulate_grad(_unbroadcast(out.grad, b.shape))

    return _record(out, (a, b), bwd)


def sub(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    _check_elementwise(a, b, "sub")
    out = Tensor(a.data - b.data)

    def bwd():
        if a.requires_grad:
            a.accumulate_grad(_unbroadcast(out.grad, a.shape))
        if b.requires_grad:
            b.accumulate_grad(_unbroadcast(-out.grad, b.shape))

    return _record(out, (a, b), bwd)


def mul(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    _check_elementwise(a, b, "mul")
    out = Tensor(a.data * b.data)

    def bwd():
        if a.requires_grad:
            a.accumulate_grad(_unbroadcast(out.grad * b.data, a.shape))
        if b.requires_grad:
            b.accumulate_grad(_unbroadcast(out.grad * a.data, b.shape))

    return _record(out, (a, b), bwd)


def matmul(a, b) -> Tensor:
    """Matrix product for 1-D and 2-D operands with numpy semantics."""
    a, b = as_tensor(a), as_tensor(b)
    if a.data.ndim not in (1, 2) or b.data.ndim not in (1, 2):
        raise ShapeError(f"matmul: only 1-D/2-D supported, got {a.shape} @ {b.shape}")
    inner_a = a.shape[-1]
    inner_b = b.shape[0] if b.data.ndim > 0 else None
    if inner_a != inner_b:
        raise ShapeError(f"matmul: shapes {a.shape} and {b.shape} do not conform")
    a2 = a.data if a.data.ndim == 2 else a.data[None, :]
    b2 = b.data if b.data.ndim == 2 else b.data[:, None]
    res = a2 @ b2
    if a.data.ndim == 1:
        res = res[0]
    if b.data.ndim == 1:
        res = res[..., 0]
    out = Tensor(res)

    def bwd():
        g = out.grad
        g2 = g
        if a.data.ndim == 1:
            g2 = g2[None, ...]
        if b.data.ndim == 1:
            g2 = g2[..., None]
        if a.requires_grad:
            ga = g2 @ b2.T
            a.accumulate_grad(ga[0] if a.data.ndim == 1 else ga)
        if b.requires_grad:
            gb = a2.T @ g2
            b.accumulate_grad(gb[..., 0] if b.data.ndim == 1 else gb)

    return _record(out, (a, b), bwd)


def concat(tensors, axis: int = 0) -> Tensor:
    tensors = [as_tensor(t) for t in tensors]
    if not tensors:
        raise ShapeError("concat of no tensors")
    ref = list(tensors[0].shape)
    for t in tensors[1:]:
        other = list(t.shape)
        if len(other) != len(ref) or any(
                i != axis and other[i] != ref[i] for i in range(len(ref))):
            raise ShapeError(
                f"concat: shapes {tensors[0].shape} and {t.shape} do not conform")
    out = Tensor(np.concatenate([t.data for t in tensors], axis=axis))
    offsets = np.cumsum([0] + [t.shape[axis] for t in tensors])

    def bwd():
        for t, start, stop in zip(tensors, offsets[:-1], offsets[1:]):
            if t.requires_grad:
                idx = [slice(None)] * out.data.ndim
                idx[axis] = slice(start, stop)
                t.accumulate_grad(out.grad[tuple(idx)])

    return _record(out, tuple(tensors), bwd)


def getitem(a, key) -> Tensor:
    a = as_tensor(a)
    out = Tensor(a.data[key])

    def bwd():
        if a.requires_grad:
            g = np.zeros_like(a.data)
            np.add.at(g, key, out.grad)
            a.accumulate_grad(g)

    return _record(out, (a,), bwd)


def _reduce(a, axis, np_fn, bwd_builder) -> Tensor:
    a = as_tensor(a)
    out = Tensor(np_fn(a.data, axis=axis))
    bwd = bwd_builder(a, out, axis)
    return _record(out, (a,), bwd)


def tsum(a, axis: int | None = None) -> Tensor:
    def build(a, out, axis):
        def bwd():
            if not a.requires_grad:
                return
            if axis is None:
                a.accumulate_grad(np.full_like(a.data, out.grad))
            else:
                a.accumulate_grad(np.broadcast_to(
                    np.expand_dims(out.grad, axis), a.shape).copy())
        return bwd

    return _reduce(a, axis, np.sum, build)


def tmean(a, axis: int | None = None) -> Tensor:
    def build(a, out, axis):
        n = a.data.size if axis is None else a.shape[axis]

        def bwd():
            if not a.requires_grad:
                return
            if axis is None:
                a.accumulate_grad(np.full_like(a.data, out.grad / n))
            else:
                a.accumulate_grad(np.broadcast_to(
                    np.expand_dims(out.grad, axis), a.shape) / n)
        return bwd

    return _reduce(a, axis, np.mean, build)


def tmax(a, axis: int | None = None) -> Tensor:
    """Reduction max; ties share the gradient equally (matches the central
    finite difference at a tie point)."""
    def build(a, out, axis):
        def bwd():
            if not a.requires_grad:
                return
            if axis is None:
                hit = (a.data == out.data).astype(np.float64)
                a.accumulate_grad(hit * (out.grad / hit.sum()))
            else:
                hit = (a.data == np.expand_dims(out.data, axis)).astype(np.float64)
                hit /= hit.sum(axis=axis, keepdims=True)
                a.accumulate_grad(hit * np.expand_dims(out.grad, axis))
        return bwd

    return _reduce(a, axis, np.max, build)


def maximum(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    _check_elementwise(a, b, "maximum")
    out = Tensor(np.maximum(a.data, b.data))

    def bwd():
        tie = a.data == b.data
        wa = np.where(tie, 0.5, (a.data > b.data).astype(np.float64))
        if a.requires_grad:
            a.accumulate_grad(_unbroadcast(out.grad * wa, a.shape))
        if b.requires_grad:
            b.accumulate_grad(_unbroadcast(out.grad * (1.0 - wa), b.shape))

    return _record(out, (a, b), bwd)


def minimum(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    _check_elementwise(a, b, "minimum")
    out = Tensor(np.minimum(a.data, b.data))

    def bwd():
        tie = a.data == b.data
        wa = np.where(tie, 0.5, (a.data < b.data).astype(np.float64))
        if a.requires_grad:
            a.accumulate_grad(_unbroadcast(out.grad * wa, a.shape))
        if b.requires_grad:
            b.accumulate_grad(_unbroadcast(out.grad * (1.0 - wa), b.shape))

    return _record(out, (a, b), bwd)


def _unary(a, value: np.ndarray, local_grad_fn) -> Tensor:
    a = as_tensor(a)
    out = Tensor(value)

    def bwd():
        if a.requires_grad:
            a.accumulate_grad(out.grad * local_grad_fn(out))

    return _record(out, (a,), bwd)


def tanh(a) -> Tensor:
    a = as_tensor(a)
    return _unary(a, np.tanh(a.data), lambda out: 1.0 - out.data * out.data)


def sigmoid(a) -> Tensor:
    a = as_tensor(a)
    val = 1.0 / (1.0 + np.exp(-a.data))
    return _unary(a, val, lambda out: out.data * (1.0 - out.data))


def relu(a) -> Tensor:
    a = as_tensor(a)
    return _unary(a, np.maximum(a.data, 0.0),
                  lambda out: (a.data > 0).astype(np.float64))


def exp(a) -> Tensor:
    a = as_tensor(a)
    return _unary(a, np.exp(a.data), lambda out: out.data)


def log(a) -> Tensor:
    a = as_tensor(a)
    return _unary(a, np.log(a.data), lambda out: 1.0 / a.data)


def softmax(a, axis: int = -1) -> Tensor:
    """Numerically stable softmax; -inf entries yield exactly zero mass."""
    a = as_tensor(a)
    shifted = a.data - np.max(a.data, axis=axis, keepdims=True)
    e = np.exp(shifted)
    val = e / e.sum(axis=axis, keepdims=True)
    out = Tensor(val)

    def bwd():
        if a.requires_grad:
            y, g = out.data, out.grad
            inner = (g * y).sum(axis=axis, keepdims=True)
            a.accumulate_grad(y * (g - inner))

    return _record(out, (a,), bwd)


def backward(loss: Tensor) -> None:
    """Propagate d(loss)/d(tensor) into .grad of every reachable
    requires_grad tensor, then clear the tape that recorded the loss."""
    if loss.data.shape != ():
        raise AutodiffError(f"backward needs a scalar loss, got shape {loss.shape}")
    tape = loss._tape if loss._tape is not None else active_tape()
    if tape is None or len(tape) == 0:
        raise AutodiffError("backward with no recorded operations")
    loss.accumulate_grad(np.ones_like(loss.data))
    tape.run_backward()


# ---------------------------------------------------------------------------
# parameters, optimizer, checkpoints


class ParamStore:
    """Named trainable tensors with the project's standard initializers."""

    def __init__(self, rng: np.random.Generator | None = None):
        self.rng = rng if rng is not None else np.random.default_rng(0)
        self.params: dict[str, Tensor] = {}

    def _register(self, name: str, t: Tensor) -> Tensor:
        if name in self.params:
            raise ValueError(f"duplicate parameter {name!r}")
        self.params[name] = t
        return t

    def weight(self, name: str, shape) -> Tensor:
        shape = tuple(shape)
        fan_in = shape[-1]
        fan_out = shape[0] if len(shape) > 1 else 1
        a = np.sqrt(6.0 / (fan_in + fan_out))
        data = self.rng.uniform(-a, a, size=shape)
        return self._register(name, Tensor(data, requires_grad=True))

    def bias(self, name: str, shape) -> Tensor:
        return self._register(name, Tensor(np.zeros(shape), requires_grad=True))

    def zero_grad(self) -> None:
        for t in self.params.values():
            t.zero_grad()

    def items(self):
        return self.params.items()

    def __getitem__(self, name: str) -> Tensor:
        return self.params[name]

    def __contains__(self, name: str) -> bool:
        return name in self.params

    def load_arrays(self, arrays: dict[str, np.ndarray]) -> None:
        for name, t in self.params.items():
            if name not in arrays:
                raise KeyError(f"checkpoint missing parameter {name!r}")
            arr = arrays[name]
            if arr.shape != t.shape:
                raise ShapeError(
                    f"checkpoint parameter {name!r}: shape {arr.shape} "
                    f"does not match {t.shape}")
            t.data[...] = arr


class Adam:
    """Adam with bias correction; per-parameter moment accumulators."""

    def __init__(self, params: dict[str, Tensor], lr: float = 1e-3,
                 beta1: float = 0.9, beta2: float = 0.999, eps: float = 1e-8):
        if isinstance(params, ParamStore):
            params = params.params
        self.params = params
        self.lr = lr
        self.beta1 = beta1
        self.beta2 = beta2
        self.eps = eps
        self.t = 0
        # aliased parameters share a tensor; keep one slot per storage
        self._slots: list[tuple[str, Tensor, np.ndarray, np.ndarray]] = []
        seen: set[int] = set()
        for name, p in self.params.items():
            if id(p) in seen:
                continue
            seen.add(id(p))
            self._slots.append((name, p, np.zeros_like(p.data), np.zeros_like(p.data)))

    def step(self) -> None:
        for name, p, _, _ in self._slots:
            if p.grad is None:
                raise MissingGradientError(f"parameter {name!r} has no gradient")
        self.t += 1
        c1 = 1.0 - self.beta1 ** self.t
        c2 = 1.0 - self.beta2 ** self.t
        for _, p, m, v in self._slots:
            g = p.grad
            m *= self.beta1
            m += (1.0 - self.beta1) * g
            v *= self.beta2
            v += (1.0 - self.beta2) * g * g
            p.data -= self.lr * (m / c1) / (np.sqrt(v / c2) + self.eps)
            p.grad = None

    def zero_grad(self) -> None:
        for _, p, _, _ in self._slots:
            p.grad = None


def clip_global_norm(params: dict[str, Tensor], max_norm: float) -> float:
    """Scale all gradients in place so their global L2 norm is <= max_norm."""
    seen: set[int] = set()
    grads = []
    for p in params.values():
        if id(p) in seen or p.grad is None:
            continue
        seen.add(id(p))
        grads.append(p.grad)
    total = float(np.sqrt(sum(float((g * g).sum()) for g in grads)))
    if total > max_norm and total > 0.0:
        scale = max_norm / total
        for g in grads:
            g *= scale
    return total


def save_checkpoint(path, params: dict[str, Tensor], extra: dict | None = None):
    """Write a zip archive of named float64 little-endian parameters."""
    if isinstance(params, ParamStore):
        params = params.params
    manifest = {
        "format_version": CHECKPOINT_FORMAT_VERSION,
        "dtype": "<f8",
        "params": {name: list(t.shape) for name, t in params.items()},
        "extra": extra or {},
    }
    with zipfile.ZipFile(path, "w", zipfile.ZIP_DEFLATED) as zf:
        zf.writestr("manifest.json", json.dumps(manifest, sort_keys=True))
        for name, t in params.items():
            zf.writestr(f"data/{name}.bin", t.data.astype("<f8").tobytes())


def load_checkpoint(path) -> tuple[dict[str, np.ndarray], dict]:
    with zipfile.ZipFile(path, "r") as zf:
        manifest = json.loads(zf.read("manifest.json"))
        version = manifest.get("format_version")
        if version != CHECKPOINT_FORMAT_VERSION:
            raise ValueError(f"unsupported checkpoint format version {version!r}")
        arrays = {}
        for name, shape in manifest["params"].items():
            raw = zf.read(f"data/{name}.bin")
            arrays[name] = np.frombuffer(raw, dtype="<f8").reshape(shape).copy()
    return arrays, manifest.get("extra", {})
