"""Dense row-major tensors with tape-based reverse-mode differentiation.

Ops are free functions that return new Tensors and, when a Tape is active
and an input requires grad, append a node with the exact adjoint rule.
Broadcasting is restricted to a leading batch dimension: operand shapes
must be equal or the second operand's shape must be a trailing suffix of
the first's.
"""

from __future__ import annotations

import numpy as np


class ShapeError(ValueError):
    """Operand shapes are incompatible for the requested op."""


class NonFiniteError(RuntimeError):
    """An operation produced NaN or Inf."""


_DEFAULT_DTYPE = np.float64
_FINITE_CHECKS = True
_TAPE_STACK: list["Tape"] = []


def set_default_dtype(dtype) -> None:
    global _DEFAULT_DTYPE
    dtype = np.dtype(dtype)
    if dtype not in (np.dtype(np.float32), np.dtype(np.float64)):
        raise ValueError(f"unsupported dtype {dtype}; use float32 or float64")
    _DEFAULT_DTYPE = dtype.type


def get_default_dtype():
    return _DEFAULT_DTYPE


def set_finite_checks(enabled: bool) -> None:
    global _FINITE_CHECKS
    _FINITE_CHECKS = bool(enabled)


def _check_finite(arr: np.ndarray, op: str) -> None:
    if _FINITE_CHECKS and not np.isfinite(arr).all():
        raise NonFiniteError(f"{op} produced non-finite values")


class Tensor:
    """A dense array plus autodiff bookkeeping.

    ``data`` is always a C-contiguous float32/float64 ndarray. ``grad`` is
    populated (as an ndarray) by ``Tape.backward`` for watched leaves.
    """

    __slots__ = ("data", "requires_grad", "grad")

    def __init__(self, data, dtype=None, requires_grad: bool = False):
        arr = np.asarray(data, dtype=dtype if dtype is not None else None)
        if arr.dtype not in (np.float32, np.float64):
            arr = arr.astype(dtype if dtype is not None else _DEFAULT_DTYPE)
        # ascontiguousarray would promote 0-d scalars to shape (1,)
        self.data = arr if arr.ndim == 0 else np.ascontiguousarray(arr)
        self.requires_grad = bool(requires_grad)
        self.grad: np.ndarray | None = None
        _check_finite(self.data, "tensor")

    @property
    def shape(self) -> tuple[int, ...]:
        return self.data.shape

    @property
    def dtype(self):
        return self.data.dtype

    @property
    def size(self) -> int:
        return self.data.size

    def item(self) -> float:
        return float(self.data)

    def detach(self) -> "Tensor":
        return Tensor(self.data.copy(), requires_grad=False)

    def __repr__(self) -> str:
        return f"Tensor(shape={self.shape}, dtype={self.data.dtype.name}, requires_grad={self.requires_grad})"

    # Arithmetic sugar; scalars fold into the op without becoming leaves.
    def __add__(self, other):
        return add(self, other)

    def __radd__(self, other):
        return add(self, other)

    def __sub__(self, other):
        return sub(self, other)

    def __mul__(self, other):
        return mul(self, other)

    def __rmul__(self, other):
        return mul(self, other)

    def __neg__(self):
        return scale(self, -1.0)

    def __matmul__(self, other):
        return matmul(self, other)


class _Node:
    __slots__ = ("out", "parents", "backward")

    def __init__(self, out, parents, backward):
        self.out = out
        self.parents = parents
        self.backward = backward


class Tape:
    """Records primitive ops so adjoints can be replayed in reverse.

    Use as a context manager. ``backward(loss)`` fills ``grad`` on every
    requires-grad leaf that participated in the graph; leaves that never
    reached the loss get zeros.
    """

    def __init__(self):
        self.nodes: list[_Node] = []
        self._leaves: dict[int, Tensor] = {}
        self._outputs: set[int] = set()

    def __enter__(self) -> "Tape":
        _TAPE_STACK.append(self)
        return self

    def __exit__(self, *exc):
        _TAPE_STACK.pop()
        return False

    def _record(self, out: Tensor, parents: tuple[Tensor, ...], backward) -> None:
        self.nodes.append(_Node(out, parents, backward))
        self._outputs.add(id(out))
        for p in parents:
            if p.requires_grad and id(p) not in self._outputs:
                self._leaves.setdefault(id(p), p)

    def backward(self, loss: Tensor) -> None:
        if loss.shape != ():
            raise ShapeError(f"backward requires a scalar loss, got shape {loss.shape}")
        grads: dict[int, np.ndarray] = {id(loss): np.ones((), dtype=loss.dtype)}
        # Reverse sweep: each node visited exactly once.
        for node in reversed(self.nodes):
            g_out = grads.pop(id(node.out), None)
            if g_out is None:
                continue
            parent_grads = node.backward(g_out)
            for parent, g in zip(node.parents, parent_grads):
                if g is None or not parent.requires_grad:
                    continue
                acc = grads.get(id(parent))
                # Out-of-place accumulation: backward rules may alias g_out.
                grads[id(parent)] = g if acc is None else acc + g
        for key, leaf in self._leaves.items():
            g = grads.get(key)
            leaf.grad = g if g is not None else np.zeros_like(leaf.data)

    def gradients(self, loss: Tensor, leaves) -> list[np.ndarray]:
        """Backward pass returning grads for ``leaves`` in order (zeros if unused)."""
        self.backward(loss)
        out = []
        for leaf in leaves:
            out.append(leaf.grad if leaf.grad is not None else np.zeros_like(leaf.data))
        return out


def _active_tape() -> Tape | None:
    return _TAPE_STACK[-1] if _TAPE_STACK else None


def _result(op: str, data: np.ndarray, parents: tuple[Tensor, ...], backward) -> Tensor:
    _check_finite(data, op)
    tape = _active_tape()
    needs = tape is not None and any(p.requires_grad for p in parents)
    out = Tensor.__new__(Tensor)
    out.data = data
    out.requires_grad = needs
    out.grad = None
    if needs:
        tape._record(out, parents, backward)
    return out


def _as_scalar(x) -> float | None:
    if isinstance(x, (int, float, np.floating, np.integer)):
        return float(x)
    return None


def _suffix_broadcast_check(op: str, a: Tensor, b: Tensor) -> None:
    sa, sb = a.shape, b.shape
    if sa == sb:
        return
    if len(sb) < len(sa) and sa[len(sa) - len(sb):] == sb:
        return
    raise ShapeError(f"{op}: shapes {sa} and {sb} differ beyond leading batch dims")


def _reduce_to_shape(grad: np.ndarray, shape: tuple[int, ...]) -> np.ndarray:
    """Sum out leading broadcast axes so grad matches the operand shape."""
    extra = grad.ndim - len(shape)
    if extra > 0:
        grad = grad.sum(axis=tuple(range(extra)))
    return grad


def add(a: Tensor, b) -> Tensor:
    c = _as_scalar(b)
    if c is not None:
        data = a.data + a.dtype.type(c)
        return _result("add", data, (a,), lambda g: (g,))
    _suffix_broadcast_check("add", a, b)
    data = a.data + b.data
    return _result(
        "add", data, (a, b),
        lambda g: (g, _reduce_to_shape(g, b.shape)),
    )


def sub(a: Tensor, b) -> Tensor:
    c = _as_scalar(b)
    if c is not None:
        data = a.data - a.dtype.type(c)
        return _result("sub", data, (a,), lambda g: (g,))
    _suffix_broadcast_check("sub", a, b)
    data = a.data - b.data
    return _result(
        "sub", data, (a, b),
        lambda g: (g, -_reduce_to_shape(g, b.shape)),
    )


def mul(a: Tensor, b) -> Tensor:
    c = _as_scalar(b)
    if c is not None:
        return scale(a, c)
    _suffix_broadcast_check("mul", a, b)
    data = a.data * b.data
    return _result(
        "mul", data, (a, b),
        lambda g: (g * b.data, _reduce_to_shape(g * a.data, b.shape)),
    )


def scale(a: Tensor, c: float) -> Tensor:
    c = a.dtype.type(c)
    data = a.data * c
    return _result("scale", data, (a,), lambda g: (g * c,))


def matmul(a: Tensor, b: Tensor) -> Tensor:
    sa, sb = a.shape, b.shape
    if len(sa) < 2 or len(sb) < 2:
        raise ShapeError(f"matmul: operands must be >=2-D, got {sa} and {sb}")
    if sa[-1] != sb[-2]:
        raise ShapeError(f"matmul: inner dims of {sa} and {sb} do not match")
    if len(sa) > 2 and len(sb) > 2 and sa[:-2] != sb[:-2]:
        raise ShapeError(f"matmul: leading batch dims of {sa} and {sb} do not match")
    data = a.data @ b.data

    def backward(g):
        ga = g @ np.swapaxes(b.data, -1, -2)
        gb = np.swapaxes(a.data, -1, -2) @ g
        return _reduce_to_shape(ga, a.shape), _reduce_to_shape(gb, b.shape)

    return _result("matmul", data, (a, b), backward)


def silu(a: Tensor) -> Tensor:
    sig = 1.0 / (1.0 + np.exp(-a.data))
    data = a.data * sig

    def backward(g):
        return (g * (sig * (1.0 + a.data * (1.0 - sig))),)

    return _result("silu", data, (a,), backward)


def softmax(a: Tensor) -> Tensor:
    """Softmax along the last axis, shift-stabilized."""
    shifted = a.data - a.data.max(axis=-1, keepdims=True)
    e = np.exp(shifted)
    data = e / e.sum(axis=-1, keepdims=True)

    def backward(g):
        inner = (g * data).sum(axis=-1, keepdims=True)
        return (data * (g - inner),)

    return _result("softmax", data, (a,), backward)


def layer_norm(a: Tensor, eps: float = 1e-5) -> Tensor:
    """Normalize the last axis to zero mean / unit variance (pre-affine)."""
    mean = a.data.mean(axis=-1, keepdims=True)
    centered = a.data - mean
    var = (centered * centered).mean(axis=-1, keepdims=True)
    inv = 1.0 / np.sqrt(var + a.dtype.type(eps))
    data = centered * inv

    def backward(g):
        n = a.shape[-1]
        g_mean = g.mean(axis=-1, keepdims=True)
        gy_y = (g * data).mean(axis=-1, keepdims=True)
        return (inv * (g - g_mean - data * gy_y),)

    return _result("layer_norm", data, (a,), backward)


def embed_lookup(table: Tensor, ids: np.ndarray) -> Tensor:
    ids = np.asarray(ids, dtype=np.int64)
    if len(table.shape) != 2:
        raise ShapeError(f"embed_lookup: table must be 2-D, got {table.shape}")
    if ids.size and (ids.min() < 0 or ids.max() >= table.shape[0]):
        raise ShapeError(
            f"embed_lookup: ids outside [0, {table.shape[0]}) for table {table.shape}"
        )
    data = table.data[ids]

    def backward(g):
        gt = np.zeros_like(table.data)
        np.add.at(gt, ids.reshape(-1), g.reshape(-1, table.shape[1]))
        return (gt,)

    return _result("embed_lookup", data, (table,), backward)


def take_rows(a: Tensor, idx: np.ndarray) -> Tensor:
    """Select rows along axis 0."""
    idx = np.asarray(idx, dtype=np.int64)
    data = a.data[idx]

    def backward(g):
        ga = np.zeros_like(a.data)
        np.add.at(ga, idx, g)
        return (ga,)

    return _result("take_rows", data, (a,), backward)


def reshape(a: Tensor, shape) -> Tensor:
    data = a.data.reshape(shape)
    return _result("reshape", data, (a,), lambda g: (g.reshape(a.shape),))


def transpose(a: Tensor, axes) -> Tensor:
    axes = tuple(axes)
    inv = tuple(np.argsort(axes))
    data = np.ascontiguousarray(a.data.transpose(axes))
    return _result("transpose", data, (a,), lambda g: (g.transpose(inv),))


def concat(parts: list[Tensor], axis: int = 0) -> Tensor:
    data = np.concatenate([p.data for p in parts], axis=axis)
    sizes = [p.shape[axis] for p in parts]
    splits = np.cumsum(sizes)[:-1]

    def backward(g):
        return tuple(np.ascontiguousarray(piece) for piece in np.split(g, splits, axis=axis))

    return _result("concat", data, tuple(parts), backward)


def stack(parts: list[Tensor]) -> Tensor:
    data = np.stack([p.data for p in parts], axis=0)

    def backward(g):
        return tuple(g[i] for i in range(len(parts)))

    return _result("stack", data, tuple(parts), backward)


def pad_rows(a: Tensor, total: int) -> Tensor:
    """Zero-pad along axis 0 up to ``total`` rows."""
    n = a.shape[0]
    if total < n:
        raise ShapeError(f"pad_rows: total {total} < existing rows {n}")
    if total == n:
        return _result("pad_rows", a.data.copy(), (a,), lambda g: (g,))
    pad = np.zeros((total - n,) + a.shape[1:], dtype=a.dtype)
    data = np.concatenate([a.data, pad], axis=0)
    return _result("pad_rows", data, (a,), lambda g: (np.ascontiguousarray(g[:n]),))


def sum_all(a: Tensor) -> Tensor:
    data = np.asarray(a.data.sum(), dtype=a.dtype)
    return _result("sum", data, (a,), lambda g: (np.full_like(a.data, g),))


def mean_all(a: Tensor) -> Tensor:
    n = a.size
    data = np.asarray(a.data.mean(), dtype=a.dtype)
    return _result("mean", data, (a,), lambda g: (np.full_like(a.data, g / n),))


def cross_entropy(logits: Tensor, targets: np.ndarray) -> Tensor:
    """Mean token-level cross-entropy of ``logits`` (P, V) against int targets (P,)."""
    targets = np.asarray(targets, dtype=np.int64)
    if len(logits.shape) != 2:
        raise ShapeError(f"cross_entropy: logits must be 2-D, got {logits.shape}")
    if targets.shape != (logits.shape[0],):
        raise ShapeError(
            f"cross_entropy: targets shape {targets.shape} does not match logits {logits.shape}"
        )
    if targets.size == 0:
        raise ShapeError("cross_entropy: no supervised positions")
    shifted = logits.data - logits.data.max(axis=-1, keepdims=True)
    lse = np.log(np.exp(shifted).sum(axis=-1)) + logits.data.max(axis=-1)
    picked = logits.data[np.arange(targets.size), targets]
    data = np.asarray((lse - picked).mean(), dtype=logits.dtype)

    def backward(g):
        probs = np.exp(shifted)
        probs /= probs.sum(axis=-1, keepdims=True)
        probs[np.arange(targets.size), targets] -= 1.0
        return (probs * (g / targets.size),)

    return _result("cross_entropy", data, (logits,), backward)


def tensor(data, dtype=None, requires_grad: bool = False) -> Tensor:
    return Tensor(data, dtype=dtype, requires_grad=requires_grad)


def zeros(shape, dtype=None, requires_grad: bool = False) -> Tensor:
    return Tensor(np.zeros(shape, dtype=dtype or _DEFAULT_DTYPE), requires_grad=requires_grad)
