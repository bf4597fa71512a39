"""Dense float64 tensors with reverse-mode automatic differentiation.

The graph built during a forward pass is the tape: every recorded tensor
holds its parents and one local-gradient closure per parent. ``backward``
walks the graph in reverse topological order and accumulates gradients into
requires-grad leaves. A finite-difference checker doubles as the gradient
oracle for every differentiable operation.
"""

from __future__ import annotations

import struct
from contextlib import contextmanager
from typing import Callable, Iterable, Mapping, Sequence

import numpy as np


class ShapeMismatch(ValueError):
    pass


class NotScalar(ValueError):
    pass


class DetachedFromTape(ValueError):
    pass


class EmptyMask(ValueError):
    pass


class NaNInput(ValueError):
    pass


_grad_enabled = True


@contextmanager
def no_grad():
    """Suppress tape recording inside the context (single-threaded use)."""
    global _grad_enabled
    saved = _grad_enabled
    _grad_enabled = False
    try:
        yield
    finally:
        _grad_enabled = saved


class Tensor:
    """Row-major float64 array with optional gradient tracking."""

    __slots__ = ("data", "requires_grad", "grad", "_parents", "_grad_fns")

    def __init__(self, data, requires_grad: bool = False):
        self.data = np.asarray(data, dtype=np.float64)
        self.requires_grad = requires_grad
        self.grad: np.ndarray | None = None
        self._parents: tuple[Tensor, ...] = ()
        self._grad_fns: tuple[Callable[[np.ndarray], np.ndarray], ...] = ()

    @property
    def shape(self) -> tuple[int, ...]:
        return self.data.shape

    @property
    def size(self) -> int:
        return self.data.size

    def item(self) -> float:
        return float(self.data.reshape(-1)[0])

    def detach(self) -> "Tensor":
        """Value copy with no tape linkage (stop-gradient marker)."""
        return Tensor(self.data.copy())

    def zero_grad(self) -> None:
        self.grad = None

    def __repr__(self) -> str:
        return f"Tensor(shape={self.shape}, requires_grad={self.requires_grad})"

    # Operator sugar used throughout the model code.
    def __add__(self, other):
        return add(self, _wrap(other))

    def __sub__(self, other):
        return sub(self, _wrap(other))

    def __mul__(self, other):
        return mul(self, _wrap(other))

    def __matmul__(self, other):
        return matmul(self, _wrap(other))

    def __neg__(self):
        return scale(self, -1.0)


def _wrap(x) -> Tensor:
    return x if isinstance(x, Tensor) else Tensor(x)


def _record(data: np.ndarray, parents: Sequence[Tensor], grad_fns: Sequence[Callable]) -> Tensor:
    out = Tensor(data)
    if _grad_enabled and any(p.requires_grad for p in parents):
        out.requires_grad = True
        out._parents = tuple(parents)
        out._grad_fns = tuple(grad_fns)
    return out


def _unbroadcast(grad: np.ndarray, shape: tuple[int, ...]) -> np.ndarray:
    """Sum a broadcast gradient back down to the operand's shape."""
    if grad.shape == shape:
        return grad
    extra = grad.ndim - len(shape)
    if extra > 0:
        grad = grad.sum(axis=tuple(range(extra)))
    axes = tuple(i for i, n in enumerate(shape) if n == 1 and grad.shape[i] != 1)
    if axes:
        grad = grad.sum(axis=axes, keepdims=True)
    return grad


def _check_broadcast(a: Tensor, b: Tensor, op: str) -> None:
    try:
        np.broadcast_shapes(a.shape, b.shape)
    except ValueError:
        raise ShapeMismatch(f"{op}: shapes {a.shape} and {b.shape} do not broadcast")


# ---------------------------------------------------------------------------
# elementwise
# ---------------------------------------------------------------------------

def add(a: Tensor, b: Tensor) -> Tensor:
    _check_broadcast(a, b, "add")
    return _record(
        a.data + b.data,
        (a, b),
        (lambda g: _unbroadcast(g, a.shape), lambda g: _unbroadcast(g, b.shape)),
    )


def sub(a: Tensor, b: Tensor) -> Tensor:
    _check_broadcast(a, b, "sub")
    return _record(
        a.data - b.data,
        (a, b),
        (lambda g: _unbroadcast(g, a.shape), lambda g: _unbroadcast(-g, b.shape)),
    )


def mul(a: Tensor, b: Tensor) -> Tensor:
    _check_broadcast(a, b, "mul")
    return _record(
        a.data * b.data,
        (a, b),
        (
            lambda g: _unbroadcast(g * b.data, a.shape),
            lambda g: _unbroadcast(g * a.data, b.shape),
        ),
    )


def div(a: Tensor, b: Tensor) -> Tensor:
    _check_broadcast(a, b, "div")
    return _record(
        a.data / b.data,
        (a, b),
        (
            lambda g: _unbroadcast(g / b.data, a.shape),
            lambda g: _unbroadcast(-g * a.data / (b.data * b.data), b.shape),
        ),
    )


def scale(a: Tensor, c: float) -> Tensor:
    return _record(a.data * c, (a,), (lambda g: g * c,))


def exp(a: Tensor) -> Tensor:
    out = np.exp(a.data)
    return _record(out, (a,), (lambda g: g * out,))


def sigmoid(a: Tensor) -> Tensor:
    out = _sigmoid(a.data)
    return _record(out, (a,), (lambda g: g * out * (1.0 - out),))


def _sigmoid(x: np.ndarray) -> np.ndarray:
    # Piecewise form avoids overflow for large |x|.
    out = np.empty_like(x)
    pos = x >= 0
    out[pos] = 1.0 / (1.0 + np.exp(-x[pos]))
    ex = np.exp(x[~pos])
    out[~pos] = ex / (1.0 + ex)
    return out


def silu(a: Tensor) -> Tensor:
    s = _sigmoid(a.data)
    return _record(a.data * s, (a,), (lambda g: g * s * (1.0 + a.data * (1.0 - s)),))


def softplus(a: Tensor) -> Tensor:
    # log(1 + e^x) in overflow-safe form.
    out = np.logaddexp(0.0, a.data)
    s = _sigmoid(a.data)
    return _record(out, (a,), (lambda g: g * s,))


def smooth_l1(a: Tensor, beta: float = 1.0) -> Tensor:
    """Elementwise smooth-L1 (Huber) value; gradient is clip(x/beta, -1, 1)."""
    x = a.data
    absx = np.abs(x)
    out = np.where(absx < beta, 0.5 * x * x / beta, absx - 0.5 * beta)
    return _record(out, (a,), (lambda g: g * np.clip(x / beta, -1.0, 1.0),))


# ---------------------------------------------------------------------------
# linear algebra / shape
# ---------------------------------------------------------------------------

def matmul(a: Tensor, b: Tensor) -> Tensor:
    if a.data.ndim != 2 or b.data.ndim != 2 or a.shape[1] != b.shape[0]:
        raise ShapeMismatch(f"matmul: {a.shape} x {b.shape}")
    return _record(
        a.data @ b.data,
        (a, b),
        (lambda g: g @ b.data.T, lambda g: a.data.T @ g),
    )


def transpose(a: Tensor) -> Tensor:
    return _record(a.data.T.copy(), (a,), (lambda g: g.T,))


def reshape(a: Tensor, shape: tuple[int, ...]) -> Tensor:
    old = a.shape
    return _record(a.data.reshape(shape), (a,), (lambda g: g.reshape(old),))


def concat_rows(parts: Sequence[Tensor]) -> Tensor:
    if not parts:
        raise ShapeMismatch("concat_rows: empty input")
    mats = [p.data if p.data.ndim == 2 else p.data.reshape(1, -1) for p in parts]
    widths = {m.shape[1] for m in mats}
    if len(widths) != 1:
        raise ShapeMismatch(f"concat_rows: column widths differ: {sorted(widths)}")
    offsets = np.cumsum([0] + [m.shape[0] for m in mats])

    def make_fn(k: int, parent: Tensor):
        lo, hi = offsets[k], offsets[k + 1]
        return lambda g: g[lo:hi].reshape(parent.shape)

    return _record(
        np.concatenate(mats, axis=0),
        tuple(parts),
        tuple(make_fn(k, p) for k, p in enumerate(parts)),
    )


def concat_cols(parts: Sequence[Tensor]) -> Tensor:
    if not parts:
        raise ShapeMismatch("concat_cols: empty input")
    heights = {p.shape[0] for p in parts}
    if len(heights) != 1:
        raise ShapeMismatch(f"concat_cols: row counts differ: {sorted(heights)}")
    offsets = np.cumsum([0] + [p.shape[1] for p in parts])

    def make_fn(k: int):
        lo, hi = offsets[k], offsets[k + 1]
        return lambda g: g[:, lo:hi]

    return _record(
        np.concatenate([p.data for p in parts], axis=1),
        tuple(parts),
        tuple(make_fn(k) for k in range(len(parts))),
    )


def slice_cols(a: Tensor, lo: int, hi: int) -> Tensor:
    def grad_fn(g):
        full = np.zeros_like(a.data)
        full[:, lo:hi] = g
        return full

    return _record(a.data[:, lo:hi].copy(), (a,), (grad_fn,))


def gather_rows(a: Tensor, indices: Sequence[int]) -> Tensor:
    idx = np.asarray(indices, dtype=np.int64)

    def grad_fn(g):
        full = np.zeros_like(a.data)
        np.add.at(full, idx, g)
        return full

    return _record(a.data[idx], (a,), (grad_fn,))


def embedding_lookup(table: Tensor, ids: Sequence[int]) -> Tensor:
    return gather_rows(table, ids)


def sum_all(a: Tensor) -> Tensor:
    return _record(
        np.asarray(a.data.sum()),
        (a,),
        (lambda g: np.broadcast_to(g, a.shape).copy(),),
    )


def mean_all(a: Tensor) -> Tensor:
    return scale(sum_all(a), 1.0 / a.size)


# ---------------------------------------------------------------------------
# row-structured ops
# ---------------------------------------------------------------------------

def softmax_rows(x: Tensor, mask: np.ndarray | None = None) -> Tensor:
    """Row-wise softmax with max subtraction; masked columns get weight 0.

    ``mask`` is a boolean vector over columns shared by every row.
    """
    if np.isnan(x.data).any():
        raise NaNInput("softmax_rows: NaN in input")
    logits = x.data
    if mask is not None:
        mask = np.asarray(mask, dtype=bool)
        if mask.shape != (logits.shape[-1],):
            raise ShapeMismatch(f"softmax mask {mask.shape} vs row width {logits.shape[-1]}")
        if not mask.any():
            raise EmptyMask("softmax_rows: all columns masked")
        logits = np.where(mask, logits, -np.inf)
    shifted = logits - logits.max(axis=-1, keepdims=True)
    expv = np.exp(shifted)
    out = expv / expv.sum(axis=-1, keepdims=True)

    def grad_fn(g):
        dot = (g * out).sum(axis=-1, keepdims=True)
        return out * (g - dot)

    return _record(out, (x,), (grad_fn,))


def layernorm_rows(x: Tensor, gain: Tensor, bias: Tensor, eps: float = 1e-5) -> Tensor:
    """Per-row layer normalization: gain * (x - mean)/sqrt(var + eps) + bias."""
    if x.data.ndim != 2:
        raise ShapeMismatch(f"layernorm_rows expects 2-D input, got {x.shape}")
    n = x.shape[1]
    if gain.shape != (n,) or bias.shape != (n,):
        raise ShapeMismatch(f"layernorm params {gain.shape}/{bias.shape} vs width {n}")
    mu = x.data.mean(axis=1, keepdims=True)
    var = x.data.var(axis=1, keepdims=True)
    inv = 1.0 / np.sqrt(var + eps)
    xhat = (x.data - mu) * inv

    def grad_x(g):
        gg = g * gain.data
        return inv * (gg - gg.mean(axis=1, keepdims=True)
                      - xhat * (gg * xhat).mean(axis=1, keepdims=True))

    return _record(
        xhat * gain.data + bias.data,
        (x, gain, bias),
        (grad_x, lambda g: (g * xhat).sum(axis=0), lambda g: g.sum(axis=0)),
    )


def mean_pool(x: Tensor, mask: np.ndarray | None = None) -> Tensor:
    """Mean over unmasked rows of a 2-D tensor; returns a 1-D vector."""
    if x.data.ndim != 2:
        raise ShapeMismatch(f"mean_pool expects 2-D input, got {x.shape}")
    if mask is None:
        mask = np.ones(x.shape[0], dtype=bool)
    else:
        mask = np.asarray(mask, dtype=bool)
        if mask.shape != (x.shape[0],):
            raise ShapeMismatch(f"mean_pool mask {mask.shape} vs rows {x.shape[0]}")
    count = int(mask.sum())
    if count == 0:
        raise EmptyMask("mean_pool: all rows masked")

    def grad_fn(g):
        full = np.zeros_like(x.data)
        full[mask] = g / count
        return full

    return _record(x.data[mask].sum(axis=0) / count, (x,), (grad_fn,))


# ---------------------------------------------------------------------------
# backward
# ---------------------------------------------------------------------------

def backward(loss: Tensor) -> None:
    """Accumulate gradients of a scalar loss into every requires-grad leaf.

    Repeated calls without ``zero_grad`` keep accumulating.
    """
    if loss.size != 1:
        raise NotScalar(f"backward needs a scalar loss, got shape {loss.shape}")
    if not loss.requires_grad:
        raise DetachedFromTape("loss does not require grad / is not on the tape")

    topo: list[Tensor] = []
    visited: set[int] = set()
    stack: list[tuple[Tensor, bool]] = [(loss, False)]
    while stack:
        node, expanded = stack.pop()
        if expanded:
            topo.append(node)
            continue
        if id(node) in visited:
            continue
        visited.add(id(node))
        stack.append((node, True))
        for parent in node._parents:
            if parent.requires_grad and id(parent) not in visited:
                stack.append((parent, False))

    grads: dict[int, np.ndarray] = {id(loss): np.ones_like(loss.data)}
    for node in reversed(topo):
        g = grads.pop(id(node), None)
        if g is None:
            continue
        if not node._parents:
            node.grad = g if node.grad is None else node.grad + g
            continue
        for parent, fn in zip(node._parents, node._grad_fns):
            if not parent.requires_grad:
                continue
            pg = fn(g)
            if id(parent) in grads:
                grads[id(parent)] = grads[id(parent)] + pg
            else:
                grads[id(parent)] = pg


# ---------------------------------------------------------------------------
# finite differences
# ---------------------------------------------------------------------------

def finite_diff_check(
    f: Callable[[], Tensor],
    params: Mapping[str, Tensor],
    eps: float = 1e-5,
    max_coords_per_param: int | None = None,
    seed: int = 0,
) -> float:
    """Max relative error between tape gradients and central differences.

    ``f`` must be a deterministic closure over ``params`` returning a scalar
    Tensor. Error per coordinate is |a - b| / max(1e-8, |a| + |b|). When
    ``max_coords_per_param`` is set, coordinates are subsampled per parameter
    with a seeded RNG; otherwise every coordinate is checked.
    """
    for p in params.values():
        p.zero_grad()
    loss = f()
    backward(loss)
    analytic = {
        name: (p.grad.copy() if p.grad is not None else np.zeros_like(p.data))
        for name, p in params.items()
    }

    rng = np.random.default_rng(seed)
    worst = 0.0
    with no_grad():
        for name, p in params.items():
            flat = p.data.reshape(-1)
            coords: Iterable[int] = range(flat.size)
            if max_coords_per_param is not None and flat.size > max_coords_per_param:
                coords = rng.choice(flat.size, size=max_coords_per_param, replace=False)
            aflat = analytic[name].reshape(-1)
            for i in coords:
                saved = flat[i]
                flat[i] = saved + eps
                f_plus = f().item()
                flat[i] = saved - eps
                f_minus = f().item()
                flat[i] = saved
                fd = (f_plus - f_minus) / (2.0 * eps)
                err = abs(aflat[i] - fd) / max(1e-8, abs(aflat[i]) + abs(fd))
                worst = max(worst, err)
    return worst


# ---------------------------------------------------------------------------
# checkpoint container
# ---------------------------------------------------------------------------

_MAGIC = b"MFCP"
_VERSION = 1


def save_tensors(path: str, named: Mapping[str, Tensor]) -> None:
    """Write named parameters: header(magic, version, count) then per entry
    (name length, name, rank, dims, little-endian float64 payload)."""
    with open(path, "wb") as fh:
        fh.write(_MAGIC)
        fh.write(struct.pack("<II", _VERSION, len(named)))
        for name, tensor in named.items():
            raw = name.encode("utf-8")
            # asarray keeps 0-d shapes (ascontiguousarray would promote to 1-d)
            arr = np.asarray(tensor.data, dtype="<f8", order="C")
            fh.write(struct.pack("<I", len(raw)))
            fh.write(raw)
            fh.write(struct.pack("<I", arr.ndim))
            fh.write(struct.pack(f"<{arr.ndim}I", *arr.shape))
            fh.write(arr.tobytes())


def load_tensors(path: str) -> dict[str, np.ndarray]:
    with open(path, "rb") as fh:
        magic = fh.read(4)
        if magic != _MAGIC:
            raise ValueError(f"not a checkpoint file: bad magic {magic!r}")
        version, count = struct.unpack("<II", fh.read(8))
        if version != _VERSION:
            raise ValueError(f"unsupported checkpoint version {version}")
        out: dict[str, np.ndarray] = {}
        for _ in range(count):
            (name_len,) = struct.unpack("<I", fh.read(4))
            name = fh.read(name_len).decode("utf-8")
            (rank,) = struct.unpack("<I", fh.read(4))
            dims = struct.unpack(f"<{rank}I", fh.read(4 * rank)) if rank else ()
            n_items = int(np.prod(dims)) if dims else 1
            payload = fh.read(8 * n_items)
            out[name] = np.frombuffer(payload, dtype="<f8").reshape(dims).copy()
    return out
