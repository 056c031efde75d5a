"""Dense tensors with define-by-run reverse-mode differentiation.

Every operation records its parents and a closure mapping the output gradient
to parent gradients. ``backward`` walks the recorded graph in reverse
topological order. Operations act on the trailing axes, so the same code
handles a single example (``[n]``) and a batch (``[B, n]``).
"""

from __future__ import annotations

import contextlib
import threading
from dataclasses import dataclass, field
from typing import Callable, Iterable, Mapping, Sequence

import numpy as np

from .errors import RankError, ShapeError

DTYPE = np.float64

_state = threading.local()


def _grad_enabled() -> bool:
    return getattr(_state, "grad_enabled", True)


def _faults() -> dict:
    faults = getattr(_state, "faults", None)
    if faults is None:
        faults = _state.faults = {}
    return faults


@contextlib.contextmanager
def no_grad():
    """Evaluate without recording the graph (evaluation, finite differences)."""
    prev = _grad_enabled()
    _state.grad_enabled = False
    try:
        yield
    finally:
        _state.grad_enabled = prev


@contextlib.contextmanager
def inject_gradient_fault(op: str, factor: float = 2.0):
    """Scale the local gradient of every ``op`` node by ``factor``.

    Debug hook used to confirm that gradient checking catches a broken op.
    """
    faults = _faults()
    prev = faults.get(op)
    faults[op] = factor
    try:
        yield
    finally:
        if prev is None:
            faults.pop(op, None)
        else:
            faults[op] = prev


class Tensor:
    __slots__ = ("data", "grad", "requires_grad", "name", "op", "_parents", "_backward")

    def __init__(self, data, requires_grad: bool = False, name: str | None = None,
                 dtype=DTYPE):
        self.data = np.asarray(data, dtype=dtype)
        self.grad: np.ndarray | None = None
        self.requires_grad = requires_grad
        self.name = name
        self.op: str | None = None
        self._parents: tuple[Tensor, ...] = ()
        self._backward: Callable | None = None

    @property
    def shape(self) -> tuple[int, ...]:
        return self.data.shape

    @property
    def values(self) -> list[float]:
        """Row-major flattened values."""
        return self.data.ravel().tolist()

    @property
    def ndim(self) -> int:
        return self.data.ndim

    @property
    def is_leaf(self) -> bool:
        return self._backward is None

    def item(self) -> float:
        return float(self.data.reshape(-1)[0]) if self.data.size == 1 else float(self.data)

    def numpy(self) -> np.ndarray:
        return self.data

    def zero_grad(self) -> None:
        self.grad = None

    def __len__(self) -> int:
        return self.data.shape[0]

    def __repr__(self) -> str:
        label = f" name={self.name!r}" if self.name else ""
        return f"Tensor(shape={self.shape}{label}, requires_grad={self.requires_grad})"

    def __add__(self, other: Tensor) -> Tensor:
        return ew("add", self, other)

    def __sub__(self, other: Tensor) -> Tensor:
        return ew("sub", self, other)

    def __mul__(self, other: Tensor) -> Tensor:
        return ew("mul", self, other)

    def __neg__(self) -> Tensor:
        return scale(self, -1.0)


def tensor(data, requires_grad: bool = False, name: str | None = None) -> Tensor:
    return Tensor(data, requires_grad=requires_grad, name=name)


def const(data) -> Tensor:
    return Tensor(data)


def _as_tensor(x) -> Tensor:
    return x if isinstance(x, Tensor) else Tensor(x)


def _node(op: str, data: np.ndarray, parents: tuple[Tensor, ...], backward: Callable) -> Tensor:
    out = Tensor.__new__(Tensor)
    out.data = data
    out.grad = None
    out.name = None
    out.op = op
    if _grad_enabled() and any(p.requires_grad for p in parents):
        out.requires_grad = True
        out._parents = parents
        out._backward = backward
    else:
        out.requires_grad = False
        out._parents = ()
        out._backward = None
    return out


class _SliceGrad:
    """Gradient that is zero outside ``sl``; accumulated without a dense temporary."""

    __slots__ = ("shape", "sl", "g")

    def __init__(self, shape, sl, g):
        self.shape, self.sl, self.g = shape, sl, g


# ---------------------------------------------------------------------------
# operations


def matvec(W: Tensor, x: Tensor) -> Tensor:
    """Matrix-vector product ``W x`` applied over the last axis of ``x``."""
    if W.ndim != 2:
        raise RankError(f"matvec expects a matrix, got shape {W.shape}")
    if x.ndim < 1 or x.shape[-1] != W.shape[1]:
        raise ShapeError(f"matvec inner dimensions disagree: W{W.shape} x{x.shape}")
    Wd, xd = W.data, x.data
    out = xd @ Wd.T

    def backward(g):
        gW = g.reshape(-1, Wd.shape[0]).T @ xd.reshape(-1, Wd.shape[1])
        return gW, g @ Wd

    return _node("matvec", out, (W, x), backward)


_EW = {
    "add": (np.add, lambda g, a, b: (g, g)),
    "sub": (np.subtract, lambda g, a, b: (g, -g)),
    "mul": (np.multiply, lambda g, a, b: (g * b, g * a)),
}


def ew(op: str, a: Tensor, b: Tensor) -> Tensor:
    """Elementwise ``add``, ``sub`` or ``mul`` of two equally shaped tensors."""
    a, b = _as_tensor(a), _as_tensor(b)
    if a.shape != b.shape:
        raise ShapeError(f"{op}: shape mismatch {a.shape} vs {b.shape}")
    try:
        fwd, bwd = _EW[op]
    except KeyError:
        raise ValueError(f"unknown elementwise op {op!r}") from None
    ad, bd = a.data, b.data
    return _node(op, fwd(ad, bd), (a, b), lambda g: bwd(g, ad, bd))


def add(a: Tensor, b: Tensor) -> Tensor:
    return ew("add", a, b)


def sub(a: Tensor, b: Tensor) -> Tensor:
    return ew("sub", a, b)


def mul(a: Tensor, b: Tensor) -> Tensor:
    return ew("mul", a, b)


def _sigmoid(x: np.ndarray) -> np.ndarray:
    # 1 / (1 + e^-x) via logaddexp, which never overflows
    return np.exp(-np.logaddexp(0.0, -x))


def unary(op: str, a: Tensor) -> Tensor:
    """Elementwise ``sigmoid``, ``tanh``, ``relu`` or ``abs``."""
    ad = a.data
    if op == "sigmoid":
        y = _sigmoid(ad)
        return _node(op, y, (a,), lambda g: (g * y * (1.0 - y),))
    if op == "tanh":
        y = np.tanh(ad)
        return _node(op, y, (a,), lambda g: (g * (1.0 - y * y),))
    if op == "relu":
        y = np.maximum(ad, 0.0)
        return _node(op, y, (a,), lambda g: (g * (ad > 0),))
    if op == "abs":
        # np.sign gives the 0 subgradient at 0
        return _node(op, np.abs(ad), (a,), lambda g: (g * np.sign(ad),))
    raise ValueError(f"unknown unary op {op!r}")


def sigmoid(a: Tensor) -> Tensor:
    return unary("sigmoid", a)


def tanh(a: Tensor) -> Tensor:
    return unary("tanh", a)


def relu(a: Tensor) -> Tensor:
    return unary("relu", a)


def absolute(a: Tensor) -> Tensor:
    return unary("abs", a)


def scale(a: Tensor, s: float) -> Tensor:
    return _node("scale", a.data * s, (a,), lambda g: (g * s,))


def softmax(z: Tensor, mask: np.ndarray | None = None) -> Tensor:
    """Softmax over the last axis; masked-out entries are exactly zero."""
    if z.ndim < 1 or z.shape[-1] < 1:
        raise RankError(f"softmax needs a nonempty last axis, got {z.shape}")
    zd = z.data
    if mask is None:
        e = np.exp(zd - zd.max(axis=-1, keepdims=True))
    else:
        mask = np.broadcast_to(np.asarray(mask, dtype=bool), zd.shape)
        if not mask.any(axis=-1).all():
            raise ShapeError("softmax mask leaves a row with no valid entries")
        shifted = np.where(mask, zd, -np.inf)
        e = np.where(mask, np.exp(shifted - shifted.max(axis=-1, keepdims=True)), 0.0)
    y = e / e.sum(axis=-1, keepdims=True)

    def backward(g):
        return (y * (g - (g * y).sum(axis=-1, keepdims=True)),)

    return _node("softmax", y, (z,), backward)


def concat(parts: Sequence[Tensor], axis: int = -1) -> Tensor:
    """Order-preserving concatenation along ``axis`` (default: last)."""
    if not parts:
        raise ShapeError("concat of an empty list")
    for p in parts:
        if p.ndim < 1:
            raise RankError(f"concat expects vectors, got shape {p.shape}")
    if len(parts) == 1:
        return parts[0]
    datas = [p.data for p in parts]
    out = np.concatenate(datas, axis=axis)
    bounds = np.cumsum([d.shape[axis] for d in datas])[:-1]

    def backward(g):
        return tuple(np.split(g, bounds, axis=axis))

    return _node("concat", out, tuple(parts), backward)


def cross_entropy(logits: Tensor, target) -> Tensor:
    """Mean negative log-likelihood of ``target`` under ``softmax(logits)``.

    ``logits`` is ``[k]`` with an integer target, or ``[..., k]`` with an
    integer array of the leading shape. Returns a scalar tensor.
    """
    ld = logits.data
    k = ld.shape[-1]
    t = np.asarray(target)
    if t.shape != ld.shape[:-1]:
        raise ShapeError(f"cross_entropy target shape {t.shape} vs logits {ld.shape}")
    if not np.issubdtype(t.dtype, np.integer):
        raise TypeError("cross_entropy target must be integral")
    if t.size and (t.min() < 0 or t.max() >= k):
        raise IndexError(f"target index out of range for {k} classes")
    shifted = ld - ld.max(axis=-1, keepdims=True)
    logz = np.log(np.exp(shifted).sum(axis=-1, keepdims=True))
    logp = shifted - logz
    picked = np.take_along_axis(logp, t[..., None], axis=-1)[..., 0]
    count = max(t.size, 1)
    loss = -picked.sum() / count

    def backward(g):
        grad = np.exp(logp)
        np.put_along_axis(grad, t[..., None], np.take_along_axis(grad, t[..., None], -1) - 1.0, -1)
        return (grad * (g / count),)

    return _node("cross_entropy", np.asarray(loss), (logits,), backward)


def reduce_sum(a: Tensor, axis: int | None = None) -> Tensor:
    ad = a.data
    if axis is None:
        return _node("sum", np.asarray(ad.sum()), (a,), lambda g: (np.broadcast_to(g, ad.shape).copy(),))

    def backward(g):
        return (np.broadcast_to(np.expand_dims(g, axis), ad.shape).copy(),)

    return _node("sum", ad.sum(axis=axis), (a,), backward)


def add_bias(x: Tensor, b: Tensor) -> Tensor:
    """``x + b`` with ``b`` of shape ``[m]`` broadcast over the leading axes of ``x``."""
    if b.ndim != 1 or x.ndim < 1 or x.shape[-1] != b.shape[0]:
        raise ShapeError(f"add_bias shape mismatch x{x.shape} b{b.shape}")
    m = b.shape[0]
    return _node("add_bias", x.data + b.data, (x, b), lambda g: (g, g.reshape(-1, m).sum(axis=0)))


def gate_mul(g: Tensor, x: Tensor) -> Tensor:
    """Scale each trailing vector of ``x`` by the matching scalar in ``g``."""
    if x.shape[:-1] != g.shape:
        raise ShapeError(f"gate_mul shape mismatch g{g.shape} x{x.shape}")
    gd, xd = g.data, x.data

    def backward(grad):
        return (grad * xd).sum(axis=-1), grad * gd[..., None]

    return _node("gate_mul", gd[..., None] * xd, (g, x), backward)


def index(a: Tensor, i: int, axis: int = 0) -> Tensor:
    """Select position ``i`` along ``axis`` (the axis is removed)."""
    ad = a.data
    axis = axis % ad.ndim
    sl = (slice(None),) * axis + (i,)

    return _node("index", ad[sl], (a,), lambda g: (_SliceGrad(ad.shape, sl, g),))


def stack(parts: Sequence[Tensor], axis: int = 0) -> Tensor:
    if not parts:
        raise ShapeError("stack of an empty list")
    out = np.stack([p.data for p in parts], axis=axis)
    ax = axis % out.ndim

    def backward(g):
        return tuple(np.take(g, i, axis=ax) for i in range(len(parts)))

    return _node("stack", out, tuple(parts), backward)


def expand(a: Tensor, n: int, axis: int) -> Tensor:
    """Insert a new axis of length ``n`` by repetition."""
    ax = axis % (a.ndim + 1)
    out = np.repeat(np.expand_dims(a.data, ax), n, axis=ax)
    return _node("expand", out, (a,), lambda g: (g.sum(axis=ax),))


def where(mask: np.ndarray, a: Tensor, b: Tensor) -> Tensor:
    """``a`` where ``mask`` holds, else ``b``; ``mask`` broadcasts to the operands."""
    if a.shape != b.shape:
        raise ShapeError(f"where: shape mismatch {a.shape} vs {b.shape}")
    m = np.broadcast_to(np.asarray(mask, dtype=bool), a.shape)
    out = np.where(m, a.data, b.data)
    return _node("where", out, (a, b), lambda g: (g * m, g * ~m))


def embed(table: Tensor, ids) -> Tensor:
    """Row lookup ``table[ids]``; gradient scatters back into the table."""
    ids = np.asarray(ids, dtype=np.int64)
    td = table.data
    if ids.size and (ids.min() < 0 or ids.max() >= td.shape[0]):
        raise IndexError(f"embedding index out of range for table of {td.shape[0]} rows")

    def backward(g):
        gt = np.zeros_like(td)
        np.add.at(gt, ids.reshape(-1), g.reshape(-1, td.shape[1]))
        return (gt,)

    return _node("embed", td[ids], (table,), backward)


def reshape(a: Tensor, shape: Sequence[int]) -> Tensor:
    old = a.shape
    return _node("reshape", a.data.reshape(shape), (a,), lambda g: (g.reshape(old),))


# ---------------------------------------------------------------------------
# reverse sweep


@dataclass
class Tape:
    """Topologically ordered nodes reachable from a root; parents come first."""

    nodes: list[Tensor]
    gradients: dict[Tensor, np.ndarray] = field(default_factory=dict)

    @classmethod
    def from_root(cls, root: Tensor) -> Tape:
        order: list[Tensor] = []
        seen: set[int] = set()
        stack_: list[tuple[Tensor, bool]] = [(root, False)]
        while stack_:
            node, done = stack_.pop()
            if done:
                order.append(node)
                continue
            if id(node) in seen:
                continue
            seen.add(id(node))
            stack_.append((node, True))
            for p in node._parents:
                if p.requires_grad and id(p) not in seen:
                    stack_.append((p, False))
        return cls(order)


def backward(root: Tensor) -> dict[Tensor, np.ndarray]:
    """Accumulate d(root)/d(leaf) into ``leaf.grad`` for every reachable leaf.

    Returns the gradients contributed by this call, keyed by leaf tensor.
    Leaves not reachable from ``root`` are absent (use :func:`collect_grads`
    to obtain zeros for them).
    """
    if root.data.size != 1:
        raise RankError(f"backward needs a scalar root, got shape {root.shape}")
    if not root.requires_grad:
        raise ValueError("root is not on the tape (no parameter requires grad)")
    tape = Tape.from_root(root)
    faults = _faults()
    pending: dict[int, np.ndarray] = {id(root): np.ones_like(root.data)}
    owned: set[int] = set()  # buffers created here, safe to update in place
    for node in reversed(tape.nodes):
        g = pending.pop(id(node), None)
        if g is None:
            continue
        if node._backward is None:
            node.grad = g.copy() if node.grad is None else node.grad + g
            tape.gradients[node] = g
            continue
        pgrads = node._backward(g)
        factor = faults.get(node.op)
        for p, pg in zip(node._parents, pgrads):
            if pg is None or not p.requires_grad:
                continue
            key = id(p)
            if isinstance(pg, _SliceGrad):
                g_part = pg.g * factor if factor is not None else pg.g
                buf = pending.get(key)
                if buf is None:
                    buf = np.zeros(pg.shape, dtype=g_part.dtype)
                elif key not in owned:
                    buf = buf.copy()
                buf[pg.sl] += g_part
                pending[key] = buf
                owned.add(key)
                continue
            if factor is not None:
                pg = pg * factor
            if key not in pending:
                pending[key] = pg
            elif key in owned:
                pending[key] += pg
            else:
                pending[key] = pending[key] + pg
                owned.add(key)
    return tape.gradients


def collect_grads(params: Mapping[str, Tensor]) -> dict[str, np.ndarray]:
    """Current ``.grad`` of each named parameter, zeros where never reached."""
    return {name: (p.grad if p.grad is not None else np.zeros_like(p.data))
            for name, p in params.items()}


def zero_grads(params: Iterable[Tensor]) -> None:
    for p in params:
        p.grad = None


# ---------------------------------------------------------------------------
# finite-difference verification


@dataclass
class GradCheckReport:
    passed: bool
    max_rel_error: float
    worst_param: str | None
    worst_index: tuple[int, ...] | None
    worst_analytic: float
    worst_numeric: float
    per_param: dict[str, float]
    n_checked: int
    tol: float
    eps: float

    def summary(self) -> str:
        status = "PASS" if self.passed else "FAIL"
        return (f"{status} max_rel_error={self.max_rel_error:.3e} (tol {self.tol:g}) "
                f"over {self.n_checked} entries; worst={self.worst_param}{list(self.worst_index or ())} "
                f"analytic={self.worst_analytic:.6e} numeric={self.worst_numeric:.6e}")


def relative_error(analytic: np.ndarray, numeric: np.ndarray, floor: float = 1e-6) -> np.ndarray:
    """``|a - n| / max(|a|, |n|, floor)``; the floor keeps near-zero entries absolute."""
    denom = np.maximum(np.maximum(np.abs(analytic), np.abs(numeric)), floor)
    return np.abs(analytic - numeric) / denom


def grad_check(f: Callable[[], Tensor], params: Mapping[str, Tensor] | Sequence[Tensor],
               eps: float = 1e-5, tol: float = 1e-4, floor: float = 1e-6) -> GradCheckReport:
    """Compare backprop gradients of scalar ``f()`` against central differences.

    ``f`` must be deterministic and read the parameter tensors' data on every
    call. Every entry of every parameter is perturbed.
    """
    if not isinstance(params, Mapping):
        params = {(p.name or f"param{i}"): p for i, p in enumerate(params)}
    plist = list(params.values())
    frozen = [name for name, p in params.items() if not p.requires_grad]
    if frozen:
        raise ValueError(f"grad_check parameters must require grad: {frozen}")
    zero_grads(plist)
    backward(f())
    analytic = collect_grads(params)

    per_param: dict[str, float] = {}
    worst = (-1.0, None, None, 0.0, 0.0)
    n_checked = 0
    with no_grad():
        for name, p in params.items():
            flat = p.data.reshape(-1)
            numeric = np.empty(flat.size)
            for k in range(flat.size):
                orig = flat[k]
                flat[k] = orig + eps
                fp = f().item()
                flat[k] = orig - eps
                fm = f().item()
                flat[k] = orig
                numeric[k] = (fp - fm) / (2.0 * eps)
            a = analytic[name].reshape(-1)
            rel = relative_error(a, numeric, floor)
            n_checked += rel.size
            if rel.size:
                k = int(np.argmax(rel))
                per_param[name] = float(rel[k])
                if rel[k] > worst[0]:
                    worst = (float(rel[k]), name, np.unravel_index(k, p.shape), float(a[k]), float(numeric[k]))
            else:
                per_param[name] = 0.0
    max_err = max(worst[0], 0.0)
    idx = tuple(int(i) for i in worst[2]) if worst[2] is not None else None
    return GradCheckReport(passed=max_err < tol, max_rel_error=max_err, worst_param=worst[1],
                           worst_index=idx, worst_analytic=worst[3], worst_numeric=worst[4],
                           per_param=per_param, n_checked=n_checked, tol=tol, eps=eps)
