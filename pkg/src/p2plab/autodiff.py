"""Dense float64 tensors with tape-based reverse-mode differentiation.

A Tape records every operation applied to its tensors. ``backward`` walks the
records once in reverse and returns gradients for the tensors created with
``tape.param``. Elementwise ops require equal shapes; the only implicit
broadcast is ``add_bias`` (a bias over the last axis added to every row) and
the explicit ``broadcast_to``.
"""

from __future__ import annotations

import json
from pathlib import Path

import numpy as np

from .errors import DimensionError, NumericalError

ABS_EPS = 1e-8


class Tensor:
    __slots__ = ("data", "tape", "node", "requires_grad")

    def __init__(self, data, tape: "Tape | None" = None, node: int | None = None, requires_grad: bool = False):
        self.data = np.asarray(data, dtype=np.float64)
        self.tape = tape
        self.node = node
        self.requires_grad = requires_grad

    @property
    def shape(self) -> tuple:
        return self.data.shape

    @property
    def ndim(self) -> int:
        return self.data.ndim

    def item(self) -> float:
        return float(self.data)

    def __repr__(self):
        return f"Tensor(shape={self.shape}, grad={self.requires_grad})"

    # operator sugar
    def __add__(self, o):
        return add(self, o)

    def __sub__(self, o):
        return sub(self, o)

    def __mul__(self, o):
        return mul(self, o) if isinstance(o, Tensor) else scale(self, float(o))

    __rmul__ = __mul__

    def __neg__(self):
        return scale(self, -1.0)

    def __matmul__(self, o):
        return matmul(self, o)

    def __getitem__(self, idx):
        return slice_(self, idx)


class Tape:
    """Ordered op records; each record is (output node, [(input node, vjp)])."""

    def __init__(self, check_finite: bool = False):
        self.records: list[tuple[int, list]] = []
        self.n_nodes = 0
        self.params: list[Tensor] = []
        self.check_finite = check_finite

    def _new(self, data, requires_grad: bool) -> Tensor:
        t = Tensor(data, self, self.n_nodes, requires_grad)
        self.n_nodes += 1
        return t

    def param(self, data) -> Tensor:
        """A leaf whose gradient backward() reports."""
        t = self._new(np.array(data, dtype=np.float64), True)
        self.params.append(t)
        return t

    def const(self, data) -> Tensor:
        return Tensor(np.asarray(data, dtype=np.float64), self, None, False)

    def record(self, out_data, parents: list[tuple[Tensor, object]], name: str = "") -> Tensor:
        if self.check_finite and not np.all(np.isfinite(out_data)):
            raise NumericalError(f"non-finite values produced by {name or 'op'}")
        live = [(p.node, fn) for p, fn in parents if p.requires_grad]
        out = self._new(out_data, bool(live))
        if live:
            self.records.append((out.node, live))
        return out


def _tape_of(*xs) -> Tape:
    for x in xs:
        if isinstance(x, Tensor) and x.tape is not None:
            return x.tape
    raise DimensionError("operation needs at least one taped tensor")


def _as_tensor(x, tape: Tape) -> Tensor:
    return x if isinstance(x, Tensor) else tape.const(x)


def _same(a: Tensor, b: Tensor, op: str):
    if a.shape != b.shape:
        raise DimensionError(f"{op}: shape mismatch {a.shape} vs {b.shape}")


def backward(tape: Tape, loss: Tensor) -> dict[int, np.ndarray]:
    """Gradients of a scalar ``loss`` for every param of the tape, keyed by node.

    Params the loss does not reach get zero arrays.
    """
    if loss.data.size != 1:
        raise DimensionError(f"backward needs a scalar loss, got shape {loss.shape}")
    grads: dict[int, np.ndarray] = {}
    if loss.requires_grad:
        grads[loss.node] = np.ones_like(loss.data)
    for out, parents in reversed(tape.records):
        g = grads.pop(out, None) if out != loss.node else grads.get(out)
        if g is None:
            continue
        for node, fn in parents:
            contrib = fn(g)
            if node in grads:
                grads[node] = grads[node] + contrib
            else:
                grads[node] = contrib
    return {p.node: grads.get(p.node, np.zeros_like(p.data)) for p in tape.params}


def grad_of(grads: dict[int, np.ndarray], t: Tensor) -> np.ndarray:
    return grads[t.node]


# ---------------------------------------------------------------- elementwise


def add(a, b) -> Tensor:
    tape = _tape_of(a, b)
    a, b = _as_tensor(a, tape), _as_tensor(b, tape)
    _same(a, b, "add")
    return tape.record(a.data + b.data, [(a, lambda g: g), (b, lambda g: g)], "add")


def sub(a, b) -> Tensor:
    tape = _tape_of(a, b)
    a, b = _as_tensor(a, tape), _as_tensor(b, tape)
    _same(a, b, "sub")
    return tape.record(a.data - b.data, [(a, lambda g: g), (b, lambda g: -g)], "sub")


def mul(a, b) -> Tensor:
    tape = _tape_of(a, b)
    a, b = _as_tensor(a, tape), _as_tensor(b, tape)
    _same(a, b, "mul")
    ad, bd = a.data, b.data
    return tape.record(ad * bd, [(a, lambda g: g * bd), (b, lambda g: g * ad)], "mul")


def scale(a: Tensor, c: float) -> Tensor:
    return a.tape.record(a.data * c, [(a, lambda g: g * c)], "scale")


def add_scalar(a: Tensor, c: float) -> Tensor:
    return a.tape.record(a.data + c, [(a, lambda g: g)], "add_scalar")


def add_bias(x: Tensor, b: Tensor) -> Tensor:
    """x[..., r, n] + b[..., n] for every row r."""
    tape = _tape_of(x, b)
    b = _as_tensor(b, tape)
    if x.ndim < 2 or b.shape != x.shape[:-2] + x.shape[-1:]:
        raise DimensionError(f"add_bias: bias {b.shape} does not fit rows of {x.shape}")
    return tape.record(
        x.data + b.data[..., None, :],
        [(x, lambda g: g), (b, lambda g: g.sum(axis=-2))],
        "add_bias",
    )


def tanh(x: Tensor) -> Tensor:
    y = np.tanh(x.data)
    return x.tape.record(y, [(x, lambda g: g * (1.0 - y * y))], "tanh")


def exp(x: Tensor) -> Tensor:
    y = np.exp(x.data)
    return x.tape.record(y, [(x, lambda g: g * y)], "exp")


def log(x: Tensor) -> Tensor:
    xd = x.data
    return x.tape.record(np.log(xd), [(x, lambda g: g / xd)], "log")


def square(x: Tensor) -> Tensor:
    xd = x.data
    return x.tape.record(xd * xd, [(x, lambda g: 2.0 * g * xd)], "square")


def sqrt(x: Tensor) -> Tensor:
    y = np.sqrt(x.data)
    return x.tape.record(y, [(x, lambda g: 0.5 * g / y)], "sqrt")


def abs_smooth(x: Tensor, eps: float = ABS_EPS) -> Tensor:
    """sqrt(x^2 + eps^2): differentiable stand-in for |x|."""
    xd = x.data
    y = np.sqrt(xd * xd + eps * eps)
    return x.tape.record(y, [(x, lambda g: g * xd / y)], "abs_smooth")


def clip(x: Tensor, lo: float, hi: float) -> Tensor:
    """Clamp with zero gradient outside [lo, hi]."""
    xd = x.data
    inside = (xd >= lo) & (xd <= hi)
    return x.tape.record(np.clip(xd, lo, hi), [(x, lambda g: g * inside)], "clip")


def minimum(a: Tensor, b: Tensor) -> Tensor:
    """Elementwise min; ties send the gradient to ``a``."""
    _same(a, b, "minimum")
    pick_a = a.data <= b.data
    return a.tape.record(
        np.where(pick_a, a.data, b.data),
        [(a, lambda g: g * pick_a), (b, lambda g: g * ~pick_a)],
        "minimum",
    )


# ---------------------------------------------------------------- linear algebra


def matmul(a: Tensor, b: Tensor) -> Tensor:
    """Batched matrix product with identical leading dimensions."""
    tape = _tape_of(a, b)
    a, b = _as_tensor(a, tape), _as_tensor(b, tape)
    if a.ndim < 2 or a.ndim != b.ndim or a.shape[:-2] != b.shape[:-2] or a.shape[-1] != b.shape[-2]:
        raise DimensionError(f"matmul: incompatible shapes {a.shape} and {b.shape}")
    ad, bd = a.data, b.data
    return tape.record(
        ad @ bd,
        [(a, lambda g: g @ np.swapaxes(bd, -1, -2)), (b, lambda g: np.swapaxes(ad, -1, -2) @ g)],
        "matmul",
    )


def softmax(x: Tensor) -> Tensor:
    """Softmax over the last axis."""
    z = x.data - x.data.max(axis=-1, keepdims=True)
    e = np.exp(z)
    y = e / e.sum(axis=-1, keepdims=True)

    def vjp(g):
        return y * (g - (g * y).sum(axis=-1, keepdims=True))

    return x.tape.record(y, [(x, vjp)], "softmax")


# ---------------------------------------------------------------- shape


def reshape(x: Tensor, shape) -> Tensor:
    old = x.shape
    return x.tape.record(x.data.reshape(shape), [(x, lambda g: g.reshape(old))], "reshape")


def transpose(x: Tensor, axes) -> Tensor:
    inv = np.argsort(axes)
    return x.tape.record(np.transpose(x.data, axes), [(x, lambda g: np.transpose(g, inv))], "transpose")


def broadcast_to(x: Tensor, shape) -> Tensor:
    """Explicit broadcast; size-1 or missing leading axes are expanded."""
    shape = tuple(shape)
    src = x.shape
    try:
        y = np.broadcast_to(x.data, shape).copy()
    except ValueError:
        raise DimensionError(f"cannot broadcast {src} to {shape}") from None
    lead = len(shape) - len(src)

    def vjp(g):
        g = g.sum(axis=tuple(range(lead))) if lead else g
        axes = tuple(i for i, n in enumerate(src) if n == 1 and g.shape[i] != 1)
        return g.sum(axis=axes, keepdims=True) if axes else g

    return x.tape.record(y, [(x, vjp)], "broadcast_to")


def concat(xs: list[Tensor], axis: int = -1) -> Tensor:
    tape = _tape_of(*xs)
    xs = [_as_tensor(x, tape) for x in xs]
    ax = axis % xs[0].ndim
    for x in xs[1:]:
        if x.ndim != xs[0].ndim or any(
            x.shape[i] != xs[0].shape[i] for i in range(x.ndim) if i != ax
        ):
            raise DimensionError(f"concat: incompatible shapes {[t.shape for t in xs]}")
    sizes = np.cumsum([0] + [x.shape[ax] for x in xs])
    parents = []
    for k, x in enumerate(xs):
        lo, hi = int(sizes[k]), int(sizes[k + 1])

        def vjp(g, lo=lo, hi=hi):
            idx = [slice(None)] * g.ndim
            idx[ax] = slice(lo, hi)
            return g[tuple(idx)]

        parents.append((x, vjp))
    return tape.record(np.concatenate([x.data for x in xs], axis=ax), parents, "concat")


def stack(xs: list[Tensor], axis: int = 0) -> Tensor:
    tape = _tape_of(*xs)
    xs = [_as_tensor(x, tape) for x in xs]
    parents = [(x, (lambda g, k=k: np.take(g, k, axis=axis))) for k, x in enumerate(xs)]
    return tape.record(np.stack([x.data for x in xs], axis=axis), parents, "stack")


def slice_(x: Tensor, idx) -> Tensor:
    shape = x.shape

    def vjp(g):
        out = np.zeros(shape)
        np.add.at(out, idx, g) if _is_advanced(idx) else out.__setitem__(idx, g)
        return out

    return x.tape.record(x.data[idx], [(x, vjp)], "slice")


def _is_advanced(idx) -> bool:
    items = idx if isinstance(idx, tuple) else (idx,)
    return any(isinstance(i, (list, np.ndarray)) for i in items)


def take_rows(x: Tensor, rows) -> Tensor:
    """x[l, ..., rows[l], :] for each leading index l of an (L, B, R, d) tensor."""
    rows = np.asarray(rows, dtype=int)
    if x.ndim != 4 or len(rows) != x.shape[0]:
        raise DimensionError(f"take_rows expects (L, B, R, d) with L={len(rows)}, got {x.shape}")
    L = x.shape[0]
    lidx = np.arange(L)
    y = x.data[lidx, :, rows, :]  # advanced indices first -> (L, B, d)
    shape = x.shape

    def vjp(g):
        out = np.zeros(shape)
        out[lidx, :, rows, :] = g
        return out

    return x.tape.record(y, [(x, vjp)], "take_rows")


# ---------------------------------------------------------------- reductions


def sum_(x: Tensor, axis=None, keepdims: bool = False) -> Tensor:
    shape = x.shape

    def vjp(g):
        if axis is not None and not keepdims:
            g = np.expand_dims(g, axis)
        return np.broadcast_to(g, shape).copy()

    return x.tape.record(np.sum(x.data, axis=axis, keepdims=keepdims), [(x, vjp)], "sum")


def mean(x: Tensor, axis=None, keepdims: bool = False) -> Tensor:
    n = x.data.size if axis is None else np.prod([x.shape[a] for a in np.atleast_1d(axis)])
    return scale(sum_(x, axis, keepdims), 1.0 / float(n))


# ---------------------------------------------------------------- checks and storage


def numeric_grad(f, x: np.ndarray, h: float = 1e-5) -> np.ndarray:
    """Central differences of scalar ``f(tape, X) -> Tensor`` at x."""
    x = np.array(x, dtype=np.float64)
    g = np.zeros_like(x)
    flat = x.reshape(-1)
    gf = g.reshape(-1)
    for k in range(flat.size):
        orig = flat[k]
        flat[k] = orig + h
        tp = Tape()
        fp = f(tp, tp.const(x)).item()
        flat[k] = orig - h
        tm = Tape()
        fm = f(tm, tm.const(x)).item()
        flat[k] = orig
        gf[k] = (fp - fm) / (2.0 * h)
    return g


def analytic_grad(f, x: np.ndarray) -> np.ndarray:
    tape = Tape()
    X = tape.param(x)
    return backward(tape, f(tape, X))[X.node]


def relative_error(analytic, numeric) -> float:
    """Max coordinate error relative to the numeric gradient.

    Coordinates whose numeric gradient is tiny are measured against 1% of the
    largest numeric magnitude, so roundoff at near-zero entries is not
    mistaken for a wrong gradient.
    """
    a = np.asarray(analytic, float).ravel()
    n = np.asarray(numeric, float).ravel()
    floor = max(1e-2 * float(np.max(np.abs(n), initial=0.0)), 1e-10)
    return float(np.max(np.abs(a - n) / np.maximum(np.abs(n), floor), initial=0.0))


def grad_check(f, x, h: float = 1e-5, analytic=None) -> float:
    """Max relative error between backward() and central differences.

    ``analytic`` overrides the tape gradient (used for negative controls).
    """
    x = np.asarray(x, dtype=np.float64)
    a = analytic_grad(f, x) if analytic is None else analytic
    return relative_error(a, numeric_grad(f, x, h))


def save_arrays(arrays: dict[str, np.ndarray], path, extra: dict | None = None) -> Path:
    """Write ``path`` (raw little-endian float64) plus ``path.json`` manifest."""
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    manifest = {"dtype": "<f8", "arrays": [], "meta": extra or {}}
    offset = 0
    with open(path, "wb") as f:
        for name in sorted(arrays):
            a = np.asarray(arrays[name], dtype="<f8", order="C")
            f.write(a.tobytes())
            manifest["arrays"].append({"name": name, "shape": list(a.shape), "offset": offset})
            offset += a.nbytes
    Path(str(path) + ".json").write_text(json.dumps(manifest, indent=2, sort_keys=True) + "\n")
    return path


def load_arrays(path) -> tuple[dict[str, np.ndarray], dict]:
    path = Path(path)
    manifest = json.loads(Path(str(path) + ".json").read_text())
    raw = path.read_bytes()
    out = {}
    for entry in manifest["arrays"]:
        n = int(np.prod(entry["shape"])) if entry["shape"] else 1
        a = np.frombuffer(raw, dtype="<f8", count=n, offset=entry["offset"])
        out[entry["name"]] = a.reshape(entry["shape"]).copy()
    return out, manifest.get("meta", {})
