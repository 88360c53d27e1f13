"""Dense float tensors with reverse-mode automatic differentiation.

The graph is built dynamically: every op attaches its input tensors and a
vector-Jacobian closure to the output, so the DAG reachable from a loss
value *is* the computation graph (append-only and topologically ordered by
construction).  ``Tensor.backward`` walks it in reverse and accumulates
dLoss/dLeaf into each leaf's ``grad`` buffer.  Repeated backward calls add
up until the grads are zeroed.

Data is float32 by default; reductions accumulate in float64.  Graphs built
from float64 arrays stay float64, which the finite-difference test suites
rely on.
"""

from __future__ import annotations

import numpy as np

# Vectors with a norm at or below this are treated as zero in cosine /
# normalization ops: the result is 0 and no gradient flows (avoids NaNs).
NORM_EPS = 1e-12

_FLOAT_DTYPES = (np.dtype(np.float32), np.dtype(np.float64))


class Tensor:
    """Dense float array, optionally tracked by the autodiff graph."""

    __slots__ = ("data", "requires_grad", "grad", "op", "_parents", "_vjp")

    def __init__(self, data, requires_grad: bool = False, dtype=None):
        if dtype is not None:
            arr = np.asarray(data, dtype=dtype)
        else:
            arr = np.asarray(data)
            if arr.dtype not in _FLOAT_DTYPES:
                arr = arr.astype(np.float32)
        self.data = arr
        self.requires_grad = bool(requires_grad)
        self.grad = None
        self.op = "leaf"
        self._parents = ()
        self._vjp = None

    @property
    def shape(self):
        return self.data.shape

    @property
    def size(self):
        return self.data.size

    def item(self) -> float:
        return float(self.data)

    def __repr__(self):
        return f"Tensor(op={self.op!r}, shape={self.data.shape}, requires_grad={self.requires_grad})"

    def zero_grad(self):
        self.grad = None

    def backward(self):
        """Accumulate dSelf/dLeaf into every reachable requires_grad leaf.

        ``self`` must be a scalar (size 1).  Grads add up across calls:
        callers zero them between optimization steps.
        """
        if self.data.size != 1:
            raise ValueError(f"backward requires a scalar loss, got shape {self.data.shape}")
        if not self.requires_grad:
            raise ValueError("backward on a tensor that does not require grad (graph is detached)")

        topo: list[Tensor] = []
        visited: set[int] = set()
        stack: list[tuple[Tensor, bool]] = [(self, False)]
        while stack:
            node, expanded = stack.pop()
            if expanded:
                topo.append(node)
                continue
            if id(node) in visited:
                continue
            visited.add(id(node))
            stack.append((node, True))
            for p in node._parents:
                if p.requires_grad and id(p) not in visited:
                    stack.append((p, False))

        flow: dict[int, np.ndarray] = {id(self): np.ones_like(self.data)}
        for node in reversed(topo):
            g = flow.pop(id(node), None)
            if g is None:
                continue
            if node._parents:
                for parent, pg in zip(node._parents, node._vjp(g)):
                    if pg is None or not parent.requires_grad:
                        continue
                    acc = flow.get(id(parent))
                    flow[id(parent)] = pg if acc is None else acc + pg
            else:
                # leaf: commit (copy — g may alias an op buffer or a view)
                if node.grad is None:
                    node.grad = np.array(g, dtype=node.data.dtype)
                else:
                    node.grad = node.grad + g


def _as_tensor(x) -> Tensor:
    return x if isinstance(x, Tensor) else Tensor(x)


def _make(data: np.ndarray, parents: tuple, vjp, op: str) -> Tensor:
    out = Tensor.__new__(Tensor)
    out.data = data
    out.requires_grad = any(p.requires_grad for p in parents)
    out.grad = None
    out.op = op
    if out.requires_grad:
        out._parents = parents
        out._vjp = vjp
    else:
        out._parents = ()
        out._vjp = None
    return out


def _unbroadcast(g: np.ndarray, shape: tuple) -> np.ndarray:
    """Sum g over the axes numpy broadcast when producing it from `shape`."""
    while g.ndim > len(shape):
        g = g.sum(axis=0)
    for axis, dim in enumerate(shape):
        if dim == 1 and g.shape[axis] != 1:
            g = g.sum(axis=axis, keepdims=True)
    return g


# ---------------------------------------------------------------------------
# elementwise ops
# ---------------------------------------------------------------------------

def add(a, b) -> Tensor:
    a, b = _as_tensor(a), _as_tensor(b)
    try:
        data = a.data + b.data
    except ValueError:
        raise ValueError(f"add: cannot broadcast {a.data.shape} with {b.data.shape}") from None

    def vjp(g):
        return (_unbroadcast(g, a.data.shape) if a.requires_grad else None,
                _unbroadcast(g, b.data.shape) if b.requires_grad else None)

    return _make(data, (a, b), vjp, "add")


def sub(a, b) -> Tensor:
    return add(a, neg(b))


def neg(a) -> Tensor:
    a = _as_tensor(a)

    def vjp(g):
        return (-g,)

    return _make(-a.data, (a,), vjp, "neg")


def mul(a, b) -> Tensor:
    a, b = _as_tensor(a), _as_tensor(b)
    try:
        data = a.data * b.data
    except ValueError:
        raise ValueError(f"mul: cannot broadcast {a.data.shape} with {b.data.shape}") from None

    def vjp(g):
        return (_unbroadcast(g * b.data, a.data.shape) if a.requires_grad else None,
                _unbroadcast(g * a.data, b.data.shape) if b.requires_grad else None)

    return _make(data, (a, b), vjp, "mul")


def scale(a, c: float) -> Tensor:
    """Multiply by a python-float constant (no graph node for the constant)."""
    a = _as_tensor(a)

    def vjp(g):
        return (g * c,)

    return _make(a.data * c, (a,), vjp, "scale")


def relu(a) -> Tensor:
    a = _as_tensor(a)

    def vjp(g):
        return (g * (a.data > 0),)

    return _make(np.maximum(a.data, 0), (a,), vjp, "relu")


def exp(a) -> Tensor:
    a = _as_tensor(a)
    data = np.exp(a.data)

    def vjp(g):
        return (g * data,)

    return _make(data, (a,), vjp, "exp")


def log(a) -> Tensor:
    a = _as_tensor(a)

    def vjp(g):
        return (g / a.data,)

    return _make(np.log(a.data), (a,), vjp, "log")


# ---------------------------------------------------------------------------
# linear algebra
# ---------------------------------------------------------------------------

def matmul(a, b) -> Tensor:
    a, b = _as_tensor(a), _as_tensor(b)
    ad, bd = a.data, b.data
    if ad.ndim == 2 and bd.ndim == 2:
        if ad.shape[1] != bd.shape[0]:
            raise ValueError(f"matmul: inner dims differ, {ad.shape} @ {bd.shape}")

        def vjp(g):
            return (g @ bd.T if a.requires_grad else None,
                    ad.T @ g if b.requires_grad else None)
    elif ad.ndim == 2 and bd.ndim == 1:
        if ad.shape[1] != bd.shape[0]:
            raise ValueError(f"matmul: inner dims differ, {ad.shape} @ {bd.shape}")

        def vjp(g):
            return (np.outer(g, bd) if a.requires_grad else None,
                    ad.T @ g if b.requires_grad else None)
    elif ad.ndim == 1 and bd.ndim == 2:
        if ad.shape[0] != bd.shape[0]:
            raise ValueError(f"matmul: inner dims differ, {ad.shape} @ {bd.shape}")

        def vjp(g):
            return (bd @ g if a.requires_grad else None,
                    np.outer(ad, g) if b.requires_grad else None)
    else:
        raise ValueError(f"matmul: unsupported ranks {ad.ndim} @ {bd.ndim}")
    return _make(ad @ bd, (a, b), vjp, "matmul")


def transpose(a) -> Tensor:
    a = _as_tensor(a)
    if a.data.ndim != 2:
        raise ValueError("transpose expects a matrix")

    def vjp(g):
        return (g.T,)

    return _make(a.data.T, (a,), vjp, "transpose")


def concat(parts) -> Tensor:
    """Concatenate 1-D tensors."""
    parts = [_as_tensor(p) for p in parts]
    sizes = [p.data.shape[0] for p in parts]
    offsets = np.cumsum([0] + sizes)

    def vjp(g):
        return tuple(g[offsets[i]:offsets[i + 1]] if p.requires_grad else None
                     for i, p in enumerate(parts))

    return _make(np.concatenate([p.data for p in parts]), tuple(parts), vjp, "concat")


def linear(x, w, b) -> Tensor:
    """Affine map x @ w + b for x of shape (n,) or (batch, n)."""
    x, w, b = _as_tensor(x), _as_tensor(w), _as_tensor(b)
    xd, wd, bd = x.data, w.data, b.data
    if wd.ndim != 2 or bd.ndim != 1 or bd.shape[0] != wd.shape[1]:
        raise ValueError(f"linear: weight {wd.shape} and bias {bd.shape} are inconsistent")
    if xd.ndim == 1:
        if xd.shape[0] != wd.shape[0]:
            raise ValueError(f"linear: input dim {xd.shape[0]} does not match weight {wd.shape}")

        def vjp(g):
            return (wd @ g if x.requires_grad else None,
                    np.outer(xd, g) if w.requires_grad else None,
                    g if b.requires_grad else None)
    elif xd.ndim == 2:
        if xd.shape[1] != wd.shape[0]:
            raise ValueError(f"linear: input dim {xd.shape[1]} does not match weight {wd.shape}")

        def vjp(g):
            return (g @ wd.T if x.requires_grad else None,
                    xd.T @ g if w.requires_grad else None,
                    g.sum(axis=0, dtype=np.float64).astype(bd.dtype) if b.requires_grad else None)
    else:
        raise ValueError(f"linear: input rank {xd.ndim} unsupported")
    return _make(xd @ wd + bd, (x, w, b), vjp, "linear")


# ---------------------------------------------------------------------------
# reductions
# ---------------------------------------------------------------------------

def reduce_sum(a, axis=None) -> Tensor:
    a = _as_tensor(a)
    data = a.data.sum(axis=axis, dtype=np.float64).astype(a.data.dtype)

    def vjp(g):
        if axis is None:
            return (np.broadcast_to(g, a.data.shape),)
        return (np.broadcast_to(np.expand_dims(g, axis), a.data.shape),)

    return _make(data, (a,), vjp, "sum")


def mean(a) -> Tensor:
    a = _as_tensor(a)
    n = a.data.size
    data = np.asarray(a.data.sum(dtype=np.float64) / n, dtype=a.data.dtype)

    def vjp(g):
        return (np.broadcast_to(g / n, a.data.shape),)

    return _make(data, (a,), vjp, "mean")


# ---------------------------------------------------------------------------
# similarity / normalization
# ---------------------------------------------------------------------------

def l2_normalize(v) -> Tensor:
    """Scale a vector to unit norm; near-zero vectors map to zero (no grad)."""
    v = _as_tensor(v)
    if v.data.ndim != 1:
        raise ValueError("l2_normalize expects a vector")
    vd = v.data
    n = float(np.sqrt(np.sum(vd.astype(np.float64) ** 2)))
    if n <= NORM_EPS:
        return _make(np.zeros_like(vd), (v,), lambda g: (None,), "l2_normalize")
    out = (vd / n).astype(vd.dtype)

    def vjp(g):
        return ((g - out * np.dot(out, g)) / n,)

    return _make(out, (v,), vjp, "l2_normalize")


def rows_normalize(a) -> Tensor:
    """L2-normalize each row of a matrix; near-zero rows map to zero rows."""
    a = _as_tensor(a)
    if a.data.ndim != 2:
        raise ValueError("rows_normalize expects a matrix")
    ad = a.data
    norms = np.sqrt(np.sum(ad.astype(np.float64) ** 2, axis=1))
    live = norms > NORM_EPS
    safe = np.where(live, norms, 1.0)
    out = (ad / safe[:, None]).astype(ad.dtype)
    out[~live] = 0.0

    def vjp(g):
        dots = np.sum(out * g, axis=1, keepdims=True)
        ga = (g - out * dots) / safe[:, None].astype(ad.dtype)
        ga[~live] = 0.0
        return (ga,)

    return _make(out, (a,), vjp, "rows_normalize")


def cosine_sim(a, b) -> Tensor:
    """Cosine similarity of two equal-length vectors, as a scalar tensor.

    Either vector with norm <= NORM_EPS gives similarity 0 with zero
    gradient, so degenerate features cannot poison an optimization.
    """
    a, b = _as_tensor(a), _as_tensor(b)
    ad, bd = a.data, b.data
    if ad.ndim != 1 or bd.ndim != 1 or ad.shape != bd.shape:
        raise ValueError(f"cosine_sim: need equal-length vectors, got {ad.shape} and {bd.shape}")
    dtype = np.result_type(ad.dtype, bd.dtype)
    a64, b64 = ad.astype(np.float64), bd.astype(np.float64)
    na = float(np.sqrt(np.sum(a64 ** 2)))
    nb = float(np.sqrt(np.sum(b64 ** 2)))
    if na <= NORM_EPS or nb <= NORM_EPS:
        return _make(np.zeros((), dtype=dtype), (a, b), lambda g: (None, None), "cosine_sim")
    c = float(np.dot(a64, b64) / (na * nb))

    def vjp(g):
        gs = float(g)
        ga = (gs * (b64 / (na * nb) - c * a64 / (na * na))).astype(dtype) if a.requires_grad else None
        gb = (gs * (a64 / (na * nb) - c * b64 / (nb * nb))).astype(dtype) if b.requires_grad else None
        return (ga, gb)

    return _make(np.asarray(c, dtype=dtype), (a, b), vjp, "cosine_sim")


def dropout_mask(shape, rate: float, rng: np.random.Generator) -> Tensor:
    """Inverted-dropout mask: Bernoulli(1-rate) keep pattern scaled by 1/(1-rate)."""
    if not 0.0 <= rate < 1.0:
        raise ValueError(f"dropout rate must be in [0, 1), got {rate}")
    if rate == 0.0:
        return Tensor(np.ones(shape, dtype=np.float32))
    keep = rng.random(size=shape) >= rate
    return Tensor(keep.astype(np.float32) / np.float32(1.0 - rate))


# ---------------------------------------------------------------------------
# optimizers
# ---------------------------------------------------------------------------

def zero_grads(params) -> None:
    for p in params:
        p.grad = None


class SGD:
    """Plain gradient descent: p <- p - lr * grad."""

    def __init__(self, lr: float):
        if lr < 0:
            raise ValueError("learning rate must be nonnegative")
        self.lr = lr

    def step(self, params) -> None:
        for p in params:
            if p.grad is None:
                raise ValueError("SGD.step: parameter has no gradient (run backward first)")
            p.data = p.data - self.lr * p.grad

    def zero_grad(self, params) -> None:
        zero_grads(params)


class Adam:
    """Adam with bias correction (beta1=0.9, beta2=0.999, eps=1e-8).

    Moment state is keyed by parameter identity, so the same tensor objects
    must be passed on every step (they are, for any model that owns them).
    """

    def __init__(self, lr: float, beta1: float = 0.9, beta2: float = 0.999, eps: float = 1e-8):
        if lr < 0:
            raise ValueError("learning rate must be nonnegative")
        self.lr = lr
        self.beta1 = beta1
        self.beta2 = beta2
        self.eps = eps
        self._state: dict[int, list] = {}

    def step(self, params) -> None:
        for p in params:
            if p.grad is None:
                raise ValueError("Adam.step: parameter has no gradient (run backward first)")
            st = self._state.get(id(p))
            if st is None:
                st = self._state[id(p)] = [0, np.zeros_like(p.data), np.zeros_like(p.data)]
            st[0] += 1
            t = st[0]
            g = p.grad
            st[1] = self.beta1 * st[1] + (1.0 - self.beta1) * g
            st[2] = self.beta2 * st[2] + (1.0 - self.beta2) * (g * g)
            m_hat = st[1] / (1.0 - self.beta1 ** t)
            v_hat = st[2] / (1.0 - self.beta2 ** t)
            p.data = p.data - self.lr * m_hat / (np.sqrt(v_hat) + self.eps)

    def zero_grad(self, params) -> None:
        zero_grads(params)
