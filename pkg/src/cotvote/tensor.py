"""Dense f64 tensors with reverse-mode automatic differentiation.

Design notes:
  - everything is float64; the point of this library is exact-tolerance
    testing and clean gradient checks, not speed on big models
  - a Tensor records its parents and a backward closure when (and only
    when) gradients are enabled and some input requires them, so eval
    forward passes build no graph at all
  - elementwise ops use numpy broadcasting; gradients are summed back
    down to each operand's shape
  - fused ops (softmax, cross-entropy, layer norm, attention) keep the
    graph small; each one is checked against central finite differences
    and against its composition from primitives in the test suite
"""

from __future__ import annotations

import numpy as np

from .errors import ConfigError, NumericError, ShapeError

_GRAD_ENABLED = True


class no_grad:
    """Context manager disabling graph construction (eval-mode forwards)."""

    def __enter__(self):
        global _GRAD_ENABLED
        self._prev = _GRAD_ENABLED
        _GRAD_ENABLED = False
        return self

    def __exit__(self, *exc):
        global _GRAD_ENABLED
        _GRAD_ENABLED = self._prev
        return False


class Tensor:
    """A dense f64 array plus an optional accumulated gradient.

    ``grad`` is populated on leaves by ``backward()`` and accumulates
    across calls until cleared (set to None).
    """

    __slots__ = ("data", "grad", "requires_grad", "_parents", "_backward")

    def __init__(self, data, requires_grad: bool = False):
        self.data = np.asarray(data, dtype=np.float64)
        self.grad = None
        self.requires_grad = bool(requires_grad)
        self._parents = ()
        self._backward = None

    @property
    def shape(self):
        return self.data.shape

    @property
    def ndim(self):
        return self.data.ndim

    @property
    def size(self):
        return self.data.size

    def item(self) -> float:
        return float(self.data)

    def __repr__(self):
        return f"Tensor(shape={self.shape}, requires_grad={self.requires_grad})"

    # -- graph -----------------------------------------------------------

    def backward(self):
        """Accumulate d(self)/d(leaf) into every reachable leaf's .grad.

        `self` must be a scalar. Repeated calls add their contributions;
        clear leaf grads between optimizer steps.
        """
        if self.size != 1:
            raise ShapeError(f"backward requires a scalar loss, got shape {self.shape}")
        topo = _toposort(self)
        grads = {id(self): np.ones_like(self.data)}
        for node in reversed(topo):
            g = grads.pop(id(node), None)
            if g is None:
                continue
            if node._backward is None:
                if node.requires_grad:
                    if node.grad is None:
                        node.grad = np.zeros_like(node.data)
                    node.grad += g
                continue
            for parent, pg in zip(node._parents, node._backward(g)):
                if pg is None or not parent.requires_grad:
                    continue
                pid = id(parent)
                if pid in grads:
                    grads[pid] = grads[pid] + pg
                else:
                    grads[pid] = pg

    # -- arithmetic (operator sugar over the module-level ops) ------------

    def __add__(self, other):
        return add(self, other)

    __radd__ = __add__

    def __mul__(self, other):
        return mul(self, other)

    __rmul__ = __mul__

    def __sub__(self, other):
        return sub(self, other)

    def __rsub__(self, other):
        return sub(_as_tensor(other), self)

    def __truediv__(self, other):
        return div(self, other)

    def __rtruediv__(self, other):
        return div(_as_tensor(other), self)

    def __neg__(self):
        return mul(self, -1.0)

    def __matmul__(self, other):
        return matmul(self, other)

    # -- shape / reductions -----------------------------------------------

    def reshape(self, *shape):
        if len(shape) == 1 and isinstance(shape[0], (tuple, list)):
            shape = tuple(shape[0])
        src = self.data.shape
        out = self.data.reshape(shape)
        return _node(out, (self,), lambda g: (g.reshape(src),))

    def swapaxes(self, a: int, b: int):
        out = np.ascontiguousarray(self.data.swapaxes(a, b))
        return _node(out, (self,), lambda g: (g.swapaxes(a, b),))

    def sum(self, axis=None, keepdims: bool = False):
        src_shape = self.data.shape
        out = self.data.sum(axis=axis, keepdims=keepdims)

        def bw(g):
            if axis is None:
                return (np.broadcast_to(g, src_shape),)
            gg = g if keepdims else np.expand_dims(g, axis)
            return (np.broadcast_to(gg, src_shape),)

        return _node(out, (self,), bw)

    def mean(self, axis=None, keepdims: bool = False):
        n = self.size if axis is None else self.data.shape[axis]
        return self.sum(axis=axis, keepdims=keepdims) * (1.0 / n)

    # -- elementwise -------------------------------------------------------

    def sqrt(self):
        out = np.sqrt(self.data)

        def bw(g):
            # derivative 1/(2*sqrt) blows up at 0; use subgradient 0 there so
            # masked/degenerate positions cannot poison the rest of the graph
            safe = np.where(out > 0.0, out, 1.0)
            return (np.where(out > 0.0, g * (0.5 / safe), 0.0),)

        return _node(out, (self,), bw)

    def exp(self):
        out = np.exp(self.data)
        return _node(out, (self,), lambda g: (g * out,))

    def log(self):
        out = np.log(self.data)
        src = self.data
        return _node(out, (self,), lambda g: (g / src,))

    def relu(self):
        out = np.maximum(self.data, 0.0)
        mask = self.data > 0.0
        return _node(out, (self,), lambda g: (g * mask,))


def _as_tensor(x) -> Tensor:
    if isinstance(x, Tensor):
        return x
    return Tensor(np.asarray(x, dtype=np.float64))


def _node(data, parents, backward) -> Tensor:
    out = Tensor.__new__(Tensor)
    out.data = data
    out.grad = None
    if _GRAD_ENABLED and any(p.requires_grad for p in parents):
        out.requires_grad = True
        out._parents = parents
        out._backward = backward
    else:
        out.requires_grad = False
        out._parents = ()
        out._backward = None
    return out


def _toposort(root: Tensor) -> list[Tensor]:
    # iterative DFS post-order; nodes are marked at expansion (not at
    # push), otherwise a node first reached through a longer path could
    # finish before all of its consumers
    order: list[Tensor] = []
    seen: set[int] = set()
    stack: list[tuple[Tensor, bool]] = [(root, False)]
    while stack:
        node, done = stack.pop()
        if done:
            order.append(node)
            continue
        if id(node) in seen:
            continue
        seen.add(id(node))
        stack.append((node, True))
        for p in node._parents:
            if id(p) not in seen:
                stack.append((p, False))
    return order


def _unbroadcast(g: np.ndarray, shape: tuple) -> np.ndarray:
    """Sum a broadcasted gradient back down to `shape`."""
    if g.shape == shape:
        return g
    extra = g.ndim - len(shape)
    if extra:
        g = g.sum(axis=tuple(range(extra)))
    axes = tuple(i for i, (gs, ss) in enumerate(zip(g.shape, shape)) if ss == 1 and gs != 1)
    if axes:
        g = g.sum(axis=axes, keepdims=True)
    return g


# -- elementwise binary ops -------------------------------------------------


def add(a, b) -> Tensor:
    a, b = _as_tensor(a), _as_tensor(b)
    out = a.data + b.data
    return _node(
        out, (a, b), lambda g: (_unbroadcast(g, a.data.shape), _unbroadcast(g, b.data.shape))
    )


def sub(a, b) -> Tensor:
    a, b = _as_tensor(a), _as_tensor(b)
    out = a.data - b.data
    return _node(
        out, (a, b), lambda g: (_unbroadcast(g, a.data.shape), _unbroadcast(-g, b.data.shape))
    )


def mul(a, b) -> Tensor:
    a, b = _as_tensor(a), _as_tensor(b)
    out = a.data * b.data
    return _node(
        out,
        (a, b),
        lambda g: (_unbroadcast(g * b.data, a.data.shape), _unbroadcast(g * a.data, b.data.shape)),
    )


def div(a, b) -> Tensor:
    a, b = _as_tensor(a), _as_tensor(b)
    out = a.data / b.data

    def bw(g):
        ga = _unbroadcast(g / b.data, a.data.shape)
        gb = _unbroadcast(-g * out / b.data, b.data.shape)
        return ga, gb

    return _node(out, (a, b), bw)


# -- matmul ------------------------------------------------------------------


def matmul(a, b) -> Tensor:
    """Matrix product with gradients dA = dC.Bt and dB = At.dC.

    Supports 2-D x 2-D, batched x batched (matching leading dims), and
    batched x 2-D (shared weight matrix).
    """
    a, b = _as_tensor(a), _as_tensor(b)
    if a.ndim < 2 or b.ndim < 2:
        raise ShapeError(f"matmul requires >=2-D operands, got {a.shape} @ {b.shape}")
    if a.data.shape[-1] != b.data.shape[-2]:
        raise ShapeError(f"matmul: inner dimensions disagree for {a.shape} @ {b.shape}")
    if b.ndim > 2 and a.data.shape[:-2] != b.data.shape[:-2]:
        raise ShapeError(f"matmul: leading dimensions disagree for {a.shape} @ {b.shape}")
    k = a.data.shape[-1]
    n = b.data.shape[-1]
    if b.ndim == 2 and a.ndim > 2:
        # collapse the stack so BLAS sees one big GEMM instead of a loop
        out = (a.data.reshape(-1, k) @ b.data).reshape(a.data.shape[:-1] + (n,))
    else:
        out = a.data @ b.data

    def bw(g):
        if b.ndim == 2 and a.ndim > 2:
            g2 = np.ascontiguousarray(g).reshape(-1, n)
            ga = (g2 @ b.data.T).reshape(a.data.shape)
            gb = a.data.reshape(-1, k).T @ g2
        else:
            ga = g @ b.data.swapaxes(-1, -2)
            gb = a.data.swapaxes(-1, -2) @ g
        return ga, gb

    return _node(out, (a, b), bw)


# -- fused ops ----------------------------------------------------------------


def softmax(x, axis: int = -1) -> Tensor:
    x = _as_tensor(x)
    s = np.exp(x.data - x.data.max(axis=axis, keepdims=True))
    s /= s.sum(axis=axis, keepdims=True)

    def bw(g):
        return (s * (g - (g * s).sum(axis=axis, keepdims=True)),)

    return _node(s, (x,), bw)


def cross_entropy_logits(logits: Tensor, targets) -> Tensor:
    """Per-position softmax cross-entropy, max-subtraction stabilized.

    logits: (..., V); targets: int array (...,). Returns losses (...,).
    """
    logits = _as_tensor(logits)
    v = logits.data.shape[-1]
    targets = np.asarray(targets)
    if targets.shape != logits.data.shape[:-1]:
        raise ShapeError(
            f"targets shape {targets.shape} does not match logits positions "
            f"{logits.data.shape[:-1]}"
        )
    if targets.size and (targets.min() < 0 or targets.max() >= v):
        raise IndexError(f"target class out of range for {v} classes")
    m = logits.data.max(axis=-1, keepdims=True)
    lse = m + np.log(np.exp(logits.data - m).sum(axis=-1, keepdims=True))
    picked = np.take_along_axis(logits.data, targets[..., None], axis=-1)
    out = (lse - picked)[..., 0]

    def bw(g):
        p = np.exp(logits.data - lse)
        np.put_along_axis(
            p, targets[..., None], np.take_along_axis(p, targets[..., None], axis=-1) - 1.0, axis=-1
        )
        return (p * g[..., None],)

    return _node(out, (logits,), bw)


def softmax_cross_entropy(logits: Tensor, target: int) -> Tensor:
    """Scalar loss -logits[target] + logsumexp(logits) for a single logit vector."""
    logits = _as_tensor(logits)
    if logits.ndim != 1 or logits.shape[0] < 2:
        raise ShapeError(f"expected a 1-D logit vector with >=2 classes, got shape {logits.shape}")
    target = int(target)
    if not 0 <= target < logits.shape[0]:
        raise IndexError(f"target {target} out of range for {logits.shape[0]} classes")
    return cross_entropy_logits(logits, np.asarray(target)).reshape(())


def layer_norm(x: Tensor, gamma: Tensor, beta: Tensor, eps: float = 1e-5) -> Tensor:
    """Normalize the last axis to zero mean / unit variance, then scale+shift."""
    x, gamma, beta = _as_tensor(x), _as_tensor(gamma), _as_tensor(beta)
    d = x.data.shape[-1]
    mu = x.data.mean(axis=-1, keepdims=True)
    xhat = x.data - mu
    var = np.einsum("...i,...i->...", xhat, xhat)[..., None] / d
    inv = 1.0 / np.sqrt(var + eps)
    xhat *= inv
    out = xhat * gamma.data
    out += beta.data

    def bw(g):
        gxh = g * gamma.data
        mean_gxh = gxh.mean(axis=-1, keepdims=True)
        proj = np.einsum("...i,...i->...", gxh, xhat)[..., None] / d
        gx = inv * (gxh - mean_gxh - xhat * proj)
        g2 = np.ascontiguousarray(g).reshape(-1, d)
        ggamma = np.einsum("ri,ri->i", g2, xhat.reshape(-1, d))
        return gx, ggamma, g2.sum(axis=0)

    return _node(out, (x, gamma, beta), bw)


def embedding(table: Tensor, ids) -> Tensor:
    """Row lookup with scatter-add backward. ids: int array (...,)."""
    table = _as_tensor(table)
    ids = np.asarray(ids)
    if ids.size and (ids.min() < 0 or ids.max() >= table.shape[0]):
        raise IndexError(f"embedding id out of range for table of {table.shape[0]} rows")
    out = table.data[ids]

    def bw(g):
        gt = np.zeros_like(table.data)
        np.add.at(gt, ids.reshape(-1), g.reshape(-1, table.data.shape[1]))
        return (gt,)

    return _node(out, (table,), bw)


def dropout(x: Tensor, p: float, rng, training: bool) -> Tensor:
    """Inverted dropout: zero with probability p, scale survivors by 1/(1-p).

    Eval mode (or p == 0) is an exact identity and draws nothing from rng.
    """
    if not 0.0 <= p < 1.0:
        raise ConfigError(f"dropout probability must be in [0, 1), got {p}")
    x = _as_tensor(x)
    if not training or p == 0.0:
        return x
    mask = (rng.random(x.data.shape) >= p) * (1.0 / (1.0 - p))
    return _node(x.data * mask, (x,), lambda g: (g * mask,))


def attention(q: Tensor, k: Tensor, v: Tensor, mask=None) -> Tensor:
    """Scaled dot-product attention: softmax(q.kT/sqrt(dh) + mask) @ v.

    q: (..., Lq, dh), k/v: (..., Lk, dh); mask is an additive constant
    ndarray broadcastable to (..., Lq, Lk) (use -1e9 to block a key).
    """
    q, k, v = _as_tensor(q), _as_tensor(k), _as_tensor(v)
    if q.data.shape[-1] != k.data.shape[-1]:
        raise ShapeError(f"attention: query/key width disagree: {q.shape} vs {k.shape}")
    scale = 1.0 / np.sqrt(q.data.shape[-1])
    s = q.data @ k.data.swapaxes(-1, -2)
    s *= scale
    if mask is not None:
        s += mask
    s -= s.max(axis=-1, keepdims=True)
    p = np.exp(s, out=s)
    p /= p.sum(axis=-1, keepdims=True)
    out = p @ v.data

    def bw(g):
        gp = g @ v.data.swapaxes(-1, -2)
        gv = p.swapaxes(-1, -2) @ g
        inner = np.einsum("...ij,...ij->...i", gp, p)[..., None]
        gp -= inner
        gs = gp
        gs *= p
        gq = (gs @ k.data) * scale
        gk = (gs.swapaxes(-1, -2) @ q.data) * scale
        return gq, gk, gv

    return _node(out, (q, k, v), bw)


def concat(tensors, axis: int = 0) -> Tensor:
    """Concatenate along `axis`; backward splits the gradient back."""
    tensors = tuple(_as_tensor(t) for t in tensors)
    out = np.concatenate([t.data for t in tensors], axis=axis)
    sizes = [t.data.shape[axis] for t in tensors]
    bounds = np.cumsum(sizes)[:-1]

    def bw(g):
        return tuple(np.split(g, bounds, axis=axis))

    return _node(out, tensors, bw)


def backward(loss: Tensor) -> None:
    """Function form of Tensor.backward()."""
    loss.backward()


def zero_grads(params) -> None:
    """Clear grads on a dict or iterable of tensors."""
    it = params.values() if hasattr(params, "values") else params
    for p in it:
        p.grad = None


# -- gradient verification -----------------------------------------------------


def finite_difference_check(f, params, eps: float = 1e-5, max_coords: int | None = None) -> float:
    """Max relative error of autodiff grads vs central finite differences.

    ``f()`` must rebuild the computation from `params` (a dict or list of
    Tensors) and return a scalar Tensor; any randomness inside f must be
    replayed identically on every call (fresh RngStreams per call).
    When a parameter has more than `max_coords` entries, a deterministic
    evenly-spaced subset of coordinates is checked.
    """
    if eps <= 0:
        raise ConfigError(f"eps must be positive, got {eps}")
    tensors = list(params.values()) if hasattr(params, "values") else list(params)
    zero_grads(tensors)
    loss = f()
    if not np.isfinite(loss.data).all():
        raise NumericError("finite_difference_check: f returned a non-finite value")
    loss.backward()
    analytic = [None if p.grad is None else p.grad.copy() for p in tensors]

    worst = 0.0
    with no_grad():
        for p, an in zip(tensors, analytic):
            flat = p.data.reshape(-1)
            n = flat.size
            if max_coords is not None and n > max_coords:
                coords = np.linspace(0, n - 1, max_coords).astype(int)
            else:
                coords = range(n)
            ga = np.zeros(n) if an is None else an.reshape(-1)
            for i in coords:
                orig = flat[i]
                flat[i] = orig + eps
                fp = f().item()
                flat[i] = orig - eps
                fm = f().item()
                flat[i] = orig
                if not (np.isfinite(fp) and np.isfinite(fm)):
                    raise NumericError("finite_difference_check: non-finite f at perturbed point")
                fd = (fp - fm) / (2.0 * eps)
                denom = max(abs(fd), abs(ga[i]))
                if denom < 1e-7:
                    # both effectively zero: compare absolutely
                    err = abs(fd - ga[i])
                else:
                    err = abs(fd - ga[i]) / denom
                if err > worst:
                    worst = err
    return worst
