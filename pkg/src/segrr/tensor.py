"""Minimal reverse-mode automatic differentiation on dense numpy arrays.

Tensors are (N, C, H, W) by convention, though any rank works. Training
runs in float32; gradient checking uses a float64 shadow mode because
central differences cannot resolve 1e-4 tolerances in single precision.
"""

import numpy as np

DEBUG_CHECKS = False


class Tensor:
    """A numpy array plus an optional gradient and a backward closure.

    The computational graph is held implicitly through ``_parents``;
    calling :meth:`backward` on a scalar walks it in reverse topological
    order and accumulates gradients additively into every
    ``requires_grad`` leaf.
    """

    __slots__ = ("data", "requires_grad", "grad", "_backward", "_parents", "name",
                 "_grad_owned")

    def __init__(self, data, requires_grad=False, _parents=(), name=None):
        self.data = np.asarray(data)
        if self.data.dtype not in (np.float32, np.float64):
            self.data = self.data.astype(np.float32)
        self.requires_grad = requires_grad
        self.grad = None
        self._backward = None
        self._parents = _parents
        self.name = name
        if DEBUG_CHECKS and not np.all(np.isfinite(self.data)):
            raise FloatingPointError("non-finite values in tensor" + (f" {name}" if name else ""))

    # ------------------------------------------------------------------
    # basic properties

    @property
    def shape(self):
        return self.data.shape

    @property
    def ndim(self):
        return self.data.ndim

    @property
    def dtype(self):
        return self.data.dtype

    def __repr__(self):
        return f"Tensor(shape={self.shape}, dtype={self.data.dtype}, requires_grad={self.requires_grad})"

    def item(self):
        return float(self.data)

    def detach(self):
        return Tensor(self.data)

    def zero_grad(self):
        self.grad = None

    # ------------------------------------------------------------------
    # graph machinery

    def _needs_graph(self, *others):
        return self.requires_grad or any(o.requires_grad for o in others if isinstance(o, Tensor))

    def _accumulate(self, g):
        # first contribution is stored by reference (and treated as
        # read-only); a second contribution forces an owned copy
        if self.grad is None:
            self.grad = np.asarray(g, dtype=self.data.dtype)
            self._grad_owned = False
        elif getattr(self, "_grad_owned", False):
            self.grad += g
        else:
            self.grad = self.grad + g
            self._grad_owned = True

    def backward(self):
        """Accumulate dSelf/dLeaf into every reachable requires_grad tensor."""
        if self.data.size != 1:
            raise ValueError(f"backward requires a scalar loss, got shape {self.shape}")
        topo = []
        seen = set()
        stack = [(self, False)]
        while stack:
            node, expanded = stack.pop()
            if expanded:
                topo.append(node)
                continue
            if id(node) in seen:
                continue
            seen.add(id(node))
            stack.append((node, True))
            for p in node._parents:
                if id(p) not in seen:
                    stack.append((p, False))
        self._accumulate(np.ones_like(self.data))
        for node in reversed(topo):
            if node._backward is not None and node.grad is not None:
                node._backward(node.grad)

    # ------------------------------------------------------------------
    # broadcasting helpers

    @staticmethod
    def _check_broadcast(sa, sb):
        """Allow only scalar operands or equal-rank shapes whose axes match or are 1."""
        if sa == sb or sa == () or sb == ():
            return
        if len(sa) != len(sb):
            raise ValueError(f"shape mismatch (rank promotion disallowed): {sa} vs {sb}")
        for a, b in zip(sa, sb):
            if a != b and a != 1 and b != 1:
                raise ValueError(f"shapes not broadcastable: {sa} vs {sb}")

    @staticmethod
    def _unbroadcast(g, shape):
        """Sum g over the axes that were expanded to reach g.shape from shape."""
        if g.shape == shape:
            return g
        if shape == ():
            return g.sum()
        axes = tuple(i for i, (s, t) in enumerate(zip(shape, g.shape)) if s == 1 and t != 1)
        return g.sum(axis=axes, keepdims=True)

    # ------------------------------------------------------------------
    # elementwise arithmetic

    @staticmethod
    def _wrap(other, dtype):
        if isinstance(other, Tensor):
            return other
        return Tensor(np.asarray(other, dtype=dtype))

    def __add__(self, other):
        other = Tensor._wrap(other, self.data.dtype)
        Tensor._check_broadcast(self.shape, other.shape)
        out = Tensor(self.data + other.data,
                     requires_grad=self._needs_graph(other),
                     _parents=(self, other) if self._needs_graph(other) else ())
        if out.requires_grad:
            def _bw(g):
                if self.requires_grad:
                    self._accumulate(Tensor._unbroadcast(g, self.shape))
                if other.requires_grad:
                    other._accumulate(Tensor._unbroadcast(g, other.shape))
            out._backward = _bw
        return out

    def __mul__(self, other):
        other = Tensor._wrap(other, self.data.dtype)
        Tensor._check_broadcast(self.shape, other.shape)
        out = Tensor(self.data * other.data,
                     requires_grad=self._needs_graph(other),
                     _parents=(self, other) if self._needs_graph(other) else ())
        if out.requires_grad:
            def _bw(g):
                if self.requires_grad:
                    self._accumulate(Tensor._unbroadcast(g * other.data, self.shape))
                if other.requires_grad:
                    other._accumulate(Tensor._unbroadcast(g * self.data, other.shape))
            out._backward = _bw
        return out

    def __neg__(self):
        return self * (-1.0)

    def __sub__(self, other):
        other = Tensor._wrap(other, self.data.dtype)
        return self + (-other)

    def __rsub__(self, other):
        return Tensor._wrap(other, self.data.dtype) + (-self)

    def __truediv__(self, other):
        other = Tensor._wrap(other, self.data.dtype)
        return self * other.reciprocal()

    __radd__ = __add__
    __rmul__ = __mul__

    def reciprocal(self):
        out = Tensor(1.0 / self.data, requires_grad=self.requires_grad,
                     _parents=(self,) if self.requires_grad else ())
        if out.requires_grad:
            def _bw(g):
                self._accumulate(-g * out.data * out.data)
            out._backward = _bw
        return out

    # ------------------------------------------------------------------
    # unary math

    def _unary(self, value, dvalue):
        out = Tensor(value, requires_grad=self.requires_grad,
                     _parents=(self,) if self.requires_grad else ())
        if out.requires_grad:
            def _bw(g):
                self._accumulate(g * dvalue())
            out._backward = _bw
        return out

    def exp(self):
        v = np.exp(self.data)
        return self._unary(v, lambda: v)

    def log(self):
        return self._unary(np.log(self.data), lambda: 1.0 / self.data)

    def sqrt(self):
        v = np.sqrt(self.data)
        return self._unary(v, lambda: 0.5 / v)

    def square(self):
        return self._unary(self.data * self.data, lambda: 2.0 * self.data)

    def relu(self):
        return self._unary(np.maximum(self.data, 0), lambda: (self.data > 0).astype(self.data.dtype))

    def sigmoid(self):
        with np.errstate(over="ignore"):
            v = 1.0 / (1.0 + np.exp(-self.data))
        return self._unary(v, lambda: v * (1.0 - v))

    def clip_min(self, lo):
        """max(self, lo); gradient passes where self > lo."""
        return self._unary(np.maximum(self.data, lo), lambda: (self.data > lo).astype(self.data.dtype))

    # ------------------------------------------------------------------
    # reductions and shape ops

    def sum(self, axis=None, keepdims=False):
        out = Tensor(self.data.sum(axis=axis, keepdims=keepdims),
                     requires_grad=self.requires_grad,
                     _parents=(self,) if self.requires_grad else ())
        if out.requires_grad:
            def _bw(g):
                if axis is None:
                    self._accumulate(np.broadcast_to(g, self.shape))
                else:
                    gk = g if keepdims else np.expand_dims(g, axis)
                    self._accumulate(np.broadcast_to(gk, self.shape))
            out._backward = _bw
        return out

    def mean(self, axis=None, keepdims=False):
        n = self.data.size if axis is None else np.prod(
            [self.shape[a] for a in (axis if isinstance(axis, tuple) else (axis,))])
        return self.sum(axis=axis, keepdims=keepdims) * (1.0 / float(n))

    def reshape(self, *shape):
        if len(shape) == 1 and isinstance(shape[0], (tuple, list)):
            shape = tuple(shape[0])
        out = Tensor(self.data.reshape(shape), requires_grad=self.requires_grad,
                     _parents=(self,) if self.requires_grad else ())
        if out.requires_grad:
            def _bw(g):
                self._accumulate(g.reshape(self.shape))
            out._backward = _bw
        return out

    def broadcast_to(self, shape):
        """Expand size-1 axes up to ``shape``; gradient sums back over them."""
        shape = tuple(shape)
        Tensor._check_broadcast(self.shape, shape)
        for s, t in zip(self.shape, shape):
            if s != t and s != 1:
                raise ValueError(f"cannot broadcast axis {s} to {t}: {self.shape} -> {shape}")
        out = Tensor(np.broadcast_to(self.data, shape).copy(), requires_grad=self.requires_grad,
                     _parents=(self,) if self.requires_grad else ())
        if out.requires_grad:
            def _bw(g):
                self._accumulate(Tensor._unbroadcast(g, self.shape))
            out._backward = _bw
        return out


def as_tensor(x, dtype=np.float32, requires_grad=False):
    return Tensor(np.asarray(x, dtype=dtype), requires_grad=requires_grad)


def zeros(shape, dtype=np.float32, requires_grad=False):
    return Tensor(np.zeros(shape, dtype=dtype), requires_grad=requires_grad)


def ones(shape, dtype=np.float32, requires_grad=False):
    return Tensor(np.ones(shape, dtype=dtype), requires_grad=requires_grad)


def finite_diff_check(f, x, step=1e-3, skip_kinks=False, max_skip_fraction=0.1):
    """Max relative error between analytic and central-difference gradients.

    ``f`` must map a Tensor to a scalar Tensor deterministically. The
    check is run in float64 regardless of the input dtype.

    With ``skip_kinks`` a second-difference curvature probe excludes the
    coordinates where the +/-step interval crosses a piecewise-linear
    kink (ReLU zero, max-pool argmax switch) and central differences are
    invalid; deep ReLU networks always have a few such coordinates. A
    broken backward rule corrupts smooth coordinates too, so the check
    stays discriminating; it errors out if more than ``max_skip_fraction``
    of the coordinates would be excluded.
    """
    x64 = Tensor(x.data.astype(np.float64), requires_grad=True)
    out = f(x64)
    if out.data.size != 1:
        raise ValueError("finite_diff_check requires a scalar-valued function")
    out.backward()
    analytic = x64.grad.copy() if x64.grad is not None else np.zeros_like(x64.data)

    f0 = f(Tensor(x64.data)).item() if skip_kinks else 0.0
    numeric = np.zeros_like(x64.data)
    curvature = np.zeros_like(x64.data)
    flat = x64.data.reshape(-1)
    nflat = numeric.reshape(-1)
    cflat = curvature.reshape(-1)
    for i in range(flat.size):
        orig = flat[i]
        flat[i] = orig + step
        fp = f(Tensor(x64.data)).item()
        flat[i] = orig - step
        fm = f(Tensor(x64.data)).item()
        flat[i] = orig
        nflat[i] = (fp - fm) / (2.0 * step)
        if skip_kinks:
            cflat[i] = abs(fp + fm - 2.0 * f0) / (2.0 * step)

    denom = np.maximum(np.maximum(np.abs(analytic), np.abs(numeric)), 1e-8)
    diff = np.abs(analytic - numeric)
    rel = diff / denom
    if skip_kinks:
        # a kink crossing shows curvature of the same order as the
        # discrepancy it causes; a wrong backward rule does not
        kinked = (rel > 1e-4) & (curvature >= 0.5 * diff)
        if kinked.mean() > max_skip_fraction:
            raise FloatingPointError(
                f"{kinked.mean():.1%} of coordinates flagged as kink crossings; "
                "function too nonsmooth for a meaningful check")
        rel = rel[~kinked]
        if rel.size == 0:
            raise FloatingPointError("all coordinates flagged as kink crossings")
    return float(np.max(rel))
