"""Dense float64 tensors with tape-free reverse-mode differentiation.

Every op returns a new immutable :class:`Tensor` that remembers its parents
and a closure mapping the upstream gradient to per-parent contributions.
Gradients are never stored on tensors; :func:`backward` returns a fresh
mapping from parameter name to gradient, so several losses can be
differentiated through the same recorded forward pass.
"""

from __future__ import annotations

import math
from typing import Callable, Iterable, Mapping, Sequence

import numpy as np
from scipy.special import ndtr

_INV_SQRT_2PI = 1.0 / math.sqrt(2.0 * math.pi)


class NonFiniteError(ValueError):
    """A tensor value or probe evaluation contained NaN or Inf."""


class Tensor:
    """Immutable n-d float64 array, optionally a node of a differentiable graph.

    ``name`` marks a trainable parameter: after :func:`backward` it keys the
    gradient entry. Tensors with ``requires_grad=False`` are constants (frozen
    parameters, inputs) and never receive entries.
    """

    __slots__ = ("data", "requires_grad", "name", "_parents", "_backward")

    def __init__(
        self,
        data,
        requires_grad: bool = False,
        name: str | None = None,
        _parents: tuple["Tensor", ...] = (),
        _backward: Callable[[np.ndarray], tuple] | None = None,
    ):
        self._set(np.array(data, dtype=np.float64), requires_grad, name, _parents, _backward)

    def _set(self, arr, requires_grad, name, parents, backward_fn):
        if not np.isfinite(arr).all():
            raise NonFiniteError(f"non-finite value in tensor {name or ''}".rstrip())
        arr.flags.writeable = False
        self.data = arr
        self.requires_grad = requires_grad
        self.name = name
        self._parents = parents
        self._backward = backward_fn

    @classmethod
    def _wrap(cls, arr: np.ndarray, parents=(), backward_fn=None) -> "Tensor":
        """Adopt a freshly computed array without copying it."""
        t = cls.__new__(cls)
        arr = np.asarray(arr, dtype=np.float64)
        t._set(arr, bool(parents), None, parents, backward_fn)
        return t

    @property
    def shape(self) -> tuple[int, ...]:
        return self.data.shape

    @property
    def size(self) -> int:
        return self.data.size

    def item(self) -> float:
        return float(self.data)

    def numpy(self) -> np.ndarray:
        return self.data

    def __repr__(self) -> str:
        tag = f", name={self.name!r}" if self.name else ""
        return f"Tensor(shape={self.shape}{tag}, requires_grad={self.requires_grad})"

    def __add__(self, other):
        return add(self, _lift(other, self.shape))

    __radd__ = __add__

    def __sub__(self, other):
        return sub(self, _lift(other, self.shape))

    def __rsub__(self, other):
        return sub(_lift(other, self.shape), self)

    def __mul__(self, other):
        if isinstance(other, (int, float)):
            return scale(self, float(other))
        return mul(self, other)

    __rmul__ = __mul__

    def __truediv__(self, other):
        return div(self, other)

    def __matmul__(self, other):
        return matmul(self, other)

    def __neg__(self):
        return scale(self, -1.0)


def _lift(value, shape) -> Tensor:
    if isinstance(value, Tensor):
        return value
    return Tensor(np.full(shape, float(value)))


def _node(data: np.ndarray, parents: Sequence[Tensor], fn) -> Tensor:
    for p in parents:
        if p.requires_grad:
            return Tensor._wrap(data, tuple(parents), fn)
    return Tensor._wrap(data)


def _same_shape(a: Tensor, b: Tensor, op: str) -> None:
    if a.shape != b.shape:
        raise ValueError(f"{op}: shape mismatch {a.shape} vs {b.shape}")


# ---------------------------------------------------------------- elementwise


def add(a: Tensor, b: Tensor) -> Tensor:
    _same_shape(a, b, "add")
    return _node(a.data + b.data, (a, b), lambda g: (g, g))


def sub(a: Tensor, b: Tensor) -> Tensor:
    _same_shape(a, b, "sub")
    return _node(a.data - b.data, (a, b), lambda g: (g, -g))


def mul(a: Tensor, b: Tensor) -> Tensor:
    """Elementwise product; a 0-d operand scales the other."""
    if a.data.ndim == 0 and b.data.ndim > 0:
        return _scalar_mul(a, b)
    if b.data.ndim == 0 and a.data.ndim > 0:
        return _scalar_mul(b, a)
    _same_shape(a, b, "mul")
    ad, bd = a.data, b.data
    return _node(ad * bd, (a, b), lambda g: (g * bd, g * ad))


def _scalar_mul(s: Tensor, x: Tensor) -> Tensor:
    sd, xd = s.data, x.data
    return _node(sd * xd, (s, x), lambda g: (np.sum(g * xd), g * sd))


def div(a: Tensor, b: Tensor) -> Tensor:
    """Quotient of two 0-d tensors (the only division the losses need)."""
    if a.data.ndim or b.data.ndim:
        raise ValueError("div: only 0-d operands are supported")
    ad, bd = float(a.data), float(b.data)
    if bd == 0.0:
        raise ZeroDivisionError("div: zero denominator")
    return _node(np.array(ad / bd), (a, b), lambda g: (g / bd, -g * ad / (bd * bd)))


def scale(x: Tensor, c: float) -> Tensor:
    return _node(x.data * c, (x,), lambda g: (g * c,))


def add_bias(x: Tensor, b: Tensor) -> Tensor:
    """Add a length-d vector to every row of an n x d matrix."""
    if x.data.ndim != 2 or b.shape != (x.shape[1],):
        raise ValueError(f"add_bias: cannot add {b.shape} to rows of {x.shape}")
    return _node(x.data + b.data, (x, b), lambda g: (g, g.sum(axis=0)))


def gelu_value(z: np.ndarray) -> np.ndarray:
    return z * ndtr(z)


def gelu_grad(z: np.ndarray) -> np.ndarray:
    return ndtr(z) + z * np.exp(-0.5 * z * z) * _INV_SQRT_2PI


def gelu(z: Tensor) -> Tensor:
    """Exact GeLU, z * Phi(z)."""
    zd = z.data
    return _node(gelu_value(zd), (z,), lambda g: (g * gelu_grad(zd),))


def gelu_derivative(z: Tensor) -> Tensor:
    """Phi(z) + z * phi(z), as a constant tensor."""
    return Tensor(gelu_grad(z.data))


def _sigmoid(z: np.ndarray) -> np.ndarray:
    out = np.empty_like(z)
    pos = z >= 0
    out[pos] = 1.0 / (1.0 + np.exp(-z[pos]))
    ez = np.exp(z[~pos])
    out[~pos] = ez / (1.0 + ez)
    return out


def sigmoid(z: Tensor) -> Tensor:
    s = _sigmoid(z.data)
    return _node(s, (z,), lambda g: (g * s * (1.0 - s),))


def bce_with_logits(logits: Tensor, target: np.ndarray) -> Tensor:
    """Per-element binary cross-entropy of sigmoid(logits) against ``target``.

    Written as max(x, 0) - x*t + log1p(exp(-|x|)) so large logits never hit log(0).
    """
    x = logits.data
    t = np.asarray(target, dtype=np.float64)
    if t.shape != x.shape:
        raise ValueError(f"bce_with_logits: shape mismatch {x.shape} vs {t.shape}")
    val = np.maximum(x, 0.0) - x * t + np.log1p(np.exp(-np.abs(x)))
    s = _sigmoid(x)
    return _node(val, (logits,), lambda g: (g * (s - t),))


# ----------------------------------------------------------------- reductions


def total(x: Tensor) -> Tensor:
    """Sum of all entries as a 0-d tensor."""
    shape = x.shape
    return _node(np.array(x.data.sum()), (x,), lambda g: (np.full(shape, float(g)),))


def mean_rows(x: Tensor) -> Tensor:
    """Column means of an n x d matrix, shape (d,)."""
    if x.data.ndim != 2:
        raise ValueError("mean_rows: expected a matrix")
    n = x.shape[0]
    return _node(x.data.mean(axis=0), (x,), lambda g: (np.broadcast_to(g / n, x.shape).copy(),))


def index(v: Tensor, i: int) -> Tensor:
    """Entry ``i`` of a vector as a 0-d tensor."""
    shape = v.shape

    def back(g):
        out = np.zeros(shape)
        out[i] = g
        return (out,)

    return _node(np.array(v.data[i]), (v,), back)


def softmax(v: Tensor) -> Tensor:
    if v.data.ndim != 1:
        raise ValueError("softmax: expected a vector")
    e = np.exp(v.data - v.data.max())
    s = e / e.sum()
    return _node(s, (v,), lambda g: (s * (g - np.dot(g, s)),))


# --------------------------------------------------------------------- linear


def matmul(a: Tensor, b: Tensor) -> Tensor:
    """Matrix-matrix (n x k @ k x m) or matrix-vector (n x k @ k) product."""
    ad, bd = a.data, b.data
    if ad.ndim != 2 or bd.ndim not in (1, 2) or ad.shape[1] != bd.shape[0]:
        raise ValueError(f"matmul: incompatible shapes {ad.shape} @ {bd.shape}")
    if bd.ndim == 1:
        return _node(ad @ bd, (a, b), lambda g: (np.outer(g, bd), ad.T @ g))
    return _node(ad @ bd, (a, b), lambda g: (g @ bd.T, ad.T @ g))


def topk_mask_array(v: np.ndarray, k: int, largest: bool) -> np.ndarray:
    """Boolean keep-mask selecting ``k`` entries per row; ties go to the lower index."""
    if v.ndim != 2:
        raise ValueError("topk: expected a tokens x channels matrix")
    n, c = v.shape
    if not 0 <= k <= c:
        raise ValueError(f"topk: k={k} out of range [0, {c}]")
    keys = -v if largest else v
    order = np.argsort(keys, axis=1, kind="stable")[:, :k]
    mask = np.zeros((n, c), dtype=bool)
    np.put_along_axis(mask, order, True, axis=1)
    return mask


def apply_mask(x: Tensor, mask: np.ndarray) -> Tensor:
    """Zero entries outside ``mask``; the mask is a constant under differentiation."""
    m = mask.astype(np.float64)
    return _node(x.data * m, (x,), lambda g: (g * m,))


def topk(x: Tensor, k: int, largest: bool = True) -> Tensor:
    return apply_mask(x, topk_mask_array(x.data, k, largest))


# ---------------------------------------------------------- image <-> tokens


def patchify_array(img: np.ndarray, p: int) -> np.ndarray:
    """H x W image to (H/p * W/p) x (p*p) tokens, row-major over patches."""
    h, w = img.shape
    if h % p or w % p:
        raise ValueError(f"image {h}x{w} is not divisible into {p}x{p} patches")
    return img.reshape(h // p, p, w // p, p).transpose(0, 2, 1, 3).reshape(-1, p * p)


def unpatchify_array(tokens: np.ndarray, h: int, w: int, p: int) -> np.ndarray:
    return tokens.reshape(h // p, w // p, p, p).transpose(0, 2, 1, 3).reshape(h, w)


def unpatchify(tokens: Tensor, h: int, w: int, p: int) -> Tensor:
    if tokens.shape != ((h // p) * (w // p), p * p):
        raise ValueError(f"unpatchify: {tokens.shape} does not tile a {h}x{w} image")
    return _node(
        unpatchify_array(tokens.data, h, w, p), (tokens,), lambda g: (patchify_array(g, p),)
    )


# ------------------------------------------------------------------- backward


def backward(loss: Tensor) -> dict[str, np.ndarray]:
    """Gradients of a 0-d ``loss`` for every named trainable tensor it touches.

    Unnamed intermediate nodes are not reported. A named parameter reached only
    through paths that contribute nothing still gets an (all-zero) entry.
    """
    if loss.data.ndim != 0:
        raise ValueError(f"backward: loss must be a scalar, got shape {loss.shape}")
    if not loss.requires_grad:
        return {}

    order: list[Tensor] = []
    seen: set[int] = set()
    stack: list[tuple[Tensor, bool]] = [(loss, False)]
    while stack:
        node, expanded = stack.pop()
        if expanded:
            order.append(node)
            continue
        if id(node) in seen:
            continue
        seen.add(id(node))
        stack.append((node, True))
        for parent in node._parents:
            if parent.requires_grad and id(parent) not in seen:
                stack.append((parent, False))

    grads: dict[int, np.ndarray] = {id(loss): np.array(1.0)}
    out: dict[str, np.ndarray] = {}
    for node in reversed(order):
        g = grads.pop(id(node), None)
        if g is None:
            g = np.zeros(node.shape)
        if node.name is not None:
            if node.name in out:
                raise ValueError(f"backward: parameter name {node.name!r} used by two tensors")
            out[node.name] = np.asarray(g, dtype=np.float64).reshape(node.shape)
        if node._backward is None:
            continue
        for parent, pg in zip(node._parents, node._backward(g)):
            if not parent.requires_grad:
                continue
            key = id(parent)
            grads[key] = grads[key] + pg if key in grads else pg
    return out


def finite_diff_gradient(
    f: Callable[[Mapping[str, np.ndarray]], float],
    params: Mapping[str, np.ndarray],
    eps: float = 1e-5,
    names: Iterable[str] | None = None,
) -> dict[str, np.ndarray]:
    """Central-difference gradient of a scalar function of named arrays.

    ``f`` receives a dict of arrays (perturbed copies) and returns a float.
    """
    if not eps > 0:
        raise ValueError("eps must be positive")
    work = {k: np.array(v, dtype=np.float64) for k, v in params.items()}
    out: dict[str, np.ndarray] = {}
    for name in names if names is not None else list(work):
        arr = work[name]
        grad = np.zeros_like(arr)
        flat, gflat = arr.reshape(-1), grad.reshape(-1)
        for i in range(flat.size):
            orig = flat[i]
            flat[i] = orig + eps
            fp = f(work)
            flat[i] = orig - eps
            fm = f(work)
            flat[i] = orig
            if not (math.isfinite(fp) and math.isfinite(fm)):
                raise NonFiniteError(f"non-finite probe at {name}[{i}]")
            gflat[i] = (fp - fm) / (2.0 * eps)
        out[name] = grad
    return out
