"""Dense float64 tensors with reverse-mode autodiff, MLPs and Adam.

Every :class:`Tensor` records the tensors it was computed from and a closure
that pushes its gradient back to them.  :meth:`Tensor.backward` orders the
recorded DAG topologically and runs each closure exactly once.
"""
from __future__ import annotations

from dataclasses import dataclass, field
from typing import Callable, Sequence

import numpy as np

from .errors import ContractError, ShapeError, TrainingError, ValidationError

DTYPE = np.float64

_grad_enabled = True


class no_grad:
    """Context manager that stops graph recording (inference only)."""

    def __enter__(self):
        global _grad_enabled
        self._prev = _grad_enabled
        _grad_enabled = False

    def __exit__(self, *exc):
        global _grad_enabled
        _grad_enabled = self._prev
        return False


def _as_array(x) -> np.ndarray:
    return np.asarray(x, dtype=DTYPE)


def _unbroadcast(grad: np.ndarray, shape: tuple) -> np.ndarray:
    """Sum ``grad`` down to ``shape`` (reverse of numpy broadcasting)."""
    if grad.shape == shape:
        return grad
    extra = grad.ndim - len(shape)
    if extra > 0:
        grad = grad.sum(axis=tuple(range(extra)))
    axes = tuple(i for i, s in enumerate(shape) if s == 1 and grad.shape[i] != 1)
    if axes:
        grad = grad.sum(axis=axes, keepdims=True)
    return grad.reshape(shape)


class Tensor:
    __slots__ = ("data", "grad", "requires_grad", "_parents", "_backward", "op")
    # make ndarray <op> Tensor dispatch to the reflected Tensor method
    __array_ufunc__ = None

    def __init__(self, data, requires_grad: bool = False, _parents: tuple = (), op: str = ""):
        self.data = _as_array(data)
        if any(s <= 0 for s in self.data.shape):
            raise ShapeError(f"tensor dimensions must be positive, got {self.data.shape}")
        self.grad: np.ndarray | None = None
        self.requires_grad = _grad_enabled and (requires_grad or any(p.requires_grad for p in _parents))
        self._parents = _parents if self.requires_grad else ()
        self._backward: Callable[[np.ndarray], None] | None = None
        self.op = op

    # -- basics -----------------------------------------------------------
    @property
    def shape(self) -> tuple:
        return self.data.shape

    @property
    def ndim(self) -> int:
        return self.data.ndim

    def __len__(self) -> int:
        return len(self.data)

    def __repr__(self) -> str:
        return f"Tensor(shape={self.shape}, op={self.op or 'leaf'})"

    def numpy(self) -> np.ndarray:
        return self.data

    def item(self) -> float:
        return float(np.asarray(self.data).item())

    def detach(self) -> "Tensor":
        return Tensor(self.data)

    def zero_grad(self) -> None:
        self.grad = None

    def _accumulate(self, g: np.ndarray) -> None:
        if not self.requires_grad:
            return
        if self.grad is None:
            self.grad = np.array(g, dtype=DTYPE, copy=True)
        else:
            self.grad += g

    @staticmethod
    def _make(data, parents: tuple, op: str, backward) -> "Tensor":
        out = Tensor(data, _parents=parents, op=op)
        if out.requires_grad:
            out._backward = backward
        return out

    # -- graph traversal --------------------------------------------------
    def topo_order(self) -> list["Tensor"]:
        order: list[Tensor] = []
        visited: set[int] = set()
        stack: list[tuple[Tensor, bool]] = [(self, False)]
        while stack:
            node, expanded = stack.pop()
            if expanded:
                order.append(node)
                continue
            if id(node) in visited:
                continue
            visited.add(id(node))
            stack.append((node, True))
            for p in reversed(node._parents):
                if id(p) not in visited:
                    stack.append((p, False))
        return order

    def backward(self, seed: np.ndarray | None = None) -> None:
        """Accumulate d(self)/d(leaf) into ``leaf.grad`` for every leaf.

        Without ``seed`` the tensor must hold exactly one element.
        """
        if seed is None:
            if self.data.size != 1:
                raise ContractError(f"backward needs a scalar output, got shape {self.shape}")
            seed = np.ones_like(self.data)
        order = self.topo_order()
        grads: dict[int, np.ndarray] = {id(self): _as_array(seed)}
        for node in reversed(order):
            g = grads.pop(id(node), None)
            if g is None:
                continue
            if node._backward is None:
                node._accumulate(g)
                continue
            for parent, pg in node._backward(g):
                if pg is None or not parent.requires_grad:
                    continue
                key = id(parent)
                if key in grads:
                    grads[key] = grads[key] + pg
                else:
                    grads[key] = pg

    # -- elementwise arithmetic --------------------------------------------
    def __add__(self, other) -> "Tensor":
        other = ensure_tensor(other)
        a, b = self, other

        def bw(g):
            return ((a, _unbroadcast(g, a.shape)), (b, _unbroadcast(g, b.shape)))

        return Tensor._make(a.data + b.data, (a, b), "add", bw)

    __radd__ = __add__

    def __neg__(self) -> "Tensor":
        a = self
        return Tensor._make(-a.data, (a,), "neg", lambda g: ((a, -g),))

    def __sub__(self, other) -> "Tensor":
        other = ensure_tensor(other)
        a, b = self, other

        def bw(g):
            return ((a, _unbroadcast(g, a.shape)), (b, _unbroadcast(-g, b.shape)))

        return Tensor._make(a.data - b.data, (a, b), "sub", bw)

    def __rsub__(self, other) -> "Tensor":
        return ensure_tensor(other) - self

    def __mul__(self, other) -> "Tensor":
        other = ensure_tensor(other)
        a, b = self, other

        def bw(g):
            return (
                (a, _unbroadcast(g * b.data, a.shape) if a.requires_grad else None),
                (b, _unbroadcast(g * a.data, b.shape) if b.requires_grad else None),
            )

        return Tensor._make(a.data * b.data, (a, b), "mul", bw)

    __rmul__ = __mul__

    def __truediv__(self, other) -> "Tensor":
        other = ensure_tensor(other)
        a, b = self, other

        def bw(g):
            return (
                (a, _unbroadcast(g / b.data, a.shape) if a.requires_grad else None),
                (b, _unbroadcast(-g * a.data / (b.data * b.data), b.shape) if b.requires_grad else None),
            )

        return Tensor._make(a.data / b.data, (a, b), "div", bw)

    def __rtruediv__(self, other) -> "Tensor":
        return ensure_tensor(other) / self

    def __pow__(self, exponent: float) -> "Tensor":
        if isinstance(exponent, Tensor):
            raise TypeError("only constant exponents are supported")
        a, p = self, float(exponent)

        def bw(g):
            return ((a, g * p * a.data ** (p - 1.0)),)

        return Tensor._make(a.data**p, (a,), "pow", bw)

    def __matmul__(self, other) -> "Tensor":
        return matmul(self, other)

    def __getitem__(self, idx) -> "Tensor":
        a = self

        def bw(g):
            full = np.zeros_like(a.data)
            if _is_fancy(idx):
                np.add.at(full, idx, g)
            else:
                full[idx] += g
            return ((a, full),)

        return Tensor._make(a.data[idx], (a,), "index", bw)

    # -- unary ------------------------------------------------------------
    def exp(self) -> "Tensor":
        a = self
        out_data = np.exp(a.data)
        return Tensor._make(out_data, (a,), "exp", lambda g: ((a, g * out_data),))

    def log(self) -> "Tensor":
        a = self
        return Tensor._make(np.log(a.data), (a,), "log", lambda g: ((a, g / a.data),))

    def abs(self) -> "Tensor":
        a = self
        return Tensor._make(np.abs(a.data), (a,), "abs", lambda g: ((a, g * np.sign(a.data)),))

    def square(self) -> "Tensor":
        a = self
        return Tensor._make(a.data * a.data, (a,), "square", lambda g: ((a, 2.0 * g * a.data),))

    def clip(self, lo: float, hi: float) -> "Tensor":
        """Clamp values; the gradient is zero where clamping is active."""
        a = self
        inside = (a.data >= lo) & (a.data <= hi)
        return Tensor._make(np.clip(a.data, lo, hi), (a,), "clip", lambda g: ((a, g * inside),))

    def leaky_relu(self, slope: float = 0.2) -> "Tensor":
        return leaky_relu(self, slope)

    # -- reductions and reshaping -----------------------------------------
    def sum(self, axis=None, keepdims: bool = False) -> "Tensor":
        a = self

        def bw(g):
            if axis is not None and not keepdims:
                g = np.expand_dims(g, axis)
            return ((a, np.broadcast_to(g, a.shape)),)

        return Tensor._make(a.data.sum(axis=axis, keepdims=keepdims), (a,), "sum", bw)

    def mean(self, axis=None, keepdims: bool = False) -> "Tensor":
        n = self.data.size if axis is None else np.prod([self.shape[i] for i in np.atleast_1d(axis)])
        return self.sum(axis=axis, keepdims=keepdims) * (1.0 / float(n))

    def reshape(self, *shape) -> "Tensor":
        if len(shape) == 1 and isinstance(shape[0], (tuple, list)):
            shape = tuple(shape[0])
        a = self
        return Tensor._make(a.data.reshape(shape), (a,), "reshape", lambda g: ((a, g.reshape(a.shape)),))

    def transpose(self, *axes) -> "Tensor":
        if len(axes) == 1 and isinstance(axes[0], (tuple, list)):
            axes = tuple(axes[0])
        axes = axes or tuple(reversed(range(self.ndim)))
        inverse = tuple(np.argsort(axes))
        a = self
        return Tensor._make(a.data.transpose(axes), (a,), "transpose", lambda g: ((a, g.transpose(inverse)),))

    @property
    def T(self) -> "Tensor":
        return self.transpose()


def _is_fancy(idx) -> bool:
    items = idx if isinstance(idx, tuple) else (idx,)
    return any(isinstance(i, (list, np.ndarray)) for i in items)


def ensure_tensor(x) -> Tensor:
    return x if isinstance(x, Tensor) else Tensor(x)


def parameter(data) -> Tensor:
    return Tensor(np.array(data, dtype=DTYPE, copy=True), requires_grad=True)


# -- free functions -----------------------------------------------------------

def leaky_relu(x: Tensor, slope: float = 0.2) -> Tensor:
    """``max(x, slope*x)``; at exactly 0 the subgradient is ``slope``."""
    if not 0.0 < slope < 1.0:
        raise ValidationError(f"slope must lie in (0, 1), got {slope}")
    x = ensure_tensor(x)
    factor = np.where(x.data > 0.0, 1.0, slope)
    return Tensor._make(x.data * factor, (x,), "leaky_relu", lambda g: ((x, g * factor),))


def matmul(a: Tensor, b: Tensor) -> Tensor:
    """``a @ b`` where ``b`` is 2-D and ``a`` has any leading batch dims,
    or both are 3-D stacks sharing their leading dimension."""
    a, b = ensure_tensor(a), ensure_tensor(b)
    if b.ndim == 3:
        return _bmm(a, b)
    if b.ndim != 2 or a.shape[-1] != b.shape[0]:
        raise ShapeError(f"cannot multiply {a.shape} by {b.shape}")

    def bw(g):
        ga = g @ b.data.T if a.requires_grad else None
        gb = None
        if b.requires_grad:
            gb = a.data.reshape(-1, a.shape[-1]).T @ g.reshape(-1, g.shape[-1])
        return ((a, ga), (b, gb))

    return Tensor._make(a.data @ b.data, (a, b), "matmul", bw)


def _bmm(a: Tensor, b: Tensor) -> Tensor:
    if a.ndim != 3 or a.shape[0] != b.shape[0] or a.shape[2] != b.shape[1]:
        raise ShapeError(f"cannot batch-multiply {a.shape} by {b.shape}")

    def bw(g):
        ga = g @ b.data.transpose(0, 2, 1) if a.requires_grad else None
        gb = a.data.transpose(0, 2, 1) @ g if b.requires_grad else None
        return ((a, ga), (b, gb))

    return Tensor._make(a.data @ b.data, (a, b), "bmm", bw)


def concat(tensors: Sequence[Tensor], axis: int = -1) -> Tensor:
    tensors = [ensure_tensor(t) for t in tensors]
    data = np.concatenate([t.data for t in tensors], axis=axis)
    ax = axis % data.ndim
    bounds = np.cumsum([0] + [t.shape[ax] for t in tensors])

    def bw(g):
        out = []
        for t, lo, hi in zip(tensors, bounds[:-1], bounds[1:]):
            sl = [slice(None)] * g.ndim
            sl[ax] = slice(lo, hi)
            out.append((t, g[tuple(sl)]))
        return tuple(out)

    return Tensor._make(data, tuple(tensors), "concat", bw)


def stack(tensors: Sequence[Tensor], axis: int = 0) -> Tensor:
    tensors = [ensure_tensor(t) for t in tensors]
    data = np.stack([t.data for t in tensors], axis=axis)

    def bw(g):
        return tuple((t, np.take(g, i, axis=axis)) for i, t in enumerate(tensors))

    return Tensor._make(data, tuple(tensors), "stack", bw)


def where(cond: np.ndarray, a, b) -> Tensor:
    """Select from ``a`` where the constant boolean ``cond`` holds, else ``b``."""
    a, b = ensure_tensor(a), ensure_tensor(b)
    cond = np.asarray(cond, dtype=bool)

    def bw(g):
        return ((a, _unbroadcast(np.where(cond, g, 0.0), a.shape)),
                (b, _unbroadcast(np.where(cond, 0.0, g), b.shape)))

    return Tensor._make(np.where(cond, a.data, b.data), (a, b), "where", bw)


def conv1d(x: Tensor, w: Tensor, b: Tensor | None = None, padding: str = "same") -> Tensor:
    """1-D convolution over the time axis.

    x: (batch, T, c_in); w: (kernel, c_in, c_out); b: (c_out,).
    ``padding="same"`` centres the kernel (odd kernel sizes only);
    ``padding="causal"`` pads on the left so output t sees inputs <= t.
    """
    x, w = ensure_tensor(x), ensure_tensor(w)
    if x.ndim != 3 or w.ndim != 3 or x.shape[2] != w.shape[1]:
        raise ShapeError(f"conv1d got input {x.shape} and kernel {w.shape}")
    k = w.shape[0]
    if padding == "same":
        if k % 2 == 0:
            raise ShapeError("same padding needs an odd kernel size")
        left, right = (k - 1) // 2, (k - 1) // 2
    elif padding == "causal":
        left, right = k - 1, 0
    else:
        raise ValidationError(f"unknown padding {padding!r}")
    bsz, t_len, c_in = x.shape
    c_out = w.shape[2]
    xp = np.pad(x.data, ((0, 0), (left, right), (0, 0)))
    cols = np.stack([xp[:, j:j + t_len, :] for j in range(k)], axis=2)  # (B, T, K, C_in)
    flat = cols.reshape(bsz * t_len, k * c_in)
    out = (flat @ w.data.reshape(k * c_in, c_out)).reshape(bsz, t_len, c_out)
    parents = (x, w)
    if b is not None:
        b = ensure_tensor(b)
        out = out + b.data
        parents = (x, w, b)

    def bw(g):
        g2 = g.reshape(bsz * t_len, c_out)
        gw = (flat.T @ g2).reshape(w.shape) if w.requires_grad else None
        gx = None
        if x.requires_grad:
            gcols = (g2 @ w.data.reshape(k * c_in, c_out).T).reshape(bsz, t_len, k, c_in)
            gxp = np.zeros_like(xp)
            for j in range(k):
                gxp[:, j:j + t_len, :] += gcols[:, :, j, :]
            gx = gxp[:, left:left + t_len, :]
        res = [(x, gx), (w, gw)]
        if b is not None:
            res.append((b, g2.sum(axis=0)))
        return tuple(res)

    return Tensor._make(out, parents, "conv1d", bw)


def gaussian_logpdf(x: Tensor) -> Tensor:
    """Elementwise standard-normal log density."""
    return x.square() * -0.5 - 0.5 * np.log(2.0 * np.pi)


# -- feed-forward networks --------------------------------------------------

def init_linear(rng: np.random.Generator, fan_in: int, fan_out: int) -> tuple[Tensor, Tensor]:
    bound = 1.0 / np.sqrt(fan_in)
    w = rng.uniform(-bound, bound, size=(fan_in, fan_out))
    b = rng.uniform(-bound, bound, size=(fan_out,))
    return parameter(w), parameter(b)


@dataclass
class MlpParams:
    """Weights of a fully connected net; hidden layers use leaky-ReLU."""

    layers: list[tuple[Tensor, Tensor]]
    slope: float = 0.2

    def __post_init__(self):
        if not 0.0 < self.slope < 1.0:
            raise ValidationError(f"slope must lie in (0, 1), got {self.slope}")
        if not self.layers:
            raise ShapeError("an MLP needs at least one layer")
        for k, (w, b) in enumerate(self.layers):
            if w.ndim != 2 or b.shape != (w.shape[1],):
                raise ShapeError(f"layer {k}: weight {w.shape} and bias {b.shape} disagree")
            if k > 0 and self.layers[k - 1][0].shape[1] != w.shape[0]:
                raise ShapeError(
                    f"layer {k}: expects {w.shape[0]} inputs but layer {k - 1} "
                    f"produces {self.layers[k - 1][0].shape[1]}"
                )

    @classmethod
    def init(cls, rng: np.random.Generator, widths: Sequence[int], slope: float = 0.2) -> "MlpParams":
        if len(widths) < 2:
            raise ShapeError("widths must list at least input and output sizes")
        layers = [init_linear(rng, widths[i], widths[i + 1]) for i in range(len(widths) - 1)]
        return cls(layers, slope)

    @property
    def in_dim(self) -> int:
        return self.layers[0][0].shape[0]

    @property
    def out_dim(self) -> int:
        return self.layers[-1][0].shape[1]

    def parameters(self) -> list[Tensor]:
        return [p for layer in self.layers for p in layer]


def mlp_forward(params: MlpParams, x) -> Tensor:
    x = ensure_tensor(x)
    if x.shape[-1] != params.in_dim:
        raise ShapeError(f"layer 0 expects {params.in_dim} inputs, got last dim {x.shape[-1]}")
    h = x
    last = len(params.layers) - 1
    for k, (w, b) in enumerate(params.layers):
        h = matmul(h, w) + b
        if k < last:
            h = leaky_relu(h, params.slope)
    return h


def mlp_forward_np(params: MlpParams, x: np.ndarray) -> np.ndarray:
    """Graph-free forward pass, for inference and data generation."""
    h = np.asarray(x, dtype=DTYPE)
    last = len(params.layers) - 1
    for k, (w, b) in enumerate(params.layers):
        h = h @ w.data + b.data
        if k < last:
            h = np.where(h > 0.0, h, params.slope * h)
    return h


def _apply_layers(layers, slope: float, x: Tensor, j: int | None):
    """Shared forward (and optional input-``j`` tangent) for plain and stacked MLPs."""
    h = x
    tangent = None
    last = len(layers) - 1
    for k, (w, b) in enumerate(layers):
        a = matmul(h, w) + b
        if j is not None:
            if tangent is None:
                tangent = w[j] if w.ndim == 2 else w[:, j:j + 1, :]
            else:
                tangent = matmul(tangent, w)
        if k < last:
            factor = np.where(a.data > 0.0, 1.0, slope)
            h = Tensor._make(a.data * factor, (a,), "leaky_relu", lambda g, a=a, f=factor: ((a, g * f),))
            if j is not None:
                tangent = tangent * factor
        else:
            h = a
    if j is not None and tangent.shape != h.shape:
        tangent = tangent + np.zeros(h.shape)
    return h, tangent


def mlp_jvp(params: MlpParams, x, j: int) -> tuple[Tensor, Tensor]:
    """Forward pass plus the derivative of every output w.r.t. input ``j``.

    The derivative is propagated as a tangent inside the graph, so it stays
    differentiable w.r.t. the weights (leaky-ReLU slopes are piecewise
    constant, hence contribute no second-order terms).
    """
    x = ensure_tensor(x)
    if x.shape[-1] != params.in_dim:
        raise ShapeError(f"layer 0 expects {params.in_dim} inputs, got last dim {x.shape[-1]}")
    if not 0 <= j < params.in_dim:
        raise IndexError(f"input index {j} out of range for {params.in_dim} inputs")
    return _apply_layers(params.layers, params.slope, x, j)


@dataclass
class MlpStack:
    """``k`` independent MLPs with identical widths, evaluated in one batched
    pass.  Weights are (k, in, out) and biases (k, 1, out)."""

    layers: list[tuple[Tensor, Tensor]]
    slope: float = 0.2

    def __post_init__(self):
        if not self.layers:
            raise ShapeError("an MLP stack needs at least one layer")
        k = self.layers[0][0].shape[0]
        for idx, (w, b) in enumerate(self.layers):
            if w.ndim != 3 or w.shape[0] != k or b.shape != (k, 1, w.shape[2]):
                raise ShapeError(f"stack layer {idx}: weight {w.shape} and bias {b.shape} disagree")
            if idx > 0 and self.layers[idx - 1][0].shape[2] != w.shape[1]:
                raise ShapeError(f"stack layer {idx}: input size does not chain with layer {idx - 1}")

    @classmethod
    def init(cls, rng: np.random.Generator, k: int, widths: Sequence[int], slope: float = 0.2) -> "MlpStack":
        members = [MlpParams.init(rng, widths, slope) for _ in range(k)]
        return cls.from_members(members)

    @classmethod
    def from_members(cls, members: Sequence[MlpParams]) -> "MlpStack":
        layers = []
        for idx in range(len(members[0].layers)):
            w = np.stack([m.layers[idx][0].data for m in members])
            b = np.stack([m.layers[idx][1].data[None, :] for m in members])
            layers.append((parameter(w), parameter(b)))
        return cls(layers, members[0].slope)

    def __len__(self) -> int:
        return self.layers[0][0].shape[0]

    @property
    def in_dim(self) -> int:
        return self.layers[0][0].shape[1]

    def member(self, i: int) -> MlpParams:
        """Copy of the ``i``-th network as a standalone :class:`MlpParams`."""
        return MlpParams([(parameter(w.data[i]), parameter(b.data[i, 0])) for w, b in self.layers], self.slope)

    def parameters(self) -> list[Tensor]:
        return [p for layer in self.layers for p in layer]

    def forward(self, x) -> Tensor:
        x = ensure_tensor(x)
        return _apply_layers(self.layers, self.slope, x, None)[0]

    def forward_jvp(self, x, j: int) -> tuple[Tensor, Tensor]:
        """x: (k, rows, in).  Returns outputs and d(output)/d(input j), both (k, rows, out)."""
        x = ensure_tensor(x)
        if x.ndim != 3 or x.shape[0] != len(self) or x.shape[2] != self.in_dim:
            raise ShapeError(f"stack expects ({len(self)}, rows, {self.in_dim}), got {x.shape}")
        if not 0 <= j < self.in_dim:
            raise IndexError(f"input index {j} out of range for {self.in_dim} inputs")
        return _apply_layers(self.layers, self.slope, x, j)


def partial_scalar(f: Callable[[Tensor], Tensor], x, i: int, j: int) -> np.ndarray | float:
    """d f_i / d x_j at ``x`` via one reverse pass seeded on output ``i``.

    ``x`` is a vector or a batch of row vectors; rows must be processed
    independently by ``f`` for the batched result to be meaningful.
    """
    xt = Tensor(np.array(x, dtype=DTYPE, copy=True), requires_grad=True)
    if not 0 <= j < xt.shape[-1]:
        raise IndexError(f"input index {j} out of range for dimension {xt.shape[-1]}")
    y = f(xt)
    if not 0 <= i < y.shape[-1]:
        raise IndexError(f"output index {i} out of range for dimension {y.shape[-1]}")
    y[..., i].sum().backward()
    if xt.grad is None:
        return np.zeros(xt.shape[:-1]) if xt.ndim > 1 else 0.0
    d = xt.grad[..., j]
    return float(d) if d.ndim == 0 else d


# -- optimisation -------------------------------------------------------------

@dataclass
class AdamState:
    lr: float = 1e-3
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8
    step: int = 0
    m: list[np.ndarray] = field(default_factory=list)
    v: list[np.ndarray] = field(default_factory=list)

    @classmethod
    def for_params(cls, params: Sequence[Tensor], lr: float = 1e-3, **kw) -> "AdamState":
        return cls(lr=lr, m=[np.zeros_like(p.data) for p in params],
                   v=[np.zeros_like(p.data) for p in params], **kw)


def adam_step(state: AdamState, params: Sequence[Tensor], grads: Sequence[np.ndarray | None]) -> AdamState:
    """One bias-corrected Adam update, applied to ``params`` in place."""
    if len(params) != len(state.m) or len(grads) != len(params):
        raise ShapeError("params, grads and optimizer state disagree in length")
    for k, g in enumerate(grads):
        if g is not None and not np.all(np.isfinite(g)):
            raise TrainingError(f"non-finite gradient for parameter {k} at step {state.step + 1}")
    state.step += 1
    t = state.step
    c1 = 1.0 - state.beta1**t
    c2 = 1.0 - state.beta2**t
    for p, g, m, v in zip(params, grads, state.m, state.v):
        if g is None:
            g = np.zeros_like(p.data)
        if g.shape != p.shape:
            raise ShapeError(f"gradient shape {g.shape} does not match parameter {p.shape}")
        m *= state.beta1
        m += (1.0 - state.beta1) * g
        v *= state.beta2
        v += (1.0 - state.beta2) * g * g
        p.data -= state.lr * (m / c1) / (np.sqrt(v / c2) + state.eps)
    return state
