"""Dense float64 tensors with tape-based reverse-mode differentiation.

Operations record themselves on the innermost active :class:`Tape` when at
least one input has ``requires_grad``. Gradient rules live in
:data:`GRAD_RULES`, keyed by op name, so a rule can be swapped out (the
verification suite uses this for its negative control).
"""
from __future__ import annotations

from dataclasses import dataclass, field
from typing import Callable, Sequence

import numpy as np

from . import kernels
from .errors import ParameterError, ShapeError, UsageError

_tapes: list["Tape"] = []


class Tensor:
    __slots__ = ("data", "requires_grad", "name")

    def __init__(self, data, requires_grad: bool = False, name: str | None = None):
        self.data = np.asarray(data, dtype=np.float64, order="C")
        self.requires_grad = requires_grad
        self.name = name

    @property
    def shape(self) -> tuple[int, ...]:
        return self.data.shape

    @property
    def ndim(self) -> int:
        return self.data.ndim

    def numpy(self) -> np.ndarray:
        return self.data

    def item(self) -> float:
        return float(self.data.reshape(-1)[0]) if self.data.size == 1 else self.data.item()

    def __repr__(self) -> str:
        tag = f" name={self.name!r}" if self.name else ""
        return f"Tensor(shape={self.shape}{tag}, requires_grad={self.requires_grad})"

    def __add__(self, other):
        return add(self, other)

    __radd__ = __add__

    def __sub__(self, other):
        return sub(self, other)

    def __rsub__(self, other):
        return sub(as_tensor(other), self)

    def __mul__(self, other):
        return mul(self, other)

    __rmul__ = __mul__

    def __truediv__(self, other):
        return div(self, other)

    def __rtruediv__(self, other):
        return div(as_tensor(other), self)

    def __neg__(self):
        return neg(self)

    def __pow__(self, k: float):
        return power(self, k)

    def __matmul__(self, other):
        return matmul(self, other)

    def sum(self, axis=None, keepdims=False):
        return tsum(self, axis, keepdims)

    def mean(self, axis=None, keepdims=False):
        return mean(self, axis, keepdims)

    def reshape(self, *shape):
        if len(shape) == 1 and isinstance(shape[0], (tuple, list)):
            shape = tuple(shape[0])
        return reshape(self, shape)

    def transpose(self, *axes):
        if len(axes) == 1 and isinstance(axes[0], (tuple, list)):
            axes = tuple(axes[0])
        return transpose(self, axes or None)


def as_tensor(x) -> Tensor:
    return x if isinstance(x, Tensor) else Tensor(x)


@dataclass
class Node:
    op: str
    out: Tensor
    inputs: tuple[Tensor, ...]
    ctx: dict


@dataclass
class Tape:
    """Single-writer record of executed ops; use as a context manager."""

    nodes: list[Node] = field(default_factory=list)
    last_backward_order: list[int] = field(default_factory=list)

    def __enter__(self) -> "Tape":
        _tapes.append(self)
        return self

    def __exit__(self, *exc) -> None:
        _tapes.remove(self)

    def record(self, node: Node) -> None:
        self.nodes.append(node)

    @property
    def ops(self) -> list[str]:
        return [n.op for n in self.nodes]


def current_tape() -> Tape | None:
    return _tapes[-1] if _tapes else None


def _emit(op: str, data: np.ndarray, inputs: Sequence[Tensor], **ctx) -> Tensor:
    out = Tensor(data)
    tape = current_tape()
    if tape is not None and any(t.requires_grad for t in inputs):
        out.requires_grad = True
        tape.record(Node(op, out, tuple(inputs), ctx))
    return out


def _unbroadcast(g: np.ndarray, shape: tuple[int, ...]) -> np.ndarray:
    while g.ndim > len(shape):
        g = g.sum(axis=0)
    for ax, n in enumerate(shape):
        if n == 1 and g.shape[ax] != 1:
            g = g.sum(axis=ax, keepdims=True)
    return g


GradRule = Callable[[dict, np.ndarray], tuple]
GRAD_RULES: dict[str, GradRule] = {}


def grad_rule(name: str):
    def deco(fn: GradRule) -> GradRule:
        GRAD_RULES[name] = fn
        return fn

    return deco


# ---------------------------------------------------------------- elementwise


def add(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    return _emit("add", a.data + b.data, (a, b), sa=a.shape, sb=b.shape)


@grad_rule("add")
def _add_grad(ctx, g):
    return _unbroadcast(g, ctx["sa"]), _unbroadcast(g, ctx["sb"])


def sub(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    return _emit("sub", a.data - b.data, (a, b), sa=a.shape, sb=b.shape)


@grad_rule("sub")
def _sub_grad(ctx, g):
    return _unbroadcast(g, ctx["sa"]), -_unbroadcast(g, ctx["sb"])


def mul(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    return _emit("mul", a.data * b.data, (a, b), a=a.data, b=b.data)


@grad_rule("mul")
def _mul_grad(ctx, g):
    a, b = ctx["a"], ctx["b"]
    return _unbroadcast(g * b, a.shape), _unbroadcast(g * a, b.shape)


def div(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    return _emit("div", a.data / b.data, (a, b), a=a.data, b=b.data)


@grad_rule("div")
def _div_grad(ctx, g):
    a, b = ctx["a"], ctx["b"]
    return _unbroadcast(g / b, a.shape), _unbroadcast(-g * a / (b * b), b.shape)


def neg(a) -> Tensor:
    return _emit("neg", -a.data, (a,))


@grad_rule("neg")
def _neg_grad(ctx, g):
    return (-g,)


def power(a, k: float) -> Tensor:
    return _emit("pow", np.power(a.data, k), (a,), a=a.data, k=float(k))


@grad_rule("pow")
def _pow_grad(ctx, g):
    a, k = ctx["a"], ctx["k"]
    return (g * k * np.power(a, k - 1.0),)


def log(a) -> Tensor:
    return _emit("log", np.log(a.data), (a,), a=a.data)


@grad_rule("log")
def _log_grad(ctx, g):
    return (g / ctx["a"],)


def tabs(a) -> Tensor:
    return _emit("abs", np.abs(a.data), (a,), a=a.data)


@grad_rule("abs")
def _abs_grad(ctx, g):
    return (g * np.sign(ctx["a"]),)


def clip(a, lo: float, hi: float) -> Tensor:
    return _emit("clip", np.clip(a.data, lo, hi), (a,), a=a.data, lo=lo, hi=hi)


@grad_rule("clip")
def _clip_grad(ctx, g):
    a = ctx["a"]
    return (g * ((a >= ctx["lo"]) & (a <= ctx["hi"])),)


def relu(a) -> Tensor:
    return _emit("relu", np.maximum(a.data, 0.0), (a,), a=a.data)


@grad_rule("relu")
def _relu_grad(ctx, g):
    return (g * (ctx["a"] > 0),)


def _sigmoid(x: np.ndarray) -> np.ndarray:
    e = np.exp(-np.abs(x))
    return np.where(x >= 0, 1.0 / (1.0 + e), e / (1.0 + e))


def sigmoid(a) -> Tensor:
    s = _sigmoid(a.data)
    return _emit("sigmoid", s, (a,), s=s)


@grad_rule("sigmoid")
def _sigmoid_grad(ctx, g):
    s = ctx["s"]
    return (g * s * (1.0 - s),)


def pointwise_activation(x: Tensor, kind: str) -> Tensor:
    if kind == "relu":
        return relu(x)
    if kind == "sigmoid":
        return sigmoid(x)
    raise ParameterError(f"unknown activation kind {kind!r}; expected 'relu' or 'sigmoid'")


# ---------------------------------------------------------------- reductions / shape


def _norm_axis(axis, ndim):
    if axis is None:
        return tuple(range(ndim))
    if isinstance(axis, int):
        axis = (axis,)
    return tuple(a % ndim for a in axis)


def tsum(a, axis=None, keepdims=False) -> Tensor:
    axes = _norm_axis(axis, a.ndim)
    return _emit("sum", a.data.sum(axis=axes, keepdims=keepdims), (a,), shape=a.shape, axes=axes, keepdims=keepdims)


@grad_rule("sum")
def _sum_grad(ctx, g):
    if not ctx["keepdims"]:
        g = np.expand_dims(g, ctx["axes"])
    return (np.broadcast_to(g, ctx["shape"]).copy(),)


def mean(a, axis=None, keepdims=False) -> Tensor:
    axes = _norm_axis(axis, a.ndim)
    n = int(np.prod([a.shape[i] for i in axes])) if axes else 1
    return tsum(a, axes, keepdims) * (1.0 / n)


def reshape(a, shape) -> Tensor:
    return _emit("reshape", a.data.reshape(shape), (a,), shape=a.shape)


@grad_rule("reshape")
def _reshape_grad(ctx, g):
    return (g.reshape(ctx["shape"]),)


def transpose(a, axes=None) -> Tensor:
    axes = tuple(reversed(range(a.ndim))) if axes is None else tuple(axes)
    return _emit("transpose", np.ascontiguousarray(a.data.transpose(axes)), (a,), axes=axes)


@grad_rule("transpose")
def _transpose_grad(ctx, g):
    return (np.ascontiguousarray(g.transpose(np.argsort(ctx["axes"]))),)


def swap_last(a) -> Tensor:
    axes = list(range(a.ndim))
    axes[-1], axes[-2] = axes[-2], axes[-1]
    return transpose(a, axes)


def concat(tensors: Sequence[Tensor], axis: int) -> Tensor:
    tensors = [as_tensor(t) for t in tensors]
    ref = tensors[0].shape
    ax = axis % len(ref)
    for t in tensors[1:]:
        for d, (p, q) in enumerate(zip(ref, t.shape)):
            if d != ax and p != q:
                raise ShapeError(f"concat: dim {d} mismatch ({p} vs {q})")
    sizes = [t.shape[ax] for t in tensors]
    return _emit("concat", np.concatenate([t.data for t in tensors], axis=ax), tensors, axis=ax, sizes=sizes)


@grad_rule("concat")
def _concat_grad(ctx, g):
    cuts = np.cumsum(ctx["sizes"])[:-1]
    return tuple(np.ascontiguousarray(p) for p in np.split(g, cuts, axis=ctx["axis"]))


# ---------------------------------------------------------------- linear algebra


def matmul(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    if a.ndim < 2 or b.ndim < 2:
        raise ShapeError(f"matmul: operands must be at least 2-D, got {a.shape} and {b.shape}")
    if a.shape[-1] != b.shape[-2]:
        raise ShapeError(
            f"matmul: inner dimension mismatch, a dim -1 = {a.shape[-1]} vs b dim -2 = {b.shape[-2]}"
        )
    try:
        np.broadcast_shapes(a.shape[:-2], b.shape[:-2])
    except ValueError:
        raise ShapeError(f"matmul: batch dims {a.shape[:-2]} and {b.shape[:-2]} not broadcastable") from None
    return _emit("matmul", np.matmul(a.data, b.data), (a, b), a=a.data, b=b.data)


@grad_rule("matmul")
def _matmul_grad(ctx, g):
    a, b = ctx["a"], ctx["b"]
    ga = np.matmul(g, np.swapaxes(b, -1, -2))
    gb = np.matmul(np.swapaxes(a, -1, -2), g)
    return _unbroadcast(ga, a.shape), _unbroadcast(gb, b.shape)


def conv2d(x, weight, bias=None, stride: int = 1, padding: int = 0, groups: int = 1) -> Tensor:
    """2-D cross-correlation with zero padding over ``[B, Cin, H, W]`` input."""
    if x.ndim != 4:
        raise ShapeError(f"conv2d: input must be 4-D [B,C,H,W], got {x.ndim}-D")
    if weight.ndim != 4:
        raise ShapeError(f"conv2d: weight must be 4-D [Cout,Cin/groups,kh,kw], got {weight.ndim}-D")
    if stride < 1 or padding < 0 or groups < 1:
        raise ParameterError(f"conv2d: need stride >= 1, padding >= 0, groups >= 1 (got {stride}, {padding}, {groups})")
    B, Cin, H, W = x.shape
    Cout, Cg, kh, kw = weight.shape
    if Cin % groups:
        raise ShapeError(f"conv2d: input channels (dim 1) = {Cin} not divisible by groups = {groups}")
    if Cout % groups:
        raise ShapeError(f"conv2d: output channels (weight dim 0) = {Cout} not divisible by groups = {groups}")
    if Cg != Cin // groups:
        raise ShapeError(f"conv2d: weight dim 1 = {Cg} but input channels / groups = {Cin // groups}")
    if kh > H + 2 * padding or kw > W + 2 * padding:
        raise ShapeError(f"conv2d: kernel {kh}x{kw} larger than padded input {H + 2 * padding}x{W + 2 * padding}")
    if bias is not None and bias.shape != (Cout,):
        raise ShapeError(f"conv2d: bias dim 0 = {bias.shape} but Cout = {Cout}")
    y = kernels.conv2d_forward(x.data, weight.data, stride, padding, groups)
    inputs = (x, weight) if bias is None else (x, weight, bias)
    if bias is not None:
        y = y + bias.data[None, :, None, None]
    return _emit("conv2d", y, inputs, x=x.data, w=weight.data, stride=stride, padding=padding, groups=groups)


@grad_rule("conv2d")
def _conv2d_grad(ctx, g):
    x, w = ctx["x"], ctx["w"]
    s, p, grp = ctx["stride"], ctx["padding"], ctx["groups"]
    g = np.ascontiguousarray(g)
    gx = kernels.conv2d_backward_input(g, w, x.shape, s, p, grp)
    gw = kernels.conv2d_backward_weight(x, g, w.shape, s, p, grp)
    return gx, gw, g.sum(axis=(0, 2, 3))


def layer_norm(x: Tensor, gain: Tensor, bias: Tensor, eps: float = 1e-5, axis: int | None = None) -> Tensor:
    """Normalize over one axis: channels of ``[B,C,H,W]``, else the last axis."""
    if not eps > 0:
        raise ParameterError(f"layer_norm: eps must be > 0, got {eps}")
    if axis is None:
        axis = 1 if x.ndim == 4 else -1
    axis %= x.ndim
    n = x.shape[axis]
    if gain.shape != (n,) or bias.shape != (n,):
        raise ShapeError(f"layer_norm: gain/bias shapes {gain.shape}/{bias.shape} must be ({n},) to match dim {axis}")
    bshape = [1] * x.ndim
    bshape[axis] = n
    mu = x.data.mean(axis=axis, keepdims=True)
    xc = x.data - mu
    var = (xc * xc).mean(axis=axis, keepdims=True)
    inv = 1.0 / np.sqrt(var + eps)
    xhat = xc * inv
    y = xhat * gain.data.reshape(bshape) + bias.data.reshape(bshape)
    return _emit("layer_norm", y, (x, gain, bias), xhat=xhat, inv=inv, gain=gain.data.reshape(bshape), axis=axis)


@grad_rule("layer_norm")
def _layer_norm_grad(ctx, g):
    xhat, inv, gain, ax = ctx["xhat"], ctx["inv"], ctx["gain"], ctx["axis"]
    other = tuple(i for i in range(g.ndim) if i != ax)
    gxh = g * gain
    gx = inv * (gxh - gxh.mean(axis=ax, keepdims=True) - xhat * (gxh * xhat).mean(axis=ax, keepdims=True))
    return gx, (g * xhat).sum(axis=other), g.sum(axis=other)


def bilinear_upsample_x2(x: Tensor) -> Tensor:
    """Double H and W with half-pixel-centre bilinear interpolation, edges clamped."""
    if x.ndim != 4:
        raise ShapeError(f"bilinear_upsample_x2: input must be 4-D [B,C,H,W], got {x.ndim}-D")
    return _emit("upsample2x", kernels.upsample2x_forward(x.data), (x,))


@grad_rule("upsample2x")
def _upsample_grad(ctx, g):
    return (kernels.upsample2x_backward(np.ascontiguousarray(g)),)


def dropout(x: Tensor, rate: float, rng: np.random.Generator | None, training: bool) -> Tensor:
    """Inverted dropout; identity in eval mode or at rate 0."""
    if not 0.0 <= rate < 1.0:
        raise ParameterError(f"dropout: rate must be in [0, 1), got {rate}")
    if not training or rate == 0.0:
        return x
    if rng is None:
        raise UsageError("dropout: training mode needs a seeded generator")
    keep = (rng.random(x.shape) >= rate) / (1.0 - rate)
    return _emit("dropout", x.data * keep, (x,), keep=keep)


@grad_rule("dropout")
def _dropout_grad(ctx, g):
    return (g * ctx["keep"],)


def rotate_pairs(x: Tensor, cos: np.ndarray, sin: np.ndarray) -> Tensor:
    """Rotate consecutive channel pairs ``(x[2k], x[2k+1])`` by per-token angles.

    ``cos``/``sin`` have shape ``[N, D/2]`` and broadcast over leading dims.
    """
    d = x.shape[-1]
    if d % 2:
        raise ShapeError(f"rotate_pairs: last dim {d} must be even")
    xp = x.data.reshape(*x.shape[:-1], d // 2, 2)
    a, b = xp[..., 0], xp[..., 1]
    out = np.stack([a * cos - b * sin, a * sin + b * cos], axis=-1).reshape(x.shape)
    return _emit("rotate", out, (x,), cos=cos, sin=sin)


@grad_rule("rotate")
def _rotate_grad(ctx, g):
    cos, sin = ctx["cos"], ctx["sin"]
    gp = g.reshape(*g.shape[:-1], g.shape[-1] // 2, 2)
    ga, gb = gp[..., 0], gp[..., 1]
    return (np.stack([ga * cos + gb * sin, -ga * sin + gb * cos], axis=-1).reshape(g.shape),)


# ---------------------------------------------------------------- differentiation


class GradMap(dict):
    """Tensor -> gradient array; tensors the loss never reached map to zeros."""

    def __missing__(self, key: Tensor) -> np.ndarray:
        return np.zeros(key.shape)


def backward(loss: Tensor, tape: Tape) -> GradMap:
    """Replay ``tape`` in reverse and return gradients of ``loss`` for every leaf."""
    if loss.data.size != 1:
        raise UsageError(f"backward: loss must be a scalar, got shape {loss.shape}")
    grads: dict[int, np.ndarray] = {id(loss): np.ones_like(loss.data)}
    produced = {id(n.out) for n in tape.nodes}
    leaves: dict[int, Tensor] = {}
    order: list[int] = []
    for idx in range(len(tape.nodes) - 1, -1, -1):
        node = tape.nodes[idx]
        order.append(idx)
        g = grads.get(id(node.out))
        if g is None:
            continue
        parts = GRAD_RULES[node.op](node.ctx, g)
        for t, gi in zip(node.inputs, parts):
            if gi is None or not t.requires_grad:
                continue
            k = id(t)
            if k in grads:
                grads[k] = grads[k] + gi
            else:
                grads[k] = np.asarray(gi, dtype=np.float64)
            if k not in produced:
                leaves[k] = t
    tape.last_backward_order = order
    out = GradMap()
    for k, t in leaves.items():
        out[t] = grads[k].reshape(t.shape)
    if id(loss) not in produced and loss.requires_grad:
        out[loss] = grads[id(loss)]
    return out


def gradient_comparison(f: Callable[[], Tensor], params: Sequence[Tensor], eps: float = 1e-6) -> tuple[np.ndarray, np.ndarray]:
    """Flat tape gradients and central differences ``(f(p+eps) - f(p-eps)) / (2 eps)``.

    ``f`` is called with no arguments and must rebuild the loss from
    ``params`` each time. Parameter data is perturbed in place and restored.
    """
    with Tape() as tape:
        loss = f()
    grads = backward(loss, tape)
    analytic, numeric = [], []
    for p in params:
        analytic.append(grads[p].reshape(-1))
        flat = p.data.reshape(-1)
        num = np.empty(flat.size)
        for i in range(flat.size):
            orig = flat[i]
            flat[i] = orig + eps
            fp = f().item()
            flat[i] = orig - eps
            fm = f().item()
            flat[i] = orig
            num[i] = (fp - fm) / (2.0 * eps)
        numeric.append(num)
    if not analytic:
        return np.zeros(0), np.zeros(0)
    return np.concatenate(analytic), np.concatenate(numeric)


def relative_errors(analytic: np.ndarray, numeric: np.ndarray) -> np.ndarray:
    return np.abs(analytic - numeric) / np.maximum(np.maximum(np.abs(analytic), np.abs(numeric)), 1e-8)


def grad_check(f: Callable[[], Tensor], params: Sequence[Tensor], eps: float = 1e-6) -> float:
    """Max relative error between tape gradients and central differences."""
    a, n = gradient_comparison(f, params, eps)
    return float(relative_errors(a, n).max()) if a.size else 0.0


def parameter(data, name: str | None = None) -> Tensor:
    return Tensor(np.array(data, dtype=np.float64), requires_grad=True, name=name)
