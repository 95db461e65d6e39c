"""Dense-tensor substrate with reverse-mode autodiff on an explicit tape.

Tensors wrap numpy arrays. Every differentiable operation records a node on
the active ``Tape``; ``backward`` replays the tape in reverse topological
order with a fixed accumulation order, so gradients are bit-reproducible.

Precision policy: tests run in float64 (tight finite-difference checks),
training runs may switch to float32 via ``set_default_dtype``. In strict
mode every op output is checked for NaN/Inf.
"""

from __future__ import annotations

import numpy as np

from .errors import ContractError, DimensionError, NumericError

_DTYPE = np.float64
_STRICT = True
_TAPE_STACK: list["Tape"] = []


def set_default_dtype(dtype) -> None:
    global _DTYPE
    if dtype not in (np.float32, np.float64):
        raise ContractError(f"unsupported dtype {dtype}")
    _DTYPE = dtype


def get_default_dtype():
    return _DTYPE


def set_strict_numerics(flag: bool) -> None:
    """Toggle the per-op NaN/Inf check (on in test builds)."""
    global _STRICT
    _STRICT = bool(flag)


def strict_numerics() -> bool:
    return _STRICT


class Tensor:
    """Immutable-by-convention dense array, optionally tracked for gradients."""

    __slots__ = ("data", "requires_grad", "_param")

    def __init__(self, data, requires_grad: bool = False):
        self.data = np.asarray(data, dtype=_DTYPE)
        self.requires_grad = requires_grad
        self._param = None

    @property
    def shape(self):
        return self.data.shape

    @property
    def size(self):
        return self.data.size

    def item(self) -> float:
        return float(self.data)

    def __repr__(self):
        return f"Tensor(shape={self.data.shape}, requires_grad={self.requires_grad})"


class Parameter:
    """A trainable tensor with a zero-initialized gradient accumulator."""

    __slots__ = ("value", "grad")

    def __init__(self, data):
        self.value = Tensor(data, requires_grad=True)
        self.value._param = self
        self.grad = np.zeros_like(self.value.data)

    def zero_grad(self) -> None:
        self.grad[...] = 0.0

    @property
    def shape(self):
        return self.value.shape


class _Node:
    __slots__ = ("out", "inputs", "bwd", "kind")

    def __init__(self, out, inputs, bwd, kind):
        self.out = out
        self.inputs = inputs
        self.bwd = bwd
        self.kind = kind


class Tape:
    """Ordered record of operations; inputs of a node always precede it."""

    def __init__(self):
        self.nodes: list[_Node] = []

    def __enter__(self):
        _TAPE_STACK.append(self)
        return self

    def __exit__(self, *exc):
        _TAPE_STACK.pop()
        return False


def _active_tape():
    return _TAPE_STACK[-1] if _TAPE_STACK else None


def _finish(kind: str, out_data, inputs, bwd) -> Tensor:
    if _STRICT and not np.all(np.isfinite(out_data)):
        raise NumericError(f"non-finite output of op '{kind}'")
    out = Tensor(out_data)
    tape = _active_tape()
    if tape is not None and any(i.requires_grad for i in inputs):
        out.requires_grad = True
        tape.nodes.append(_Node(out, tuple(inputs), bwd, kind))
    return out


def backward(tape: Tape, loss: Tensor) -> dict:
    """Accumulate d(loss)/d(leaf) for every tensor on the tape.

    Returns a dict keyed by ``id(tensor)``; gradients of tensors attached to
    a Parameter are additionally accumulated into ``Parameter.grad``
    (repeated calls accumulate — callers zero grads between steps).
    """
    if loss.data.size != 1 or loss.data.shape != ():
        raise ContractError(f"loss must be a scalar, got shape {loss.data.shape}")
    grads: dict[int, np.ndarray] = {id(loss): np.ones((), dtype=loss.data.dtype)}
    keep: dict[int, Tensor] = {id(loss): loss}
    for node in reversed(tape.nodes):
        g = grads.get(id(node.out))
        if g is None:
            continue
        input_grads = node.bwd(g)
        for inp, gi in zip(node.inputs, input_grads):
            if gi is None or not inp.requires_grad:
                continue
            key = id(inp)
            if key in grads:
                grads[key] = grads[key] + gi
            else:
                grads[key] = gi
            keep[key] = inp
    for key, t in keep.items():
        if t._param is not None:
            t._param.grad += grads[key]
    return grads


def constant(data) -> Tensor:
    return Tensor(data, requires_grad=False)


# ---------------------------------------------------------------------------
# op catalogue


def matmul(a: Tensor, b: Tensor) -> Tensor:
    ad, bd = a.data, b.data
    if ad.ndim < 2 or bd.ndim < 2 or ad.shape[-1] != bd.shape[-2]:
        raise DimensionError(f"matmul shapes {ad.shape} x {bd.shape}")
    if bd.ndim > 2 and ad.shape[:-2] != bd.shape[:-2]:
        raise DimensionError(f"matmul leading dims {ad.shape} x {bd.shape}")
    out = ad @ bd

    def bwd(g):
        ga = g @ np.swapaxes(bd, -1, -2)
        if bd.ndim == 2 and ad.ndim > 2:
            k = ad.shape[-1]
            n = g.shape[-1]
            gb = ad.reshape(-1, k).T @ g.reshape(-1, n)
        else:
            gb = np.swapaxes(ad, -1, -2) @ g
        return ga, gb

    return _finish("matmul", out, (a, b), bwd)


def add(a: Tensor, b: Tensor) -> Tensor:
    ad, bd = a.data, b.data
    if ad.shape == bd.shape:
        def bwd(g):
            return g, g
    elif bd.ndim == 1 and ad.ndim >= 1 and ad.shape[-1] == bd.shape[0]:
        # bias-add along the last dimension
        def bwd(g):
            return g, g.reshape(-1, bd.shape[0]).sum(axis=0)
    else:
        raise DimensionError(f"add shapes {ad.shape} + {bd.shape}")
    return _finish("add", ad + bd, (a, b), bwd)


def add_const(a: Tensor, c) -> Tensor:
    """Add a non-differentiable constant (must broadcast without growing a)."""
    c = np.asarray(c, dtype=a.data.dtype)
    out = a.data + c
    if out.shape != a.data.shape:
        raise DimensionError(f"add_const shapes {a.data.shape} + {c.shape}")
    return _finish("add", out, (a,), lambda g: (g,))


def mul(a: Tensor, b: Tensor) -> Tensor:
    ad, bd = a.data, b.data
    if ad.shape == bd.shape:
        def bwd(g):
            return g * bd, g * ad
    elif bd.ndim == 1 and ad.ndim >= 1 and ad.shape[-1] == bd.shape[0]:
        # channelwise scale along the last dimension
        def bwd(g):
            return g * bd, (g * ad).reshape(-1, bd.shape[0]).sum(axis=0)
    else:
        raise DimensionError(f"mul shapes {ad.shape} * {bd.shape}")
    return _finish("mul", ad * bd, (a, b), bwd)


elementwise_mul = mul


def scale(a: Tensor, c: float) -> Tensor:
    c = float(c)
    return _finish("scale", a.data * c, (a,), lambda g: (g * c,))


def sub(a: Tensor, b: Tensor) -> Tensor:
    return add(a, scale(b, -1.0))


def embed_lookup(table: Tensor, ids) -> Tensor:
    ids = np.asarray(ids)
    if ids.size and (ids.min() < 0 or ids.max() >= table.data.shape[0]):
        raise DimensionError(
            f"embed_lookup id out of range for table of {table.data.shape[0]} rows")
    out = table.data[ids]

    def bwd(g):
        gt = np.zeros_like(table.data)
        np.add.at(gt, ids, g)
        return (gt,)

    return _finish("embed_lookup", out, (table,), bwd)


def _softmax_np(x: np.ndarray) -> np.ndarray:
    z = x - x.max(axis=-1, keepdims=True)
    e = np.exp(z)
    return e / e.sum(axis=-1, keepdims=True)


def _log_softmax_np(x: np.ndarray) -> np.ndarray:
    z = x - x.max(axis=-1, keepdims=True)
    return z - np.log(np.exp(z).sum(axis=-1, keepdims=True))


def softmax_lastdim(x: Tensor) -> Tensor:
    y = _softmax_np(x.data)

    def bwd(g):
        return (y * (g - (g * y).sum(axis=-1, keepdims=True)),)

    return _finish("softmax_lastdim", y, (x,), bwd)


def log_softmax_lastdim(x: Tensor) -> Tensor:
    y = _log_softmax_np(x.data)
    sm = np.exp(y)

    def bwd(g):
        return (g - sm * g.sum(axis=-1, keepdims=True),)

    return _finish("log_softmax_lastdim", y, (x,), bwd)


def _rms_norm_np(x: np.ndarray, gain: np.ndarray, eps: float) -> np.ndarray:
    r = np.sqrt((x * x).mean(axis=-1, keepdims=True) + eps)
    return x / r * gain


def rms_norm(x: Tensor, gain: Tensor, eps: float = 1e-5) -> Tensor:
    xd, gd = x.data, gain.data
    if gd.ndim != 1 or xd.shape[-1] != gd.shape[0]:
        raise DimensionError(f"rms_norm shapes {xd.shape}, gain {gd.shape}")
    d = xd.shape[-1]
    r = np.sqrt((xd * xd).mean(axis=-1, keepdims=True) + eps)
    out = xd / r * gd

    def bwd(g):
        gg = g * gd
        gx = gg / r - xd * ((gg * xd).sum(axis=-1, keepdims=True) / (d * r ** 3))
        ggain = (g * xd / r).reshape(-1, d).sum(axis=0)
        return gx, ggain

    return _finish("rms_norm", out, (x, gain), bwd)


def _silu_np(x: np.ndarray) -> np.ndarray:
    s = 1.0 / (1.0 + np.exp(-x))
    return x * s


def silu(x: Tensor) -> Tensor:
    s = 1.0 / (1.0 + np.exp(-x.data))
    out = x.data * s

    def bwd(g):
        return (g * (s * (1.0 + x.data * (1.0 - s))),)

    return _finish("silu", out, (x,), bwd)


def _rope_tables(seq: int, head_dim: int, base: float, pos_offset: int, dtype):
    if head_dim % 2:
        raise DimensionError(f"rope_rotate needs even head_dim, got {head_dim}")
    pos = np.arange(pos_offset, pos_offset + seq, dtype=np.float64)
    inv = base ** (-np.arange(0, head_dim, 2, dtype=np.float64) / head_dim)
    theta = pos[:, None] * inv[None, :]
    return np.cos(theta).astype(dtype), np.sin(theta).astype(dtype)


def _rope_np(x: np.ndarray, cos: np.ndarray, sin: np.ndarray) -> np.ndarray:
    # x: [..., seq, heads, head_dim]; cos/sin: [seq, head_dim/2]
    xe, xo = x[..., 0::2], x[..., 1::2]
    c = cos[:, None, :]
    s = sin[:, None, :]
    out = np.empty_like(x)
    out[..., 0::2] = xe * c - xo * s
    out[..., 1::2] = xe * s + xo * c
    return out


def rope_rotate(x: Tensor, base: float = 10000.0, pos_offset: int = 0) -> Tensor:
    """Rotary position embedding over [..., seq, heads, head_dim] pairs."""
    if x.data.ndim < 3:
        raise DimensionError(f"rope_rotate expects >=3 dims, got {x.data.shape}")
    seq, hd = x.data.shape[-3], x.data.shape[-1]
    cos, sin = _rope_tables(seq, hd, base, pos_offset, x.data.dtype)
    out = _rope_np(x.data, cos, sin)

    def bwd(g):
        return (_rope_np(g, cos, -sin),)  # inverse rotation

    return _finish("rope_rotate", out, (x,), bwd)


def transpose(x: Tensor, ax0: int, ax1: int) -> Tensor:
    out = np.swapaxes(x.data, ax0, ax1)
    return _finish("transpose", out, (x,), lambda g: (np.swapaxes(g, ax0, ax1),))


def reshape(x: Tensor, shape) -> Tensor:
    shape = tuple(shape)
    old = x.data.shape
    return _finish("reshape", x.data.reshape(shape), (x,),
                   lambda g: (g.reshape(old),))


def slice_axis(x: Tensor, axis: int, start: int, stop: int) -> Tensor:
    idx = [slice(None)] * x.data.ndim
    idx[axis] = slice(start, stop)
    idx = tuple(idx)
    out = x.data[idx]

    def bwd(g):
        gx = np.zeros_like(x.data)
        gx[idx] = g
        return (gx,)

    return _finish("slice", out, (x,), bwd)


def concat(xs, axis: int) -> Tensor:
    datas = [t.data for t in xs]
    out = np.concatenate(datas, axis=axis)
    sizes = [d.shape[axis] for d in datas]
    bounds = np.cumsum([0] + sizes)

    def bwd(g):
        outs = []
        for i in range(len(datas)):
            idx = [slice(None)] * g.ndim
            idx[axis] = slice(bounds[i], bounds[i + 1])
            outs.append(g[tuple(idx)])
        return tuple(outs)

    return _finish("concat", out, tuple(xs), bwd)


def log(x: Tensor) -> Tensor:
    return _finish("log", np.log(x.data), (x,), lambda g: (g / x.data,))


def exp(x: Tensor) -> Tensor:
    y = np.exp(x.data)
    return _finish("exp", y, (x,), lambda g: (g * y,))


def tsum(x: Tensor) -> Tensor:
    return _finish("sum", np.asarray(x.data.sum()), (x,),
                   lambda g: (np.broadcast_to(g, x.data.shape).copy(),))


def tmean(x: Tensor) -> Tensor:
    n = x.data.size
    return _finish("mean", np.asarray(x.data.mean()), (x,),
                   lambda g: (np.broadcast_to(g / n, x.data.shape).copy(),))


def cross_entropy_mean(logits: Tensor, targets) -> Tensor:
    """Mean negative log-likelihood of target ids, log-sum-exp form."""
    targets = np.asarray(targets)
    ld = logits.data
    if ld.ndim != 2 or targets.ndim != 1 or targets.shape[0] != ld.shape[0]:
        raise DimensionError(
            f"cross_entropy_mean shapes logits {ld.shape}, targets {targets.shape}")
    if targets.size and (targets.min() < 0 or targets.max() >= ld.shape[1]):
        raise DimensionError("cross_entropy_mean target id out of range")
    n = ld.shape[0]
    ls = _log_softmax_np(ld)
    out = np.asarray(-ls[np.arange(n), targets].mean())

    def bwd(g):
        gl = np.exp(ls)
        gl[np.arange(n), targets] -= 1.0
        return (gl * (g / n),)

    return _finish("cross_entropy_mean", out, (logits,), bwd)


def grad_check(f, x: Tensor, eps: float = 1e-5) -> float:
    """Max relative error of analytic vs central-difference gradient of f at x."""
    if eps <= 0:
        raise ContractError("eps must be positive")
    probe = Tensor(x.data.copy(), requires_grad=True)
    with Tape() as tape:
        y = f(probe)
        if y.data.shape != ():
            raise ContractError("grad_check needs a scalar-valued f")
        grads = backward(tape, y)
    analytic = grads.get(id(probe))
    if analytic is None:
        analytic = np.zeros_like(probe.data)

    flat = x.data.copy().ravel()
    fd = np.empty_like(flat)
    for i in range(flat.size):
        orig = flat[i]
        flat[i] = orig + eps
        fp = f(Tensor(flat.reshape(x.data.shape))).item()
        flat[i] = orig - eps
        fm = f(Tensor(flat.reshape(x.data.shape))).item()
        flat[i] = orig
        fd[i] = (fp - fm) / (2.0 * eps)
    fd = fd.reshape(x.data.shape)
    denom = np.maximum(1.0, np.abs(analytic))
    return float(np.max(np.abs(analytic - fd) / denom)) if flat.size else 0.0
