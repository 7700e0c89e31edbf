"""Dense tensors with reverse-mode differentiation.

Small by design: just enough primitives for MLP/CNN classifiers,
cross-entropy and KL losses, and input-gradient attacks. Arrays are
numpy-backed; a Tape records primitive applications so adjoints can be
replayed in reverse. Gradients accumulate into ``Tensor.grad`` buffers;
callers zero them explicitly before each backward pass (the attack inner
loop reuses the same parameter tensors many times).

Precision is chosen at construction time: float32 for training speed,
float64 for gradient-check oracles.
"""

from __future__ import annotations

from typing import Callable, Sequence

import numpy as np


class ShapeError(ValueError):
    """Raised when operand shapes are incompatible."""


class Tensor:
    """A dense n-d array with an optional gradient buffer."""

    __slots__ = ("data", "grad", "requires_grad", "_tape")

    def __init__(self, values, dtype=np.float32, requires_grad: bool = False):
        self.data = np.asarray(values, dtype=dtype)
        self.grad: np.ndarray | None = None
        self.requires_grad = requires_grad
        self._tape: Tape | None = None

    @property
    def shape(self) -> tuple[int, ...]:
        return self.data.shape

    @property
    def dtype(self):
        return self.data.dtype

    @property
    def size(self) -> int:
        return self.data.size

    def item(self) -> float:
        return float(self.data)

    def zero_grad(self) -> None:
        """Allocate (or reset) the gradient buffer to zeros."""
        self.grad = np.zeros_like(self.data)

    def all_finite(self) -> bool:
        """Validity check: no NaN/Inf in data or gradient."""
        if not np.isfinite(self.data).all():
            return False
        if self.grad is not None and not np.isfinite(self.grad).all():
            return False
        return True

    def __repr__(self) -> str:
        return f"Tensor(shape={self.data.shape}, dtype={self.data.dtype.name})"


# A record is (output, inputs, vjp) where vjp(g, needs) returns one adjoint
# per input (None where needs[i] is False).
_Vjp = Callable[[np.ndarray, Sequence[bool]], tuple]

_TAPE_STACK: list["Tape"] = []


class Tape:
    """Ordered record of primitive applications, replayable in reverse.

    Single-owner: a tape must not be shared across threads. Use as a
    context manager; primitives executed inside record themselves when
    any input requires a gradient.
    """

    def __init__(self):
        self.records: list[tuple[Tensor, tuple[Tensor, ...], _Vjp]] = []
        self._produced: set[int] = set()

    def __enter__(self) -> "Tape":
        _TAPE_STACK.append(self)
        return self

    def __exit__(self, exc_type, exc, tb) -> None:
        popped = _TAPE_STACK.pop()
        assert popped is self, "tapes must unwind in LIFO order"


def _active_tape() -> Tape | None:
    return _TAPE_STACK[-1] if _TAPE_STACK else None


def _check_dtypes(*tensors: Tensor) -> None:
    dt = tensors[0].dtype
    for t in tensors[1:]:
        if t.dtype != dt:
            raise TypeError(f"mixed dtypes {dt} and {t.dtype}")


def _emit(out_data: np.ndarray, inputs: tuple[Tensor, ...], vjp: _Vjp) -> Tensor:
    """Wrap a primitive's result, recording it on the active tape."""
    out = Tensor(out_data, dtype=out_data.dtype)
    tape = _active_tape()
    if tape is not None and any(t.requires_grad for t in inputs):
        out.requires_grad = True
        out._tape = tape
        tape.records.append((out, inputs, vjp))
        tape._produced.add(id(out))
    return out


def backward(loss: Tensor) -> None:
    """Replay the recording tape in reverse, populating leaf gradients.

    Adjoints add into existing ``grad`` buffers; repeated calls without a
    reset accumulate. Raises if ``loss`` is not a recorded scalar.
    """
    if loss.size != 1:
        raise ShapeError(f"backward needs a scalar loss, got shape {loss.shape}")
    tape = loss._tape
    if tape is None:
        raise RuntimeError("loss was not produced under a recording tape")

    # id -> (tensor, accumulated adjoint); keyed by identity since values
    # are not hashable and distinct tensors may hold equal data.
    adjoint: dict[int, tuple[Tensor, np.ndarray]] = {
        id(loss): (loss, np.ones_like(loss.data))
    }
    for out, inputs, vjp in reversed(tape.records):
        got = adjoint.get(id(out))
        if got is None:
            continue  # did not influence the loss
        g_out = got[1]
        needs = [t.requires_grad for t in inputs]
        for t, g in zip(inputs, vjp(g_out, needs)):
            if g is None:
                continue
            prev = adjoint.get(id(t))
            adjoint[id(t)] = (t, g if prev is None else prev[1] + g)

    for tid, (t, g) in adjoint.items():
        if t.requires_grad and tid not in tape._produced:
            if t.grad is None:
                t.grad = g.copy()
            else:
                t.grad += g


# ---------------------------------------------------------------------------
# primitives


def matmul(a: Tensor, b: Tensor) -> Tensor:
    """Matrix product of two 2-d tensors."""
    _check_dtypes(a, b)
    if a.data.ndim != 2 or b.data.ndim != 2 or a.shape[1] != b.shape[0]:
        raise ShapeError(f"matmul shapes {a.shape} x {b.shape}")
    ad, bd = a.data, b.data

    def vjp(g, needs):
        return (
            g @ bd.T if needs[0] else None,
            ad.T @ g if needs[1] else None,
        )

    return _emit(ad @ bd, (a, b), vjp)


def conv2d(x: Tensor, kernel: Tensor, stride: int = 1, padding: int = 0) -> Tensor:
    """Cross-correlation of x[N,C,H,W] with kernel[F,C,kH,kW] (no flip).

    Direct form: a strided slice per kernel offset, gathered and contracted
    in one matrix product. Backward produces adjoints for both the input
    and the kernel by scattering back over the same offsets.
    """
    _check_dtypes(x, kernel)
    if x.data.ndim != 4 or kernel.data.ndim != 4:
        raise ShapeError(f"conv2d expects 4-d operands, got {x.shape}, {kernel.shape}")
    n, c, h, w = x.shape
    f, ck, kh, kw = kernel.shape
    if ck != c:
        raise ShapeError(f"conv2d channel mismatch: input {c}, kernel {ck}")
    ho = (h + 2 * padding - kh) // stride + 1
    wo = (w + 2 * padding - kw) // stride + 1
    if ho <= 0 or wo <= 0 or (h + 2 * padding) < kh or (w + 2 * padding) < kw:
        raise ShapeError(
            f"conv2d spatial dims {h}x{w} too small for kernel {kh}x{kw} "
            f"with stride={stride}, padding={padding}"
        )

    xp = x.data
    if padding:
        xp = np.pad(xp, ((0, 0), (0, 0), (padding, padding), (padding, padding)))

    def offset_slice(ki, kj):
        return (slice(None), slice(None),
                slice(ki, ki + stride * ho, stride),
                slice(kj, kj + stride * wo, stride))

    # patches[o] is the input window for kernel offset o = ki*kw + kj
    patches = np.stack(
        [xp[offset_slice(ki, kj)] for ki in range(kh) for kj in range(kw)], axis=2
    )  # [N, C, kh*kw, Ho, Wo]
    cols = patches.transpose(0, 3, 4, 1, 2).reshape(n * ho * wo, c * kh * kw)
    kmat = kernel.data.reshape(f, c * kh * kw)
    out = (cols @ kmat.T).reshape(n, ho, wo, f).transpose(0, 3, 1, 2)

    def vjp(g, needs):
        gcols = g.transpose(0, 2, 3, 1).reshape(n * ho * wo, f)
        gk = None
        if needs[1]:
            gk = (gcols.T @ cols).reshape(f, c, kh, kw)
        gx = None
        if needs[0]:
            gpatch = (gcols @ kmat).reshape(n, ho, wo, c, kh * kw)
            gpatch = gpatch.transpose(0, 3, 4, 1, 2)  # [N, C, kh*kw, Ho, Wo]
            gxp = np.zeros_like(xp)
            for ki in range(kh):
                for kj in range(kw):
                    gxp[offset_slice(ki, kj)] += gpatch[:, :, ki * kw + kj]
            gx = (
                gxp[:, :, padding : padding + h, padding : padding + w]
                if padding
                else gxp
            )
        return (gx, gk)

    return _emit(np.ascontiguousarray(out), (x, kernel), vjp)


def relu(x: Tensor) -> Tensor:
    mask = x.data > 0

    def vjp(g, needs):
        return (g * mask if needs[0] else None,)

    return _emit(np.where(mask, x.data, x.dtype.type(0)), (x,), vjp)


def add(a: Tensor, b: Tensor) -> Tensor:
    """Elementwise sum; shapes must match exactly."""
    _check_dtypes(a, b)
    if a.shape != b.shape:
        raise ShapeError(f"add shapes {a.shape} vs {b.shape}")

    def vjp(g, needs):
        return (g if needs[0] else None, g if needs[1] else None)

    return _emit(a.data + b.data, (a, b), vjp)


def add_rowvec(x: Tensor, b: Tensor) -> Tensor:
    """x[N,M] + b[M]: the bias broadcast a linear layer needs."""
    _check_dtypes(x, b)
    if x.data.ndim != 2 or b.data.ndim != 1 or x.shape[1] != b.shape[0]:
        raise ShapeError(f"add_rowvec shapes {x.shape} + {b.shape}")

    def vjp(g, needs):
        return (g if needs[0] else None, g.sum(axis=0) if needs[1] else None)

    return _emit(x.data + b.data, (x, b), vjp)


def add_channel(x: Tensor, b: Tensor) -> Tensor:
    """x[N,F,H,W] + b[F]: the bias broadcast a conv layer needs."""
    _check_dtypes(x, b)
    if x.data.ndim != 4 or b.data.ndim != 1 or x.shape[1] != b.shape[0]:
        raise ShapeError(f"add_channel shapes {x.shape} + {b.shape}")

    def vjp(g, needs):
        return (g if needs[0] else None, g.sum(axis=(0, 2, 3)) if needs[1] else None)

    return _emit(x.data + b.data.reshape(1, -1, 1, 1), (x, b), vjp)


def scale(x: Tensor, c: float) -> Tensor:
    c = x.dtype.type(c)

    def vjp(g, needs):
        return (g * c if needs[0] else None,)

    return _emit(x.data * c, (x,), vjp)


def shift(x: Tensor, c: float) -> Tensor:
    """Add a constant; the adjoint passes through unchanged."""
    c = x.dtype.type(c)

    def vjp(g, needs):
        return (g if needs[0] else None,)

    return _emit(x.data + c, (x,), vjp)


def reduce_mean(x: Tensor) -> Tensor:
    """Mean over all elements, as a scalar tensor."""
    inv = x.dtype.type(1.0 / x.size)

    def vjp(g, needs):
        return (np.full_like(x.data, g * inv) if needs[0] else None,)

    return _emit(np.asarray(x.data.mean(), dtype=x.dtype), (x,), vjp)


def flatten(x: Tensor) -> Tensor:
    """Collapse all but the leading (batch) dimension."""
    if x.data.ndim < 2:
        raise ShapeError(f"flatten needs a batch dimension, got shape {x.shape}")
    shape = x.shape

    def vjp(g, needs):
        return (g.reshape(shape) if needs[0] else None,)

    return _emit(x.data.reshape(shape[0], -1), (x,), vjp)


# ---------------------------------------------------------------------------
# losses


def log_softmax_np(z: np.ndarray) -> np.ndarray:
    """Row-wise log-softmax, stabilized by max subtraction (plain numpy)."""
    zs = z - z.max(axis=1, keepdims=True)
    return zs - np.log(np.exp(zs).sum(axis=1, keepdims=True))


def softmax_np(z: np.ndarray) -> np.ndarray:
    return np.exp(log_softmax_np(z))


def cross_entropy_per_example(logits: np.ndarray, labels: np.ndarray) -> np.ndarray:
    """-log softmax(logits)[label] per row, no autodiff (attack bookkeeping)."""
    return -log_softmax_np(logits)[np.arange(len(labels)), labels]


def softmax_cross_entropy(logits: Tensor, labels: np.ndarray) -> Tensor:
    """Mean over the batch of -log softmax(logits)[label]."""
    if logits.data.ndim != 2:
        raise ShapeError(f"logits must be [N,C], got {logits.shape}")
    labels = np.asarray(labels)
    n, c = logits.shape
    if labels.shape != (n,):
        raise ShapeError(f"labels shape {labels.shape} for {n} rows")
    if labels.min() < 0 or labels.max() >= c:
        raise ValueError(f"label out of range [0, {c})")
    ls = log_softmax_np(logits.data)
    val = -ls[np.arange(n), labels].mean()

    def vjp(g, needs):
        if not needs[0]:
            return (None,)
        gl = np.exp(ls)  # softmax
        gl[np.arange(n), labels] -= 1
        gl *= g / n
        return (gl,)

    return _emit(np.asarray(val, dtype=logits.dtype), (logits,), vjp)


def kl_divergence(logits_p: Tensor, logits_q: Tensor) -> Tensor:
    """Mean over the batch of KL(softmax(logits_p) || softmax(logits_q)).

    Adjoints exist for both sides, but a side only receives gradient when
    it requires one; passing a constant (non-recorded) logits_q keeps the
    averaged model out of the optimization.
    """
    _check_dtypes(logits_p, logits_q)
    if logits_p.shape != logits_q.shape or logits_p.data.ndim != 2:
        raise ShapeError(f"kl shapes {logits_p.shape} vs {logits_q.shape}")
    n = logits_p.shape[0]
    lp = log_softmax_np(logits_p.data)
    lq = log_softmax_np(logits_q.data)
    p = np.exp(lp)
    s = lp - lq
    row_kl = (p * s).sum(axis=1)
    val = row_kl.mean()

    def vjp(g, needs):
        gp = gq = None
        if needs[0]:
            gp = p * (s - row_kl[:, None]) * (g / n)
        if needs[1]:
            gq = (np.exp(lq) - p) * (g / n)
        return (gp, gq)

    return _emit(np.asarray(val, dtype=logits_p.dtype), (logits_p, logits_q), vjp)


# ---------------------------------------------------------------------------
# oracle


def finite_diff_gradient(f, x: Tensor, h: float = 1e-5) -> Tensor:
    """Central-difference gradient of a scalar function, coordinate by coordinate.

    ``f`` maps a tensor to a scalar (float or scalar tensor). Used as the
    independent oracle against the tape; do not route it through backward.
    """
    if h <= 0:
        raise ValueError("h must be positive")

    def evaluate() -> float:
        out = f(x)
        return out.item() if isinstance(out, Tensor) else float(out)

    flat = x.data.reshape(-1)
    grad = np.zeros_like(flat)
    for i in range(flat.size):
        orig = flat[i]
        flat[i] = orig + h
        up = evaluate()
        flat[i] = orig - h
        down = evaluate()
        flat[i] = orig
        grad[i] = (up - down) / (2 * h)
    return Tensor(grad.reshape(x.shape), dtype=x.dtype)
