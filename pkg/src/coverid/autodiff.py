"""Minimal dense-tensor core with reverse-mode differentiation.

Only the operations the ResNet-IBN model needs are provided. Every forward op
records a closure on the active :class:`Tape`; ``Tape.backward`` replays the
records in reverse and accumulates gradients into ``Tensor.grad``.

Arrays are float32 for training. Gradient checks run the same ops at float64.
"""
from __future__ import annotations

import contextlib
import threading
from dataclasses import dataclass, field
from typing import Callable, Sequence

import numpy as np
from numpy.lib.stride_tricks import sliding_window_view

EPS = 1e-5
MOMENTUM = 0.1
GEM_OFFSET = 1e-6


class Tensor:
    __slots__ = ("data", "grad", "requires_grad", "name")

    def __init__(self, data, requires_grad: bool = False, name: str = ""):
        self.data = np.asarray(data)
        self.grad: np.ndarray | None = None
        self.requires_grad = requires_grad
        self.name = name

    @property
    def shape(self) -> tuple[int, ...]:
        return self.data.shape

    @property
    def dtype(self):
        return self.data.dtype

    def numpy(self) -> np.ndarray:
        return self.data

    def zero_grad(self) -> None:
        self.grad = None

    def __repr__(self) -> str:
        tag = f" {self.name!r}" if self.name else ""
        return f"Tensor{tag}(shape={self.shape}, dtype={self.dtype})"


class Parameter(Tensor):
    """A trainable tensor plus its Adam moment buffers."""

    __slots__ = ("adam_m", "adam_v", "step_count")

    def __init__(self, data, name: str = ""):
        super().__init__(data, requires_grad=True, name=name)
        self.adam_m = np.zeros_like(self.data)
        self.adam_v = np.zeros_like(self.data)
        self.step_count = 0

    def astype(self, dtype) -> None:
        self.data = self.data.astype(dtype)
        self.adam_m = self.adam_m.astype(dtype)
        self.adam_v = self.adam_v.astype(dtype)
        self.grad = None


@dataclass
class RunningStats:
    """Batch-norm running mean/variance, updated in place during training."""

    mean: np.ndarray
    var: np.ndarray

    @classmethod
    def fresh(cls, channels: int, dtype=np.float32) -> "RunningStats":
        return cls(np.zeros(channels, dtype=dtype), np.ones(channels, dtype=dtype))


@dataclass
class _Record:
    output: Tensor
    inputs: tuple[Tensor, ...]
    backward: Callable[[np.ndarray], Sequence[np.ndarray | None]]


_local = threading.local()


def _tape_stack() -> list["Tape"]:
    if not hasattr(_local, "stack"):
        _local.stack = []
    return _local.stack


def active_tape() -> "Tape | None":
    stack = _tape_stack()
    return stack[-1] if stack else None


@dataclass
class Tape:
    records: list[_Record] = field(default_factory=list)

    def __enter__(self) -> "Tape":
        _tape_stack().append(self)
        return self

    def __exit__(self, *exc) -> None:
        _tape_stack().pop()

    def record(self, output: Tensor, inputs: Sequence[Tensor], backward) -> None:
        self.records.append(_Record(output, tuple(inputs), backward))

    def backward(self, output: Tensor, grad: np.ndarray | None = None) -> None:
        """Propagate ``grad`` (default ones) from ``output`` back to every input.

        Gradients accumulate additively, so a tensor consumed twice receives
        the sum of both contributions.
        """
        if grad is None:
            grad = np.ones_like(output.data)
        output.grad = np.asarray(grad, dtype=output.dtype)
        for rec in reversed(self.records):
            g = rec.output.grad
            if g is None:
                continue
            for t, gi in zip(rec.inputs, rec.backward(g)):
                if gi is None or not t.requires_grad:
                    continue
                t.grad = gi if t.grad is None else t.grad + gi


class KinkLog:
    """Branch decisions of non-smooth ops (ReLU masks, max-pool argmaxes,
    hardest-pair picks), recorded on one pass and replayed on later ones.

    Replaying pins the function to the smooth piece containing the recorded
    point, so finite differences there never straddle a kink.
    """

    def __init__(self) -> None:
        self.decisions: list = []
        self.replaying = False
        self._pos = 0

    def __enter__(self) -> "KinkLog":
        self._pos = 0
        _local.kinks = self
        return self

    def __exit__(self, *exc) -> None:
        _local.kinks = None
        self.replaying = True

    def decide(self, compute: Callable[[], object]):
        if not self.replaying:
            self.decisions.append(compute())
            return self.decisions[-1]
        d = self.decisions[self._pos]
        self._pos += 1
        return d


def decide(compute: Callable[[], object]):
    """Branch decision of a non-smooth op, routed through the active KinkLog if any."""
    log = getattr(_local, "kinks", None)
    return compute() if log is None else log.decide(compute)


def _emit(data: np.ndarray, inputs: Sequence[Tensor], backward) -> Tensor:
    out = Tensor(data)
    tape = active_tape()
    if tape is not None and any(t.requires_grad for t in inputs):
        out.requires_grad = True
        tape.record(out, inputs, backward)
    return out


def _pair(v) -> tuple[int, int]:
    if isinstance(v, (tuple, list)):
        return int(v[0]), int(v[1])
    return int(v), int(v)


# --------------------------------------------------------------------------
# convolution and pooling


def conv2d(x: Tensor, w: Tensor, stride=1, padding=0) -> Tensor:
    """Bias-free 2-D cross-correlation, NCHW. ``stride``/``padding`` may be pairs."""
    N, C, H, W = x.shape
    K, Cw, kh, kw = w.shape
    if C != Cw:
        raise ValueError(f"conv2d: input has {C} channels, kernel expects {Cw}")
    sh, sw = _pair(stride)
    ph, pw = _pair(padding)
    Ho = (H + 2 * ph - kh) // sh + 1
    Wo = (W + 2 * pw - kw) // sw + 1
    if Ho < 1 or Wo < 1:
        raise ValueError(f"conv2d: input {H}x{W} too small for kernel {kh}x{kw}")

    xp = np.pad(x.data, ((0, 0), (0, 0), (ph, ph), (pw, pw))) if ph or pw else x.data
    win = sliding_window_view(xp, (kh, kw), axis=(2, 3))[:, :, ::sh, ::sw][:, :, :Ho, :Wo]
    cols = win.transpose(0, 2, 3, 1, 4, 5).reshape(N * Ho * Wo, C * kh * kw)
    w2 = w.data.reshape(K, -1)
    out = np.ascontiguousarray((cols @ w2.T).reshape(N, Ho, Wo, K).transpose(0, 3, 1, 2))

    def backward(g):
        g2 = g.transpose(0, 2, 3, 1).reshape(-1, K)
        dw = (g2.T @ cols).reshape(w.shape) if w.requires_grad else None
        dx = None
        if x.requires_grad:
            dcols = (g2 @ w2).reshape(N, Ho, Wo, C, kh, kw)
            dxp = np.zeros(xp.shape, dtype=xp.dtype)
            for i in range(kh):
                for j in range(kw):
                    dxp[:, :, i : i + sh * Ho : sh, j : j + sw * Wo : sw] += dcols[
                        :, :, :, :, i, j
                    ].transpose(0, 3, 1, 2)
            dx = dxp[:, :, ph : ph + H, pw : pw + W]
        return dx, dw

    return _emit(out, (x, w), backward)


def max_pool2d(x: Tensor, k: int = 3, stride: int = 2, padding: int = 1) -> Tensor:
    """Window maxima; gradient goes to the first argmax of each window."""
    N, C, H, W = x.shape
    p = padding
    xp = np.pad(x.data, ((0, 0), (0, 0), (p, p), (p, p)), constant_values=-np.inf)
    Ho = (H + 2 * p - k) // stride + 1
    Wo = (W + 2 * p - k) // stride + 1
    win = sliding_window_view(xp, (k, k), axis=(2, 3))[:, :, ::stride, ::stride][:, :, :Ho, :Wo]
    flat = win.reshape(N, C, Ho, Wo, k * k)
    idx = decide(lambda: flat.argmax(axis=-1))
    out = np.take_along_axis(flat, idx[..., None], axis=-1)[..., 0]

    def backward(g):
        dxp = np.zeros(xp.shape, dtype=g.dtype)
        for i in range(k):
            for j in range(k):
                hit = idx == i * k + j
                if hit.any():
                    dxp[:, :, i : i + stride * Ho : stride, j : j + stride * Wo : stride] += g * hit
        return (dxp[:, :, p : p + H, p : p + W],)

    return _emit(np.ascontiguousarray(out), (x,), backward)


def gem(x: Tensor, p: Tensor, axes: tuple[int, ...] = (2, 3)) -> Tensor:
    """Generalized mean over ``axes``: (mean x^p)^(1/p), x^p = exp(p ln(x + 1e-6)).

    Differentiable in both ``x`` and the scalar exponent ``p``.
    """
    pv = float(np.asarray(p.data).reshape(-1)[0])
    if pv < 1.0:
        raise ValueError(f"GeM exponent must be >= 1, got {pv}")
    pt = np.asarray(pv, dtype=x.dtype)
    n = int(np.prod([x.shape[a] for a in axes]))
    base = x.data + GEM_OFFSET
    lx = np.log(base)
    xp = np.exp(pt * lx)
    m = xp.mean(axis=axes, keepdims=True)
    y = np.exp(np.log(m) / pt)

    def backward(g):
        gk = np.expand_dims(g, axes)
        dx = gk * (y / m) * xp / base / n if x.requires_grad else None
        dp = None
        if p.requires_grad:
            mlx = (xp * lx).mean(axis=axes, keepdims=True)
            dy_dp = y * (-np.log(m) / pt**2 + mlx / (pt * m))
            dp = np.asarray(np.sum(gk * dy_dp), dtype=p.dtype).reshape(p.shape)
        return dx, dp

    return _emit(np.squeeze(y, axis=axes), (x, p), backward)


# --------------------------------------------------------------------------
# normalization


def _normalize(x: np.ndarray, axes: tuple[int, ...]):
    mu = x.mean(axis=axes, keepdims=True)
    var = x.var(axis=axes, keepdims=True)
    inv = 1.0 / np.sqrt(var + EPS)
    xhat = (x - mu) * inv

    def back(gx):
        return inv * (
            gx
            - gx.mean(axis=axes, keepdims=True)
            - xhat * (gx * xhat).mean(axis=axes, keepdims=True)
        )

    return xhat, mu, var, back


def _affine(x: Tensor, xhat, gamma: Tensor, beta: Tensor, reduce_axes, back_xhat):
    bshape = [1] * x.data.ndim
    bshape[1] = -1
    g_ = gamma.data.reshape(bshape)
    out = g_ * xhat + beta.data.reshape(bshape)

    def backward(g):
        dgamma = (g * xhat).sum(axis=reduce_axes) if gamma.requires_grad else None
        dbeta = g.sum(axis=reduce_axes) if beta.requires_grad else None
        dx = back_xhat(g * g_) if x.requires_grad else None
        return dx, dgamma, dbeta

    return _emit(out, (x, gamma, beta), backward)


def _batch_norm(x: Tensor, gamma, beta, stats: RunningStats, training: bool, axes):
    if training:
        if x.shape[0] < 2:
            raise ValueError("batch norm in train mode needs a batch of at least 2")
        xhat, mu, var, back = _normalize(x.data, axes)
        m = x.data.size // x.shape[1]
        unbiased = var.reshape(-1) * (m / max(m - 1, 1))
        stats.mean[...] = (1 - MOMENTUM) * stats.mean + MOMENTUM * mu.reshape(-1)
        stats.var[...] = (1 - MOMENTUM) * stats.var + MOMENTUM * unbiased
    else:
        bshape = [1] * x.data.ndim
        bshape[1] = -1
        inv = (1.0 / np.sqrt(stats.var + EPS)).astype(x.dtype).reshape(bshape)
        xhat = (x.data - stats.mean.astype(x.dtype).reshape(bshape)) * inv

        def back(gx):
            return gx * inv

    return _affine(x, xhat, gamma, beta, axes, back)


def batch_norm2d(x: Tensor, gamma: Tensor, beta: Tensor, stats: RunningStats, training: bool) -> Tensor:
    return _batch_norm(x, gamma, beta, stats, training, (0, 2, 3))


def batch_norm1d(x: Tensor, gamma: Tensor, beta: Tensor, stats: RunningStats, training: bool) -> Tensor:
    return _batch_norm(x, gamma, beta, stats, training, (0,))


def instance_norm2d(x: Tensor, gamma: Tensor, beta: Tensor) -> Tensor:
    """Per-sample, per-channel normalization over (H, W). Same in train and eval."""
    if x.shape[2] * x.shape[3] < 2:
        raise ValueError("instance norm needs a spatial map with at least 2 elements")
    xhat, _, _, back = _normalize(x.data, (2, 3))
    return _affine(x, xhat, gamma, beta, (0, 2, 3), back)


# --------------------------------------------------------------------------
# elementwise, dense, shape plumbing


def relu(x: Tensor) -> Tensor:
    mask = decide(lambda: x.data > 0)
    return _emit(x.data * mask, (x,), lambda g: (g * mask,))


def add(a: Tensor, b: Tensor) -> Tensor:
    if a.shape != b.shape:
        raise ValueError(f"add: shape mismatch {a.shape} vs {b.shape}")
    return _emit(a.data + b.data, (a, b), lambda g: (g, g))


def linear(x: Tensor, w: Tensor, bias: Tensor | None = None) -> Tensor:
    """y = x @ w.T (+ bias)."""
    if x.shape[1] != w.shape[1]:
        raise ValueError(f"linear: input dim {x.shape[1]} != weight dim {w.shape[1]}")
    out = x.data @ w.data.T
    if bias is not None:
        out = out + bias.data

    def backward(g):
        dx = g @ w.data if x.requires_grad else None
        dw = g.T @ x.data if w.requires_grad else None
        if bias is None:
            return dx, dw
        return dx, dw, g.sum(axis=0)

    inputs = (x, w) if bias is None else (x, w, bias)
    return _emit(out, inputs, backward)


def split_channels(x: Tensor, at: int) -> tuple[Tensor, Tensor]:
    """Split along axis 1 into ``[:at]`` and ``[at:]``."""
    C = x.shape[1]
    if not 0 < at < C:
        raise ValueError(f"split point {at} outside (0, {C})")
    lo = _emit(x.data[:, :at], (x,), lambda g: (_place(g, x, slice(0, at)),))
    hi = _emit(x.data[:, at:], (x,), lambda g: (_place(g, x, slice(at, C)),))
    return lo, hi


def _place(g, x: Tensor, sl: slice) -> np.ndarray:
    full = np.zeros(x.shape, dtype=g.dtype)
    full[:, sl] = g
    return full


def concat_channels(parts: Sequence[Tensor]) -> Tensor:
    sizes = np.cumsum([0] + [t.shape[1] for t in parts])
    out = np.concatenate([t.data for t in parts], axis=1)

    def backward(g):
        return [g[:, sizes[i] : sizes[i + 1]] for i in range(len(parts))]

    return _emit(out, tuple(parts), backward)


def reshape(x: Tensor, shape: tuple[int, ...]) -> Tensor:
    return _emit(x.data.reshape(shape), (x,), lambda g: (g.reshape(x.shape),))


def softmax_cross_entropy(logits: Tensor, labels) -> Tensor:
    """Mean over the batch of -log softmax(logits)[label]."""
    labels = np.asarray(labels, dtype=np.int64)
    N, C = logits.shape
    if labels.shape != (N,):
        raise ValueError(f"expected {N} labels, got shape {labels.shape}")
    if labels.min() < 0 or labels.max() >= C:
        raise ValueError(f"labels must lie in [0, {C})")
    z = logits.data - logits.data.max(axis=1, keepdims=True)
    logsum = np.log(np.exp(z).sum(axis=1, keepdims=True))
    logp = z - logsum
    loss = -logp[np.arange(N), labels].mean()

    def backward(g):
        d = np.exp(logp)
        d[np.arange(N), labels] -= 1.0
        return (d * (g / N),)

    return _emit(np.asarray(loss, dtype=logits.dtype), (logits,), backward)


# --------------------------------------------------------------------------
# finite-difference verification


@dataclass
class GradCheckReport:
    name: str
    max_rel_error: float
    n_checked: int
    tolerance: float

    @property
    def passed(self) -> bool:
        return bool(self.max_rel_error < self.tolerance)

    def __str__(self) -> str:
        status = "PASS" if self.passed else "FAIL"
        return f"{status} {self.name:<24} max rel err {self.max_rel_error:.3e} ({self.n_checked} coords)"


def uniform_sampler(low=-1.0, high=1.0):
    return lambda rng, shape: rng.uniform(low, high, size=shape)


def off_kink_sampler(margin=0.1, high=1.0):
    """Uniform on [-high, -margin] U [margin, high]."""

    def sample(rng, shape):
        mag = rng.uniform(margin, high, size=shape)
        return mag * rng.choice([-1.0, 1.0], size=shape)

    return sample


def gradient_check(
    fn: Callable[..., Tensor],
    shapes: Sequence[tuple[int, ...]],
    seed: int = 0,
    tolerance: float = 1e-6,
    h: float = 1e-5,
    sampler=None,
    inputs: Sequence[np.ndarray] | None = None,
    max_coords: int | None = None,
    name: str = "",
    freeze_kinks: bool = False,
) -> GradCheckReport:
    """Compare the tape gradient of <fn(*inputs), R> against central differences.

    ``R`` is a seeded random projection of the output. Inputs are float64;
    ``sampler`` may be a single callable or one per input. With
    ``max_coords`` only a seeded random subset of each input's coordinates is
    perturbed. ``freeze_kinks`` replays the base point's branch decisions
    during the perturbed evaluations (see ``KinkLog``).
    """
    rng = np.random.default_rng(seed)
    if inputs is None:
        samplers = sampler if isinstance(sampler, (list, tuple)) else [sampler] * len(shapes)
        inputs = [
            np.asarray((s or uniform_sampler())(rng, shape), dtype=np.float64)
            for s, shape in zip(samplers, shapes)
        ]
    arrays = [np.array(a, dtype=np.float64) for a in inputs]
    tensors = [Tensor(a, requires_grad=True) for a in arrays]
    kinks = KinkLog() if freeze_kinks else contextlib.nullcontext()
    with Tape() as tape, kinks:
        out = fn(*tensors)
    proj = rng.standard_normal(out.shape)
    tape.backward(out, proj)
    analytic = [t.grad if t.grad is not None else np.zeros_like(t.data) for t in tensors]

    def objective() -> float:
        with kinks:
            return float(np.sum(fn(*[Tensor(a) for a in arrays]).data * proj))

    worst, count = 0.0, 0
    for k, a in enumerate(arrays):
        flat = a.reshape(-1)
        coords = np.arange(flat.size)
        if max_coords is not None and flat.size > max_coords:
            coords = np.sort(rng.choice(flat.size, size=max_coords, replace=False))
        for i in coords:
            orig = flat[i]
            flat[i] = orig + h
            fp = objective()
            flat[i] = orig - h
            fm = objective()
            flat[i] = orig
            num = (fp - fm) / (2 * h)
            ana = float(analytic[k].reshape(-1)[i])
            rel = abs(ana - num) / max(1e-8, abs(ana) + abs(num))
            worst = max(worst, rel)
            count += 1
    return GradCheckReport(name or getattr(fn, "__name__", "op"), worst, count, tolerance)
