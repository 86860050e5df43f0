"""Neural layers on top of :mod:`mtqnet.autodiff`, plus parameters and Adam.

conv2d, the LSTM recurrence and the sinc filterbank are fused operations
with hand-written backward passes; attention and dense layers are composed
from the primitive ops.
"""
from __future__ import annotations

from typing import Callable, Iterator

import numpy as np
from numpy.lib.stride_tricks import sliding_window_view

from . import autodiff as ad
from .autodiff import Tensor, _result, _sigmoid, as_tensor
from .dsp import clamp_sinc_bands, kernel_time_axis
from .errors import ShapeError


# ---------------------------------------------------------------------------
# Parameters
# ---------------------------------------------------------------------------

class ParamStore:
    """Ordered named parameters with gradient buffers and Adam moments."""

    def __init__(self):
        self._params: dict[str, Tensor] = {}
        self.m: dict[str, np.ndarray] = {}
        self.v: dict[str, np.ndarray] = {}
        self.step = 0
        self.hooks: list[Callable[["ParamStore"], None]] = []

    def add(self, name: str, value) -> Tensor:
        if name in self._params:
            raise KeyError(f"duplicate parameter name {name!r}")
        t = Tensor(np.array(value, dtype=np.float64), requires_grad=True, name=name)
        t.grad = np.zeros_like(t.data)
        self._params[name] = t
        self.m[name] = np.zeros_like(t.data)
        self.v[name] = np.zeros_like(t.data)
        return t

    def __getitem__(self, name: str) -> Tensor:
        return self._params[name]

    def __contains__(self, name: str) -> bool:
        return name in self._params

    def __iter__(self) -> Iterator[str]:
        return iter(self._params)

    def __len__(self):
        return len(self._params)

    def names(self) -> list[str]:
        return list(self._params)

    def items(self):
        return self._params.items()

    def num_scalars(self) -> int:
        return sum(t.size for t in self._params.values())

    def zero_grad(self) -> None:
        for t in self._params.values():
            t.grad = np.zeros_like(t.data)

    def state_dict(self) -> dict[str, np.ndarray]:
        return {k: t.data.copy() for k, t in self._params.items()}

    def load_state_dict(self, state: dict[str, np.ndarray], strict: bool = True) -> None:
        if strict and set(state) != set(self._params):
            missing = sorted(set(self._params) - set(state))
            extra = sorted(set(state) - set(self._params))
            raise ShapeError(f"parameter name mismatch: missing={missing} unexpected={extra}")
        for k, arr in state.items():
            if k not in self._params:
                continue
            t = self._params[k]
            arr = np.asarray(arr, dtype=np.float64)
            if arr.shape != t.shape:
                raise ShapeError(f"parameter {k!r}: checkpoint shape {arr.shape} != model shape {t.shape}")
            t.data = arr.copy()

    def apply_hooks(self) -> None:
        for hook in self.hooks:
            hook(self)


def adam_step(store: ParamStore, lr: float = 1e-4, beta1: float = 0.9, beta2: float = 0.999,
              eps: float = 1e-8, step_index: int | None = None) -> None:
    """Bias-corrected Adam update in place, followed by the store's constraint hooks."""
    t = store.step + 1 if step_index is None else int(step_index)
    store.step = t
    c1 = 1.0 - beta1 ** t
    c2 = 1.0 - beta2 ** t
    for name, p in store.items():
        g = p.grad
        m = beta1 * store.m[name] + (1.0 - beta1) * g
        v = beta2 * store.v[name] + (1.0 - beta2) * g * g
        store.m[name], store.v[name] = m, v
        p.data = p.data - lr * (m / c1) / (np.sqrt(v / c2) + eps)
    store.apply_hooks()


# ---------------------------------------------------------------------------
# Initializers
# ---------------------------------------------------------------------------

def glorot_uniform(rng: np.random.Generator, fan_in: int, fan_out: int, shape) -> np.ndarray:
    bound = np.sqrt(6.0 / (fan_in + fan_out))
    return rng.uniform(-bound, bound, size=shape)


def conv_init(rng, c_out: int, c_in: int, kh: int, kw: int) -> np.ndarray:
    return glorot_uniform(rng, c_in * kh * kw, c_out * kh * kw, (c_out, c_in, kh, kw))


def lstm_init(rng, d_in: int, hidden: int):
    bound = 1.0 / np.sqrt(hidden)
    w_ih = rng.uniform(-bound, bound, size=(d_in, 4 * hidden))
    w_hh = rng.uniform(-bound, bound, size=(hidden, 4 * hidden))
    b = np.zeros(4 * hidden)
    b[hidden:2 * hidden] = 1.0  # forget gate
    return w_ih, w_hh, b


# ---------------------------------------------------------------------------
# Layers
# ---------------------------------------------------------------------------

def _pair(v):
    return (v, v) if np.isscalar(v) else tuple(v)


def conv2d(x, weight, bias, stride=1, padding=0) -> Tensor:
    """Cross-correlation of ``x [C_in, H, W]`` with ``weight [C_out, C_in, kh, kw]``."""
    x, weight, bias = as_tensor(x), as_tensor(weight), as_tensor(bias)
    sh, sw = _pair(stride)
    ph, pw = _pair(padding)
    if x.ndim != 3 or weight.ndim != 4 or weight.shape[1] != x.shape[0]:
        raise ShapeError(f"conv2d shape mismatch: input {x.shape}, weight {weight.shape}")
    c_out, c_in, kh, kw = weight.shape
    if bias.shape != (c_out,):
        raise ShapeError(f"conv2d bias shape {bias.shape} != ({c_out},)")
    _, h, w = x.shape
    hp, wp = h + 2 * ph, w + 2 * pw
    if kh > hp or kw > wp:
        raise ShapeError(f"conv2d kernel {(kh, kw)} larger than padded input {(hp, wp)}")
    ho = (hp - kh) // sh + 1
    wo = (wp - kw) // sw + 1
    if ph or pw:
        xp = np.zeros((c_in, hp, wp))
        xp[:, ph:ph + h, pw:pw + w] = x.data
    else:
        xp = x.data
    win = sliding_window_view(xp, (kh, kw), axis=(1, 2))[:, ::sh, ::sw][:, :ho, :wo]
    cols = win.transpose(1, 2, 0, 3, 4).reshape(ho * wo, c_in * kh * kw)
    wmat = weight.data.reshape(c_out, -1)
    out = (cols @ wmat.T + bias.data).T.reshape(c_out, ho, wo)

    def bw(g):
        gm = g.reshape(c_out, ho * wo)
        dw = (gm @ cols).reshape(weight.shape)
        db = gm.sum(axis=1)
        dcols = (gm.T @ wmat).reshape(ho, wo, c_in, kh, kw)
        dxp = np.zeros((c_in, hp, wp))
        for i in range(kh):
            for j in range(kw):
                dxp[:, i:i + sh * (ho - 1) + 1:sh, j:j + sw * (wo - 1) + 1:sw] += \
                    dcols[:, :, :, i, j].transpose(2, 0, 1)
        return dxp[:, ph:ph + h, pw:pw + w], dw, db

    return _result("conv2d", out, (x, weight, bias), bw)


def lstm(x, w_ih, w_hh, b, reverse: bool = False) -> Tensor:
    """Single-direction LSTM over ``x [T, D]`` from zero state; gates ordered i, f, g, o."""
    x, w_ih, w_hh, b = (as_tensor(t) for t in (x, w_ih, w_hh, b))
    if x.ndim != 2 or w_ih.shape[0] != x.shape[1] or w_ih.shape[1] != w_hh.shape[1] \
            or w_hh.shape[1] != 4 * w_hh.shape[0] or b.shape != (w_hh.shape[1],):
        raise ShapeError(f"lstm shape mismatch: x {x.shape}, w_ih {w_ih.shape}, "
                         f"w_hh {w_hh.shape}, b {b.shape}")
    T = x.shape[0]
    n = w_hh.shape[0]
    xp = x.data @ w_ih.data + b.data
    order = range(T - 1, -1, -1) if reverse else range(T)
    gates = np.empty((T, 4 * n))
    c_prev = np.zeros((T, n))
    c_all = np.empty((T, n))
    h_prev = np.zeros((T, n))
    out = np.empty((T, n))
    h = np.zeros(n)
    c = np.zeros(n)
    whh = w_hh.data
    for t in order:
        z = xp[t] + h @ whh
        i = _sigmoid(z[:n])
        f = _sigmoid(z[n:2 * n])
        gg = np.tanh(z[2 * n:3 * n])
        o = _sigmoid(z[3 * n:])
        h_prev[t] = h
        c_prev[t] = c
        c = f * c + i * gg
        h = o * np.tanh(c)
        gates[t, :n], gates[t, n:2 * n], gates[t, 2 * n:3 * n], gates[t, 3 * n:] = i, f, gg, o
        c_all[t] = c
        out[t] = h

    def bw(gout):
        dz_all = np.empty((T, 4 * n))
        dh_next = np.zeros(n)
        dc_next = np.zeros(n)
        for t in reversed(order):
            i, f, gg, o = gates[t, :n], gates[t, n:2 * n], gates[t, 2 * n:3 * n], gates[t, 3 * n:]
            tc = np.tanh(c_all[t])
            dh = gout[t] + dh_next
            dc = dc_next + dh * o * (1.0 - tc * tc)
            dz = dz_all[t]
            dz[:n] = dc * gg * i * (1.0 - i)
            dz[n:2 * n] = dc * c_prev[t] * f * (1.0 - f)
            dz[2 * n:3 * n] = dc * i * (1.0 - gg * gg)
            dz[3 * n:] = dh * tc * o * (1.0 - o)
            dc_next = dc * f
            dh_next = dz @ whh.T
        return dz_all @ w_ih.data.T, x.data.T @ dz_all, h_prev.T @ dz_all, dz_all.sum(axis=0)

    return _result("lstm", out, (x, w_ih, w_hh, b), bw)


def bilstm(x, fw: tuple, bw: tuple) -> Tensor:
    """Forward and time-reversed LSTM outputs concatenated per step: ``[T, 2*hidden]``."""
    return ad.concat([lstm(x, *fw), lstm(x, *bw, reverse=True)], axis=1)


def attention(x, w_q, w_k, w_v) -> Tensor:
    """Single-head scaled dot-product self-attention over rows of ``x [T, D]``."""
    x = as_tensor(x)
    d = x.shape[1]
    for w in (w_q, w_k, w_v):
        if as_tensor(w).shape != (d, d):
            raise ShapeError(f"attention weight {as_tensor(w).shape} != ({d}, {d})")
    q, k, v = x @ w_q, x @ w_k, x @ w_v
    scores = (q @ k.T) * (1.0 / np.sqrt(d))
    return ad.softmax(scores, axis=-1) @ v


def dense(x, w, b) -> Tensor:
    return x @ w + b


def sinc_bank(low_hz, band_hz, sample_rate_hz: int, kernel_len: int) -> Tensor:
    """Sinc band-pass kernels ``[N, kernel_len]`` differentiable in both cutoffs."""
    low_hz, band_hz = as_tensor(low_hz), as_tensor(band_hz)
    t = kernel_time_axis(kernel_len)
    win = np.hamming(kernel_len)
    low, band = clamp_sinc_bands(low_hz.data, band_hz.data, sample_rate_hz)
    f1 = low / sample_rate_hz
    f2 = (low + band) / sample_rate_hz
    arg1 = 2.0 * np.pi * f1[:, None] * t
    arg2 = 2.0 * np.pi * f2[:, None] * t
    safe_t = np.where(t == 0, 1.0, t)
    lp1 = np.where(t == 0, 2.0 * f1[:, None], np.sin(arg1) / (np.pi * safe_t))
    lp2 = np.where(t == 0, 2.0 * f2[:, None], np.sin(arg2) / (np.pi * safe_t))
    out = (lp2 - lp1) * win

    def bw(g):
        gw = g * win
        d_f1 = -(gw * 2.0 * np.cos(arg1)).sum(axis=1)
        d_f2 = (gw * 2.0 * np.cos(arg2)).sum(axis=1)
        return (d_f1 + d_f2) / sample_rate_hz, d_f2 / sample_rate_hz

    return _result("sinc_bank", out, (low_hz, band_hz), bw)


def filterbank_energies(power, kernels, basis_re: np.ndarray, basis_im: np.ndarray) -> Tensor:
    """Frame energies of each kernel's output: ``power [T, B] @ |H|^2 [B, N]``.

    ``power`` is the zero-padded frame power spectrum. The transform is long
    enough to hold the full linear convolution of frame and kernel, so each
    output is exactly the summed one-sided power spectrum of the filtered frame.
    """
    re = kernels @ basis_re
    im = kernels @ basis_im
    response = ad.square(re) + ad.square(im)
    return as_tensor(power) @ response.T
