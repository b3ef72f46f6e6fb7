"""Layer primitives with hand-written forward/backward passes.

Everything is float64 numpy. Feature maps use [batch, channels, height,
width]. Convolutions are 3x3, stride 1, zero-padded "same"; pooling is
2x2 average with stride 2 (odd trailing rows/columns are dropped).
The Adam update is implemented from its defining recurrences.
"""

from __future__ import annotations

import math

import numpy as np


def he_uniform(rng: np.random.Generator, shape, fan_in: int) -> np.ndarray:
    """Uniform init scaled by fan-in: U(-sqrt(6/fan_in), +sqrt(6/fan_in))."""
    limit = math.sqrt(6.0 / fan_in)
    return rng.uniform(-limit, limit, size=shape)


# ---------------------------------------------------------------- conv

def conv3x3(x: np.ndarray, w: np.ndarray, b: np.ndarray) -> np.ndarray:
    """x: [B, Ci, H, W], w: [Co, Ci, 3, 3], b: [Co] -> [B, Co, H, W].

    Implemented as nine shifted matmuls (one per tap); no im2col buffer.
    """
    B, Ci, H, W = x.shape
    Co = w.shape[0]
    xp = np.zeros((B, Ci, H + 2, W + 2), dtype=np.float64)
    xp[:, :, 1:-1, 1:-1] = x
    acc = np.zeros((B, Co, H * W), dtype=np.float64)
    for di in range(3):
        for dj in range(3):
            xs = xp[:, :, di:di + H, dj:dj + W].reshape(B, Ci, H * W)
            acc += np.matmul(w[:, :, di, dj], xs)
    return acc.reshape(B, Co, H, W) + b[None, :, None, None]


def conv3x3_backward(dout: np.ndarray, x: np.ndarray, w: np.ndarray,
                     need_dx: bool = True):
    """Gradients for conv3x3. Returns (dx, dw, db); dx is None when the
    caller does not need to propagate further down."""
    B, Ci, H, W = x.shape
    Co = w.shape[0]
    dout_r = dout.reshape(B, Co, H * W)
    db = dout.sum(axis=(0, 2, 3))
    dw = np.zeros_like(w)
    xp = np.zeros((B, Ci, H + 2, W + 2), dtype=np.float64)
    xp[:, :, 1:-1, 1:-1] = x
    dxp = np.zeros_like(xp) if need_dx else None
    for di in range(3):
        for dj in range(3):
            xs = xp[:, :, di:di + H, dj:dj + W].reshape(B, Ci, H * W)
            # [B, Co, HW] @ [B, HW, Ci] summed over batch -> [Co, Ci]
            dw[:, :, di, dj] = np.matmul(dout_r, xs.transpose(0, 2, 1)).sum(axis=0)
            if need_dx:
                contrib = np.matmul(w[:, :, di, dj].T, dout_r).reshape(B, Ci, H, W)
                dxp[:, :, di:di + H, dj:dj + W] += contrib
    dx = dxp[:, :, 1:-1, 1:-1] if need_dx else None
    return dx, dw, db


# ---------------------------------------------------------------- misc

def relu(x: np.ndarray) -> np.ndarray:
    return np.maximum(x, 0.0)


def relu_backward(dout: np.ndarray, out: np.ndarray) -> np.ndarray:
    return dout * (out > 0.0)


def avgpool2(x: np.ndarray) -> np.ndarray:
    """2x2 average pooling, stride 2; odd trailing row/col dropped."""
    B, C, H, W = x.shape
    He, We = (H // 2) * 2, (W // 2) * 2
    xc = x[:, :, :He, :We]
    return 0.25 * (xc[:, :, 0::2, 0::2] + xc[:, :, 1::2, 0::2]
                   + xc[:, :, 0::2, 1::2] + xc[:, :, 1::2, 1::2])


def avgpool2_backward(dout: np.ndarray, in_shape) -> np.ndarray:
    B, C, H, W = in_shape
    dx = np.zeros(in_shape, dtype=np.float64)
    g = 0.25 * dout
    He, We = (H // 2) * 2, (W // 2) * 2
    dx[:, :, 0:He:2, 0:We:2] = g
    dx[:, :, 1:He:2, 0:We:2] = g
    dx[:, :, 0:He:2, 1:We:2] = g
    dx[:, :, 1:He:2, 1:We:2] = g
    return dx


def global_avgpool(x: np.ndarray) -> np.ndarray:
    return x.mean(axis=(2, 3))


def global_avgpool_backward(dout: np.ndarray, in_shape) -> np.ndarray:
    B, C, H, W = in_shape
    return np.broadcast_to(dout[:, :, None, None], in_shape) / (H * W)


def linear(x: np.ndarray, w: np.ndarray, b: np.ndarray) -> np.ndarray:
    """x: [B, In], w: [Out, In], b: [Out]."""
    return x @ w.T + b


def linear_backward(dout: np.ndarray, x: np.ndarray, w: np.ndarray):
    dw = dout.T @ x
    db = dout.sum(axis=0)
    dx = dout @ w
    return dx, dw, db


def softmax(logits: np.ndarray) -> np.ndarray:
    shifted = logits - logits.max(axis=-1, keepdims=True)
    e = np.exp(shifted)
    return e / e.sum(axis=-1, keepdims=True)


def cross_entropy(logits: np.ndarray, targets: np.ndarray) -> float:
    """Mean CE over the batch, computed via log-sum-exp for stability."""
    shifted = logits - logits.max(axis=-1, keepdims=True)
    lse = np.log(np.exp(shifted).sum(axis=-1))
    picked = shifted[np.arange(logits.shape[0]), targets]
    return float(np.mean(lse - picked))


def softmax_ce_backward(probs: np.ndarray, targets: np.ndarray) -> np.ndarray:
    """d(mean CE)/d(logits) = (probs - onehot) / B."""
    d = probs.copy()
    d[np.arange(probs.shape[0]), targets] -= 1.0
    return d / probs.shape[0]


# ---------------------------------------------------------------- adam

def adam_update(w, g, m, v, t, lr, beta1, beta2, eps):
    """One Adam step on a single tensor. Returns (w', m', v')."""
    m = beta1 * m + (1.0 - beta1) * g
    v = beta2 * v + (1.0 - beta2) * (g * g)
    m_hat = m / (1.0 - beta1**t)
    v_hat = v / (1.0 - beta2**t)
    w = w - lr * m_hat / (np.sqrt(v_hat) + eps)
    return w, m, v


class AdamState:
    """First/second moment accumulators per tensor name."""

    def __init__(self, weights: dict):
        self.m = {k: np.zeros_like(w) for k, w in weights.items()}
        self.v = {k: np.zeros_like(w) for k, w in weights.items()}
