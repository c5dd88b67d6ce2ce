"""Dense numeric kernels shared by the rest of the package.

Everything is float64. Matrices are plain 2-D numpy arrays; the kernels
validate shapes and guarantee finite outputs for finite inputs.
"""
from __future__ import annotations

import numpy as np

_GAMMA = np.uint64(0x9E3779B97F4A7C15)
_MIX1 = np.uint64(0xBF58476D1CE4E5B9)
_MIX2 = np.uint64(0x94D049BB133111EB)
_MASK64 = (1 << 64) - 1


class Rng:
    """SplitMix64 generator.

    Update rule: ``state += 0x9E3779B97F4A7C15`` then the output is the
    state passed through the two xor-shift-multiply rounds (30/27/31 shifts).
    Streams are identical on every platform because only 64-bit wrapping
    integer arithmetic is involved. Bulk draws are vectorised: the n-th
    output depends only on ``state + n * gamma``.
    """

    def __init__(self, seed: int = 0):
        self.state = int(seed) & _MASK64

    def next_u64(self, n: int) -> np.ndarray:
        if n < 0:
            raise ValueError("n must be non-negative")
        steps = np.arange(1, n + 1, dtype=np.uint64)
        with np.errstate(over="ignore"):
            z = np.uint64(self.state) + steps * _GAMMA
            z = (z ^ (z >> np.uint64(30))) * _MIX1
            z = (z ^ (z >> np.uint64(27))) * _MIX2
            z = z ^ (z >> np.uint64(31))
        self.state = (self.state + n * int(_GAMMA)) & _MASK64
        return z

    def uniform(self, n: int) -> np.ndarray:
        """n doubles in [0, 1) built from the top 53 bits."""
        return (self.next_u64(n) >> np.uint64(11)).astype(np.float64) * (1.0 / (1 << 53))

    def gaussian(self, n: int) -> np.ndarray:
        return rng_gaussian(self, n)

    def integers(self, low: int, high: int, n: int) -> np.ndarray:
        """n integers uniform on [low, high)."""
        if high <= low:
            raise ValueError(f"empty range [{low}, {high})")
        span = high - low
        out = np.floor(self.uniform(n) * span).astype(np.int64)
        return np.minimum(out, span - 1) + low

    def integer(self, low: int, high: int) -> int:
        return int(self.integers(low, high, 1)[0])

    def permutation(self, n: int) -> np.ndarray:
        # stable argsort of uniform keys: deterministic shuffle
        return np.argsort(self.uniform(n), kind="stable")


def rng_gaussian(rng: Rng, n: int) -> np.ndarray:
    """Standard normal draws via Box-Muller over SplitMix64 uniforms."""
    if n <= 0:
        return np.zeros(0)
    pairs = (n + 1) // 2
    u = rng.uniform(2 * pairs).reshape(pairs, 2)
    radius = np.sqrt(-2.0 * np.log(1.0 - u[:, 0]))
    theta = 2.0 * np.pi * u[:, 1]
    out = np.empty((pairs, 2))
    out[:, 0] = radius * np.cos(theta)
    out[:, 1] = radius * np.sin(theta)
    return out.reshape(-1)[:n]


def matmul(a: np.ndarray, b: np.ndarray) -> np.ndarray:
    a = np.asarray(a, dtype=np.float64)
    b = np.asarray(b, dtype=np.float64)
    if a.ndim != 2 or b.ndim != 2 or a.shape[1] != b.shape[0]:
        raise ValueError(f"matmul shape mismatch: {a.shape} x {b.shape}")
    return a @ b


def softmax(v: np.ndarray, axis: int = -1) -> np.ndarray:
    """Max-subtracted softmax along ``axis``."""
    v = np.asarray(v, dtype=np.float64)
    if v.size == 0 or v.shape[axis] == 0:
        raise ValueError("softmax of an empty vector")
    e = np.exp(v - v.max(axis=axis, keepdims=True))
    return e / e.sum(axis=axis, keepdims=True)


def l2_normalize_rows(m: np.ndarray, eps: float = 1e-12) -> np.ndarray:
    """Rows divided by max(norm, eps); zero rows stay zero."""
    m = np.asarray(m, dtype=np.float64)
    norms = np.sqrt((m * m).sum(axis=-1, keepdims=True))
    return m / np.maximum(norms, eps)


def layer_norm(v: np.ndarray, gamma: np.ndarray, beta: np.ndarray, eps: float = 1e-5) -> np.ndarray:
    """Normalise the last axis to zero mean / unit variance, then scale and shift."""
    v = np.asarray(v, dtype=np.float64)
    if v.shape[-1] == 0:
        raise ValueError("layer_norm of an empty vector")
    if gamma.shape[-1] != v.shape[-1] or beta.shape[-1] != v.shape[-1]:
        raise ValueError(f"layer_norm dims differ: x {v.shape}, gamma {gamma.shape}, beta {beta.shape}")
    mu = v.mean(axis=-1, keepdims=True)
    var = ((v - mu) ** 2).mean(axis=-1, keepdims=True)
    return gamma * (v - mu) / np.sqrt(var + eps) + beta


def _check_kernel(k: int, length: int) -> None:
    if k % 2 == 0:
        raise ValueError(f"conv kernel length must be odd, got {k}")
    if k > 2 * length - 1:
        raise ValueError(f"kernel length {k} too long for signal length {length}")


def pad_replicate(signal: np.ndarray, half: int) -> np.ndarray:
    """Edge-replicate ``half`` samples on both ends of the last axis."""
    widths = [(0, 0)] * (signal.ndim - 1) + [(half, half)]
    return np.pad(signal, widths, mode="edge")


def conv1d_same(signal: np.ndarray, kernel: np.ndarray, allow_short: bool = False) -> np.ndarray:
    """Cross-correlation (no flip) with replicate padding, output length == input length.

    ``out[i] = sum_j kernel[j] * padded[i + j]``. Works along the last axis,
    so a (batch, l) array is filtered row by row. Kernels longer than
    ``2l - 1`` are rejected unless ``allow_short``; the padding then simply
    repeats the edge samples further.
    """
    signal = np.asarray(signal, dtype=np.float64)
    kernel = np.asarray(kernel, dtype=np.float64)
    length = signal.shape[-1]
    k = kernel.shape[0]
    if allow_short:
        _check_kernel(k, (k + 1) // 2)
    else:
        _check_kernel(k, length)
    half = (k - 1) // 2
    padded = pad_replicate(signal, half)
    out = np.zeros(signal.shape)
    for j in range(k):
        out = out + kernel[j] * padded[..., j:j + length]
    return out


def conv1d_same_backward(signal: np.ndarray, kernel: np.ndarray, grad_out: np.ndarray):
    """Gradients of ``conv1d_same`` w.r.t. signal and kernel.

    The kernel gradient is summed over any leading batch axes.
    """
    length = signal.shape[-1]
    k = kernel.shape[0]
    half = (k - 1) // 2
    padded = pad_replicate(signal, half)
    grad_kernel = np.array([(grad_out * padded[..., j:j + length]).sum() for j in range(k)])
    grad_padded = np.zeros(padded.shape)
    for j in range(k):
        grad_padded[..., j:j + length] += kernel[j] * grad_out
    grad_signal = grad_padded[..., half:half + length].copy()
    if half:
        grad_signal[..., 0] += grad_padded[..., :half].sum(axis=-1)
        grad_signal[..., -1] += grad_padded[..., half + length:].sum(axis=-1)
    return grad_signal, grad_kernel
