"""Numeric core: dtype policy, the matmul/conv1d kernels and a counter-based RNG.

Tensors are plain :class:`numpy.ndarray` objects.  The kernels here are the
reference implementations the network layers are built on; they validate
shapes loudly instead of broadcasting.
"""

from contextlib import contextmanager

import numpy as np
from numpy.lib.stride_tricks import sliding_window_view

from nsrobust.errors import ArgumentError, DimensionError

_DTYPES = {"f32": np.float32, "f64": np.float64}
_default_dtype = np.float32


def default_dtype():
    return _default_dtype


def set_default_dtype(name):
    """Set the global floating dtype (``"f32"`` or ``"f64"``)."""
    global _default_dtype
    try:
        _default_dtype = _DTYPES[name] if isinstance(name, str) else np.dtype(name).type
    except KeyError:
        raise ArgumentError(f"unknown dtype {name!r}; expected one of {sorted(_DTYPES)}")
    if _default_dtype not in _DTYPES.values():
        raise ArgumentError(f"unsupported dtype {name!r}")


@contextmanager
def precision(name):
    """Temporarily switch the global dtype, e.g. ``with precision("f64"):``."""
    previous = _default_dtype
    set_default_dtype(name)
    try:
        yield
    finally:
        set_default_dtype(previous)


def dtype_name(dtype):
    return {np.dtype(np.float32): "f32", np.dtype(np.float64): "f64"}[np.dtype(dtype)]


def as_tensor(data, dtype=None):
    return np.ascontiguousarray(data, dtype=dtype or _default_dtype)


def matmul(a, b):
    a = np.asarray(a)
    b = np.asarray(b)
    if a.ndim != 2 or b.ndim != 2:
        raise DimensionError(f"matmul expects rank-2 operands, got shapes {a.shape} and {b.shape}")
    if a.shape[1] != b.shape[0]:
        raise DimensionError(f"matmul inner extents differ: {a.shape} x {b.shape}")
    dtype = np.result_type(a.dtype, b.dtype)
    return np.matmul(a.astype(dtype, copy=False), b.astype(dtype, copy=False))


def conv_output_length(length, k, stride, pad):
    if stride < 1 or pad < 0 or k < 1:
        raise ArgumentError(f"invalid conv geometry k={k} stride={stride} pad={pad}")
    out = (length + 2 * pad - k) // stride + 1
    if out < 1:
        raise DimensionError(
            f"conv1d output length {out} < 1 (length={length}, k={k}, stride={stride}, pad={pad})"
        )
    return out


def windows(x, k, stride, pad):
    """View of ``x[..., C, L]`` as sliding windows ``[..., C, L_out, k]``."""
    if pad:
        widths = [(0, 0)] * (x.ndim - 1) + [(pad, pad)]
        x = np.pad(x, widths)
    view = sliding_window_view(x, k, axis=-1)
    return view[..., ::stride, :]


def im2col(x, k, stride, pad):
    """Unfold ``x[N, C, L]`` into a row-per-output-position matrix ``[N*L_out, C*k]``."""
    n, c, _ = x.shape
    cols = windows(x, k, stride, pad)
    out_len = cols.shape[2]
    return cols.transpose(0, 2, 1, 3).reshape(n * out_len, c * k), out_len


def conv1d_batch(x, kernels, stride=1, pad=0):
    """Cross-correlate ``x[N, C, L]`` with ``kernels[O, C, k]``."""
    if x.ndim != 3 or kernels.ndim != 3:
        raise DimensionError(f"conv1d_batch expects [N,C,L] and [O,C,k], got {x.shape}, {kernels.shape}")
    if x.shape[1] != kernels.shape[1]:
        raise DimensionError(
            f"conv1d channel mismatch: input {x.shape} vs kernels {kernels.shape}"
        )
    conv_output_length(x.shape[2], kernels.shape[2], stride, pad)
    out_ch = kernels.shape[0]
    cols, out_len = im2col(x, kernels.shape[2], stride, pad)
    out = matmul(cols, kernels.reshape(out_ch, -1).T)
    return out.reshape(x.shape[0], out_len, out_ch).transpose(0, 2, 1)


def conv1d(x, kernels, stride=1, pad=0):
    """Single-sample cross-correlation: ``x[C, L]`` -> ``[O, L_out]``."""
    x = np.asarray(x)
    kernels = np.asarray(kernels)
    if x.ndim != 2:
        raise DimensionError(f"conv1d expects x of shape [channels, length], got {x.shape}")
    return conv1d_batch(x[None], kernels, stride, pad)[0]


def toeplitz(kernels, length, stride=1, pad=0):
    """Materialize the shared-weight matrix ``T`` with ``T @ x.ravel() == conv1d(x).ravel()``."""
    kernels = np.asarray(kernels)
    out_ch, in_ch, k = kernels.shape
    out_len = conv_output_length(length, k, stride, pad)
    t = np.zeros((out_ch * out_len, in_ch * length), dtype=kernels.dtype)
    for o in range(out_ch):
        for p in range(out_len):
            for c in range(in_ch):
                for j in range(k):
                    src = p * stride + j - pad
                    if 0 <= src < length:
                        t[o * out_len + p, c * length + src] = kernels[o, c, j]
    return t


class RandStream:
    """Deterministic random stream keyed by ``(seed, stream_id)``.

    Bits come from Philox4x64-10 (numpy's :class:`~numpy.random.Philox`)
    keyed with ``seed + 2**64 * stream_id``.  Every distribution is derived
    from the raw 64-bit words so that the values are identical on all
    platforms and numpy versions:

    * uniform:  ``lo + (hi - lo) * (word >> 11) * 2**-53``
    * normal:   Box-Muller on consecutive uniform pairs ``(u1, u2)`` with
      ``u1`` replaced by ``1 - u1`` so the log argument is in (0, 1]
    * sign:     ``+1`` if the top bit of the word is set, else ``-1``
    """

    def __init__(self, seed, stream_id=0):
        self.seed = int(seed) % 2**64
        self.stream_id = int(stream_id) % 2**64
        self._bits = np.random.Philox(key=self.seed + (self.stream_id << 64))

    def child(self, stream_id):
        """Independent stream with the same seed and a different id."""
        return RandStream(self.seed, stream_id)

    def spawn(self, k):
        """Child stream number ``k`` derived from this stream's id."""
        return RandStream(self.seed, (self.stream_id * 1_000_003 + int(k) + 1) % 2**64)

    def raw(self, n):
        return self._bits.random_raw(int(n)).astype(np.uint64)

    def _unit(self, n):
        return (self.raw(n) >> np.uint64(11)).astype(np.float64) * 2.0**-53

    def uniform(self, lo, hi, shape, dtype=None):
        if not lo < hi:
            raise ArgumentError(f"uniform requires lo < hi, got lo={lo}, hi={hi}")
        n = int(np.prod(shape))
        out = lo + (hi - lo) * self._unit(n)
        return out.reshape(shape).astype(dtype or _default_dtype)

    def normal(self, mu, sigma, shape, dtype=None):
        if not sigma > 0:
            raise ArgumentError(f"normal requires sigma > 0, got {sigma}")
        n = int(np.prod(shape))
        m = (n + 1) // 2
        u = self._unit(2 * m).reshape(m, 2)
        radius = np.sqrt(-2.0 * np.log1p(-u[:, 0]))
        angle = 2.0 * np.pi * u[:, 1]
        z = np.stack([radius * np.cos(angle), radius * np.sin(angle)], axis=1).ravel()[:n]
        return (mu + sigma * z).reshape(shape).astype(dtype or _default_dtype)

    def sign_bernoulli(self, shape, dtype=None):
        n = int(np.prod(shape))
        top = (self.raw(n) >> np.uint64(63)).astype(np.int8)
        return (2 * top - 1).reshape(shape).astype(dtype or _default_dtype)

    def integers(self, high, shape):
        """Uniform integers in ``[0, high)``."""
        if high < 1:
            raise ArgumentError(f"integers requires high >= 1, got {high}")
        n = int(np.prod(shape))
        return np.minimum((self._unit(n) * high).astype(np.int64), high - 1).reshape(shape)

    def permutation(self, n):
        return np.argsort(self._unit(n), kind="stable")


def rand(stream, kind, shape, *params, dtype=None):
    """Dispatch helper: ``rand(s, "uniform", (3,), 0.0, 1.0)``."""
    if kind == "uniform":
        return stream.uniform(*params, shape, dtype=dtype)
    if kind == "normal":
        return stream.normal(*params, shape, dtype=dtype)
    if kind == "sign_bernoulli":
        return stream.sign_bernoulli(shape, dtype=dtype)
    raise ArgumentError(f"unknown distribution {kind!r}")
