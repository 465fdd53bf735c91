"""Numeric substrate: validated float64 arrays, 2D DFT, stable softmax, RNG and
a central-difference gradient oracle.

Tensors are plain ``numpy.ndarray`` objects in float64, row-major.
"""

import numpy as np


class InvalidInputError(ValueError):
    pass


class NumericConsistencyError(ArithmeticError):
    pass


class OracleFailureError(ArithmeticError):
    pass


def as_tensor(x, name="input"):
    """Return ``x`` as a C-contiguous float64 array, rejecting NaN/Inf."""
    arr = np.ascontiguousarray(x, dtype=np.float64)
    if not np.all(np.isfinite(arr)):
        raise InvalidInputError(f"{name} contains non-finite values")
    return arr


def make_rng(seed):
    """PCG64 generator; the same seed gives the same stream on every platform."""
    return np.random.Generator(np.random.PCG64(int(seed) & 0xFFFFFFFFFFFFFFFF))


def dft2(channel):
    """Unnormalized forward 2D DFT of a real H x W grid (complex128 result)."""
    x = as_tensor(channel, "channel")
    if x.ndim != 2 or x.size == 0:
        raise InvalidInputError(f"dft2 expects a non-empty 2D grid, got shape {x.shape}")
    return np.fft.fft2(x)


def idft2(spectrum, real_origin=True, tol=1e-6):
    """Inverse of :func:`dft2` with 1/(H*W) normalization.

    With ``real_origin`` the imaginary residue must stay below ``tol``;
    otherwise it is silently discarded.
    """
    spec = np.asarray(spectrum, dtype=np.complex128)
    if spec.ndim != 2 or spec.size == 0:
        raise InvalidInputError(f"idft2 expects a non-empty 2D grid, got shape {spec.shape}")
    out = np.fft.ifft2(spec)
    if real_origin:
        resid = np.max(np.abs(out.imag))
        if resid > tol:
            raise NumericConsistencyError(f"imaginary residue {resid:.3e} exceeds {tol:g}")
    return np.ascontiguousarray(out.real)


def softmax_rows(m, axis=-1):
    m = np.asarray(m, dtype=np.float64)
    z = m - np.max(m, axis=axis, keepdims=True)
    e = np.exp(z)
    return e / np.sum(e, axis=axis, keepdims=True)


def log_softmax(m, axis=-1):
    m = np.asarray(m, dtype=np.float64)
    z = m - np.max(m, axis=axis, keepdims=True)
    return z - np.log(np.sum(np.exp(z), axis=axis, keepdims=True))


def finite_diff_grad(f, p, eps=1e-5):
    """Central differences of scalar ``f`` at ``p``, one coordinate at a time."""
    if eps <= 0:
        raise InvalidInputError("eps must be positive")
    p = np.array(p, dtype=np.float64)
    flat = p.reshape(-1)
    grad = np.zeros_like(flat)
    for i in range(flat.size):
        orig = flat[i]
        flat[i] = orig + eps
        fp = f(p)
        flat[i] = orig - eps
        fm = f(p)
        flat[i] = orig
        if not (np.isfinite(fp) and np.isfinite(fm)):
            raise OracleFailureError(f"non-finite objective at coordinate {i}")
        grad[i] = (fp - fm) / (2.0 * eps)
    return grad.reshape(p.shape)
