"""Frequency-domain style transfer.

Low-frequency amplitudes of a source image are swapped for those of an
averaged target amplitude profile while the source phase is kept.
"""

import warnings
from dataclasses import dataclass

import numpy as np

from .numerics import InvalidInputError, as_tensor, dft2

# beta defaults per modality
BETA_RGB = 0.01
BETA_DEPTH = 0.09


class InvalidConfigError(ValueError):
    pass


class ImaginaryResidueWarning(RuntimeWarning):
    pass


def _channels_last(image):
    x = as_tensor(image, "image")
    if x.ndim == 2:
        return x[:, :, None], True
    if x.ndim != 3:
        raise InvalidInputError(f"expected H x W or H x W x C image, got shape {x.shape}")
    return x, False


@dataclass(frozen=True)
class SpectralImage:
    amplitude: np.ndarray  # H x W x C, >= 0
    phase: np.ndarray  # H x W x C, in (-pi, pi]
    squeeze: bool = False


@dataclass(frozen=True)
class StyleConfig:
    beta: float
    value_range: tuple = (0.0, 255.0)

    def __post_init__(self):
        if not 0.0 <= self.beta <= 1.0:
            raise InvalidConfigError(f"beta must lie in [0, 1], got {self.beta}")
        lo, hi = self.value_range
        if not lo < hi:
            raise InvalidConfigError(f"value_range must satisfy min < max, got {self.value_range}")


@dataclass(frozen=True)
class AmplitudeProfile:
    amplitude: np.ndarray  # H x W x C
    sample_count: int

    @property
    def shape(self):
        return self.amplitude.shape


def decompose(image):
    x, squeeze = _channels_last(image)
    amp = np.empty_like(x)
    pha = np.empty_like(x)
    for c in range(x.shape[2]):
        f = dft2(x[:, :, c])
        amp[:, :, c] = np.abs(f)
        pha[:, :, c] = np.angle(f)
    # np.angle returns [-pi, pi]; fold -pi onto pi
    pha[pha <= -np.pi] = np.pi
    return SpectralImage(amp, pha, squeeze)


def recompose(spec, residue_tol=1e-4):
    """Inverse of :func:`decompose`. Warns when the result is not real."""
    f = spec.amplitude * np.exp(1j * spec.phase)
    out = np.fft.ifft2(f, axes=(0, 1))
    resid = float(np.max(np.abs(out.imag))) if out.size else 0.0
    if resid > residue_tol:
        warnings.warn(f"imaginary residue {resid:.3e} discarded", ImaginaryResidueWarning, stacklevel=2)
    real = np.ascontiguousarray(out.real)
    return real[:, :, 0] if spec.squeeze else real


def low_freq_window(h, w, beta):
    """Boolean mask of the low-frequency window in unshifted FFT indexing.

    The window is a centered rectangle of round(beta*h) x round(beta*w)
    around DC in fftshift-ed coordinates.
    """
    if not 0.0 <= beta <= 1.0:
        raise InvalidConfigError(f"beta must lie in [0, 1], got {beta}")
    if h < 1 or w < 1:
        raise InvalidInputError("window size must be positive")
    nh = int(round(beta * h))
    nw = int(round(beta * w))
    centered = np.zeros((h, w), dtype=bool)
    r0 = h // 2 - nh // 2
    c0 = w // 2 - nw // 2
    centered[r0:r0 + nh, c0:c0 + nw] = True
    return np.fft.ifftshift(centered)


def target_amplitude_profile(targets):
    targets = list(targets)
    if not targets:
        raise InvalidInputError("need at least one target image")
    first = np.shape(targets[0])
    acc = np.zeros(decompose(targets[0]).amplitude.shape)
    for t in targets:
        if np.shape(t) != first:
            raise InvalidInputError(f"target shapes differ: {np.shape(t)} vs {first}")
        acc += decompose(t).amplitude
    return AmplitudeProfile(acc / len(targets), len(targets))


def stylize(source, profile, cfg, clamp=True):
    """Replace the source's low-frequency amplitude with the profile's.

    Single-channel (depth) maps may be given as H x W. ``clamp=False``
    returns the raw inverse transform.
    """
    spec = decompose(source)
    if spec.amplitude.shape != profile.amplitude.shape:
        raise InvalidInputError(
            f"source spectrum {spec.amplitude.shape} does not match profile {profile.amplitude.shape}")
    if cfg.beta == 0.0:
        out = as_tensor(source).copy()
    else:
        h, w, _ = spec.amplitude.shape
        win = low_freq_window(h, w, cfg.beta)[:, :, None]
        amp = np.where(win, profile.amplitude, spec.amplitude)
        # a non-symmetric window leaves a small imaginary part; only the real part is kept
        with warnings.catch_warnings():
            warnings.simplefilter("ignore", ImaginaryResidueWarning)
            out = recompose(SpectralImage(amp, spec.phase, spec.squeeze))
    if clamp:
        out = np.clip(out, *cfg.value_range)
    return out
