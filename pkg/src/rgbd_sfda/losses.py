"""Output-level adaptation losses and pseudo-label filtering.

All losses accept logits with a trailing class axis (``... x H x W x C``) and
come in two flavours: ``f(...)`` returns the scalar, ``f_grad(...)`` returns
``(loss, dlogits)``. Degenerate inputs (nothing to average over) give a zero
loss and emit :class:`DegenerateLossWarning`.
"""

import math
import warnings
from dataclasses import dataclass

import numpy as np

from .numerics import InvalidInputError, log_softmax, softmax_rows

IGNORE_INDEX = 255
SCOPES = ("per_class", "global")
# classes with fewer pixels than this skip the top-fraction branch
MIN_CLASS_PIXELS = 3


class DegenerateLossWarning(RuntimeWarning):
    pass


@dataclass(frozen=True)
class FilterConfig:
    tau: float = 0.9
    top_fraction: float = 0.66
    scope: str = "per_class"

    def __post_init__(self):
        if not 0.0 <= self.tau <= 1.0:
            raise InvalidInputError(f"tau must lie in [0, 1], got {self.tau}")
        if not 0.0 < self.top_fraction <= 1.0:
            raise InvalidInputError(f"top_fraction must lie in (0, 1], got {self.top_fraction}")
        if self.scope not in SCOPES:
            raise InvalidInputError(f"unknown scope {self.scope!r}")


@dataclass(frozen=True)
class PseudoLabel:
    labels: np.ndarray  # ... x H x W int
    confidence: np.ndarray  # ... x H x W


@dataclass(frozen=True)
class SelectionMask:
    mask: np.ndarray  # ... x H x W bool
    rejected_depth: int
    rejected_confidence: int
    kept: int

    @property
    def kept_fraction(self):
        return self.kept / self.mask.size if self.mask.size else 0.0


def probabilities(logits):
    return softmax_rows(logits, axis=-1)


def pseudo_labels(teacher_probs):
    """Argmax labels (lowest index wins ties) and their confidences."""
    probs = np.asarray(teacher_probs, dtype=np.float64)
    labels = np.argmax(probs, axis=-1)
    conf = np.take_along_axis(probs, labels[..., None], axis=-1)[..., 0]
    return PseudoLabel(labels, conf)


def _top_fraction_keep(conf, frac):
    """Pixels whose confidence ranks within the top ``ceil(frac*n)``; ties at the cut are kept."""
    n = conf.size
    k = math.ceil(frac * n - 1e-9)
    if k <= 0:
        return np.zeros(conf.shape, dtype=bool)
    cut = np.partition(conf.ravel(), n - k)[n - k]
    return conf >= cut


def _select_image(labels, conf, cfg):
    keep = conf > cfg.tau
    if cfg.scope == "global":
        return keep | _top_fraction_keep(conf, cfg.top_fraction)
    for c in np.unique(labels):
        sel = labels == c
        if sel.sum() < MIN_CLASS_PIXELS:
            continue
        keep[sel] |= _top_fraction_keep(conf[sel], cfg.top_fraction)
    return keep


def selection_mask(pl, depth_valid, cfg=FilterConfig()):
    """Keep a pixel iff its depth is valid and its confidence passes tau or the top fraction.

    Ranking is done per image (leading axes are treated as a batch).
    """
    labels = np.asarray(pl.labels)
    conf = np.asarray(pl.confidence, dtype=np.float64)
    valid = np.asarray(depth_valid, dtype=bool)
    if valid.shape != labels.shape or conf.shape != labels.shape:
        raise InvalidInputError(f"shape mismatch: labels {labels.shape}, confidence {conf.shape}, valid {valid.shape}")
    if labels.ndim < 2:
        raise InvalidInputError("expected at least an H x W grid")
    lead = labels.shape[:-2]
    hw = labels.shape[-2:]
    conf_ok = np.empty(labels.shape, dtype=bool)
    flat_l = labels.reshape((-1,) + hw)
    flat_c = conf.reshape((-1,) + hw)
    flat_ok = conf_ok.reshape((-1,) + hw)
    for i in range(flat_l.shape[0]):
        flat_ok[i] = _select_image(flat_l[i], flat_c[i], cfg)
    conf_ok = flat_ok.reshape(lead + hw)
    mask = valid & conf_ok
    return SelectionMask(mask, int((~valid).sum()), int((valid & ~conf_ok).sum()), int(mask.sum()))


def _nll_grad(logits, labels, weight):
    """Weighted sum of -log p(label) and its gradient; ``weight`` zeroes excluded pixels."""
    logits = np.asarray(logits, dtype=np.float64)
    logp = log_softmax(logits)
    safe = np.where(weight > 0, labels, 0).astype(np.int64)
    picked = np.take_along_axis(logp, safe[..., None], axis=-1)[..., 0]
    loss = -float(np.sum(weight * picked))
    grad = np.exp(logp)
    np.put_along_axis(grad, safe[..., None], np.take_along_axis(grad, safe[..., None], axis=-1) - 1.0, axis=-1)
    return loss, grad * weight[..., None]


def masked_ce_grad(logits, pl, mask):
    m = mask.mask if isinstance(mask, SelectionMask) else np.asarray(mask, dtype=bool)
    logits = np.asarray(logits, dtype=np.float64)
    if m.shape != logits.shape[:-1] or pl.labels.shape != m.shape:
        raise InvalidInputError(f"shape mismatch: logits {logits.shape}, mask {m.shape}, labels {pl.labels.shape}")
    n = int(m.sum())
    if n == 0:
        warnings.warn("empty selection mask; pseudo-label loss is 0", DegenerateLossWarning, stacklevel=2)
        return 0.0, np.zeros_like(logits)
    loss, grad = _nll_grad(logits, pl.labels, m.astype(np.float64))
    return loss / n, grad / n


def masked_ce(logits, pl, mask):
    return masked_ce_grad(logits, pl, mask)[0]


def supervised_ce_grad(logits, labels, ignore_index=IGNORE_INDEX):
    logits = np.asarray(logits, dtype=np.float64)
    labels = np.asarray(labels)
    if labels.shape != logits.shape[:-1]:
        raise InvalidInputError(f"labels {labels.shape} do not match logits {logits.shape}")
    keep = labels != ignore_index
    c = logits.shape[-1]
    if np.any((labels[keep] < 0) | (labels[keep] >= c)):
        raise InvalidInputError("label outside [0, C) and not the ignore index")
    n = int(keep.sum())
    if n == 0:
        warnings.warn("all pixels ignored; supervised loss is 0", DegenerateLossWarning, stacklevel=2)
        return 0.0, np.zeros_like(logits)
    loss, grad = _nll_grad(logits, labels, keep.astype(np.float64))
    return loss / n, grad / n


def supervised_ce(logits, labels, ignore_index=IGNORE_INDEX):
    return supervised_ce_grad(logits, labels, ignore_index)[0]


def entropy_map(probs):
    """Per-pixel Shannon entropy in nats, with 0 log 0 = 0."""
    p = np.asarray(probs, dtype=np.float64)
    with np.errstate(divide="ignore", invalid="ignore"):
        plogp = np.where(p > 0, p * np.log(np.where(p > 0, p, 1.0)), 0.0)
    return -plogp.sum(axis=-1)


def disparity_weights(disparity, valid):
    """Disparity normalized by its maximum over valid pixels, zero elsewhere.

    Returns ``None`` when no valid pixel has a positive disparity.
    """
    d = np.asarray(disparity, dtype=np.float64)
    v = np.asarray(valid, dtype=bool)
    if d.shape != v.shape:
        raise InvalidInputError(f"disparity {d.shape} and validity {v.shape} differ")
    if np.any(d < 0):
        raise InvalidInputError("disparity must be non-negative")
    if not v.any():
        return None
    dmax = d[v].max()
    if dmax <= 0:
        return None
    return np.where(v, d / dmax, 0.0)


def depth_entropy_loss_grad(logits, disparity, valid):
    """Mean over valid pixels of (disparity / max disparity) * entropy."""
    logits = np.asarray(logits, dtype=np.float64)
    if np.shape(disparity) != logits.shape[:-1]:
        raise InvalidInputError(f"disparity {np.shape(disparity)} does not match logits {logits.shape}")
    w = disparity_weights(disparity, valid)
    if w is None:
        warnings.warn("no valid disparity; depth entropy loss is 0", DegenerateLossWarning, stacklevel=2)
        return 0.0, np.zeros_like(logits)
    n = int(np.asarray(valid, dtype=bool).sum())
    logp = log_softmax(logits)
    p = np.exp(logp)
    ent = -(p * logp).sum(axis=-1)
    loss = float((w * ent).sum()) / n
    # dH/dz_k = -p_k (log p_k + H)
    grad = -p * (logp + ent[..., None]) * (w / n)[..., None]
    return loss, grad


def depth_entropy_loss(probs, disparity, valid):
    """Disparity-weighted entropy from probabilities (no gradient)."""
    p = np.asarray(probs, dtype=np.float64)
    if np.shape(disparity) != p.shape[:-1]:
        raise InvalidInputError(f"disparity {np.shape(disparity)} does not match probabilities {p.shape}")
    w = disparity_weights(disparity, valid)
    if w is None:
        warnings.warn("no valid disparity; depth entropy loss is 0", DegenerateLossWarning, stacklevel=2)
        return 0.0
    n = int(np.asarray(valid, dtype=bool).sum())
    return float((w * entropy_map(p)).sum()) / n
