"""Source pretraining, source-free target adaptation, evaluation and ablations.

Phase 1 trains on labeled source scenes whose RGB and disparity are
restyled towards an averaged target amplitude profile. Phase 2 sees only
unlabeled target scenes: an EMA teacher produces pseudo-labels, which are
filtered by depth validity and confidence, and the student additionally
minimizes disparity-weighted entropy.
"""

import dataclasses
import itertools
import json
import logging
import math
import warnings
from dataclasses import dataclass, field

import numpy as np

from . import losses
from .encoder import EncoderConfig, ModelParams, encoder_backward, encoder_forward, init_params, token_logits
from .numerics import InvalidInputError, make_rng
from .spectral import BETA_DEPTH, BETA_RGB, StyleConfig, stylize, target_amplitude_profile

log = logging.getLogger(__name__)


class TrainingError(RuntimeError):
    pass


class ConfigKeyError(ValueError):
    pass


@dataclass
class AdaptConfig:
    beta_rgb: float = BETA_RGB
    beta_d: float = BETA_DEPTH
    tau: float = 0.9
    top_fraction: float = 0.66
    filter_scope: str = "per_class"
    ema_momentum: float = 0.99
    ema_period: int = 100
    lambda_ent: float = 0.1
    lr: float = 6e-5
    weight_decay: float = 0.01
    epochs: int = 20
    batch_size: int = 2
    pretrain_epochs: int = 40
    pretrain_batch_size: int = 4
    pretrain_lr: float = 6e-5
    seed: int = 0
    profile_samples: int = 8
    disparity_max: float = 64.0
    flip: bool = True
    # ablation toggles
    style: bool = True
    self_training: bool = True
    entropy: bool = True
    log_every: int = 10

    def __post_init__(self):
        if not 0.0 <= self.ema_momentum <= 1.0:
            raise InvalidInputError("ema_momentum must lie in [0, 1]")
        if self.ema_period < 1:
            raise InvalidInputError("ema_period must be >= 1")
        if self.lr <= 0 or self.pretrain_lr <= 0:
            raise InvalidInputError("learning rates must be positive")
        if self.batch_size < 1 or self.pretrain_batch_size < 1:
            raise InvalidInputError("batch sizes must be >= 1")
        if self.disparity_max <= 0:
            raise InvalidInputError("disparity_max must be positive")
        self.filter_config()

    def filter_config(self):
        return losses.FilterConfig(self.tau, self.top_fraction, self.filter_scope)

    def replace(self, **kw):
        return dataclasses.replace(self, **kw)


@dataclass
class MetricsRecord:
    step: int
    phase: str
    losses: dict = field(default_factory=dict)
    kept_fraction: float = None
    per_class_iou: list = None
    miou: float = None
    extra: dict = field(default_factory=dict)

    def to_json(self):
        d = {"step": self.step, "phase": self.phase, "losses": self.losses}
        if self.kept_fraction is not None:
            d["kept_fraction"] = self.kept_fraction
        if self.miou is not None:
            d["per_class_iou"] = self.per_class_iou
            d["miou"] = self.miou
        d.update(self.extra)
        return json.dumps(d, sort_keys=True)


# ---------------------------------------------------------------------------
# config documents


def _check_keys(d, allowed, where):
    unknown = sorted(set(d) - set(allowed))
    if unknown:
        raise ConfigKeyError(f"unknown key(s) in {where}: {', '.join(unknown)}")


_ABLATION_KEYS = ("fusion_mode", "self_training", "style", "entropy", "seeds", "cells")
_SECTION_KEYS = ("encoder", "ablation", "scene")


def parse_config(doc):
    """Split a JSON config document into (AdaptConfig, EncoderConfig, ablation dict, scene dict).

    Top-level keys are AdaptConfig fields plus the optional ``encoder``,
    ``ablation`` and ``scene`` sections. Unknown keys are rejected.
    """
    adapt_fields = [f.name for f in dataclasses.fields(AdaptConfig)]
    _check_keys(doc, adapt_fields + list(_SECTION_KEYS), "config")
    adapt = AdaptConfig(**{k: v for k, v in doc.items() if k in adapt_fields})
    enc_doc = doc.get("encoder", {})
    _check_keys(enc_doc, [f.name for f in dataclasses.fields(EncoderConfig)], "encoder")
    enc = EncoderConfig(**enc_doc)
    abl = doc.get("ablation", {})
    _check_keys(abl, _ABLATION_KEYS, "ablation")
    for cell in abl.get("cells", []):
        _check_keys(cell, ("fusion_mode", "self_training", "style", "entropy"), "ablation cell")
    return adapt, enc, abl, doc.get("scene", {})


def load_config(path):
    with open(path) as f:
        return parse_config(json.load(f))


# ---------------------------------------------------------------------------
# optimizer


class AdamW:
    """Adam with decoupled weight decay and linear (power 1) decay of the rate to 0."""

    def __init__(self, params, lr, weight_decay, total_steps, betas=(0.9, 0.999), eps=1e-8):
        self.lr = lr
        self.weight_decay = weight_decay
        self.total_steps = max(int(total_steps), 1)
        self.b1, self.b2 = betas
        self.eps = eps
        self.t = 0
        self.m = {k: np.zeros_like(v) for k, v in params.tensors.items()}
        self.v = {k: np.zeros_like(v) for k, v in params.tensors.items()}

    def current_lr(self):
        return self.lr * max(0.0, 1.0 - self.t / self.total_steps)

    def step(self, params, grads):
        lr = self.current_lr()
        self.t += 1
        c1 = 1.0 - self.b1 ** self.t
        c2 = 1.0 - self.b2 ** self.t
        for k, w in params.tensors.items():
            g = grads[k]
            self.m[k] = self.b1 * self.m[k] + (1 - self.b1) * g
            self.v[k] = self.b2 * self.v[k] + (1 - self.b2) * g * g
            # norm gains and biases are not decayed
            if w.ndim > 1:
                w *= 1.0 - lr * self.weight_decay
            w -= lr * (self.m[k] / c1) / (np.sqrt(self.v[k] / c2) + self.eps)


# ---------------------------------------------------------------------------
# input preparation


def model_inputs(rgb, disparity, cfg):
    """Scale raw rasters to network inputs: RGB / 255, disparity / disparity_max."""
    return np.asarray(rgb) / 255.0, np.asarray(disparity) / cfg.disparity_max


def build_profiles(target, count):
    """Averaged amplitude profiles (RGB, disparity) from the first ``count`` target images."""
    if len(target) == 0:
        raise InvalidInputError("target set is empty")
    k = min(count, len(target))
    return (target_amplitude_profile(list(target.rgb[:k])),
            target_amplitude_profile(list(target.disparity[:k])))


def stylize_batch(rgb, disparity, profiles, cfg):
    prof_rgb, prof_d = profiles
    srgb = StyleConfig(cfg.beta_rgb, (0.0, 255.0))
    sd = StyleConfig(cfg.beta_d, (0.0, cfg.disparity_max))
    out_rgb = np.stack([stylize(x, prof_rgb, srgb) for x in rgb])
    out_d = np.stack([stylize(x, prof_d, sd) for x in disparity])
    return out_rgb, out_d


def _flip(rng, *arrays):
    """Random horizontal flip per image (p = 0.5)."""
    flips = rng.random(arrays[0].shape[0]) < 0.5
    out = []
    for a in arrays:
        a = a.copy()
        a[flips] = a[flips][:, :, ::-1]
        out.append(a)
    return out


def _batches(rng, n, batch_size):
    order = rng.permutation(n)
    for i in range(0, n, batch_size):
        yield order[i:i + batch_size]


# ---------------------------------------------------------------------------
# phase 1


def pretrain_source(source, target_style, cfg, enc_cfg, metrics=None, init=None, curve=None):
    """Supervised training on (optionally stylized) source scenes.

    ``target_style`` is the (rgb, disparity) AmplitudeProfile pair, or None
    when ``cfg.style`` is off. If ``curve`` is a list, the per-step loss is
    appended to it.
    """
    if len(source) == 0:
        raise InvalidInputError("source set is empty")
    if source.labels is None:
        raise InvalidInputError("source pretraining needs labels")
    if cfg.style and target_style is None:
        raise InvalidInputError("style transfer enabled but no target profiles given")
    params = init.copy() if init is not None else init_params(enc_cfg, cfg.seed)
    rng = make_rng(cfg.seed + 1)
    steps_per_epoch = math.ceil(len(source) / cfg.pretrain_batch_size)
    opt = AdamW(params, cfg.pretrain_lr, cfg.weight_decay, steps_per_epoch * cfg.pretrain_epochs)
    step = 0
    for _ in range(cfg.pretrain_epochs):
        for idx in _batches(rng, len(source), cfg.pretrain_batch_size):
            rgb, disp, lab = source.rgb[idx], source.disparity[idx], source.labels[idx]
            if cfg.style:
                rgb, disp = stylize_batch(rgb, disp, target_style, cfg)
            if cfg.flip:
                rgb, disp, lab = _flip(rng, rgb, disp, lab)
            x_rgb, x_d = model_inputs(rgb, disp, cfg)
            logits, cache = encoder_forward(x_rgb, x_d, params, store=True)
            loss, dl = losses.supervised_ce_grad(logits, lab)
            if not np.isfinite(loss):
                raise TrainingError(f"pretraining diverged at step {step}")
            opt.step(params, encoder_backward(dl, cache, params))
            if curve is not None:
                curve.append(loss)
            if metrics is not None and step % cfg.log_every == 0:
                metrics.append(MetricsRecord(step, "pretrain", {"supervised": loss}))
            step += 1
    return params


# ---------------------------------------------------------------------------
# phase 2


def ema_update(teacher, student, momentum):
    """teacher' = momentum * teacher + (1 - momentum) * student, per parameter."""
    if teacher.names() != student.names():
        raise InvalidInputError("teacher and student parameter sets differ")
    out = {}
    for k, t in teacher.tensors.items():
        s = student.tensors[k]
        if t.shape != s.shape:
            raise InvalidInputError(f"shape mismatch for {k}: {t.shape} vs {s.shape}")
        if momentum == 1.0:
            out[k] = t.copy()
        elif momentum == 0.0:
            out[k] = s.copy()
        else:
            out[k] = momentum * t + (1.0 - momentum) * s
    return ModelParams(teacher.config, out)


def adapt_target(target, pretrained, cfg, metrics=None, teacher_log=None):
    """Source-free adaptation on unlabeled target scenes; returns student params.

    Only ``target.rgb``, ``target.disparity`` and ``target.valid`` are read.
    """
    if len(target) == 0:
        raise InvalidInputError("target set is empty")
    student = pretrained.copy()
    teacher = pretrained.copy()
    enc = student.config
    depth_aware = enc.fusion_mode != "rgb_only"
    fcfg = cfg.filter_config()
    rng = make_rng(cfg.seed + 2)
    steps_per_epoch = math.ceil(len(target) / cfg.batch_size)
    opt = AdamW(student, cfg.lr, cfg.weight_decay, steps_per_epoch * cfg.epochs)
    step = 0
    for _ in range(cfg.epochs):
        for idx in _batches(rng, len(target), cfg.batch_size):
            rgb, disp, valid = target.rgb[idx], target.disparity[idx], target.valid[idx]
            if cfg.flip:
                rgb, disp, valid = _flip(rng, rgb, disp, valid)
            x_rgb, x_d = model_inputs(rgb, disp, cfg)
            logits, cache = encoder_forward(x_rgb, x_d, student, store=True)
            dl = np.zeros_like(logits)
            rec = {}
            kept = None
            if cfg.self_training:
                t_logits = encoder_forward(x_rgb, x_d, teacher)
                pl = losses.pseudo_labels(losses.probabilities(t_logits))
                gate = valid if depth_aware else np.ones_like(valid)
                mask = losses.selection_mask(pl, gate, fcfg)
                with warnings.catch_warnings():
                    warnings.simplefilter("ignore", losses.DegenerateLossWarning)
                    l_pseudo, g = losses.masked_ce_grad(logits, pl, mask)
                dl += g
                rec["pseudo"] = l_pseudo
                kept = mask.kept_fraction
            if cfg.entropy:
                with warnings.catch_warnings():
                    warnings.simplefilter("ignore", losses.DegenerateLossWarning)
                    l_ent, g = losses.depth_entropy_loss_grad(logits, disp, valid)
                dl += cfg.lambda_ent * g
                rec["entropy"] = l_ent
            total = sum(v * (cfg.lambda_ent if k == "entropy" else 1.0) for k, v in rec.items())
            if not np.isfinite(total):
                raise TrainingError(f"adaptation diverged at step {step}")
            opt.step(student, encoder_backward(dl, cache, student))
            step += 1
            if step % cfg.ema_period == 0:
                teacher = ema_update(teacher, student, cfg.ema_momentum)
                if teacher_log is not None:
                    teacher_log.append(teacher)
            if metrics is not None and (step - 1) % cfg.log_every == 0:
                metrics.append(MetricsRecord(step - 1, "adapt", rec, kept))
    return student


# ---------------------------------------------------------------------------
# evaluation


def predict(params, data, cfg, batch_size=16):
    """Per-pixel argmax labels for every image in ``data``."""
    p = params.config.patch_size
    out = np.empty(data.rgb.shape[:3], dtype=np.int64)
    for i in range(0, len(data), batch_size):
        x_rgb, x_d = model_inputs(data.rgb[i:i + batch_size], data.disparity[i:i + batch_size], cfg)
        tok = token_logits(encoder_forward(x_rgb, x_d, params), p)
        lab = np.argmax(tok, axis=-1)
        out[i:i + batch_size] = np.repeat(np.repeat(lab, p, axis=1), p, axis=2)
    return out


def confusion_matrix(pred, labels, num_classes, ignore_index=losses.IGNORE_INDEX):
    """C x C counts, rows = ground truth, columns = prediction."""
    pred = np.asarray(pred).ravel()
    labels = np.asarray(labels).ravel()
    keep = labels != ignore_index
    idx = labels[keep] * num_classes + pred[keep]
    return np.bincount(idx, minlength=num_classes * num_classes).reshape(num_classes, num_classes)


def iou_from_confusion(conf):
    """Per-class IoU (None where a class never appears) and mIoU over present classes."""
    tp = np.diag(conf).astype(np.float64)
    fp = conf.sum(axis=0) - tp
    fn = conf.sum(axis=1) - tp
    denom = tp + fp + fn
    ious = [float(t / d) if d > 0 else None for t, d in zip(tp, denom)]
    present = [v for v in ious if v is not None]
    return ious, float(np.mean(present))


def evaluate(params, data, cfg, step=0, phase="eval"):
    if data.labels is None:
        raise InvalidInputError("evaluation needs labels")
    c = params.config.num_classes
    conf = confusion_matrix(predict(params, data, cfg), data.labels, c)
    if conf.sum() == 0:
        raise InvalidInputError("no labeled pixels to evaluate")
    ious, miou = iou_from_confusion(conf)
    return MetricsRecord(step, phase, per_class_iou=ious, miou=miou,
                         extra={"pixels": int(conf.sum())})


# ---------------------------------------------------------------------------
# ablation matrix


@dataclass(frozen=True)
class Cell:
    fusion_mode: str
    self_training: bool
    style: bool
    entropy: bool

    def label(self):
        mode = "RGB" if self.fusion_mode == "rgb_only" else f"RGB+D/{self.fusion_mode}"
        on = [n for n, f in (("ST", self.self_training), ("Style", self.style), ("Entropy", self.entropy)) if f]
        return f"{mode} [{' '.join(on) or 'source only'}]"


def expand_grid(ablation, base, fusion_mode="key_swap"):
    """Cells from explicit ``cells`` or from the Cartesian product of toggle lists."""
    if "cells" in ablation:
        return [Cell(c.get("fusion_mode", fusion_mode), bool(c.get("self_training", False)),
                     bool(c.get("style", False)), bool(c.get("entropy", False))) for c in ablation["cells"]]

    def opts(key, default):
        v = ablation.get(key, default)
        return list(v) if isinstance(v, (list, tuple)) else [v]

    return [Cell(*combo) for combo in itertools.product(
        opts("fusion_mode", fusion_mode), opts("self_training", base.self_training),
        opts("style", base.style), opts("entropy", base.entropy))]


def run_ablation_matrix(cells, seeds, source, target, cfg, enc_cfg, eval_data=None):
    """One MetricsRecord per (cell, seed), evaluated on labeled target data.

    Pretrained models are shared between cells with the same fusion mode,
    style flag and seed. Cells with every adaptation toggle off skip
    adaptation and report the pretrained model.
    """
    eval_data = eval_data if eval_data is not None else target
    unlabeled = target.unlabeled()
    profiles = build_profiles(unlabeled, cfg.profile_samples)
    pretrained = {}
    records = []
    for seed in seeds:
        for cell in cells:
            run_cfg = cfg.replace(seed=int(seed), style=cell.style,
                                  self_training=cell.self_training, entropy=cell.entropy)
            key = (cell.fusion_mode, cell.style, int(seed))
            if key not in pretrained:
                log.info("pretraining %s seed %s", cell.label(), seed)
                pretrained[key] = pretrain_source(source, profiles if cell.style else None,
                                                  run_cfg, enc_cfg.with_fusion(cell.fusion_mode))
            model = pretrained[key]
            if cell.self_training or cell.entropy:
                log.info("adapting %s seed %s", cell.label(), seed)
                model = adapt_target(unlabeled, model, run_cfg)
            rec = evaluate(model, eval_data, run_cfg, phase="ablation")
            rec.extra.update({"cell": cell.label(), "fusion_mode": cell.fusion_mode,
                              "self_training": cell.self_training, "style": cell.style,
                              "entropy": cell.entropy, "seed": int(seed)})
            records.append(rec)
    return records


def summarize(records):
    """Median mIoU per cell label, in first-seen order."""
    by_cell = {}
    for r in records:
        by_cell.setdefault(r.extra["cell"], []).append(r.miou)
    return {k: float(np.median(v)) for k, v in by_cell.items()}
