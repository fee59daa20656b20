"""Relative-difficulty weighting of the segmentation task loss.

Difficulty maps are plain numpy arrays: they enter the loss as constants,
so no gradient ever flows back through their computation.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field
from enum import Enum
from pathlib import Path
from typing import Callable, Mapping, Sequence

import numpy as np

from . import autodiff as ad
from .autodiff import DiffTensor, ShapeError


class Stage(str, Enum):
    TFE = "TFE"
    TSE = "TSE"


class Mode(str, Enum):
    XOR = "XOR"
    AND = "AND"
    OR = "OR"
    STRICT = "STRICT"  # student hard and teacher easy


@dataclass
class DifficultyMap:
    values: np.ndarray  # [B, H, W]
    kind: Stage

    def __post_init__(self):
        self.kind = Stage(self.kind)
        if self.values.ndim != 3:
            raise ShapeError(f"difficulty map must be [B, H, W], got {self.values.shape}")

    @property
    def shape(self):
        return self.values.shape


@dataclass
class DistillConfig:
    p: float = 0.10
    t: float = 0.70
    T: float = 1.0
    mode: str = "XOR"
    total_iters: int = 2000
    # "pixels": divide by B*H*W; "weights": divide by the summed weights
    normalize: str = "pixels"

    def validate(self) -> None:
        if not 0.0 <= self.p <= 1.0:
            raise ValueError(f"p must lie in [0, 1], got {self.p}")
        if not 0.0 < self.t < 1.0:
            raise ValueError(f"t must lie in (0, 1), got {self.t}")
        if not self.T > 0:
            raise ValueError(f"temperature T must be positive, got {self.T}")
        Mode(self.mode)
        if self.total_iters < 1:
            raise ValueError("total_iters must be positive")
        if self.normalize not in ("pixels", "weights"):
            raise ValueError(f"normalize must be 'pixels' or 'weights', got {self.normalize!r}")

    @property
    def tfe_iters(self) -> int:
        # round half up; the boundary iteration itself belongs to TFE
        return int(math.floor(self.p * self.total_iters + 0.5))

    def stage_at(self, iter: int) -> Stage:
        return Stage.TFE if iter <= self.tfe_iters else Stage.TSE


@dataclass
class LossBreakdown:
    total: DiffTensor
    task_weighted: DiffTensor
    kd: DiffTensor
    extras: dict[str, DiffTensor]
    stage: Stage
    mean_rd: float
    active_pixel_fraction: float
    empty_mask: bool = False
    rd: DifficultyMap | None = field(default=None, repr=False)

    def scalars(self) -> dict[str, float]:
        out = {
            "loss_total": self.total.item(),
            "loss_task_weighted": self.task_weighted.item(),
            "loss_kd": self.kd.item(),
            "loss_extras": float(np.sum([v.item() for v in self.extras.values()])),
        }
        return out


def _np(x) -> np.ndarray:
    return x.data if isinstance(x, DiffTensor) else np.asarray(x, dtype=np.float64)


def _log_softmax_np(z: np.ndarray, axis: int = 1) -> np.ndarray:
    shifted = z - z.max(axis=axis, keepdims=True)
    return shifted - np.log(np.exp(shifted).sum(axis=axis, keepdims=True))


def _check_logits(z: np.ndarray, what: str = "logits") -> None:
    if z.ndim != 4:
        raise ShapeError(f"{what} must be [B, C, H, W], got {z.shape}")
    if z.shape[1] < 2:
        raise ShapeError(f"{what} need at least 2 classes, got {z.shape[1]}")


def confidence_map(logits) -> np.ndarray:
    """Per-pixel maximum softmax probability, [B, H, W]. Not recorded."""
    z = _np(logits)
    _check_logits(z)
    return np.exp(_log_softmax_np(z).max(axis=1))


def kl_per_pixel(p_logits, q_logits) -> np.ndarray:
    """KL(softmax(p) || softmax(q)) summed over classes, [B, H, W]."""
    p, q = _np(p_logits), _np(q_logits)
    _check_logits(p, "p_logits")
    if p.shape != q.shape:
        raise ShapeError(f"kl_per_pixel: shapes differ, {p.shape} vs {q.shape}")
    lp, lq = _log_softmax_np(p), _log_softmax_np(q)
    kl = np.sum(np.exp(lp) * (lp - lq), axis=1)
    return np.maximum(kl, 0.0)


def rd_tfe(teacher_primary, teacher_aux) -> DifficultyMap:
    """exp(-KL(primary || auxiliary)); 1 where the teacher's heads agree."""
    if teacher_aux is None:
        raise ValueError(
            "TFE difficulty needs the teacher's auxiliary logits; "
            "use a dual-head teacher (has_aux_head = true)"
        )
    return DifficultyMap(np.exp(-kl_per_pixel(teacher_primary, teacher_aux)), Stage.TFE)


def rd_tse(student_conf, teacher_conf, t: float, mode: str | Mode = Mode.XOR) -> DifficultyMap:
    """Binary map from thresholded confidences; ties (conf == t) count as hard."""
    s_conf, t_conf = np.asarray(student_conf, dtype=np.float64), np.asarray(teacher_conf, dtype=np.float64)
    if s_conf.shape != t_conf.shape:
        raise ShapeError(f"confidence maps differ in shape: {s_conf.shape} vs {t_conf.shape}")
    if not 0.0 < t < 1.0:
        raise ValueError(f"threshold t must lie in (0, 1), got {t}")
    for name, c in (("student", s_conf), ("teacher", t_conf)):
        if c.size and (c.min() < 0.0 or c.max() > 1.0):
            raise ValueError(f"{name} confidences must lie in [0, 1]")
    s = s_conf <= t
    h = t_conf <= t
    mode = Mode(mode)
    if mode is Mode.XOR:
        m = s ^ h
    elif mode is Mode.AND:
        m = s & h
    elif mode is Mode.OR:
        m = s | h
    else:
        m = s & ~h
    return DifficultyMap(m.astype(np.float64), Stage.TSE)


def weighted_task_loss(student_logits, labels, rd, normalize: str = "pixels") -> DiffTensor:
    """Per-pixel cross-entropy scaled by ``rd`` and averaged over B*H*W pixels."""
    z = ad.as_tensor(student_logits)
    labels = np.asarray(labels)
    weights = rd.values if isinstance(rd, DifficultyMap) else np.asarray(rd, dtype=np.float64)
    B, _, H, W = z.shape
    if weights.shape != (B, H, W):
        raise ShapeError(f"difficulty map shape {weights.shape} does not match logits {z.shape}")
    picked = ad.gather_class_channel(ad.log_softmax(z, axis=1), labels)
    if normalize == "weights":
        denom = float(weights.sum())
        scale = -1.0 / denom if denom > 0 else 0.0
    else:
        scale = -1.0 / (B * H * W)
    return ad.mul(ad.sum(ad.mul(picked, weights)), scale)


def pixelwise_kd_loss(student_logits, teacher_logits, T: float = 1.0) -> DiffTensor:
    """Mean over pixels of KL(softmax(Zs/T) || softmax(Zt/T)), student first."""
    if not T > 0:
        raise ValueError(f"temperature must be positive, got {T}")
    zs = ad.as_tensor(student_logits)
    zt = _np(teacher_logits)
    if zs.shape != zt.shape:
        raise ShapeError(f"pixelwise_kd_loss: shapes differ, {zs.shape} vs {zt.shape}")
    _check_logits(zt, "teacher logits")
    log_ps = ad.log_softmax(ad.mul(zs, 1.0 / T), axis=1)
    log_pt = _log_softmax_np(zt / T)
    kl = ad.sum(ad.mul(ad.exp(log_ps), ad.add(log_ps, -log_pt)), axis=1)
    return ad.mean(kl)


def _attention(feat: DiffTensor, eps: float) -> DiffTensor:
    """Channel-summed squared activations, flattened and L2-normalised: [B, HW]."""
    B = feat.shape[0]
    a = ad.reshape(ad.sum(ad.mul(feat, feat), axis=1), (B, -1))
    sq = ad.sum(ad.mul(a, a), axis=1, keepdims=True)
    return ad.mul(a, ad.exp(ad.mul(ad.log(ad.add(sq, eps)), -0.5)))


def _match_size(a: DiffTensor, size: int) -> DiffTensor:
    B, _, h, w = a.shape
    if h == size:
        return a
    if size % h:
        raise ShapeError(f"cannot resample {h}x{w} features to {size}")
    f = size // h
    y = ad.reshape(a, (B, a.shape[1], h, 1, w, 1))
    y = ad.mul(y, np.ones((1, 1, 1, f, 1, f)))
    return ad.reshape(y, (B, a.shape[1], size, size))


def at_hook(
    student_features: Sequence[DiffTensor],
    teacher_features: Sequence,
    beta: float | Sequence[float],
    eps: float = 1e-30,
) -> DiffTensor:
    """Attention-transfer loss: sum_j beta_j/2 * sum_b ||q_s - q_t||_2."""
    if len(student_features) != len(teacher_features):
        raise ValueError(
            f"unpaired stages: {len(student_features)} student vs {len(teacher_features)} teacher"
        )
    if not student_features:
        raise ValueError("at_hook needs at least one feature pair")
    betas = [float(beta)] * len(student_features) if np.isscalar(beta) else [float(b) for b in beta]
    if len(betas) != len(student_features):
        raise ValueError("one beta per feature pair is required")
    total = None
    for fs, ft, b in zip(student_features, teacher_features, betas):
        fs = ad.as_tensor(fs)
        ft = DiffTensor._wrap(_np(ft))
        if fs.shape[0] != ft.shape[0]:
            raise ShapeError(f"batch sizes differ: {fs.shape} vs {ft.shape}")
        size = max(fs.shape[2], ft.shape[2])
        fs, ft = _match_size(fs, size), _match_size(ft, size)
        diff = ad.add(_attention(fs, eps), ad.mul(_attention(ft, eps), -1.0))
        norms = ad.exp(ad.mul(ad.log(ad.add(ad.sum(ad.mul(diff, diff), axis=1), eps)), 0.5))
        term = ad.mul(ad.sum(norms), b / 2.0)
        total = term if total is None else ad.add(total, term)
    return total


ExtraHook = Callable[[], DiffTensor]


def rdd_total_loss(
    iter: int,
    config: DistillConfig,
    student,
    teacher,
    labels,
    extra_hooks: Mapping[str, ExtraHook] | None = None,
    teacher_rd_tfe: DifficultyMap | None = None,
) -> LossBreakdown:
    """Two-stage loss: TFE-weighted CE up to ``config.tfe_iters``, TSE after.

    ``student`` and ``teacher`` are LogitPair-like (``primary``, ``auxiliary``).
    A precomputed TFE map may be passed to skip recomputing it from the teacher.
    """
    if not 1 <= iter <= config.total_iters:
        raise ValueError(f"iter {iter} outside [1, {config.total_iters}]")
    zs = student.primary
    zt = _np(teacher.primary)
    stage = config.stage_at(iter)
    if stage is Stage.TFE:
        rd = teacher_rd_tfe if teacher_rd_tfe is not None else rd_tfe(zt, _aux(teacher))
    else:
        rd = rd_tse(confidence_map(zs), confidence_map(zt), config.t, config.mode)
    task = weighted_task_loss(zs, labels, rd, config.normalize)
    kd = pixelwise_kd_loss(zs, zt, config.T)
    extras = {name: hook() for name, hook in (extra_hooks or {}).items()}
    total = ad.add(task, kd)
    for v in extras.values():
        total = ad.add(total, v)
    active = float(np.mean(rd.values > 0))
    return LossBreakdown(
        total=total,
        task_weighted=task,
        kd=kd,
        extras=extras,
        stage=stage,
        mean_rd=float(rd.values.mean()),
        active_pixel_fraction=active,
        empty_mask=stage is Stage.TSE and active == 0.0,
        rd=rd,
    )


def _aux(pair):
    aux = getattr(pair, "auxiliary", None)
    if aux is None:
        raise ValueError(
            "TFE stage reached but the teacher has no auxiliary head; "
            "TFE requires a dual-head teacher (or set p = 0)"
        )
    return _np(aux)


def write_map(values: np.ndarray, path: str | Path, csv: bool = True) -> Path:
    """Write one [H, W] map as 8-bit PGM (round(255 * v)) plus a CSV of floats."""
    from PIL import Image

    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    img = np.clip(np.rint(255.0 * values), 0, 255).astype(np.uint8)
    Image.fromarray(img, mode="L").save(path)
    if csv:
        np.savetxt(path.with_suffix(".csv"), values, delimiter=",", fmt="%.17g")
    return path
