"""Task losses and their homoscedastic-uncertainty combination.

    total = exp(-2 s_det)/2 * L_det + s_det + exp(-2 s_seg)/2 * L_seg + s_seg,
    s = min(log sigma, 1.5)
"""
from __future__ import annotations

import math
from dataclasses import asdict, dataclass

import numpy as np

from . import tensor as T
from .layers import Module
from .tensor import Parameter, Tensor

LOG_SIGMA_MAX = 1.5
SEG_TERM_WEIGHT = 20.0


def _const(x, like: Tensor) -> np.ndarray:
    arr = x.data if isinstance(x, Tensor) else np.asarray(x)
    return arr.astype(like.dtype)


def sigmoid_focal(logits: Tensor, targets, alpha: float = 0.25, gamma: float = 3.0) -> Tensor:
    """Mean alpha-balanced focal loss over all elements; targets must be 0/1."""
    t = _const(targets, logits)
    if t.shape != logits.shape:
        raise ValueError(f"sigmoid_focal: shapes differ {logits.shape} vs {t.shape}")
    if not np.all((t == 0) | (t == 1)):
        raise ValueError("sigmoid_focal: targets must be binary")
    p = T.sigmoid(logits)
    # BCE with logits: softplus(x) - t*x
    ce = T.softplus(logits) - T.mul_const(logits, t)
    p_t = T.add_const(T.mul_const(p, 2 * t - 1), 1 - t)  # p*t + (1-p)*(1-t)
    modulator = T.pow(T.scale(p_t, -1.0) + 1.0, gamma) if gamma else None
    loss = ce if modulator is None else ce * modulator
    alpha_t = alpha * t + (1 - alpha) * (1 - t)
    return T.mul_const(loss, alpha_t).mean()


def dice_loss(probs: Tensor, targets, smooth: float = 1.0) -> Tensor:
    """1 - (2|P.T| + s)/(|P| + |T| + s) per class (axis 1), averaged over classes."""
    t = _const(targets, probs)
    if t.shape != probs.shape:
        raise ValueError(f"dice_loss: shapes differ {probs.shape} vs {t.shape}")
    axes = tuple(ax for ax in range(probs.ndim) if ax != 1) if probs.ndim > 1 else (0,)
    inter = T.mul_const(probs, t).sum(axis=axes)
    denom = T.add_const(probs.sum(axis=axes), t.sum(axis=axes) + smooth)
    ratio = T.add_const(T.scale(inter, 2.0), smooth) / denom
    return (T.scale(ratio, -1.0) + 1.0).mean()


def heatmap_focal(pred_logits: Tensor, gaussian_targets, alpha: float = 2.0, beta: float = 4.0) -> Tensor:
    """Penalty-reduced focal loss on Gaussian heatmaps, normalized by the positive count."""
    t = _const(gaussian_targets, pred_logits)
    if t.shape != pred_logits.shape:
        raise ValueError(f"heatmap_focal: shapes differ {pred_logits.shape} vs {t.shape}")
    pos = (t == 1).astype(t.dtype)
    neg = 1 - pos
    p = T.sigmoid(pred_logits)
    # -log p = softplus(-x); -log(1-p) = softplus(x)
    pos_term = T.softplus(T.scale(pred_logits, -1.0)) * T.pow(T.scale(p, -1.0) + 1.0, alpha)
    neg_term = T.softplus(pred_logits) * T.pow(p, alpha)
    total = T.mul_const(pos_term, pos).sum() + T.mul_const(neg_term, neg * (1 - t) ** beta).sum()
    return T.scale(total, 1.0 / max(float(pos.sum()), 1.0))


def masked_l1(reg_pred: Tensor, reg_gt, mask) -> Tensor:
    """Mean |pred - gt| over masked cells and regression channels; zero for an empty mask.

    ``reg_pred``/``reg_gt`` are (B, R, H, W); ``mask`` is (B, H, W).
    """
    gt = _const(reg_gt, reg_pred)
    if gt.shape != reg_pred.shape:
        raise ValueError(f"masked_l1: shapes differ {reg_pred.shape} vs {gt.shape}")
    m = _const(mask, reg_pred)
    full = np.broadcast_to(m[:, None], reg_pred.shape)
    count = float(full.sum())
    diff = T.abs(T.add_const(reg_pred, -gt))
    return T.scale(T.mul_const(diff, full).sum(), 1.0 / count if count else 0.0)


class HuwParams(Module):
    def __init__(self, log_sigma_det: float = 0.0, log_sigma_seg: float = 0.0, clamp_max: float = LOG_SIGMA_MAX):
        self.log_sigma_det = Parameter(np.array([log_sigma_det]), decay=False)
        self.log_sigma_seg = Parameter(np.array([log_sigma_seg]), decay=False)
        self.clamp_max = clamp_max

    def effective(self) -> tuple[float, float]:
        return (min(self.log_sigma_det.item(), self.clamp_max), min(self.log_sigma_seg.item(), self.clamp_max))

    def sigmas(self) -> tuple[float, float]:
        s_det, s_seg = self.effective()
        return math.exp(s_det), math.exp(s_seg)


def huw_combine(params: HuwParams, l_det: Tensor, l_seg: Tensor) -> Tensor:
    for name, term in (("l_det", l_det), ("l_seg", l_seg),
                       ("log_sigma_det", params.log_sigma_det), ("log_sigma_seg", params.log_sigma_seg)):
        if not np.all(np.isfinite(term.data)):
            raise ValueError(f"huw_combine: non-finite {name} = {term.data.reshape(-1)[0]}")
    total = None
    for loss, log_sigma in ((l_det, params.log_sigma_det), (l_seg, params.log_sigma_seg)):
        s = T.clamp_max(log_sigma, params.clamp_max).reshape(())
        term = T.scale(T.exp(T.scale(s, -2.0)), 0.5) * loss.reshape(()) + s
        total = term if total is None else total + term
    return total


def seg_loss(logits: Tensor, targets) -> tuple[Tensor, Tensor, Tensor]:
    """(weighted total, focal, dice); each term carries weight 20."""
    focal = sigmoid_focal(logits, targets)
    dice = dice_loss(T.sigmoid(logits), targets)
    return T.scale(focal, SEG_TERM_WEIGHT) + T.scale(dice, SEG_TERM_WEIGHT), focal, dice


def det_loss(heatmap_logits: Tensor, reg: Tensor, heatmap_gt, reg_gt, reg_mask,
             heatmap_weight: float = 1.0, reg_weight: float = 1.0) -> tuple[Tensor, Tensor, Tensor]:
    """(weighted total, heatmap focal, regression L1)."""
    hm = heatmap_focal(heatmap_logits, heatmap_gt)
    l1 = masked_l1(reg, reg_gt, reg_mask)
    return T.scale(hm, heatmap_weight) + T.scale(l1, reg_weight), hm, l1


@dataclass
class LossBundle:
    l_det_heatmap: float
    l_det_reg: float
    l_seg_focal: float
    l_seg_dice: float
    l_det: float
    l_seg: float
    l_total: float
    sigma_det: float
    sigma_seg: float

    def is_finite(self) -> bool:
        return all(math.isfinite(v) for v in asdict(self).values())

    def csv_row(self, step: int, lr: float) -> list:
        return [step, repr(lr), *(repr(getattr(self, k)) for k in LOSS_CSV_HEADER[2:])]


LOSS_CSV_HEADER = ("step", "lr", "l_det_heatmap", "l_det_reg", "l_seg_focal", "l_seg_dice",
                   "l_total", "sigma_det", "sigma_seg")
