"""Dead-zone confidence loss and start-end loss over interval grids.

Per cell::

    CL  = 0 if |pc - tc| < 0.25 else (pc - tc)**2
    SS  = (ps - ts)**2 + (pe - te)**2
    SEL = 0 if SS < 0.15 else SS * tc

and the record loss is the sum of CL + SEL over every interval and class
whose label mask is set.  At exactly 0.25 / 0.15 the non-zero branch applies.

The numpy functions are the reference (with hand-derived gradients); the
torch function is what training differentiates.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np
import torch

from .grid_codec import CONF, END, START, Grid

CONF_DEAD_ZONE = 0.25
SS_DEAD_ZONE = 0.15


def _finite(*arrays):
    out = [np.asarray(a, dtype=np.float64) for a in arrays]
    for a in out:
        if not np.all(np.isfinite(a)):
            raise ValueError("loss inputs must be finite")
    return out


def confidence_loss(pc, tc):
    pc, tc = _finite(pc, tc)
    diff = pc - tc
    out = np.where(np.abs(diff) < CONF_DEAD_ZONE, 0.0, diff * diff)
    return out if out.ndim else float(out)


def confidence_loss_grad(pc, tc):
    """d CL / d pc."""
    pc, tc = _finite(pc, tc)
    diff = pc - tc
    out = np.where(np.abs(diff) < CONF_DEAD_ZONE, 0.0, 2.0 * diff)
    return out if out.ndim else float(out)


def start_end_loss(ps, pe, ts, te, tc):
    """Returns ``(ss, sel)``."""
    ps, pe, ts, te, tc = _finite(ps, pe, ts, te, tc)
    ss = (ps - ts) ** 2 + (pe - te) ** 2
    sel = np.where(ss < SS_DEAD_ZONE, 0.0, ss * tc)
    if ss.ndim == 0:
        return float(ss), float(sel)
    return ss, sel


def start_end_loss_grad(ps, pe, ts, te, tc):
    """``(d SEL / d ps, d SEL / d pe)``."""
    ps, pe, ts, te, tc = _finite(ps, pe, ts, te, tc)
    ss = (ps - ts) ** 2 + (pe - te) ** 2
    active = np.where(ss < SS_DEAD_ZONE, 0.0, tc)
    d_ps, d_pe = 2.0 * (ps - ts) * active, 2.0 * (pe - te) * active
    if d_ps.ndim == 0:
        return float(d_ps), float(d_pe)
    return d_ps, d_pe


@dataclass(frozen=True)
class CellLossBreakdown:
    cl: np.ndarray
    sel: np.ndarray
    ss: np.ndarray


@dataclass(frozen=True)
class LossResult:
    total: float
    cells: CellLossBreakdown


def _check_shapes(prediction: Grid, target: Grid) -> None:
    if prediction.values.shape != target.values.shape:
        raise ValueError(f"shape mismatch: prediction {prediction.values.shape} vs target {target.values.shape}")


def grid_loss(prediction: Grid, target: Grid) -> LossResult:
    """Sum of CL + SEL over cells; classes masked out in ``target`` contribute 0."""
    _check_shapes(prediction, target)
    p, t = prediction.values, target.values
    cl = confidence_loss(p[..., CONF], t[..., CONF])
    ss, sel = start_end_loss(p[..., START], p[..., END], t[..., START], t[..., END], t[..., CONF])
    keep = target.mask[None, :]
    cl, sel = np.where(keep, cl, 0.0), np.where(keep, sel, 0.0)
    total = float(np.sum(cl + sel))
    return LossResult(total, CellLossBreakdown(cl=cl, sel=sel, ss=ss))


def grid_loss_grad(prediction: Grid, target: Grid) -> np.ndarray:
    """Gradient of :func:`grid_loss` w.r.t. ``prediction.values``."""
    _check_shapes(prediction, target)
    p, t = prediction.values, target.values
    grad = np.zeros_like(p)
    grad[..., CONF] = confidence_loss_grad(p[..., CONF], t[..., CONF])
    grad[..., START], grad[..., END] = start_end_loss_grad(
        p[..., START], p[..., END], t[..., START], t[..., END], t[..., CONF]
    )
    return grad * target.mask[None, :, None]


def torch_grid_loss(prediction: torch.Tensor, target: torch.Tensor, mask: torch.Tensor) -> torch.Tensor:
    """Batch loss: per-record sum of CL + SEL, averaged over the batch.

    ``prediction``/``target``: ``(B, n_intervals, 3, 3)``; ``mask``: ``(B, 3)``.
    """
    if prediction.shape != target.shape:
        raise ValueError(f"shape mismatch: {tuple(prediction.shape)} vs {tuple(target.shape)}")
    diff = prediction[..., CONF] - target[..., CONF]
    zero = torch.zeros((), dtype=prediction.dtype)
    cl = torch.where(diff.abs() < CONF_DEAD_ZONE, zero, diff * diff)
    ss = (prediction[..., START] - target[..., START]) ** 2 + (prediction[..., END] - target[..., END]) ** 2
    sel = torch.where(ss < SS_DEAD_ZONE, zero, ss * target[..., CONF])
    per_cell = (cl + sel) * mask[:, None, :].to(prediction.dtype)
    return per_cell.sum(dim=(1, 2)).mean()
