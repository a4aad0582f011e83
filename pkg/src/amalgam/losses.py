"""Training losses for the three pixel-prediction tasks.

All losses return scalar graph tensors so gradients flow to whatever
produced the predictions. Ground-truth style arguments (labels, target
depth/normal maps, masks) are plain arrays; multiplying residuals by the
mask keeps invalid pixels' gradients exactly zero, not merely small.
"""

from __future__ import annotations

import numpy as np

from . import tensor as T
from .errors import DataError, DimensionError
from .tensor import Tensor

# floor for probabilities/lengths before log or division; keeps gradients
# finite without visibly perturbing well-scaled values
EPS = 1e-12


def _as_mask(mask, shape) -> np.ndarray:
    m = np.asarray(mask, dtype=np.float64)
    if m.ndim == 3:
        m = m[:, None]
    if m.shape != (shape[0], 1, shape[2], shape[3]):
        raise DimensionError(f"mask shape {m.shape} does not match maps {shape}")
    return m


def seg_loss(probs: Tensor, labels, weight_decay: float = 0.0, params=()) -> Tensor:
    """Mean per-pixel cross-entropy against hard labels, plus L2 regularizer.

    `probs` must already be a per-pixel distribution over K channels.
    The regularizer weight_decay * sum(p^2) belongs to teacher
    pre-training; amalgamation passes weight_decay=0.
    """
    b, k, h, w = probs.shape
    lab = np.asarray(labels)
    if lab.shape != (b, h, w):
        raise DimensionError(f"labels shape {lab.shape} does not match probs {probs.shape}")
    if lab.min() < 0 or lab.max() >= k:
        raise DataError(f"labels must lie in [0, {k}), found range "
                        f"[{lab.min()}, {lab.max()}]")
    onehot = np.zeros((b, k, h, w))
    np.put_along_axis(onehot, lab[:, None].astype(np.int64), 1.0, axis=1)
    # max(p, EPS) keeps log finite; gradient still reaches every real prob
    clipped = T.relu(probs - EPS) + EPS
    ce = T.sum_all(T.mul(T.constant(onehot), T.log(clipped))) * (-1.0 / (b * h * w))
    if weight_decay and params:
        reg = T.sum_all(T.mul(params[0], params[0]))
        for p in params[1:]:
            reg = reg + T.sum_all(T.mul(p, p))
        ce = ce + reg * float(weight_decay)
    return ce


def depth_loss(d_gt, d_pred: Tensor, mask) -> Tensor:
    """Scale-sensitive depth error: (1/N) sum d^2 - (1/(2 N^2)) (sum d)^2.

    d = gt - prediction over the N valid pixels. The subtracted term
    forgives a common offset by half, so the value is bounded below by
    sum(d^2)/(2N).
    """
    gt = d_gt.data if isinstance(d_gt, Tensor) else np.asarray(d_gt, dtype=np.float64)
    if gt.ndim == 3:
        gt = gt[:, None]
    if gt.shape != d_pred.shape:
        raise DimensionError(f"depth maps disagree: gt {gt.shape} vs pred {d_pred.shape}")
    m = _as_mask(mask, d_pred.shape)
    n = m.sum()
    if n == 0:
        raise DataError("depth loss needs at least one valid pixel")
    d = T.mul(T.constant(gt) - d_pred, T.constant(m))
    sq = T.sum_all(T.mul(d, d)) * (1.0 / n)
    lin = T.sum_all(d)
    return sq - T.mul(lin, lin) * (1.0 / (2.0 * n * n))


def normalize_vectors(m: Tensor) -> Tensor:
    """Scale per-pixel 3-vectors to unit length (eps-guarded at zero)."""
    sq = T.sum_axes(T.mul(m, m), (1,))
    return T.div(m, T.sqrt(sq + EPS * EPS))


def norm_loss(m_gt, m_pred: Tensor, mask=None) -> Tensor:
    """Negative mean cosine between predicted and target normals, in [-1, 1].

    Predictions are renormalized first; a zero-length prediction vector is
    eps-normalized (the evaluation report carries the count of such pixels).
    """
    gt = m_gt.data if isinstance(m_gt, Tensor) else np.asarray(m_gt, dtype=np.float64)
    if gt.shape != m_pred.shape or gt.shape[1] != 3:
        raise DimensionError(f"normal fields disagree: gt {gt.shape} vs pred {m_pred.shape}")
    dots = T.sum_axes(T.mul(normalize_vectors(m_pred), T.constant(gt)), (1,))
    if mask is None:
        n = gt.shape[0] * gt.shape[2] * gt.shape[3]
    else:
        m = _as_mask(mask, (gt.shape[0], 1, gt.shape[2], gt.shape[3]))
        n = m.sum()
        if n == 0:
            raise DataError("normal loss needs at least one valid pixel")
        dots = T.mul(dots, T.constant(m))
    return T.sum_all(dots) * (-1.0 / n)


def feature_l2_loss(f_ud: Tensor, f_d, f_us: Tensor, f_s, lam1: float, lam2: float) -> Tensor:
    """Weighted sum of squared feature differences against two targets."""
    targets = []
    for name, proj, ref in (("depth", f_ud, f_d), ("seg", f_us, f_s)):
        r = ref.data if isinstance(ref, Tensor) else np.asarray(ref, dtype=np.float64)
        if r.shape != proj.shape:
            raise DimensionError(
                f"{name} feature pair disagrees: {proj.shape} vs {r.shape}")
        targets.append(T.constant(r))
    dd = f_ud - targets[0]
    ds = f_us - targets[1]
    return T.sum_all(T.mul(dd, dd)) * float(lam1) + T.sum_all(T.mul(ds, ds)) * float(lam2)
