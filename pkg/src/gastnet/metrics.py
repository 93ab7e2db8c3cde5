"""Protocol #1 / #2 pose errors and the differentiable training loss."""
import numpy as np

from . import tensor as tn
from .errors import ShapeError


def mpjpe(pred, gt):
    """Mean Euclidean distance per joint over all leading axes (same units as input)."""
    pred, gt = np.asarray(pred, dtype=np.float64), np.asarray(gt, dtype=np.float64)
    if pred.shape != gt.shape:
        raise ShapeError(f"mpjpe: shapes {pred.shape} and {gt.shape} differ")
    return float(np.linalg.norm(pred - gt, axis=-1).mean())


def mpjpe_loss(pred, gt):
    """Differentiable MPJPE on tensors of shape (..., 3)."""
    if pred.shape != gt.shape:
        raise ShapeError(f"mpjpe: shapes {pred.shape} and {gt.shape} differ")
    diff = pred - gt
    dist = tn.sqrt(tn.square(diff).sum(axis=-1), eps=1e-12)
    return dist.mean()


def procrustes_align(pred, gt):
    """Similarity transform of ``pred`` (N, 3) best matching ``gt`` in least squares."""
    pred, gt = np.asarray(pred, dtype=np.float64), np.asarray(gt, dtype=np.float64)
    if pred.shape != gt.shape or pred.ndim != 2 or pred.shape[1] != 3:
        raise ShapeError(f"procrustes: expected matching (N, 3) arrays, got {pred.shape}, {gt.shape}")
    if pred.shape[0] < 3:
        raise ShapeError("procrustes needs at least 3 points")
    if np.array_equal(pred, gt):
        return gt.copy()
    mu_p, mu_g = pred.mean(axis=0), gt.mean(axis=0)
    p0, g0 = pred - mu_p, gt - mu_g
    norm_g = np.sqrt((g0 ** 2).sum())
    if norm_g < 1e-12:
        raise ValueError("procrustes: ground truth points are coincident")
    norm_p = np.sqrt((p0 ** 2).sum())
    if norm_p < 1e-12:
        # a collapsed prediction aligns best to the ground-truth centroid
        return np.broadcast_to(mu_g, pred.shape).copy()
    U, s, Vt = np.linalg.svd(p0.T @ g0)
    d = np.sign(np.linalg.det(U @ Vt))
    D = np.diag([1.0, 1.0, d])
    R = U @ D @ Vt  # row-vector convention: aligned = p0 @ R
    scale = (s * np.diag(D)).sum() / (norm_p ** 2)
    return scale * p0 @ R + mu_g


def p_mpjpe(pred, gt):
    """MPJPE after per-frame Procrustes alignment, averaged over frames."""
    pred, gt = np.asarray(pred, dtype=np.float64), np.asarray(gt, dtype=np.float64)
    if pred.shape != gt.shape:
        raise ShapeError(f"p_mpjpe: shapes {pred.shape} and {gt.shape} differ")
    p = pred.reshape(-1, *pred.shape[-2:])
    g = gt.reshape(-1, *gt.shape[-2:])
    errs = [np.linalg.norm(procrustes_align(a, b) - b, axis=-1).mean() for a, b in zip(p, g)]
    return float(np.mean(errs))
