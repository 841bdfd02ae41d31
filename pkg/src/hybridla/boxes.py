"""Box conversions, IoU and generalised IoU.

Internally boxes are normalised (cx, cy, w, h).  Corner form (x, y, w, h)
appears only at I/O boundaries.
"""

from __future__ import annotations

import numpy as np

from .nn import Tensor, clamp, concat, maximum, minimum

FORMATS = ("cxcywh", "xywh", "xyxy")


def to_xyxy(boxes, fmt: str = "cxcywh") -> np.ndarray:
    b = np.asarray(boxes, dtype=np.float64)
    if fmt == "xyxy":
        return b
    if fmt == "xywh":
        return np.concatenate([b[..., :2], b[..., :2] + b[..., 2:]], axis=-1)
    if fmt == "cxcywh":
        half = b[..., 2:] / 2
        return np.concatenate([b[..., :2] - half, b[..., :2] + half], axis=-1)
    raise ValueError(f"unknown box format {fmt!r}; expected one of {FORMATS}")


def cxcywh_to_xywh(b) -> np.ndarray:
    b = np.asarray(b, dtype=np.float64)
    return np.concatenate([b[..., :2] - b[..., 2:] / 2, b[..., 2:]], axis=-1)


def xywh_to_cxcywh(b) -> np.ndarray:
    b = np.asarray(b, dtype=np.float64)
    return np.concatenate([b[..., :2] + b[..., 2:] / 2, b[..., 2:]], axis=-1)


def _area(xyxy: np.ndarray) -> np.ndarray:
    return np.clip(xyxy[..., 2] - xyxy[..., 0], 0, None) * np.clip(xyxy[..., 3] - xyxy[..., 1], 0, None)


def pairwise_iou(a, b, fmt: str = "cxcywh") -> np.ndarray:
    """IoU matrix (len(a), len(b)); pairs involving a zero-area box give 0."""
    A = to_xyxy(np.asarray(a, dtype=np.float64).reshape(-1, 4), fmt)
    B = to_xyxy(np.asarray(b, dtype=np.float64).reshape(-1, 4), fmt)
    lt = np.maximum(A[:, None, :2], B[None, :, :2])
    rb = np.minimum(A[:, None, 2:], B[None, :, 2:])
    wh = np.clip(rb - lt, 0, None)
    inter = wh[..., 0] * wh[..., 1]
    union = _area(A)[:, None] + _area(B)[None, :] - inter
    with np.errstate(invalid="ignore", divide="ignore"):
        out = np.where(union > 0, inter / np.where(union > 0, union, 1.0), 0.0)
    degenerate = (_area(A)[:, None] <= 0) | (_area(B)[None, :] <= 0)
    return np.where(degenerate, 0.0, out)


def pairwise_giou(a, b, fmt: str = "cxcywh") -> np.ndarray:
    A = to_xyxy(np.asarray(a, dtype=np.float64).reshape(-1, 4), fmt)
    B = to_xyxy(np.asarray(b, dtype=np.float64).reshape(-1, 4), fmt)
    iou = pairwise_iou(A, B, "xyxy")
    lt = np.maximum(A[:, None, :2], B[None, :, :2])
    rb = np.minimum(A[:, None, 2:], B[None, :, 2:])
    wh = np.clip(rb - lt, 0, None)
    inter = wh[..., 0] * wh[..., 1]
    union = _area(A)[:, None] + _area(B)[None, :] - inter
    hull_wh = np.maximum(A[:, None, 2:], B[None, :, 2:]) - np.minimum(A[:, None, :2], B[None, :, :2])
    hull = hull_wh[..., 0] * hull_wh[..., 1]
    with np.errstate(invalid="ignore", divide="ignore"):
        pen = np.where(hull > 0, (hull - union) / np.where(hull > 0, hull, 1.0), 0.0)
    degenerate = (_area(A)[:, None] <= 0) | (_area(B)[None, :] <= 0)
    return np.where(degenerate, 0.0, iou - pen)


def iou(a, b, fmt: str = "cxcywh") -> float:
    return float(pairwise_iou(a, b, fmt)[0, 0])


def giou(a, b, fmt: str = "cxcywh") -> float:
    return float(pairwise_giou(a, b, fmt)[0, 0])


def giou_tensor(pred: Tensor, target: np.ndarray) -> Tensor:
    """Elementwise GIoU between matched rows: pred (n, 4) tensor, target (n, 4) array,
    both (cx, cy, w, h).  Returns a (n,) tensor."""
    t = to_xyxy(target)
    cx, cy, w, h = pred[:, 0], pred[:, 1], pred[:, 2], pred[:, 3]
    x0, y0 = cx - w * 0.5, cy - h * 0.5
    x1, y1 = cx + w * 0.5, cy + h * 0.5
    tx0, ty0, tx1, ty1 = (Tensor(t[:, i]) for i in range(4))
    iw = clamp(minimum(x1, tx1) - maximum(x0, tx0), lo=0.0)
    ih = clamp(minimum(y1, ty1) - maximum(y0, ty0), lo=0.0)
    inter = iw * ih
    area_t = Tensor((t[:, 2] - t[:, 0]) * (t[:, 3] - t[:, 1]))
    union = w * h + area_t - inter
    hull = (maximum(x1, tx1) - minimum(x0, tx0)) * (maximum(y1, ty1) - minimum(y0, ty0))
    return inter / union - (hull - union) / hull


def clamp_boxes(boxes: Tensor, min_size: float = 1e-3) -> Tensor:
    """Clamp (cx, cy) to [0, 1] and (w, h) to [min_size, 1]."""
    return concat([clamp(boxes[:, :2], 0.0, 1.0), clamp(boxes[:, 2:], min_size, 1.0)], axis=1)
