"""Synthetic document pages, rasterisation and COCO-format I/O.

Internal boxes are normalised (cx, cy, w, h); COCO corner boxes in absolute
pixels only appear when reading or writing files.
"""

from __future__ import annotations

import json
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .boxes import cxcywh_to_xywh, pairwise_iou, xywh_to_cxcywh
from .rng import stream

DOCLAYNET_CLASSES = [
    "Caption", "Footnote", "Formula", "List-item", "Page-footer", "Page-header",
    "Picture", "Section-header", "Table", "Text", "Title",
]


class GenerationError(RuntimeError):
    pass


class CocoFormatError(ValueError):
    """Base class for annotation parse errors; ``path`` locates the offending JSON node."""

    category = "format"

    def __init__(self, path: str, message: str):
        super().__init__(f"{path}: {message}")
        self.path = path


class MissingKeyError(CocoFormatError):
    category = "missing_key"


class BoundsError(CocoFormatError):
    category = "bounds"


class DanglingReferenceError(CocoFormatError):
    category = "dangling_reference"


class InvalidValueError(CocoFormatError):
    category = "invalid_value"


@dataclass
class GroundTruthPage:
    boxes: np.ndarray            # (n, 4) normalised cx, cy, w, h
    labels: np.ndarray           # (n,) dense class ids
    page_id: int | str = 0

    def __post_init__(self):
        self.boxes = np.asarray(self.boxes, dtype=np.float64).reshape(-1, 4)
        self.labels = np.asarray(self.labels, dtype=np.int64).reshape(-1)
        if len(self.boxes) != len(self.labels):
            raise ValueError("boxes and labels differ in length")

    def __len__(self) -> int:
        return len(self.labels)


@dataclass
class Detections:
    """Scored detections of one image, boxes normalised (cx, cy, w, h)."""

    boxes: np.ndarray
    scores: np.ndarray
    labels: np.ndarray
    image_id: int | str = 0

    def __post_init__(self):
        self.boxes = np.asarray(self.boxes, dtype=np.float64).reshape(-1, 4)
        self.scores = np.asarray(self.scores, dtype=np.float64).reshape(-1)
        self.labels = np.asarray(self.labels, dtype=np.int64).reshape(-1)

    def __len__(self) -> int:
        return len(self.labels)


@dataclass
class PageConfig:
    min_elements: int = 2
    max_elements: int = 8
    class_count: int = 4
    canvas: tuple = (64, 64)
    max_overlap: float = 0.05
    min_size: int = 8
    max_size: int = 24
    rejections_per_element: int = 200
    page_retries: int = 20


@dataclass
class SyntheticPage:
    canvas: tuple
    elements: list          # [(class_id, (x, y, w, h) pixels)]
    seed: int = 0

    def ground_truth(self, page_id=0) -> GroundTruthPage:
        W, H = self.canvas
        if not self.elements:
            return GroundTruthPage(np.zeros((0, 4)), np.zeros(0, dtype=np.int64), page_id)
        px = np.array([b for _, b in self.elements], dtype=np.float64)
        norm = px / np.array([W, H, W, H], dtype=np.float64)
        return GroundTruthPage(xywh_to_cxcywh(norm), [c for c, _ in self.elements], page_id)

    def to_json(self) -> dict:
        return {"canvas": list(self.canvas), "seed": self.seed,
                "elements": [{"class_id": int(c), "bbox": [int(v) for v in b]} for c, b in self.elements]}

    @classmethod
    def from_json(cls, doc: dict) -> "SyntheticPage":
        return cls(tuple(doc["canvas"]), [(e["class_id"], tuple(e["bbox"])) for e in doc["elements"]],
                   doc.get("seed", 0))


@dataclass
class DatasetSplit:
    pages: list                        # [(image array or None, GroundTruthPage)]
    class_names: list
    category_ids: list = field(default_factory=list)    # dense id -> original COCO id
    image_dims: dict = field(default_factory=dict)      # image_id -> (width, height)
    file_names: dict = field(default_factory=dict)

    def __len__(self) -> int:
        return len(self.pages)


# -- synthetic generation -----------------------------------------------------
def _overlap_ok(box, placed, max_overlap) -> bool:
    if not placed:
        return True
    return pairwise_iou([box], placed, "xywh").max() <= max_overlap


def generate_page(rng, config: PageConfig) -> SyntheticPage:
    """Sample one page.  ``rng`` is an integer seed or a numpy Generator."""
    if config.min_elements > config.max_elements:
        raise ValueError("min_elements exceeds max_elements")
    if config.class_count < 1:
        raise ValueError("class_count must be at least 1")
    seed = int(rng) if isinstance(rng, (int, np.integer)) else int(rng.integers(2**63))
    W, H = config.canvas
    lo, hi = config.min_size, min(config.max_size, W, H)
    if lo > hi:
        raise GenerationError(f"canvas {config.canvas} cannot hold elements of size {config.min_size}")
    if config.min_elements * lo * lo > W * H:
        raise GenerationError(f"canvas {config.canvas} too small for {config.min_elements} elements")
    for attempt in range(config.page_retries):
        g = stream(seed, f"page/{attempt}")
        n = int(g.integers(config.min_elements, config.max_elements + 1))
        placed, elements = [], []
        for _ in range(n):
            for _ in range(config.rejections_per_element):
                w, h = int(g.integers(lo, hi + 1)), int(g.integers(lo, hi + 1))
                x, y = int(g.integers(0, W - w + 1)), int(g.integers(0, H - h + 1))
                if _overlap_ok((x, y, w, h), placed, config.max_overlap):
                    placed.append((x, y, w, h))
                    elements.append((int(g.integers(config.class_count)), (x, y, w, h)))
                    break
        if len(elements) >= config.min_elements:
            return SyntheticPage((W, H), elements, seed)
    raise GenerationError(f"could not place {config.min_elements} elements after "
                          f"{config.page_retries} page attempts")


def texture_params(class_id: int) -> tuple:
    """(channel, stripe period, intensity) of a class."""
    return class_id % 3, 2 + class_id, 0.3 + 0.05 * class_id


def rasterize(page: SyntheticPage, size: int) -> np.ndarray:
    """Render to a (3, size, size) float image: black background, each element a
    block of horizontal stripes (full intensity on, half intensity off)."""
    img = np.zeros((3, size, size))
    W, H = page.canvas
    sx, sy = size / W, size / H
    for cls, (x, y, w, h) in page.elements:
        x0, x1 = int(round(x * sx)), int(round((x + w) * sx))
        y0, y1 = int(round(y * sy)), int(round((y + h) * sy))
        ch, period, level = texture_params(cls)
        rows = np.arange(y1 - y0)
        on = (rows % period) < (period + 1) // 2
        img[ch, y0:y1, x0:x1] = np.where(on, level, 0.5 * level)[:, None]
    return img


def synthetic_split(n_pages: int, config: PageConfig, seed: int, size: int = 64,
                    class_names: list | None = None) -> DatasetSplit:
    names = class_names or (DOCLAYNET_CLASSES if config.class_count == 11
                            else [f"class{i}" for i in range(config.class_count)])
    pages, dims = [], {}
    for i in range(n_pages):
        page = generate_page(int(stream(seed, f"split/{i}").integers(2**62)), config)
        pages.append((rasterize(page, size), page.ground_truth(i)))
        dims[i] = tuple(page.canvas)
    return DatasetSplit(pages, list(names), list(range(len(names))), dims)


# -- COCO I/O -----------------------------------------------------------------
def _require(obj, key, path):
    if not isinstance(obj, dict) or key not in obj:
        raise MissingKeyError(f"{path}.{key}" if path else key, "required key is missing")
    return obj[key]


def parse_coco(doc: dict, tolerance: float = 1.0) -> DatasetSplit:
    if not isinstance(doc, dict):
        raise InvalidValueError("$", "top level must be an object")
    images = _require(doc, "images", "")
    anns = _require(doc, "annotations", "")
    cats = _require(doc, "categories", "")
    for key, val in (("images", images), ("annotations", anns), ("categories", cats)):
        if not isinstance(val, list):
            raise InvalidValueError(key, "must be a list")

    cat_ids = []
    names = {}
    for i, c in enumerate(cats):
        cid = _require(c, "id", f"categories[{i}]")
        names[cid] = _require(c, "name", f"categories[{i}]")
        cat_ids.append(cid)
    if len(set(cat_ids)) != len(cat_ids):
        raise InvalidValueError("categories", "duplicate category id")
    cat_ids = sorted(cat_ids)
    dense = {cid: i for i, cid in enumerate(cat_ids)}

    dims, files, order = {}, {}, []
    for i, im in enumerate(images):
        iid = _require(im, "id", f"images[{i}]")
        w = _require(im, "width", f"images[{i}]")
        h = _require(im, "height", f"images[{i}]")
        files[iid] = _require(im, "file_name", f"images[{i}]")
        if not (isinstance(w, (int, float)) and isinstance(h, (int, float))) or w <= 0 or h <= 0:
            raise InvalidValueError(f"images[{i}]", f"invalid size {w}x{h}")
        if iid in dims:
            raise InvalidValueError(f"images[{i}].id", f"duplicate image id {iid}")
        dims[iid] = (w, h)
        order.append(iid)

    per_image = {iid: ([], []) for iid in order}
    for i, a in enumerate(anns):
        path = f"annotations[{i}]"
        _require(a, "id", path)
        iid = _require(a, "image_id", path)
        cid = _require(a, "category_id", path)
        bbox = _require(a, "bbox", path)
        if iid not in dims:
            raise DanglingReferenceError(f"{path}.image_id", f"unknown image id {iid}")
        if cid not in dense:
            raise DanglingReferenceError(f"{path}.category_id", f"unknown category id {cid}")
        if not isinstance(bbox, list) or len(bbox) != 4 or not all(isinstance(v, (int, float)) for v in bbox):
            raise InvalidValueError(f"{path}.bbox", "expected [x, y, w, h] numbers")
        x, y, w, h = (float(v) for v in bbox)
        W, H = dims[iid]
        if w <= 0 or h <= 0:
            raise InvalidValueError(f"{path}.bbox", f"non-positive size {w}x{h}")
        if x < -tolerance or y < -tolerance or x + w > W + tolerance or y + h > H + tolerance:
            raise BoundsError(f"{path}.bbox", f"box {bbox} outside image {W}x{H}")
        x0, y0 = max(x, 0.0), max(y, 0.0)
        x1, y1 = min(x + w, W), min(y + h, H)
        per_image[iid][0].append([x0 / W, y0 / H, (x1 - x0) / W, (y1 - y0) / H])
        per_image[iid][1].append(dense[cid])

    pages = []
    for iid in order:
        boxes, labels = per_image[iid]
        b = xywh_to_cxcywh(np.array(boxes, dtype=np.float64).reshape(-1, 4))
        pages.append((None, GroundTruthPage(b, labels, iid)))
    return DatasetSplit(pages, [names[c] for c in cat_ids], cat_ids, dims, files)


def load_coco(annotations_path) -> DatasetSplit:
    with open(annotations_path, encoding="utf-8") as fh:
        try:
            doc = json.load(fh)
        except json.JSONDecodeError as exc:
            raise InvalidValueError("$", f"not valid JSON ({exc})") from exc
    return parse_coco(doc)


def _to_pixels(box_cxcywh, dims) -> list:
    W, H = dims
    x, y, w, h = cxcywh_to_xywh(np.asarray(box_cxcywh, dtype=np.float64))
    return [float(x * W), float(y * H), float(w * W), float(h * H)]


def coco_document(split: DatasetSplit) -> dict:
    cat_ids = split.category_ids or list(range(len(split.class_names)))
    images, anns = [], []
    for _, gt in split.pages:
        iid = gt.page_id
        W, H = split.image_dims[iid]
        images.append({"id": iid, "width": W, "height": H,
                       "file_name": split.file_names.get(iid, f"{iid}.png")})
        for box, lab in zip(gt.boxes, gt.labels):
            anns.append({"id": len(anns) + 1, "image_id": iid, "category_id": cat_ids[int(lab)],
                         "bbox": _to_pixels(box, (W, H)), "area": 0.0, "iscrowd": 0})
    for a in anns:
        a["area"] = a["bbox"][2] * a["bbox"][3]
    cats = [{"id": cid, "name": name} for cid, name in zip(cat_ids, split.class_names)]
    return {"images": images, "annotations": anns, "categories": cats}


def export_coco(split: DatasetSplit, path) -> None:
    Path(path).write_text(json.dumps(coco_document(split)), encoding="utf-8")


def results_document(predictions, image_dims: dict, category_ids: list | None = None) -> list:
    out = []
    for det in predictions:
        if det.image_id not in image_dims:
            raise KeyError(f"image id {det.image_id!r} has no recorded dimensions")
        for box, score, lab in zip(det.boxes, det.scores, det.labels):
            cid = category_ids[int(lab)] if category_ids else int(lab)
            out.append({"image_id": det.image_id, "category_id": cid,
                        "bbox": _to_pixels(box, image_dims[det.image_id]), "score": float(score)})
    return out


def export_results(predictions, image_dims: dict, path, category_ids: list | None = None) -> None:
    Path(path).write_text(json.dumps(results_document(predictions, image_dims, category_ids)),
                          encoding="utf-8")


def load_results(path, image_dims: dict, category_ids: list | None = None) -> list:
    """Read a COCO results array back into per-image :class:`Detections`."""
    doc = json.loads(Path(path).read_text(encoding="utf-8"))
    if not isinstance(doc, list):
        raise InvalidValueError("$", "results must be a JSON array")
    dense = {cid: i for i, cid in enumerate(category_ids)} if category_ids else None
    per = {iid: ([], [], []) for iid in image_dims}
    for i, r in enumerate(doc):
        iid = _require(r, "image_id", f"[{i}]")
        if iid not in per:
            raise DanglingReferenceError(f"[{i}].image_id", f"unknown image id {iid}")
        cid = _require(r, "category_id", f"[{i}]")
        x, y, w, h = _require(r, "bbox", f"[{i}]")
        W, H = image_dims[iid]
        per[iid][0].append([x / W, y / H, w / W, h / H])
        per[iid][1].append(_require(r, "score", f"[{i}]"))
        per[iid][2].append(dense.get(cid, -1) if dense else cid)
    return [Detections(xywh_to_cxcywh(np.array(b).reshape(-1, 4)), s, l, iid)
            for iid, (b, s, l) in per.items()]


def save_synthetic(pages: list, path) -> None:
    Path(path).write_text(json.dumps([p.to_json() for p in pages]), encoding="utf-8")


def load_synthetic(path) -> list:
    return [SyntheticPage.from_json(d) for d in json.loads(Path(path).read_text(encoding="utf-8"))]
