"""Synthetic-shapes detection: scene generator, grid detector, loss and box mAP."""
from __future__ import annotations

from dataclasses import dataclass, field
from pathlib import Path
from typing import Iterable, Sequence

import numpy as np

from . import tensor as T
from .params import ParameterSet
from .ppm import PPMFormatError, load_ppm, save_ppm, to_uint8
from .tensor import Tensor

IMAGE_SIZE = 64
GRID = 8
CELL = IMAGE_SIZE // GRID
CLASSES = ("circle", "square", "triangle")
N_OUTPUTS = 1 + 4 + len(CLASSES)
MIN_SIZE, MAX_SIZE = 8, 28
CONF_THRESHOLD = 0.3
ANNOTATION_FILE = "annotations.txt"

Box = tuple[float, float, float, float]


@dataclass
class Scene:
    image: np.ndarray  # H x W x 3, float in [0, 1], 8-bit exact
    boxes: list[Box]
    labels: list[int]
    seed: int = 0
    masks: list[np.ndarray] = field(default_factory=list, repr=False)


@dataclass(frozen=True)
class Detection:
    box: Box
    label: int
    confidence: float


@dataclass
class TaskLoss:
    objectness: Tensor
    box: Tensor
    classification: Tensor

    @property
    def total(self) -> Tensor:
        return T.add(T.add(self.objectness, self.box), self.classification)


# ------------------------------------------------------------------ dataset


def scene_seed(seed: int, index: int) -> int:
    return int(np.random.SeedSequence([seed, index]).generate_state(1, np.uint64)[0])


def shape_mask(label: int, x0: int, y0: int, size: int, h: int = IMAGE_SIZE, w: int = IMAGE_SIZE) -> np.ndarray:
    """Rasterize one shape with pixel-centre sampling."""
    py, px = np.mgrid[0:h, 0:w] + 0.5
    if label == 0:
        r = size / 2.0
        return (px - (x0 + r)) ** 2 + (py - (y0 + r)) ** 2 <= r * r
    if label == 1:
        return (px >= x0) & (px < x0 + size) & (py >= y0) & (py < y0 + size)
    # apex at top centre, base along the bottom edge
    ax, ay = x0 + size / 2.0, float(y0)
    bx, by = float(x0), float(y0 + size)
    cx, cy = float(x0 + size), float(y0 + size)

    def edge(x1, y1, x2, y2):
        return (x2 - x1) * (py - y1) - (y2 - y1) * (px - x1)

    e1, e2, e3 = edge(ax, ay, bx, by), edge(bx, by, cx, cy), edge(cx, cy, ax, ay)
    return ((e1 <= 0) & (e2 <= 0) & (e3 <= 0)) | ((e1 >= 0) & (e2 >= 0) & (e3 >= 0))


def _background(rng: np.random.Generator) -> np.ndarray:
    base = rng.uniform(0.2, 0.8, size=3)
    yy, xx = np.mgrid[0:IMAGE_SIZE, 0:IMAGE_SIZE] / IMAGE_SIZE
    tex = np.zeros((IMAGE_SIZE, IMAGE_SIZE))
    for _ in range(2):
        fx, fy = rng.uniform(1.0, 6.0, size=2)
        phase = rng.uniform(0, 2 * np.pi)
        tex += 0.06 * np.sin(2 * np.pi * (fx * xx + fy * yy) + phase)
    tint = rng.uniform(0.5, 1.0, size=3)
    img = base + tex[..., None] * tint + rng.normal(0.0, 0.01, size=(IMAGE_SIZE, IMAGE_SIZE, 3))
    return np.clip(img, 0.0, 1.0)


def _pick_color(rng: np.random.Generator, background: np.ndarray) -> np.ndarray:
    ref = background.reshape(-1, 3).mean(axis=0)
    for _ in range(100):
        color = rng.uniform(0.0, 1.0, size=3)
        if np.linalg.norm(color - ref) >= 0.35:
            return color
    return 1.0 - ref


def iou(a: Sequence[float], b: Sequence[float]) -> float:
    """Intersection over union of two (x0, y0, x1, y1) boxes."""
    iw = min(a[2], b[2]) - max(a[0], b[0])
    ih = min(a[3], b[3]) - max(a[1], b[1])
    if iw <= 0 or ih <= 0:
        return 0.0
    inter = iw * ih
    union = (a[2] - a[0]) * (a[3] - a[1]) + (b[2] - b[0]) * (b[3] - b[1]) - inter
    return float(inter / union) if union > 0 else 0.0


def center_cell(box: Sequence[float]) -> tuple[int, int]:
    cx, cy = (box[0] + box[2]) / 2.0, (box[1] + box[3]) / 2.0
    return min(int(cy // CELL), GRID - 1), min(int(cx // CELL), GRID - 1)


def generate_scene(seed: int) -> Scene:
    rng = np.random.default_rng(seed)
    img = _background(rng)
    n_obj = int(rng.integers(1, 4))
    boxes: list[Box] = []
    labels: list[int] = []
    masks: list[np.ndarray] = []
    cells: set[tuple[int, int]] = set()
    for _ in range(n_obj):
        label = int(rng.integers(0, len(CLASSES)))
        for _attempt in range(100):
            size = int(rng.integers(MIN_SIZE, MAX_SIZE + 1))
            x0 = int(rng.integers(0, IMAGE_SIZE - size + 1))
            y0 = int(rng.integers(0, IMAGE_SIZE - size + 1))
            box = (float(x0), float(y0), float(x0 + size), float(y0 + size))
            if center_cell(box) in cells or any(iou(box, b) > 0.2 for b in boxes):
                continue
            break
        else:
            break
        color = _pick_color(rng, img)
        mask = shape_mask(label, x0, y0, size)
        img[mask] = color
        boxes.append(box)
        labels.append(label)
        masks.append(mask)
        cells.add(center_cell(box))
    image = to_uint8(img).astype(np.float64) / 255.0
    return Scene(image=image, boxes=boxes, labels=labels, seed=seed, masks=masks)


def generate_dataset(n: int, seed: int) -> list[Scene]:
    if n <= 0:
        raise ValueError("dataset size must be positive")
    return [generate_scene(scene_seed(seed, i)) for i in range(n)]


def images_nchw(scenes: Sequence[Scene]) -> np.ndarray:
    return np.ascontiguousarray(np.stack([s.image for s in scenes]).transpose(0, 3, 1, 2))


def save_dataset(scenes: Sequence[Scene], out_dir: str | Path) -> Path:
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    lines = []
    for i, s in enumerate(scenes):
        name = f"scene_{i:05d}.ppm"
        save_ppm(out / name, s.image)
        for b, lab in zip(s.boxes, s.labels):
            lines.append(f"{name} {int(b[0])} {int(b[1])} {int(b[2])} {int(b[3])} {lab}")
    (out / ANNOTATION_FILE).write_text("\n".join(lines) + "\n")
    return out


def load_dataset(path: str | Path) -> list[Scene]:
    root = Path(path)
    ann = root / ANNOTATION_FILE
    if not ann.exists():
        raise FileNotFoundError(f"no {ANNOTATION_FILE} in {root}")
    objects: dict[str, list[tuple[Box, int]]] = {}
    for lineno, line in enumerate(ann.read_text().splitlines(), 1):
        if not line.strip():
            continue
        parts = line.split()
        if len(parts) != 6:
            raise ValueError(f"{ann}:{lineno}: expected 6 fields, got {len(parts)}")
        name = parts[0]
        x0, y0, x1, y1, lab = (int(v) for v in parts[1:])
        objects.setdefault(name, []).append(((float(x0), float(y0), float(x1), float(y1)), lab))
    scenes = []
    for name in sorted(p.name for p in root.glob("*.ppm")):
        try:
            image = load_ppm(root / name)
        except PPMFormatError as exc:
            raise PPMFormatError(f"{name}: {exc}", exc.offset) from None
        objs = objects.get(name, [])
        scenes.append(Scene(image=image, boxes=[o[0] for o in objs], labels=[o[1] for o in objs]))
    return scenes


# ----------------------------------------------------------------- detector

DETECTOR_LAYERS = (  # (name, out_channels, kernel, stride)
    ("conv0", 16, 5, 2),
    ("conv1", 32, 3, 2),
    ("conv2", 32, 3, 2),
    ("conv3", 32, 5, 1),
)


def init_detector_params(seed: int = 0, widths: Sequence[int] | None = None) -> ParameterSet:
    rng = np.random.default_rng(seed)
    p = ParameterSet()
    cin = 3
    for i, (name, cout, k, _) in enumerate(DETECTOR_LAYERS):
        cout = widths[i] if widths is not None else cout
        fan_in = cin * k * k
        p.add(f"task.{name}.weight", rng.normal(0.0, np.sqrt(2.0 / fan_in), size=(cout, cin, k, k)), "task")
        p.add(f"task.{name}.bias", np.zeros(cout), "task")
        cin = cout
    p.add("task.head.weight", rng.normal(0.0, 0.01, size=(N_OUTPUTS, cin, 1, 1)), "task")
    p.add("task.head.bias", np.zeros(N_OUTPUTS), "task")
    return p


def detector_forward(x: Tensor, params: ParameterSet) -> Tensor:
    """[N,3,64,64] image batch -> [N,8,8,8] grid predictions.

    Channel order: objectness logit, (tx, ty, tw, th), three class logits.
    """
    if x.ndim != 4 or x.shape[1:] != (3, IMAGE_SIZE, IMAGE_SIZE):
        raise T.ShapeError(f"detector expects [N,3,{IMAGE_SIZE},{IMAGE_SIZE}], got {x.shape}")
    h = T.add_scalar(x, -0.5)
    for name, _, k, s in DETECTOR_LAYERS:
        h = T.relu(T.conv2d(h, params[f"task.{name}.weight"], params[f"task.{name}.bias"], s, k // 2))
    return T.conv2d(h, params["task.head.weight"], params["task.head.bias"], 1, 0)


def encode_targets(scene: Scene) -> tuple[np.ndarray, list[tuple[int, int]], np.ndarray, list[int]]:
    """Objectness map, positive cells, box offsets (cell units) and labels."""
    obj = np.zeros((GRID, GRID))
    cells, offsets = [], []
    for b in scene.boxes:
        r, c = center_cell(b)
        obj[r, c] = 1.0
        cx, cy = (b[0] + b[2]) / 2.0, (b[1] + b[3]) / 2.0
        offsets.append((cx / CELL - c, cy / CELL - r, (b[2] - b[0]) / CELL, (b[3] - b[1]) / CELL))
        cells.append((r, c))
    return obj, cells, np.asarray(offsets, dtype=np.float64).reshape(-1, 4), list(scene.labels)


def task_loss(pred: Tensor, scenes: Sequence[Scene]) -> TaskLoss:
    """Per-image summed loss terms (nats), averaged over the batch."""
    n = pred.shape[0]
    if n != len(scenes):
        raise T.ShapeError(f"{n} predictions for {len(scenes)} scenes")
    obj_t = np.zeros((n, GRID, GRID))
    bi, ri, ci, offs, labels = [], [], [], [], []
    for i, s in enumerate(scenes):
        if not s.boxes:
            raise T.ContractError(f"scene {i} has no objects")
        obj, cells, off, lab = encode_targets(s)
        obj_t[i] = obj
        for (r, c) in cells:
            bi.append(i)
            ri.append(r)
            ci.append(c)
        offs.append(off)
        labels.extend(lab)
    key = (np.asarray(bi), slice(None), np.asarray(ri), np.asarray(ci))
    pos = T.index(pred, key)  # [P, 8]
    objectness = T.tensor_sum(T.bce_with_logits(T.index(pred, (slice(None), 0)), obj_t))
    box = T.tensor_sum(T.smooth_l1(T.index(pos, (slice(None), slice(1, 5))), np.concatenate(offs)))
    cls = T.tensor_sum(T.softmax_cross_entropy(T.index(pos, (slice(None), slice(5, 8))), labels))
    inv = 1.0 / n
    return TaskLoss(T.scale(objectness, inv), T.scale(box, inv), T.scale(cls, inv))


def decode_detections(pred: np.ndarray, threshold: float = CONF_THRESHOLD) -> list[list[Detection]]:
    """Per-cell top-1 class; keep cells whose objectness x class probability >= threshold."""
    pred = np.asarray(pred)
    out = []
    for p in pred:
        obj = 1.0 / (1.0 + np.exp(-p[0]))
        logits = p[5:8]
        e = np.exp(logits - logits.max(axis=0))
        prob = e / e.sum(axis=0)
        label = prob.argmax(axis=0)
        conf = obj * prob.max(axis=0)
        dets = []
        for r in range(GRID):
            for c in range(GRID):
                if conf[r, c] < threshold:
                    continue
                cx = (c + p[1, r, c]) * CELL
                cy = (r + p[2, r, c]) * CELL
                w = max(p[3, r, c] * CELL, 1e-3)
                h = max(p[4, r, c] * CELL, 1e-3)
                box = (max(cx - w / 2, 0.0), max(cy - h / 2, 0.0),
                       min(cx + w / 2, float(IMAGE_SIZE)), min(cy + h / 2, float(IMAGE_SIZE)))
                if box[2] <= box[0] or box[3] <= box[1]:
                    continue
                dets.append(Detection(box, int(label[r, c]), float(conf[r, c])))
        out.append(dets)
    return out


def detect(images: np.ndarray, params: ParameterSet, batch_size: int = 64,
           threshold: float = CONF_THRESHOLD) -> list[list[Detection]]:
    """Run the detector over an [N,3,64,64] array without recording a graph."""
    out: list[list[Detection]] = []
    with T.no_grad():
        for i in range(0, len(images), batch_size):
            pred = detector_forward(T.constant(images[i:i + batch_size]), params)
            out.extend(decode_detections(pred.data, threshold))
    return out


# --------------------------------------------------------------- evaluation


def _match_image(dets: Sequence[Detection], boxes: Sequence[Box], labels: Sequence[int],
                 label: int, thr: float) -> list[tuple[float, bool]]:
    gts = [b for b, l in zip(boxes, labels) if l == label]
    used = [False] * len(gts)
    order = sorted((d for d in dets if d.label == label), key=lambda d: -d.confidence)
    result = []
    for d in order:
        best, best_j = thr, -1
        for j, g in enumerate(gts):
            if used[j]:
                continue
            v = iou(d.box, g)
            if v >= best:
                best, best_j = v, j
        if best_j >= 0:
            used[best_j] = True
        result.append((d.confidence, best_j >= 0))
    return result


def average_precision(scored: Sequence[tuple[float, bool]], n_gt: int) -> float:
    """All-points interpolated AP; tied confidences form a single PR point."""
    if n_gt == 0:
        return float("nan")
    if not scored:
        return 0.0
    conf = np.array([s for s, _ in scored])
    tp = np.array([t for _, t in scored], dtype=np.float64)
    order = np.argsort(-conf, kind="stable")
    conf, tp = conf[order], tp[order]
    ctp = np.cumsum(tp)
    cfp = np.cumsum(1.0 - tp)
    last = np.r_[conf[1:] != conf[:-1], True]
    recall = ctp[last] / n_gt
    precision = ctp[last] / (ctp[last] + cfp[last])
    mrec = np.concatenate([[0.0], recall])
    mpre = np.concatenate([[0.0], precision])
    for i in range(len(mpre) - 2, -1, -1):
        mpre[i] = max(mpre[i], mpre[i + 1])
    return float(np.sum((mrec[1:] - mrec[:-1]) * mpre[1:]))


def evaluate_map(detections: Sequence[Sequence[Detection]], scenes: Sequence[Scene],
                 iou_thresholds: Iterable[float] | None = None) -> dict[str, float]:
    """Box mAP at IoU 0.5 and averaged over IoU 0.50:0.05:0.95, mean over classes with ground truth."""
    if len(detections) != len(scenes):
        raise ValueError(f"{len(detections)} detection lists for {len(scenes)} scenes")
    thresholds = list(iou_thresholds) if iou_thresholds is not None else list(np.linspace(0.5, 0.95, 10))

    def map_at(thr: float) -> float:
        aps = []
        for label in range(len(CLASSES)):
            n_gt = sum(s.labels.count(label) for s in scenes)
            if n_gt == 0:
                continue
            scored = []
            for dets, s in zip(detections, scenes):
                scored.extend(_match_image(dets, s.boxes, s.labels, label, thr))
            aps.append(average_precision(scored, n_gt))
        return float(np.mean(aps)) if aps else 0.0

    per = {thr: map_at(thr) for thr in thresholds}
    return {"map50": map_at(0.5), "map5095": float(np.mean(list(per.values())))}
