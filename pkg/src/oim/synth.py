"""Synthetic multi-instance scenes with proposals, features and ground truth.

Each object gets jittered proposals at several IoU strata plus one "part"
proposal covering about 35% of it. Features depend on geometry: a proposal's
feature mixes its object's class prototype (by IoU with the object), the
background prototype (by the remainder), and a class-specific part offset
(by how much of the object's part the proposal covers), so small part boxes
can be made more discriminative than whole-object boxes.
"""

from __future__ import annotations

from dataclasses import asdict, dataclass, field

import numpy as np

from .geometry import iou, iou_matrix
from .types import BoxF, Dataset, GroundTruth, ProposalSet

IOU_STRATA = (0.9, 0.7, 0.5, 0.3)
STRATUM_TOLERANCE = 0.05
PART_FRACTION = 0.35


class CanvasTooSmallError(ValueError):
    def __init__(self, image_index: int, message: str):
        super().__init__(f"image {image_index}: {message}")
        self.image_index = image_index


@dataclass(frozen=True)
class SynthConfig:
    seed: int = 7
    num_images: int = 100
    canvas: tuple[int, int] = (256, 256)
    num_classes: int = 4
    # relative weights for 1, 2, 3, 4 instances of an active class
    instance_weights: tuple[float, ...] = (0.0, 0.5, 0.3, 0.2)
    # relative weights for 1, 2 active classes per image
    active_class_weights: tuple[float, ...] = (0.7, 0.3)
    feature_dim: int = 16
    prototype_separation: float = 4.0
    noise_sigma: float = 0.15
    instance_sigma: float = 0.3
    part_confound_strength: float = 0.6
    part_offset_scale: float = 6.0
    proposals_per_object: int = 8
    background_proposals: int = 12
    object_size: tuple[float, float] = (36.0, 64.0)

    def __post_init__(self):
        if self.num_images < 0 or self.num_classes < 1 or self.feature_dim < 1:
            raise ValueError("counts must be positive")
        if self.proposals_per_object < 1 or self.background_proposals < 0:
            raise ValueError("proposal counts must be positive")
        if self.noise_sigma < 0 or self.instance_sigma < 0:
            raise ValueError("noise must be non-negative")
        if not 0.0 <= self.part_confound_strength <= 1.0:
            raise ValueError("part_confound_strength must lie in [0, 1]")
        if not 1 <= len(self.instance_weights) <= 4 or sum(self.instance_weights) <= 0:
            raise ValueError("instance_weights must cover 1..4 instances")
        if len(self.active_class_weights) > self.num_classes or sum(self.active_class_weights) <= 0:
            raise ValueError("active_class_weights longer than the class count")
        lo, hi = self.object_size
        if not 0 < lo <= hi:
            raise ValueError("object_size must be an increasing positive pair")

    def to_dict(self) -> dict:
        return asdict(self)


@dataclass
class Prototypes:
    classes: np.ndarray  # (C+1) x d, row 0 = background
    parts: np.ndarray  # (C+1) x d, row 0 unused


@dataclass
class SceneObject:
    box: BoxF
    class_id: int
    part: BoxF
    noise: np.ndarray = field(repr=False)


def make_prototypes(cfg: SynthConfig, rng: np.random.Generator) -> Prototypes:
    d, c = cfg.feature_dim, cfg.num_classes
    raw = rng.normal(size=(c + 1, d))
    raw /= np.linalg.norm(raw, axis=1, keepdims=True)
    # unit directions scaled so pairwise distances sit near the requested separation
    classes = raw * (cfg.prototype_separation / np.sqrt(2.0))
    parts = rng.normal(size=(c + 1, d))
    parts /= np.linalg.norm(parts, axis=1, keepdims=True)
    parts[0] = 0.0
    return Prototypes(classes, parts * cfg.part_offset_scale)


def _place_objects(cfg, rng, class_counts, image_index) -> list[tuple[BoxF, int]]:
    w, h = cfg.canvas
    lo, hi = cfg.object_size
    placed: list[tuple[BoxF, int]] = []
    for c, count in class_counts:
        for _ in range(count):
            for _attempt in range(500):
                bw = rng.uniform(lo, hi)
                bh = rng.uniform(lo, hi)
                if bw >= w or bh >= h:
                    raise CanvasTooSmallError(image_index, "canvas smaller than the object size")
                x1 = rng.uniform(0, w - bw)
                y1 = rng.uniform(0, h - bh)
                box = BoxF(x1, y1, x1 + bw, y1 + bh)
                # keep a margin so proposals of neighbouring objects rarely touch
                grown = BoxF(box.x1 - 4, box.y1 - 4, box.x2 + 4, box.y2 + 4)
                if all(iou(grown, other) == 0.0 for other, _ in placed):
                    placed.append((box, c))
                    break
            else:
                raise CanvasTooSmallError(
                    image_index, f"cannot place {sum(n for _, n in class_counts)} non-overlapping objects"
                )
    return placed


def _part_box(box: BoxF, rng: np.random.Generator) -> BoxF:
    side = float(np.sqrt(PART_FRACTION))
    pw, ph = side * box.width, side * box.height
    left = rng.random() < 0.5
    top = rng.random() < 0.5
    x1 = box.x1 if left else box.x2 - pw
    y1 = box.y1 if top else box.y2 - ph
    return BoxF(x1, y1, x1 + pw, y1 + ph)


def _anchored_box(box: BoxF, part: BoxF, target: float, rng) -> BoxF | None:
    """A sub-box of ``box`` containing ``part`` whose area is ``target`` of the object."""
    fw_min = part.width / box.width
    fh_min = part.height / box.height
    lo = max(fw_min, target / 1.0)
    hi = min(1.0, target / fh_min)
    if lo > hi:
        return None
    fw = rng.uniform(lo, hi)
    fh = target / fw
    bw, bh = fw * box.width, fh * box.height
    x1 = part.x1 if part.x1 == box.x1 else part.x2 - bw
    y1 = part.y1 if part.y1 == box.y1 else part.y2 - bh
    return BoxF(x1, y1, x1 + bw, y1 + bh)


def _jittered_box(box: BoxF, target: float, rng, canvas) -> BoxF:
    w, h = canvas
    spread = 1.0 - target
    best, best_gap = box, abs(1.0 - target)
    for _ in range(400):
        dx1, dx2 = rng.uniform(-spread, spread, 2) * box.width
        dy1, dy2 = rng.uniform(-spread, spread, 2) * box.height
        cand = BoxF(
            max(0.0, box.x1 + dx1), max(0.0, box.y1 + dy1), min(w, box.x2 + dx2), min(h, box.y2 + dy2)
        )
        if not cand.is_valid:
            continue
        gap = abs(iou(cand, box) - target)
        if gap < best_gap:
            best, best_gap = cand, gap
        if gap <= STRATUM_TOLERANCE / 2:
            break
    return best


def object_proposals(obj: SceneObject, cfg: SynthConfig, rng) -> list[tuple[BoxF, float]]:
    """Jittered proposals (box, stratum target) for one object, plus the part box (target 0)."""
    out = []
    for i in range(cfg.proposals_per_object):
        target = IOU_STRATA[i % len(IOU_STRATA)]
        cand = None
        if (i // len(IOU_STRATA)) % 2 == 1:
            cand = _anchored_box(obj.box, obj.part, target, rng)
        if cand is None:
            cand = _jittered_box(obj.box, target, rng, cfg.canvas)
        out.append((cand, target))
    out.append((obj.part, 0.0))
    return out


def _background_box(cfg: SynthConfig, objects, rng) -> BoxF:
    w, h = cfg.canvas
    lo, hi = cfg.object_size
    box = None
    for _ in range(200):
        bw = rng.uniform(0.5 * lo, hi)
        bh = rng.uniform(0.5 * lo, hi)
        x1 = rng.uniform(0, w - bw)
        y1 = rng.uniform(0, h - bh)
        box = BoxF(x1, y1, x1 + bw, y1 + bh)
        if all(iou(box, o.box) < 0.1 for o in objects):
            return box
    return box


def proposal_features(boxes: np.ndarray, objects: list[SceneObject], protos: Prototypes, cfg: SynthConfig, rng) -> np.ndarray:
    n, d = len(boxes), cfg.feature_dim
    feats = np.tile(protos.classes[0], (n, 1))
    if objects:
        gt = np.array([o.box.as_list() for o in objects])
        overlaps = iou_matrix(boxes, gt)
        owner = np.argmax(overlaps, axis=1)
        for j in range(n):
            cover = overlaps[j, owner[j]]
            if cover <= 0.0:
                continue
            obj = objects[owner[j]]
            part_cover = _intersection(boxes[j], obj.part) / obj.part.area
            part_share = _intersection(boxes[j], obj.part) / _area(boxes[j])
            feats[j] = (
                cover * (protos.classes[obj.class_id] + obj.noise)
                + (1.0 - cover) * protos.classes[0]
                + cfg.part_confound_strength * part_cover * part_share * protos.parts[obj.class_id]
            )
    return feats + rng.normal(0.0, cfg.noise_sigma, size=(n, d))


def _area(b) -> float:
    return float((b[2] - b[0]) * (b[3] - b[1]))


def _intersection(b, other: BoxF) -> float:
    iw = min(b[2], other.x2) - max(b[0], other.x1)
    ih = min(b[3], other.y2) - max(b[1], other.y1)
    return float(iw * ih) if iw > 0 and ih > 0 else 0.0


def _choice(rng, weights) -> int:
    p = np.asarray(weights, dtype=np.float64)
    return int(rng.choice(len(p), p=p / p.sum())) + 1


def generate_image(index: int, cfg: SynthConfig, protos: Prototypes, rng) -> tuple[ProposalSet, GroundTruth]:
    n_active = _choice(rng, cfg.active_class_weights)
    active = sorted(int(c) + 1 for c in rng.choice(cfg.num_classes, size=n_active, replace=False))
    counts = [(c, _choice(rng, cfg.instance_weights)) for c in active]
    placed = _place_objects(cfg, rng, counts, index)
    objects = [
        SceneObject(box, c, _part_box(box, rng), rng.normal(0.0, cfg.instance_sigma, cfg.feature_dim))
        for box, c in placed
    ]

    boxes: list[BoxF] = []
    for obj in objects:
        boxes.extend(b for b, _ in object_proposals(obj, cfg, rng))
    for _ in range(cfg.background_proposals):
        boxes.append(_background_box(cfg, objects, rng))
    arr = np.array([b.as_list() for b in boxes], dtype=np.float64)
    # shuffle so proposal order carries no information
    perm = rng.permutation(len(arr))
    arr = arr[perm]
    feats = proposal_features(arr, objects, protos, cfg, rng)

    labels = np.zeros(cfg.num_classes, dtype=np.int64)
    labels[[c - 1 for c in active]] = 1
    image_id = f"synth_{cfg.seed}_{index:05d}"
    ps = ProposalSet(
        image_id=image_id,
        boxes=arr,
        features=feats,
        scores=np.zeros((len(arr), cfg.num_classes + 1)),
        image_labels=labels,
        width=float(cfg.canvas[0]),
        height=float(cfg.canvas[1]),
    )
    gt = GroundTruth(image_id, tuple(o.box for o in objects), tuple(o.class_id for o in objects))
    return ps, gt


def generate(cfg: SynthConfig | None = None) -> Dataset:
    cfg = cfg or SynthConfig()
    root = np.random.SeedSequence(cfg.seed)
    proto_seq, *image_seqs = root.spawn(cfg.num_images + 1)
    protos = make_prototypes(cfg, np.random.default_rng(proto_seq))
    images, gts = [], []
    for i, seq in enumerate(image_seqs):
        ps, gt = generate_image(i, cfg, protos, np.random.default_rng(seq))
        images.append(ps)
        gts.append(gt)
    return Dataset(images, gts, cfg.num_classes)


def generate_split(cfg: SynthConfig, split_seed: int) -> Dataset:
    """Another scene set drawn from the same prototypes (same ``cfg.seed``)."""
    root = np.random.SeedSequence(cfg.seed)
    proto_seq = root.spawn(1)[0]
    protos = make_prototypes(cfg, np.random.default_rng(proto_seq))
    seqs = np.random.SeedSequence([cfg.seed, split_seed]).spawn(cfg.num_images)
    images, gts = [], []
    for i, seq in enumerate(seqs):
        ps, gt = generate_image(i, cfg, protos, np.random.default_rng(seq))
        ps = ProposalSet(
            f"synth_{cfg.seed}_s{split_seed}_{i:05d}", ps.boxes, ps.features, ps.scores, ps.image_labels, ps.width, ps.height
        )
        gt = GroundTruth(ps.image_id, gt.boxes, gt.classes)
        images.append(ps)
        gts.append(gt)
    return Dataset(images, gts, cfg.num_classes)


def oracle_scores(dataset: Dataset) -> list[np.ndarray]:
    """Perfect-classifier scores: max IoU with a GT instance of each class."""
    if dataset.ground_truth is None:
        raise ValueError("oracle scores need ground truth")
    out = []
    for ps, gt in zip(dataset.images, dataset.ground_truth):
        scores = np.zeros((ps.num_proposals, dataset.num_classes + 1))
        for c in range(1, dataset.num_classes + 1):
            boxes = gt.of_class(c)
            if boxes:
                gt_arr = np.array([b.as_list() for b in boxes])
                scores[:, c] = iou_matrix(ps.boxes, gt_arr).max(axis=1)
        scores[:, 0] = 1.0 - scores[:, 1:].max(axis=1)
        out.append(scores)
    return out


def with_oracle_scores(dataset: Dataset) -> Dataset:
    scored = [ps.with_scores(s) for ps, s in zip(dataset.images, oracle_scores(dataset))]
    return Dataset(scored, dataset.ground_truth, dataset.num_classes)
