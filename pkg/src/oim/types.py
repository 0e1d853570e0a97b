"""Shared value types: boxes, proposal sets, mined graphs and pseudo-labels."""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import Any

import numpy as np

BACKGROUND = 0


def _frozen(a, dtype=np.float64) -> np.ndarray:
    arr = np.array(a, dtype=dtype, copy=True)
    arr.setflags(write=False)
    return arr


@dataclass(frozen=True)
class BoxF:
    x1: float
    y1: float
    x2: float
    y2: float

    @property
    def width(self) -> float:
        return self.x2 - self.x1

    @property
    def height(self) -> float:
        return self.y2 - self.y1

    @property
    def area(self) -> float:
        if self.x2 <= self.x1 or self.y2 <= self.y1:
            return 0.0
        return (self.x2 - self.x1) * (self.y2 - self.y1)

    @property
    def is_valid(self) -> bool:
        return self.x2 > self.x1 and self.y2 > self.y1

    def as_list(self) -> list[float]:
        return [self.x1, self.y1, self.x2, self.y2]

    def shifted(self, dx: float, dy: float) -> "BoxF":
        return BoxF(self.x1 + dx, self.y1 + dy, self.x2 + dx, self.y2 + dy)

    @classmethod
    def from_seq(cls, seq) -> "BoxF":
        x1, y1, x2, y2 = (float(v) for v in seq)
        return cls(x1, y1, x2, y2)


@dataclass(frozen=True, eq=False)
class ProposalSet:
    """Proposals of one image.

    ``boxes`` is N x 4, ``features`` N x d, ``scores`` N x (C+1) with column 0
    the background, ``image_labels`` a length-C 0/1 vector for classes 1..C.
    """

    image_id: str
    boxes: np.ndarray
    features: np.ndarray
    scores: np.ndarray
    image_labels: np.ndarray
    width: float = 0.0
    height: float = 0.0

    def __post_init__(self):
        object.__setattr__(self, "boxes", _frozen(self.boxes).reshape(-1, 4))
        feats = _frozen(self.features)
        if feats.ndim == 1:
            feats = feats.reshape(len(self.boxes), -1) if len(self.boxes) else feats.reshape(0, 0)
        object.__setattr__(self, "features", feats)
        object.__setattr__(self, "scores", _frozen(self.scores))
        object.__setattr__(self, "image_labels", _frozen(self.image_labels, dtype=np.int64))

    @property
    def num_proposals(self) -> int:
        return int(self.boxes.shape[0])

    @property
    def num_classes(self) -> int:
        return int(self.image_labels.shape[0])

    @property
    def feature_dim(self) -> int:
        return int(self.features.shape[1]) if self.features.ndim == 2 else 0

    def box(self, j: int) -> BoxF:
        return BoxF.from_seq(self.boxes[j])

    def active_classes(self) -> list[int]:
        """Foreground class ids (1-based) with a positive image label."""
        return [int(c) + 1 for c in np.flatnonzero(self.image_labels)]

    def with_scores(self, scores: np.ndarray) -> "ProposalSet":
        out = ProposalSet(
            self.image_id, self.boxes, self.features, scores, self.image_labels, self.width, self.height
        )
        cached = self.__dict__.get("_overlaps")
        if cached is not None:
            object.__setattr__(out, "_overlaps", cached)
        return out

    def overlaps(self) -> np.ndarray:
        """Pairwise IoU matrix of the proposal boxes (computed once)."""
        cached = self.__dict__.get("_overlaps")
        if cached is None:
            from .geometry import iou_matrix

            cached = iou_matrix(self.boxes, self.boxes)
            cached.setflags(write=False)
            object.__setattr__(self, "_overlaps", cached)
        return cached

    def __eq__(self, other) -> bool:
        if not isinstance(other, ProposalSet):
            return NotImplemented
        return (
            self.image_id == other.image_id
            and self.width == other.width
            and self.height == other.height
            and _same(self.boxes, other.boxes)
            and _same(self.features, other.features)
            and _same(self.scores, other.scores)
            and _same(self.image_labels, other.image_labels)
        )

    __hash__ = None  # type: ignore[assignment]


def _same(a: np.ndarray, b: np.ndarray) -> bool:
    return a.shape == b.shape and a.dtype == b.dtype and a.tobytes() == b.tobytes()


@dataclass(frozen=True)
class SpatialGraph:
    """Star graph: the center proposal and every proposal overlapping it above T."""

    core_index: int
    node_indices: tuple[int, ...]
    edges: tuple[tuple[int, int, float], ...]

    def __contains__(self, j: int) -> bool:
        return j in self.node_indices


@dataclass(frozen=True)
class AppearanceGraph:
    """Mining result for one class: appearance nodes (core first) and their spatial graphs."""

    class_id: int
    core_index: int
    node_indices: tuple[int, ...]
    edges: tuple[tuple[int, int, float], ...]
    d_avg: float
    spatial_graphs: tuple[SpatialGraph, ...]
    alpha: float = 0.0

    @property
    def core_graph(self) -> SpatialGraph:
        return self.spatial_graphs[0]


@dataclass(frozen=True, eq=False)
class PseudoLabels:
    labels: np.ndarray
    weights: np.ndarray
    is_core: np.ndarray
    owner: np.ndarray  # core index per proposal, -1 when none

    def __post_init__(self):
        object.__setattr__(self, "labels", _frozen(self.labels, dtype=np.int64))
        object.__setattr__(self, "weights", _frozen(self.weights))
        object.__setattr__(self, "is_core", _frozen(self.is_core, dtype=bool))
        object.__setattr__(self, "owner", _frozen(self.owner, dtype=np.int64))

    def __len__(self) -> int:
        return int(self.labels.shape[0])

    def __eq__(self, other) -> bool:
        if not isinstance(other, PseudoLabels):
            return NotImplemented
        return all(
            _same(getattr(self, k), getattr(other, k)) for k in ("labels", "weights", "is_core", "owner")
        )

    __hash__ = None  # type: ignore[assignment]


@dataclass(frozen=True)
class GroundTruth:
    """Annotated instances of one image; used by eval and synth only."""

    image_id: str
    boxes: tuple[BoxF, ...] = ()
    classes: tuple[int, ...] = ()

    def __len__(self) -> int:
        return len(self.boxes)

    def of_class(self, c: int) -> list[BoxF]:
        return [b for b, k in zip(self.boxes, self.classes) if k == c]


@dataclass
class Dataset:
    """Ordered proposal sets with optional aligned ground truth."""

    images: list[ProposalSet] = field(default_factory=list)
    ground_truth: list[GroundTruth] | None = None
    num_classes: int = 0

    def __len__(self) -> int:
        return len(self.images)

    def __iter__(self):
        return iter(self.images)

    def __eq__(self, other) -> bool:
        if not isinstance(other, Dataset):
            return NotImplemented
        return (
            self.num_classes == other.num_classes
            and self.images == other.images
            and self.ground_truth == other.ground_truth
        )


def validate_proposal_set(ps: ProposalSet, require_labels: bool = True) -> list[str]:
    """Return a list of human-readable invariant violations; empty means valid."""
    problems: list[str] = []
    n_boxes = ps.boxes.shape[0]
    n_feats = ps.features.shape[0] if ps.features.ndim >= 1 else 0
    n_scores = ps.scores.shape[0] if ps.scores.ndim >= 1 else 0
    if not (n_boxes == n_feats == n_scores):
        problems.append(
            f"dimension mismatch: boxes={n_boxes} features={n_feats} scores={n_scores}"
        )
    if n_boxes < 1:
        problems.append("empty proposal set")
    for j, (x1, y1, x2, y2) in enumerate(ps.boxes):
        if not (x2 > x1 and y2 > y1):
            problems.append(f"degenerate box at proposal {j}: {[x1, y1, x2, y2]}")
    if ps.scores.ndim == 2 and ps.scores.size:
        if ps.scores.shape[1] != ps.num_classes + 1:
            problems.append(
                f"dimension mismatch: scores have {ps.scores.shape[1]} columns, expected {ps.num_classes + 1}"
            )
        if np.any(~np.isfinite(ps.scores)) or np.any(ps.scores < 0) or np.any(ps.scores > 1):
            problems.append("scores outside [0, 1]")
    if ps.features.size and not np.all(np.isfinite(ps.features)):
        problems.append("non-finite features")
    if require_labels and not np.any(ps.image_labels > 0):
        problems.append("empty labels: no positive image label")
    return problems


def validate_spatial_graph(sg: SpatialGraph, ps: ProposalSet, threshold: float) -> list[str]:
    from .geometry import iou_array

    problems = []
    if sg.core_index not in sg.node_indices:
        problems.append("core not in node set")
    for a, b, _ in sg.edges:
        if a != sg.core_index:
            problems.append(f"edge ({a},{b}) not incident to core")
    for j in sg.node_indices:
        if j != sg.core_index and not iou_array(ps.boxes[sg.core_index], ps.boxes[j]) > threshold:
            problems.append(f"node {j} does not overlap core above {threshold}")
    return problems


def validate_appearance_graph(ag: AppearanceGraph, ps: ProposalSet) -> list[str]:
    from .geometry import iou_array

    problems = []
    if not ag.node_indices or ag.node_indices[0] != ag.core_index:
        problems.append("core is not the first appearance node")
    nodes = list(ag.node_indices)
    for i, a in enumerate(nodes):
        for b in nodes[i + 1 :]:
            if iou_array(ps.boxes[a], ps.boxes[b]) > 0:
                problems.append(f"appearance nodes {a} and {b} overlap")
    for a, b, dist in ag.edges:
        if a != ag.core_index:
            problems.append(f"edge ({a},{b}) not incident to core")
        elif not dist < ag.alpha * ag.d_avg:
            problems.append(f"node {b} fails the distance gate")
    if len(ag.spatial_graphs) != len(nodes):
        problems.append("one spatial graph per appearance node expected")
    return problems


def validate_pseudo_labels(pl: PseudoLabels, graphs, num_proposals: int) -> list[str]:
    problems = []
    if len(pl) != num_proposals:
        problems.append(f"dimension mismatch: {len(pl)} labels for {num_proposals} proposals")
    if np.any(pl.weights < 0) or np.any(pl.weights > 1):
        problems.append("weights outside [0, 1]")
    cores = {sg.core_index for g in graphs for sg in g.spatial_graphs}
    for j in cores:
        if not pl.is_core[j]:
            problems.append(f"core {j} not flagged")
    extra = set(np.flatnonzero(pl.is_core).tolist()) - cores
    if extra:
        problems.append(f"non-core proposals flagged as core: {sorted(extra)}")
    covered = {j for g in graphs for sg in g.spatial_graphs for j in sg.node_indices}
    for j in range(min(len(pl), num_proposals)):
        if j not in covered and pl.labels[j] != BACKGROUND:
            problems.append(f"proposal {j} outside all graphs but labelled {pl.labels[j]}")
        if j in covered and pl.labels[j] == BACKGROUND:
            problems.append(f"proposal {j} inside a graph but labelled background")
    return problems


def box_to_json(b: BoxF) -> list[float]:
    return b.as_list()


def proposal_set_to_dict(ps: ProposalSet) -> dict[str, Any]:
    return {
        "image_id": ps.image_id,
        "width": ps.width,
        "height": ps.height,
        "labels": ps.image_labels.tolist(),
        "boxes": ps.boxes.tolist(),
        "features": ps.features.tolist(),
        "scores": ps.scores.tolist(),
    }


def proposal_set_from_dict(d: dict[str, Any]) -> ProposalSet:
    n = len(d["boxes"])
    return ProposalSet(
        image_id=d["image_id"],
        boxes=np.asarray(d["boxes"], dtype=np.float64).reshape(n, 4),
        features=np.asarray(d["features"], dtype=np.float64).reshape(n, -1),
        scores=np.asarray(d["scores"], dtype=np.float64).reshape(n, -1),
        image_labels=np.asarray(d["labels"], dtype=np.int64),
        width=float(d.get("width", 0.0)),
        height=float(d.get("height", 0.0)),
    )


def spatial_graph_to_dict(sg: SpatialGraph) -> dict[str, Any]:
    return {
        "core_index": sg.core_index,
        "node_indices": list(sg.node_indices),
        "edges": [list(e) for e in sg.edges],
    }


def spatial_graph_from_dict(d: dict[str, Any]) -> SpatialGraph:
    return SpatialGraph(
        int(d["core_index"]),
        tuple(int(j) for j in d["node_indices"]),
        tuple((int(a), int(b), float(v)) for a, b, v in d["edges"]),
    )


def appearance_graph_to_dict(ag: AppearanceGraph) -> dict[str, Any]:
    return {
        "class_id": ag.class_id,
        "core_index": ag.core_index,
        "node_indices": list(ag.node_indices),
        "edges": [list(e) for e in ag.edges],
        "d_avg": ag.d_avg,
        "alpha": ag.alpha,
        "spatial_graphs": [spatial_graph_to_dict(s) for s in ag.spatial_graphs],
    }


def appearance_graph_from_dict(d: dict[str, Any]) -> AppearanceGraph:
    return AppearanceGraph(
        class_id=int(d["class_id"]),
        core_index=int(d["core_index"]),
        node_indices=tuple(int(j) for j in d["node_indices"]),
        edges=tuple((int(a), int(b), float(v)) for a, b, v in d["edges"]),
        d_avg=float(d["d_avg"]),
        spatial_graphs=tuple(spatial_graph_from_dict(s) for s in d["spatial_graphs"]),
        alpha=float(d.get("alpha", 0.0)),
    )


def pseudo_labels_to_dict(pl: PseudoLabels) -> dict[str, Any]:
    return {
        "labels": pl.labels.tolist(),
        "weights": pl.weights.tolist(),
        "is_core": pl.is_core.tolist(),
        "owner": pl.owner.tolist(),
    }


def pseudo_labels_from_dict(d: dict[str, Any]) -> PseudoLabels:
    return PseudoLabels(
        np.asarray(d["labels"], dtype=np.int64),
        np.asarray(d["weights"], dtype=np.float64),
        np.asarray(d["is_core"], dtype=bool),
        np.asarray(d["owner"], dtype=np.int64),
    )


def ground_truth_to_dict(gt: GroundTruth) -> dict[str, Any]:
    return {
        "image_id": gt.image_id,
        "gt": [{"box": b.as_list(), "class": int(c)} for b, c in zip(gt.boxes, gt.classes)],
    }


def ground_truth_from_dict(d: dict[str, Any]) -> GroundTruth:
    items = d.get("gt", [])
    return GroundTruth(
        d["image_id"],
        tuple(BoxF.from_seq(g["box"]) for g in items),
        tuple(int(g["class"]) for g in items),
    )
