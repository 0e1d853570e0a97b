"""Object instance mining over spatial and appearance graphs.

For each class present in an image the top-scoring proposal becomes the core.
Its spatial graph collects every proposal overlapping it by more than ``T``;
the mean feature distance from the core to those nodes sets the scale of the
appearance gate. Proposals are then visited by ascending feature distance and
accepted as further instances when they are closer than ``alpha * d_avg`` and
do not overlap any instance accepted so far. Each accepted instance gets its
own spatial graph, and every node of every spatial graph is labelled with the
class.
"""

from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np

from .geometry import descending_order
from .types import BACKGROUND, AppearanceGraph, ProposalSet, PseudoLabels, SpatialGraph


class InactiveClassError(ValueError):
    pass


@dataclass(frozen=True)
class MiningConfig:
    T: float = 0.5
    alpha: float = 5.0
    include_core_in_davg: bool = True

    def __post_init__(self):
        if not 0.0 < self.T < 1.0:
            raise ValueError(f"T must lie in (0, 1), got {self.T}")
        if not self.alpha > 0.0:
            raise ValueError(f"alpha must be positive, got {self.alpha}")

    def with_alpha(self, alpha: float) -> "MiningConfig":
        return MiningConfig(self.T, alpha, self.include_core_in_davg)


def _check_class(ps: ProposalSet, c: int) -> None:
    if not 1 <= c <= ps.num_classes or ps.image_labels[c - 1] <= 0:
        raise InactiveClassError(f"class not active: {c} in image {ps.image_id!r}")


def select_core(ps: ProposalSet, c: int) -> int:
    """Index of the highest class-``c`` score; the lowest index wins ties."""
    _check_class(ps, c)
    if ps.num_proposals < 1:
        raise ValueError(f"image {ps.image_id!r} has no proposals")
    return int(np.argmax(ps.scores[:, c]))


def build_spatial_graph(ps: ProposalSet, center: int, cfg: MiningConfig) -> SpatialGraph:
    overlaps = ps.overlaps()[center]
    members = [j for j in np.flatnonzero(overlaps > cfg.T).tolist() if j != center]
    edges = tuple((center, j, float(overlaps[j])) for j in members)
    return SpatialGraph(center, (center, *members), edges)


def appearance_distance(f_a, f_b) -> float:
    a = np.asarray(f_a, dtype=np.float64)
    b = np.asarray(f_b, dtype=np.float64)
    if a.shape != b.shape:
        raise ValueError(f"feature dimension mismatch: {a.shape} vs {b.shape}")
    return float(np.linalg.norm(a - b))


def distances_to(ps: ProposalSet, center: int) -> np.ndarray:
    diff = ps.features - ps.features[center]
    return np.sqrt(np.einsum("ij,ij->i", diff, diff))


def average_graph_distance(
    ps: ProposalSet, core_graph: SpatialGraph, cfg: MiningConfig | None = None
) -> float:
    include_core = True if cfg is None else cfg.include_core_in_davg
    dist = distances_to(ps, core_graph.core_index)
    nodes = [
        k for k in core_graph.node_indices if include_core or k != core_graph.core_index
    ]
    if not nodes:
        return 0.0
    return math.fsum(dist[k] for k in nodes) / len(nodes)


def mine_instances(ps: ProposalSet, c: int, cfg: MiningConfig) -> AppearanceGraph:
    core = select_core(ps, c)
    core_graph = build_spatial_graph(ps, core, cfg)
    dist = distances_to(ps, core)
    d_avg = average_graph_distance(ps, core_graph, cfg)
    gate = cfg.alpha * d_avg

    overlaps = ps.overlaps()
    nodes = [core]
    edges = []
    for j in np.argsort(dist, kind="stable").tolist():
        if not dist[j] < gate:
            # sorted ascending: nothing further can pass
            break
        if np.any(overlaps[j, nodes] > 0.0):
            continue
        nodes.append(j)
        edges.append((core, j, float(dist[j])))

    graphs = (core_graph, *(build_spatial_graph(ps, j, cfg) for j in nodes[1:]))
    return AppearanceGraph(c, core, tuple(nodes), tuple(edges), d_avg, graphs, cfg.alpha)


def mine_all(ps: ProposalSet, cfg: MiningConfig) -> list[AppearanceGraph]:
    return [mine_instances(ps, c, cfg) for c in ps.active_classes()]


MINING_VARIANTS = ("core_only", "spatial", "appearance", "full")


def mine_variant(ps: ProposalSet, c: int, cfg: MiningConfig, variant: str) -> AppearanceGraph:
    """Ablated mining.

    ``core_only``: the core alone. ``spatial``: the core's spatial graph.
    ``appearance``: appearance nodes without spatial graphs. ``full``:
    :func:`mine_instances`.
    """
    if variant == "full":
        return mine_instances(ps, c, cfg)
    if variant == "appearance":
        ag = mine_instances(ps, c, cfg)
        singles = tuple(SpatialGraph(j, (j,), ()) for j in ag.node_indices)
        return AppearanceGraph(c, ag.core_index, ag.node_indices, ag.edges, ag.d_avg, singles, ag.alpha)
    core = select_core(ps, c)
    if variant == "spatial":
        sg = build_spatial_graph(ps, core, cfg)
        d_avg = average_graph_distance(ps, sg, cfg)
    elif variant == "core_only":
        sg = SpatialGraph(core, (core,), ())
        d_avg = 0.0
    else:
        raise ValueError(f"unknown mining variant {variant!r}")
    return AppearanceGraph(c, core, (core,), (), d_avg, (sg,), cfg.alpha)


def assign_pseudo_labels(ps: ProposalSet, graphs: list[AppearanceGraph]) -> PseudoLabels:
    n = ps.num_proposals
    labels = np.zeros(n, dtype=np.int64)
    weights = np.ones(n, dtype=np.float64)
    is_core = np.zeros(n, dtype=bool)
    owner = np.full(n, -1, dtype=np.int64)
    best = np.full(n, -1.0)
    best_class = np.full(n, np.iinfo(np.int64).max)

    cores: list[tuple[int, int]] = []
    for g in sorted(graphs, key=lambda g: g.class_id):
        for sg in g.spatial_graphs:
            center = sg.core_index
            cores.append((center, g.class_id))
            w = float(ps.scores[center, g.class_id])
            overlaps = ps.overlaps()[center]
            for j in sg.node_indices:
                key = 1.0 if j == center else overlaps[j]
                if key > best[j] or (key == best[j] and g.class_id < best_class[j]):
                    best[j] = key
                    best_class[j] = g.class_id
                    labels[j] = g.class_id
                    weights[j] = w
                    owner[j] = center
    for center, _ in cores:
        is_core[center] = True

    background = np.flatnonzero(owner < 0)
    if cores and background.size:
        centers = np.array([ce for ce, _ in cores])
        overlaps = ps.overlaps()[np.ix_(background, centers)]
        for row, j in enumerate(background.tolist()):
            k = int(np.argmax(overlaps[row]))
            if overlaps[row, k] > 0.0:
                center, cls = cores[k]
                weights[j] = float(ps.scores[center, cls])
    labels[background] = BACKGROUND
    return PseudoLabels(labels, weights, is_core, owner)


def mined_boxes(ps: ProposalSet, graphs: list[AppearanceGraph]) -> list[tuple[int, np.ndarray]]:
    """(class, box) for every appearance node, in graph order."""
    return [(g.class_id, ps.boxes[j]) for g in graphs for j in g.node_indices]


__all__ = [
    "InactiveClassError",
    "MiningConfig",
    "MINING_VARIANTS",
    "appearance_distance",
    "assign_pseudo_labels",
    "average_graph_distance",
    "build_spatial_graph",
    "descending_order",
    "distances_to",
    "mine_all",
    "mine_instances",
    "mine_variant",
    "mined_boxes",
]
