"""Deterministic SGD training of the MID head plus mined refinement heads."""

from __future__ import annotations

import logging
import math
from concurrent.futures import ThreadPoolExecutor
from dataclasses import asdict, dataclass, field, fields, replace
from statistics import median
from typing import Callable, Sequence

import numpy as np

from .evaluation import (
    detections_from_scores,
    instance_recall,
    instance_recall_counts,
    mean_average_precision,
    corloc,
)
from .mining import MiningConfig, assign_pseudo_labels, mine_variant, mined_boxes
from .model import (
    LossConfig,
    MidModel,
    mid_forward,
    mid_loss_and_grad,
    predict,
    refine_forward,
    refine_loss_and_grad,
)
from .types import Dataset, ProposalSet

logger = logging.getLogger(__name__)

# mode -> (mining variant, instance reweighting)
ABLATION_MODES: dict[str, tuple[str, bool]] = {
    "baseline": ("core_only", False),
    "sg_only": ("spatial", False),
    "ag_only": ("appearance", False),
    "oim": ("full", False),
    "ir_only": ("spatial", True),
    "oim_ir": ("full", True),
}


class TrainingError(RuntimeError):
    pass


@dataclass(frozen=True)
class TrainConfig:
    total_iterations: int = 1200
    lr_phase1: float = 0.01
    lr_phase2: float = 0.001
    lr_boundary: float = 4 / 9
    alpha_boundary: float = 7 / 9
    alpha1: float = 5.0
    alpha2: float = 2.0
    T: float = 0.5
    beta: float = 0.2
    num_refinements: int = 3
    batch_size: int = 2
    seed: int = 0
    mode: str = "oim_ir"
    log_every: int = 10
    include_core_in_davg: bool = True
    init_scale: float = 0.01
    feature_noise: float = 0.0
    threads: int = 1

    def __post_init__(self):
        if self.total_iterations < 0:
            raise ValueError("total_iterations must be >= 0")
        if not (0 < self.lr_boundary < 1 and 0 < self.alpha_boundary < 1):
            raise ValueError("phase boundaries must lie in (0, 1)")
        if self.lr_phase1 <= 0 or self.lr_phase2 <= 0:
            raise ValueError("learning rates must be positive")
        if self.mode not in ABLATION_MODES:
            raise ValueError(f"unknown mode {self.mode!r}; expected one of {sorted(ABLATION_MODES)}")
        if self.batch_size < 1 or self.log_every < 1 or self.threads < 1:
            raise ValueError("batch_size, log_every and threads must be >= 1")
        if not 1 <= self.num_refinements <= 5:
            raise ValueError("num_refinements must be 1..5")
        MiningConfig(self.T, self.alpha1, self.include_core_in_davg)
        MiningConfig(self.T, self.alpha2, self.include_core_in_davg)
        LossConfig(self.beta)

    def lr_at(self, iteration: int) -> float:
        return self.lr_phase1 if iteration < self.lr_boundary * self.total_iterations else self.lr_phase2

    def alpha_at(self, iteration: int) -> float:
        return self.alpha1 if iteration < self.alpha_boundary * self.total_iterations else self.alpha2

    @property
    def mining_variant(self) -> str:
        return ABLATION_MODES[self.mode][0]

    def loss_config(self) -> LossConfig:
        return LossConfig(self.beta, ABLATION_MODES[self.mode][1])

    def mining_config(self, iteration: int) -> MiningConfig:
        return MiningConfig(self.T, self.alpha_at(iteration), self.include_core_in_davg)

    def to_dict(self) -> dict:
        return asdict(self)

    @classmethod
    def from_dict(cls, d: dict) -> "TrainConfig":
        known = {f.name: f for f in fields(cls)}
        unknown = set(d) - set(known)
        if unknown:
            raise ValueError(f"unknown train config keys: {sorted(unknown)}")
        return cls(**d)


@dataclass
class TraceRecord:
    iteration: int
    alpha: float
    lr: float
    loss_ce: float
    loss_oir: list[float]
    mined_instances: list[int]
    instance_recall: float | None

    def to_dict(self) -> dict:
        return asdict(self)


@dataclass
class EpochTrace:
    records: list[TraceRecord] = field(default_factory=list)

    def __len__(self) -> int:
        return len(self.records)

    def to_jsonl_records(self) -> list[dict]:
        return [r.to_dict() for r in self.records]


MiningHook = Callable[[int, int, float], None]


def _pad_background(p: np.ndarray) -> np.ndarray:
    return np.hstack([np.zeros((p.shape[0], 1)), p])


def _image_step(model: MidModel, ps: ProposalSet, features: np.ndarray, cfg: TrainConfig, iteration: int, hooks):
    """Losses and gradients of one image. Returns (loss_ce, loss_oir list, grads, mined graphs of last head)."""
    loss_ce, p, g_mid = mid_loss_and_grad(model, features, ps.image_labels)
    if not math.isfinite(loss_ce):
        raise TrainingError(f"non-finite image loss on image {ps.image_id!r} (MID head)")
    mcfg = cfg.mining_config(iteration)
    lcfg = cfg.loss_config()
    prev = _pad_background(p)
    losses, g_ref, last_graphs = [], [], []
    for k in range(1, model.num_refinements + 1):
        scored = ps.with_scores(prev)
        for hook in hooks:
            hook(iteration, k, mcfg.alpha)
        graphs = [mine_variant(scored, c, mcfg, cfg.mining_variant) for c in ps.active_classes()]
        labels = assign_pseudo_labels(scored, graphs)
        loss, probs, grads = refine_loss_and_grad(model, k, features, labels, lcfg)
        if not math.isfinite(loss):
            raise TrainingError(f"non-finite refinement loss on image {ps.image_id!r} (head {k})")
        losses.append(loss)
        g_ref.append(grads)
        prev = probs
        if k == model.num_refinements:
            last_graphs = graphs
    return loss_ce, losses, (g_mid, g_ref), (ps, last_graphs)


def train(
    dataset: Dataset,
    cfg: TrainConfig,
    hooks: Sequence[MiningHook] = (),
    model: MidModel | None = None,
) -> tuple[MidModel, EpochTrace]:
    if not dataset.images:
        raise ValueError("empty dataset")
    d = dataset.images[0].feature_dim
    rng = np.random.default_rng(cfg.seed)
    init_seed = int(rng.integers(2**31))
    model = model.copy() if model is not None else MidModel.initialize(
        d, dataset.num_classes, cfg.num_refinements, seed=init_seed, scale=cfg.init_scale
    )
    trace = EpochTrace()
    gt_by_id = (
        {g.image_id: g for g in dataset.ground_truth} if dataset.ground_truth is not None else None
    )
    order = np.array([], dtype=np.int64)
    pool = ThreadPoolExecutor(cfg.threads) if cfg.threads > 1 else None
    try:
        for it in range(cfg.total_iterations):
            if len(order) < cfg.batch_size:
                order = np.concatenate([order, rng.permutation(len(dataset))])
            batch, order = order[: cfg.batch_size], order[cfg.batch_size :]
            inputs = []
            for i in batch:
                ps = dataset.images[int(i)]
                feats = ps.features
                if cfg.feature_noise > 0:
                    feats = feats + rng.normal(0.0, cfg.feature_noise, feats.shape)
                inputs.append((ps, feats))

            def work(item, it=it):
                return _image_step(model, item[0], item[1], cfg, it, hooks)

            results = list(pool.map(work, inputs)) if pool else [work(x) for x in inputs]

            lr = cfg.lr_at(it) / len(results)
            for _, _, (g_mid, g_ref), _ in results:
                model.cls_w -= lr * g_mid[0]
                model.cls_b -= lr * g_mid[1]
                model.det_w -= lr * g_mid[2]
                model.det_b -= lr * g_mid[3]
                for k, (gw, gb) in enumerate(g_ref):
                    model.refine_w[k] -= lr * gw
                    model.refine_b[k] -= lr * gb
            if not model.is_finite():
                raise TrainingError(f"non-finite parameters after iteration {it}")

            if it % cfg.log_every == 0 or it == cfg.total_iterations - 1:
                mined = [mined_boxes(ps, graphs) for *_, (ps, graphs) in results]
                recall = None
                if gt_by_id is not None:
                    gts = [gt_by_id[ps.image_id] for *_, (ps, _) in results]
                    recall = instance_recall(mined, gts)
                trace.records.append(
                    TraceRecord(
                        iteration=it,
                        alpha=cfg.alpha_at(it),
                        lr=cfg.lr_at(it),
                        loss_ce=float(np.mean([r[0] for r in results])),
                        loss_oir=[float(v) for v in np.mean([r[1] for r in results], axis=0)],
                        mined_instances=[len(m) for m in mined],
                        instance_recall=recall,
                    )
                )
    finally:
        if pool is not None:
            pool.shutdown()
    return model, trace


def mine_with_model(model: MidModel, dataset: Dataset, cfg: TrainConfig):
    """Mined boxes per image using the scores that supervise the last refinement head."""
    mcfg = MiningConfig(cfg.T, cfg.alpha2, cfg.include_core_in_davg)
    out = []
    for ps in dataset.images:
        if model.num_refinements > 1:
            scores = refine_forward(model, model.num_refinements - 1, ps.features)
        else:
            scores = _pad_background(mid_forward(model, ps.features)[0])
        scored = ps.with_scores(scores)
        graphs = [mine_variant(scored, c, mcfg, cfg.mining_variant) for c in ps.active_classes()]
        out.append(mined_boxes(scored, graphs))
    return out


def detect(model: MidModel, dataset: Dataset, top_k: int = 100, nms_threshold: float = 0.3):
    dets = []
    for ps in dataset.images:
        dets.extend(detections_from_scores(ps, predict(model, ps.features), top_k, nms_threshold))
    return dets


def evaluate_model(model: MidModel, train_set: Dataset, test_set: Dataset, cfg: TrainConfig) -> dict:
    """mAP on ``test_set``; CorLoc and mined-instance recall on ``train_set``."""
    if test_set.ground_truth is None or train_set.ground_truth is None:
        raise ValueError("evaluation needs ground truth")
    test_dets = detect(model, test_set)
    mAP, aps = mean_average_precision(test_dets, test_set.ground_truth, test_set.num_classes)
    train_dets = detect(model, train_set)
    cl, _ = corloc(train_dets, train_set.ground_truth, train_set.num_classes)
    covered, total = instance_recall_counts(mine_with_model(model, train_set, cfg), train_set.ground_truth)
    return {
        "mAP": mAP,
        "per_class_ap": {str(c): v for c, v in aps.items()},
        "CorLoc": cl,
        "instance_recall": covered / total if total else 0.0,
    }


def ablation_suite(
    train_set: Dataset,
    test_set: Dataset,
    base_cfg: TrainConfig,
    modes: Sequence[str] = tuple(ABLATION_MODES),
    seeds: Sequence[int] = (0, 1, 2, 3, 4),
) -> dict:
    """Train and evaluate one model per (mode, seed); report per-run rows and medians."""
    runs = []
    for mode in modes:
        for seed in seeds:
            cfg = replace(base_cfg, mode=mode, seed=seed)
            model, _ = train(train_set, cfg)
            metrics = evaluate_model(model, train_set, test_set, cfg)
            runs.append({"mode": mode, "seed": seed, **{k: metrics[k] for k in ("mAP", "CorLoc", "instance_recall")}})
            logger.info("ablation %s seed %d: %s", mode, seed, runs[-1])
    medians = {}
    for mode in modes:
        rows = [r for r in runs if r["mode"] == mode]
        medians[mode] = {k: median(r[k] for r in rows) for k in ("mAP", "CorLoc", "instance_recall")}
    return {"runs": runs, "median": medians, "modes": list(modes), "seeds": list(seeds)}


def format_ablation_table(report: dict) -> str:
    flags = {
        "baseline": ("", "", "", ""),
        "sg_only": ("x", "", "", ""),
        "ag_only": ("", "x", "", ""),
        "oim": ("x", "x", "x", ""),
        "ir_only": ("", "", "", "x"),
        "oim_ir": ("x", "x", "x", "x"),
    }
    lines = [f"{'mode':<10} {'SG':>3} {'AG':>3} {'OIM':>4} {'IR':>3} {'mAP':>7} {'CorLoc':>7} {'recall':>7}"]
    for mode in report["modes"]:
        sg, ag, oim, ir = flags[mode]
        m = report["median"][mode]
        lines.append(
            f"{mode:<10} {sg:>3} {ag:>3} {oim:>4} {ir:>3} "
            f"{100 * m['mAP']:7.2f} {100 * m['CorLoc']:7.2f} {100 * m['instance_recall']:7.2f}"
        )
    return "\n".join(lines)
