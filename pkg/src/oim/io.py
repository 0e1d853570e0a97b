"""File formats: JSONL datasets, key=value configs, JSON metrics and JSONL traces."""

from __future__ import annotations

import json
import logging
import warnings
from dataclasses import fields
from pathlib import Path
from typing import Any, Iterable

import numpy as np

from .types import BoxF, Dataset, GroundTruth, ProposalSet, validate_proposal_set

logger = logging.getLogger(__name__)


class DatasetFormatError(ValueError):
    def __init__(self, line: int, message: str):
        super().__init__(f"line {line}: {message}")
        self.line = line


def _require(record: dict, key: str, line: int):
    if key not in record:
        raise DatasetFormatError(line, f"missing field {key!r}")
    return record[key]


def _box(value, line: int, where: str) -> list[float]:
    if not isinstance(value, list) or len(value) != 4:
        raise DatasetFormatError(line, f"field {where!r} must be a list of 4 numbers")
    try:
        return [float(v) for v in value]
    except (TypeError, ValueError):
        raise DatasetFormatError(line, f"field {where!r} must be numeric") from None


def parse_record(record: Any, line: int, num_classes: int | None, feature_dim: int | None):
    """Parse one JSONL record into ``(ProposalSet, GroundTruth | None, C, d)``."""
    if not isinstance(record, dict):
        raise DatasetFormatError(line, "record must be a JSON object")
    image_id = str(_require(record, "image_id", line))
    labels = _require(record, "labels", line)
    proposals = _require(record, "proposals", line)
    if not isinstance(labels, list) or not all(isinstance(c, int) and c >= 1 for c in labels):
        raise DatasetFormatError(line, "field 'labels' must be a list of class ids >= 1")
    if not isinstance(proposals, list) or not proposals:
        raise DatasetFormatError(line, "field 'proposals' must be a non-empty list")
    c_count = int(record.get("num_classes", num_classes or 0)) or max(
        [*labels, *[g.get("class", 0) for g in record.get("gt", []) or []], 1]
    )
    if num_classes is not None and c_count != num_classes:
        raise DatasetFormatError(line, f"field 'num_classes' is {c_count}, earlier records use {num_classes}")
    if any(c > c_count for c in labels):
        raise DatasetFormatError(line, f"field 'labels' has a class above {c_count}")

    boxes, feats, scores = [], [], []
    for k, p in enumerate(proposals):
        if not isinstance(p, dict):
            raise DatasetFormatError(line, f"proposal {k} must be an object")
        boxes.append(_box(p.get("box"), line, f"proposals[{k}].box"))
        f = p.get("feature")
        if not isinstance(f, list):
            raise DatasetFormatError(line, f"field 'proposals[{k}].feature' must be a list")
        d = feature_dim if feature_dim is not None else len(f)
        if len(f) != d:
            raise DatasetFormatError(
                line, f"field 'proposals[{k}].feature' has length {len(f)}, expected {d}"
            )
        feature_dim = d
        feats.append([float(v) for v in f])
        if "scores" in p:
            s = p["scores"]
            if not isinstance(s, list) or len(s) != c_count + 1:
                raise DatasetFormatError(line, f"field 'proposals[{k}].scores' must have {c_count + 1} entries")
            scores.append([float(v) for v in s])
    if scores and len(scores) != len(boxes):
        raise DatasetFormatError(line, "either every proposal or none carries 'scores'")

    image_labels = np.zeros(c_count, dtype=np.int64)
    image_labels[[c - 1 for c in labels]] = 1
    n = len(boxes)
    ps = ProposalSet(
        image_id=image_id,
        boxes=np.asarray(boxes, dtype=np.float64),
        features=np.asarray(feats, dtype=np.float64).reshape(n, feature_dim),
        scores=np.asarray(scores, dtype=np.float64) if scores else np.zeros((n, c_count + 1)),
        image_labels=image_labels,
        width=float(record.get("width", 0.0)),
        height=float(record.get("height", 0.0)),
    )
    problems = validate_proposal_set(ps, require_labels=False)
    if problems:
        raise DatasetFormatError(line, "; ".join(problems))

    gt = None
    if "gt" in record and record["gt"] is not None:
        items = record["gt"]
        if not isinstance(items, list):
            raise DatasetFormatError(line, "field 'gt' must be a list")
        gboxes, gclasses = [], []
        for k, g in enumerate(items):
            b = BoxF.from_seq(_box(g.get("box") if isinstance(g, dict) else None, line, f"gt[{k}].box"))
            cls = g.get("class")
            if not isinstance(cls, int) or not 1 <= cls <= c_count:
                raise DatasetFormatError(line, f"field 'gt[{k}].class' must be in 1..{c_count}")
            if not b.is_valid:
                raise DatasetFormatError(line, f"field 'gt[{k}].box' is degenerate")
            if g.get("difficult"):
                warnings.warn(f"line {line}: 'difficult' flag ignored", stacklevel=2)
            gboxes.append(b)
            gclasses.append(cls)
        gt = GroundTruth(image_id, tuple(gboxes), tuple(gclasses))
    return ps, gt, c_count, feature_dim


def load_dataset(path) -> Dataset:
    images: list[ProposalSet] = []
    gts: list[GroundTruth | None] = []
    num_classes = feature_dim = None
    with open(path, encoding="utf-8") as fh:
        for line_no, raw in enumerate(fh, start=1):
            if not raw.strip():
                continue
            try:
                record = json.loads(raw)
            except json.JSONDecodeError as exc:
                raise DatasetFormatError(line_no, f"malformed JSON ({exc.msg})") from None
            ps, gt, num_classes, feature_dim = parse_record(record, line_no, num_classes, feature_dim)
            images.append(ps)
            gts.append(gt)
    if not images:
        warnings.warn(f"{path}: empty dataset", stacklevel=2)
        return Dataset([], None, 0)
    has_gt = [g is not None for g in gts]
    if any(has_gt) and not all(has_gt):
        raise DatasetFormatError(has_gt.index(False) + 1, "ground truth must be present on all records or none")
    return Dataset(images, gts if all(has_gt) else None, num_classes or 0)


def record_for(ps: ProposalSet, gt: GroundTruth | None, include_scores: bool = False) -> dict:
    proposals = []
    for j in range(ps.num_proposals):
        p = {"box": ps.boxes[j].tolist(), "feature": ps.features[j].tolist()}
        if include_scores:
            p["scores"] = ps.scores[j].tolist()
        proposals.append(p)
    rec = {
        "image_id": ps.image_id,
        "width": ps.width,
        "height": ps.height,
        "num_classes": ps.num_classes,
        "labels": ps.active_classes(),
        "proposals": proposals,
    }
    if gt is not None:
        rec["gt"] = [{"box": b.as_list(), "class": int(c)} for b, c in zip(gt.boxes, gt.classes)]
    return rec


def dumps_dataset(dataset: Dataset, include_scores: bool = False) -> str:
    gts = dataset.ground_truth or [None] * len(dataset)
    return "".join(
        json.dumps(record_for(ps, gt, include_scores), separators=(",", ":")) + "\n"
        for ps, gt in zip(dataset.images, gts)
    )


def save_dataset(dataset: Dataset, path, include_scores: bool = False) -> None:
    with open(path, "w", encoding="utf-8", newline="\n") as fh:
        fh.write(dumps_dataset(dataset, include_scores))


def parse_value(text: str):
    t = text.strip()
    low = t.lower()
    if low in ("true", "yes", "on"):
        return True
    if low in ("false", "no", "off"):
        return False
    for cast in (int, float):
        try:
            return cast(t)
        except ValueError:
            pass
    if "," in t:
        return tuple(parse_value(p) for p in t.split(","))
    return t


def read_config(path) -> dict[str, Any]:
    """Flat ``key = value`` file; ``#`` starts a comment."""
    out: dict[str, Any] = {}
    with open(path, encoding="utf-8") as fh:
        for line_no, raw in enumerate(fh, start=1):
            line = raw.split("#", 1)[0].strip()
            if not line:
                continue
            if "=" not in line:
                raise ValueError(f"{path}:{line_no}: expected key=value")
            key, value = line.split("=", 1)
            out[key.strip()] = parse_value(value)
    return out


def write_config(values: dict[str, Any], path) -> None:
    with open(path, "w", encoding="utf-8", newline="\n") as fh:
        for key in sorted(values):
            v = values[key]
            if isinstance(v, (tuple, list)):
                v = ",".join(str(x) for x in v)
            fh.write(f"{key} = {v}\n")


def coerce_config(cls, values: dict[str, Any]):
    """Build dataclass ``cls`` from ``values``, ignoring keys it does not declare."""
    names = {f.name: f for f in fields(cls)}
    kwargs = {}
    for k, v in values.items():
        if k not in names:
            continue
        default = getattr(cls(), k)
        if isinstance(default, bool):
            v = bool(v)
        elif isinstance(default, float):
            v = float(v)
        elif isinstance(default, int):
            v = int(v)
        elif isinstance(default, tuple):
            v = tuple(v) if isinstance(v, (tuple, list)) else (v,)
        kwargs[k] = v
    return cls(**kwargs)


def write_json(obj, path) -> None:
    with open(path, "w", encoding="utf-8", newline="\n") as fh:
        json.dump(obj, fh, indent=2, sort_keys=True)
        fh.write("\n")


def write_jsonl(records: Iterable[dict], path) -> None:
    with open(path, "w", encoding="utf-8", newline="\n") as fh:
        for r in records:
            fh.write(json.dumps(r, sort_keys=True, separators=(",", ":")) + "\n")


def read_jsonl(path) -> list[dict]:
    with open(path, encoding="utf-8") as fh:
        return [json.loads(line) for line in fh if line.strip()]


def ensure_dir(path) -> Path:
    p = Path(path)
    p.mkdir(parents=True, exist_ok=True)
    return p
