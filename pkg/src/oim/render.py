"""Plain-format renderers: PGM objectness maps and SVG box/graph overlays."""

from __future__ import annotations

from typing import Sequence

import numpy as np

from .evaluation import Detection
from .types import AppearanceGraph, ProposalSet


def objectness_map(
    ps: ProposalSet, scores: np.ndarray, c: int, resolution: tuple[int, int]
) -> np.ndarray:
    """Per-pixel max of the class-``c`` score over proposals covering the pixel centre.

    Returns a ``height x width`` uint8 array scaled to 0..255.
    """
    width, height = resolution
    canvas_w = ps.width or (float(np.max(ps.boxes[:, 2])) if ps.num_proposals else 1.0)
    canvas_h = ps.height or (float(np.max(ps.boxes[:, 3])) if ps.num_proposals else 1.0)
    xs = (np.arange(width) + 0.5) * (canvas_w / width)
    ys = (np.arange(height) + 0.5) * (canvas_h / height)
    out = np.zeros((height, width), dtype=np.float64)
    col = np.clip(np.asarray(scores, dtype=np.float64)[:, c], 0.0, 1.0)
    for (x1, y1, x2, y2), s in zip(ps.boxes, col):
        if s <= 0.0:
            continue
        cols = (xs >= x1) & (xs < x2)
        rows = (ys >= y1) & (ys < y2)
        block = np.ix_(rows, cols)
        out[block] = np.maximum(out[block], s)
    return np.rint(out * 255.0).astype(np.uint8)


def encode_pgm(image: np.ndarray) -> bytes:
    h, w = image.shape
    return f"P5\n{w} {h}\n255\n".encode("ascii") + np.ascontiguousarray(image, dtype=np.uint8).tobytes()


def decode_pgm(data: bytes) -> np.ndarray:
    parts = data.split(b"\n", 3)
    if parts[0] != b"P5":
        raise ValueError("not a binary PGM")
    w, h = (int(v) for v in parts[1].split())
    return np.frombuffer(parts[3], dtype=np.uint8).reshape(h, w)


def render_objectness_map(ps: ProposalSet, scores: np.ndarray, c: int, resolution: tuple[int, int]) -> bytes:
    return encode_pgm(objectness_map(ps, scores, c, resolution))


def _svg_header(width: float, height: float) -> list[str]:
    return [
        f'<svg xmlns="http://www.w3.org/2000/svg" width="{width:g}" height="{height:g}" '
        f'viewBox="0 0 {width:g} {height:g}">',
        f'<rect x="0" y="0" width="{width:g}" height="{height:g}" fill="white" stroke="black"/>',
    ]


def _rect(box, color: str, dashed: bool = False, label: str | None = None) -> str:
    x1, y1, x2, y2 = (float(v) for v in box)
    dash = ' stroke-dasharray="4 2"' if dashed else ""
    title = f"<title>{label}</title>" if label else ""
    return (
        f'<rect x="{x1:.2f}" y="{y1:.2f}" width="{x2 - x1:.2f}" height="{y2 - y1:.2f}" '
        f'fill="none" stroke="{color}" stroke-width="2"{dash}>{title}</rect>'
    )


def detections_svg(ps: ProposalSet, detections: Sequence[Detection], ground_truth=None) -> str:
    """Detected boxes: red when score >= 0.5, blue below; dashed green for ground truth."""
    lines = _svg_header(ps.width or 1.0, ps.height or 1.0)
    if ground_truth is not None:
        for b, c in zip(ground_truth.boxes, ground_truth.classes):
            lines.append(_rect(b.as_list(), "green", dashed=True, label=f"gt class {c}"))
    for d in detections:
        color = "red" if d.score >= 0.5 else "blue"
        lines.append(_rect(d.box.as_list(), color, label=f"class {d.class_id} score {d.score:.3f}"))
    lines.append("</svg>")
    return "\n".join(lines) + "\n"


def graph_svg(ps: ProposalSet, graphs: Sequence[AppearanceGraph]) -> str:
    """Mined graphs: cores blue, other instances red, spatial edges blue, appearance edges red."""
    lines = _svg_header(ps.width or 1.0, ps.height or 1.0)

    def centre(j):
        x1, y1, x2, y2 = ps.boxes[j]
        return (x1 + x2) / 2.0, (y1 + y2) / 2.0

    for g in graphs:
        for sg in g.spatial_graphs:
            cx, cy = centre(sg.core_index)
            for _, j, _ in sg.edges:
                x, y = centre(j)
                lines.append(
                    f'<line x1="{cx:.2f}" y1="{cy:.2f}" x2="{x:.2f}" y2="{y:.2f}" stroke="blue" stroke-width="1"/>'
                )
        cx, cy = centre(g.core_index)
        for _, j, dist in g.edges:
            x, y = centre(j)
            lines.append(
                f'<line x1="{cx:.2f}" y1="{cy:.2f}" x2="{x:.2f}" y2="{y:.2f}" stroke="red" stroke-width="2">'
                f"<title>distance {dist:.3f}</title></line>"
            )
        for j in g.node_indices:
            color = "blue" if j == g.core_index else "red"
            lines.append(_rect(ps.boxes[j], color, label=f"class {g.class_id} proposal {j}"))
    lines.append("</svg>")
    return "\n".join(lines) + "\n"
