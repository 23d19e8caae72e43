"""Interpretation-ready artifacts: DOT graphs, JSON summaries, CSV curves.

The network drawing puts features on a circle counterclockwise by importance,
starting at the most important feature (highlighted yellow), with the outcome
node placed so the most important feature follows it counterclockwise. Intra
edges are solid; inter-slice edges are dashed red self-referential arrows
between the same circle of nodes (the compact two-slice rendering).
"""

from __future__ import annotations

import csv
import json
import math
import os
from dataclasses import dataclass

from .errors import LayoutError

CIRCLE_RADIUS = 2.5
HIGHLIGHT_COLOR = "yellow"
OUTCOME_COLOR = "lightblue"


@dataclass(frozen=True)
class GraphLayout:
    """Node angles (degrees) and circle positions, importance-ordered."""

    order: tuple[str, ...]
    angles: dict
    positions: dict
    highlight: str
    outcome: str


def circular_layout(ranked_features: tuple[str, ...], outcome: str) -> GraphLayout:
    """Place k features plus the outcome evenly on a circle.

    The most important feature sits at 90 degrees and importance advances
    counterclockwise in steps of 360/(k+1); the outcome takes the final slot,
    immediately clockwise of the most important feature.
    """
    if not ranked_features:
        raise LayoutError("need at least one ranked feature")
    order = tuple(ranked_features) + (outcome,)
    n = len(order)
    angles, positions = {}, {}
    for i, node in enumerate(order):
        angle = (90.0 + i * 360.0 / n) % 360.0
        rad = math.radians(angle)
        angles[node] = angle
        positions[node] = (
            round(CIRCLE_RADIUS * math.cos(rad), 4),
            round(CIRCLE_RADIUS * math.sin(rad), 4),
        )
    return GraphLayout(order, angles, positions, ranked_features[0], outcome)


def emit_dot(structure, ranking) -> str:
    """Byte-stable DOT text with pinned positions for one learned structure."""
    ranked = [v for v in ranking.ordered_variables if v in structure.nodes]
    missing = [v for v in structure.nodes if v != structure.target and v not in ranked]
    if missing:
        raise LayoutError(f"nodes missing from the ranking: {missing}")
    layout = circular_layout(tuple(ranked), structure.target)

    lines = ["digraph dbn {", "  layout=neato;",
             '  node [shape=ellipse style=filled fillcolor=white];']
    for node in layout.order:
        x, y = layout.positions[node]
        attrs = [f'pos="{x},{y}!"']
        if node == layout.highlight:
            attrs.append(f"fillcolor={HIGHLIGHT_COLOR}")
        elif node == layout.outcome:
            attrs.append(f"fillcolor={OUTCOME_COLOR}")
        lines.append(f'  "{node}" [{" ".join(attrs)}];')
    slot = {node: i for i, node in enumerate(layout.order)}
    intra = sorted(
        ((p, v) for v in structure.nodes for p in structure.intra_parents(v)),
        key=lambda e: (slot[e[0]], slot[e[1]]),
    )
    for p, v in intra:
        lines.append(f'  "{p}" -> "{v}";')
    inter = sorted(structure.inter.edges, key=lambda e: (slot[e.source], slot[e.dest]))
    for e in inter:
        lines.append(f'  "{e.source}" -> "{e.dest}" [style=dashed color=red];')
    lines.append("}")
    return "\n".join(lines) + "\n"


# ---------------------------------------------------------------------------
# Artifact tree emission
# ---------------------------------------------------------------------------


def write_json(path, payload) -> None:
    with open(path, "w", encoding="utf-8") as fh:
        json.dump(payload, fh, indent=2, sort_keys=True)
        fh.write("\n")


def write_csv(path, fieldnames, rows) -> None:
    with open(path, "w", newline="", encoding="utf-8") as fh:
        writer = csv.DictWriter(fh, fieldnames=fieldnames, lineterminator="\n")
        writer.writeheader()
        for row in rows:
            writer.writerow(row)


def write_text(path, text: str) -> None:
    with open(path, "w", encoding="utf-8") as fh:
        fh.write(text)


def preflight_out_dir(out_dir) -> None:
    """Fail fast if the output directory cannot be created and written."""
    os.makedirs(out_dir, exist_ok=True)
    probe = os.path.join(out_dir, ".write-probe")
    with open(probe, "w", encoding="utf-8") as fh:
        fh.write("ok")
    os.remove(probe)


def emit_run_artifacts(tree: dict, out_dir) -> None:
    """Write a {relative path: (kind, payload)} tree under ``out_dir``.

    Kinds: "json" (payload is a JSON-able object), "csv" (payload is
    (fieldnames, rows)), "text" (payload is a string). Writing is serialized
    and deterministic: identical trees produce byte-identical files.
    """
    preflight_out_dir(out_dir)
    for rel in sorted(tree):
        kind, payload = tree[rel]
        path = os.path.join(out_dir, rel)
        os.makedirs(os.path.dirname(path) or out_dir, exist_ok=True)
        if kind == "json":
            write_json(path, payload)
        elif kind == "csv":
            fieldnames, rows = payload
            write_csv(path, fieldnames, rows)
        elif kind == "text":
            write_text(path, payload)
        else:
            raise ValueError(f"unknown artifact kind {kind!r}")
