"""Self-contained SVG charts built from a run directory's CSV files."""
import logging
from pathlib import Path
from typing import Dict, List, Sequence, Tuple, Union

import numpy as np
import pandas as pd

from src.core.errors import ConfigurationError, InputError
from src.experiments.runner import load_manifest

logger = logging.getLogger(__name__)

WIDTH, HEIGHT, MARGIN = 640, 360, 48
PALETTE = ["#1f77b4", "#ff7f0e", "#2ca02c", "#d62728", "#9467bd", "#8c564b", "#e377c2", "#7f7f7f"]
CHARTS = ("curves", "keep_ratio", "layer_usage", "firing")


class _Axes:
    def __init__(self, x_range: Tuple[float, float], y_range: Tuple[float, float]):
        self.x0, self.x1 = x_range
        self.y0, self.y1 = y_range

    def x(self, v: float) -> float:
        span = (self.x1 - self.x0) or 1.0
        return MARGIN + (v - self.x0) / span * (WIDTH - 2 * MARGIN)

    def y(self, v: float) -> float:
        span = (self.y1 - self.y0) or 1.0
        return HEIGHT - MARGIN - (v - self.y0) / span * (HEIGHT - 2 * MARGIN)


def _document(title: str, body: List[str], x_label: str, y_label: str) -> str:
    head = [
        f'<svg xmlns="http://www.w3.org/2000/svg" width="{WIDTH}" height="{HEIGHT}" viewBox="0 0 {WIDTH} {HEIGHT}">',
        f'<rect width="{WIDTH}" height="{HEIGHT}" fill="white"/>',
        f'<text x="{WIDTH / 2}" y="20" text-anchor="middle" font-size="14">{title}</text>',
        f'<line class="axis" x1="{MARGIN}" y1="{HEIGHT - MARGIN}" x2="{WIDTH - MARGIN}" y2="{HEIGHT - MARGIN}" stroke="black"/>',
        f'<line class="axis" x1="{MARGIN}" y1="{MARGIN}" x2="{MARGIN}" y2="{HEIGHT - MARGIN}" stroke="black"/>',
        f'<text x="{WIDTH / 2}" y="{HEIGHT - 10}" text-anchor="middle" font-size="12">{x_label}</text>',
        f'<text x="14" y="{HEIGHT / 2}" text-anchor="middle" font-size="12" '
        f'transform="rotate(-90 14 {HEIGHT / 2})">{y_label}</text>',
    ]
    return "\n".join(head + body + ["</svg>"]) + "\n"


def _polyline(points: Sequence[Tuple[float, float]], axes: _Axes, color: str, css: str, attrs: str = "") -> str:
    coords = " ".join(f"{axes.x(x):.2f},{axes.y(y):.2f}" for x, y in points)
    return f'<polyline class="{css}" {attrs} fill="none" stroke="{color}" stroke-width="1.5" points="{coords}"/>'


def curves_svg(history: pd.DataFrame, epochs_per_dataset: int) -> str:
    """Per-task test accuracy vs epoch, with dashed markers at dataset boundaries."""
    if history.empty:
        raise InputError("history is empty")
    last = int(history["epoch"].max())
    axes = _Axes((0, last), (0, 100))
    body = []
    for boundary in range(epochs_per_dataset, last + 1, epochs_per_dataset):
        body.append(f'<line class="boundary" data-epoch="{boundary}" x1="{axes.x(boundary):.2f}" y1="{MARGIN}" '
                    f'x2="{axes.x(boundary):.2f}" y2="{HEIGHT - MARGIN}" stroke="gray" stroke-dasharray="4 3"/>')
    for task, group in history.groupby("task_idx", sort=True):
        points = list(zip(group["epoch"], group["test_accuracy"]))
        body.append(_polyline(points, axes, PALETTE[int(task) % len(PALETTE)], "task-curve", f'data-task="{task}"'))
    return _document("Test accuracy per task", body, "epoch", "accuracy (%)")


def keep_ratio_svg(history: pd.DataFrame) -> str:
    per_epoch = history.drop_duplicates("epoch")[["epoch", "remaining_ratio"]]
    if per_epoch.empty:
        raise InputError("history is empty")
    axes = _Axes((0, int(per_epoch["epoch"].max())), (0, 1))
    points = list(zip(per_epoch["epoch"], per_epoch["remaining_ratio"]))
    body = [_polyline(points, axes, PALETTE[0], "keep-ratio")]
    body += [f'<circle class="keep-point" data-value="{r:.6f}" cx="{axes.x(e):.2f}" cy="{axes.y(r):.2f}" r="2"/>'
             for e, r in points]
    return _document("Model keep ratio", body, "epoch", "remaining ratio")


def layer_usage_svg(usage: pd.DataFrame) -> str:
    """Grouped bars: one group per layer, one bar per dataset."""
    if usage.empty:
        raise InputError("layer usage table is empty")
    layers = list(dict.fromkeys(usage["layer"]))
    datasets = sorted(usage["dataset_idx"].unique())
    axes = _Axes((0, len(layers)), (0, 1))
    group_w = (WIDTH - 2 * MARGIN) / len(layers)
    bar_w = 0.8 * group_w / len(datasets)
    body = []
    for g, layer in enumerate(layers):
        rows = usage[usage["layer"] == layer].set_index("dataset_idx")["used_fraction"]
        for b, d in enumerate(datasets):
            value = float(rows.get(d, 0.0))
            x = MARGIN + g * group_w + 0.1 * group_w + b * bar_w
            body.append(f'<rect class="bar" data-layer="{layer}" data-dataset="{d}" x="{x:.2f}" '
                        f'y="{axes.y(value):.2f}" width="{bar_w:.2f}" height="{axes.y(0) - axes.y(value):.2f}" '
                        f'fill="{PALETTE[int(d) % len(PALETTE)]}"/>')
        body.append(f'<text x="{MARGIN + (g + 0.5) * group_w:.2f}" y="{HEIGHT - MARGIN + 14}" '
                    f'text-anchor="middle" font-size="10">{layer}</text>')
    return _document("Used ratio per layer", body, "layer", "used fraction")


def firing_svg(firing: pd.DataFrame) -> str:
    """Heatmap of per-weight activity frequency: rows are datasets, columns flattened weights."""
    if firing.empty:
        raise InputError("firing table is empty")
    grid = firing.pivot(index="dataset_idx", columns="weight_idx", values="frequency").to_numpy()
    rows, cols = grid.shape
    cell_w = (WIDTH - 2 * MARGIN) / cols
    cell_h = (HEIGHT - 2 * MARGIN) / rows
    body = []
    for r in range(rows):
        for c in range(cols):
            shade = int(round(255 * (1.0 - float(np.clip(grid[r, c], 0.0, 1.0)))))
            body.append(f'<rect class="cell" x="{MARGIN + c * cell_w:.2f}" y="{MARGIN + r * cell_h:.2f}" '
                        f'width="{cell_w:.2f}" height="{cell_h:.2f}" fill="rgb({shade},{shade},{shade})"/>')
    return _document("Firing pattern of the first layer", body, "weight index", "dataset")


def plot_run(run_dir: Union[str, Path], what: str, out: Union[str, Path]) -> Path:
    if what not in CHARTS:
        raise ConfigurationError(f"unknown chart {what!r}; expected one of {', '.join(CHARTS)}")
    run_dir = Path(run_dir)
    sources: Dict[str, str] = {"curves": "history.csv", "keep_ratio": "history.csv",
                               "layer_usage": "layer_usage.csv", "firing": "firing.csv"}
    source = run_dir / sources[what]
    if not source.exists():
        raise InputError(f"{source} not found")
    table = pd.read_csv(source)
    if what == "curves":
        epochs = int(load_manifest(run_dir)["config"]["epochs_per_dataset"])
        svg = curves_svg(table, epochs)
    elif what == "keep_ratio":
        svg = keep_ratio_svg(table)
    elif what == "layer_usage":
        svg = layer_usage_svg(table)
    else:
        svg = firing_svg(table)
    out = Path(out)
    out.parent.mkdir(parents=True, exist_ok=True)
    out.write_text(svg)
    logger.info(f"Wrote {what} chart to {out}")
    return out
