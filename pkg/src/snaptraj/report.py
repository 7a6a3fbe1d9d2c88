"""Report rendering: delimited metric grids, GeoJSON exports, and matplotlib
figures written next to them."""

from __future__ import annotations

import csv
import json
from pathlib import Path

import matplotlib
matplotlib.use("Agg")
import matplotlib.pyplot as plt
import numpy as np
from matplotlib.collections import LineCollection

from .roadnet import RoadNetwork

METRIC_COLUMNS = ("precision", "recall", "iou", "n")


def write_metrics_grid(rows: list[dict], path) -> None:
    """Comparison grid: one row per method, columns precision/recall/iou/n."""
    with Path(path).open("w", encoding="utf-8", newline="") as fh:
        writer = csv.writer(fh)
        writer.writerow(("method",) + METRIC_COLUMNS)
        for row in rows:
            writer.writerow([row["method"]] + [row[c] for c in METRIC_COLUMNS])


def format_metrics_grid(rows: list[dict]) -> str:
    header = f"{'method':<14}" + "".join(f"{c:>11}" for c in METRIC_COLUMNS)
    lines = [header]
    for row in rows:
        lines.append(f"{row['method']:<14}"
                     f"{row['precision']:>11.4f}{row['recall']:>11.4f}"
                     f"{row['iou']:>11.4f}{row['n']:>11d}")
    return "\n".join(lines)


def plot_metrics_grid(rows: list[dict], path) -> None:
    methods = [row["method"] for row in rows]
    fig, ax = plt.subplots(figsize=(1.6 + 1.2 * len(methods), 4.0))
    width = 0.27
    xs = range(len(methods))
    for k, metric in enumerate(("precision", "recall", "iou")):
        ax.bar([x + (k - 1) * width for x in xs], [row[metric] for row in rows],
               width=width, label=metric)
    ax.set_xticks(list(xs))
    ax.set_xticklabels(methods, rotation=20, ha="right")
    ax.set_ylim(0.0, 1.05)
    ax.set_ylabel("score")
    ax.legend(loc="lower right")
    ax.set_title("trajectory recovery by method")
    fig.tight_layout()
    fig.savefig(path, dpi=120)
    plt.close(fig)


def plot_loss_curves(curve: list[dict], path) -> None:
    fig, ax = plt.subplots(figsize=(6, 4))
    epochs = [row["epoch"] for row in curve]
    for key in ("train_gen", "train_de", "val_gen"):
        if key in curve[0]:
            ax.plot(epochs, [row[key] for row in curve], label=key)
    ax.set_xlabel("epoch")
    ax.set_ylabel("loss")
    ax.legend()
    fig.tight_layout()
    fig.savefig(path, dpi=120)
    plt.close(fig)


def write_loss_curve_csv(curve: list[dict], path) -> None:
    keys = list(curve[0].keys())
    with Path(path).open("w", encoding="utf-8", newline="") as fh:
        writer = csv.DictWriter(fh, fieldnames=keys)
        writer.writeheader()
        writer.writerows(curve)


def plot_speed_map(net: RoadNetwork, edge_speeds: dict, path,
                   cameras: list | None = None) -> None:
    """Network links colored by observed mean speed; unobserved links gray."""
    fig, ax = plt.subplots(figsize=(7, 7))
    segments, colors = [], []
    background = []
    for (u, v), length in net.edges.items():
        pu, pv = net.nodes[u], net.nodes[v]
        seg = [(pu.lon, pu.lat), (pv.lon, pv.lat)]
        if (u, v) in edge_speeds:
            segments.append(seg)
            colors.append(edge_speeds[(u, v)][0])
        else:
            background.append(seg)
    if background:
        ax.add_collection(LineCollection(background, colors="0.85", linewidths=1.0))
    if segments:
        lc = LineCollection(segments, cmap="RdYlGn", linewidths=2.5)
        lc.set_array(np.asarray(colors))
        ax.add_collection(lc)
        fig.colorbar(lc, ax=ax, label="speed (km/h)")
    if cameras:
        ax.scatter([c.position.lon for c in cameras],
                   [c.position.lat for c in cameras], s=8, c="k", zorder=3,
                   label="camera")
        ax.legend(loc="upper right")
    ax.autoscale()
    ax.set_xlabel("lon")
    ax.set_ylabel("lat")
    ax.set_title("link speeds from recovered trajectories")
    fig.tight_layout()
    fig.savefig(path, dpi=120)
    plt.close(fig)


def plot_feedback(before, after, path) -> None:
    fig, ax = plt.subplots(figsize=(5, 4))
    labels = ("precision", "recall", "f1")
    xs = range(len(labels))
    width = 0.35
    ax.bar([x - width / 2 for x in xs], [before.precision, before.recall, before.f1],
           width=width, label="without feedback")
    ax.bar([x + width / 2 for x in xs], [after.precision, after.recall, after.f1],
           width=width, label="with feedback")
    ax.set_xticks(list(xs))
    ax.set_xticklabels(labels)
    ax.set_ylim(0.0, 1.05)
    ax.legend(loc="lower right")
    ax.set_title("clustering quality before/after trajectory feedback")
    fig.tight_layout()
    fig.savefig(path, dpi=120)
    plt.close(fig)


# ---------------------------------------------------------------------------
# GeoJSON
# ---------------------------------------------------------------------------

def _line_coords(net: RoadNetwork, nodes: list[int]) -> list[list[float]]:
    return [[net.nodes[n].lon, net.nodes[n].lat] for n in nodes]


def trajectories_geojson(net: RoadNetwork, paths: list[dict],
                         cameras: list | None = None) -> dict:
    """FeatureCollection of trajectory LineStrings plus camera Points.

    Each entry of ``paths`` carries nodes and properties (cluster_id, method,
    iou when known).
    """
    features = []
    for entry in paths:
        props = {k: entry[k] for k in ("cluster_id", "method", "iou") if k in entry}
        features.append({
            "type": "Feature",
            "geometry": {"type": "LineString",
                         "coordinates": _line_coords(net, entry["nodes"])},
            "properties": props,
        })
    for cam in cameras or []:
        features.append({
            "type": "Feature",
            "geometry": {"type": "Point",
                         "coordinates": [cam.position.lon, cam.position.lat]},
            "properties": {"camera_id": cam.camera_id, "node": cam.node},
        })
    return {"type": "FeatureCollection", "features": features}


def speed_geojson(net: RoadNetwork, edge_speeds: dict) -> dict:
    features = []
    for (u, v), (speed_kmh, count) in sorted(edge_speeds.items()):
        features.append({
            "type": "Feature",
            "geometry": {"type": "LineString",
                         "coordinates": _line_coords(net, [u, v])},
            "properties": {"u": u, "v": v, "speed_kmh": speed_kmh, "n_obs": count},
        })
    return {"type": "FeatureCollection", "features": features}


def write_geojson(doc: dict, path) -> None:
    Path(path).write_text(json.dumps(doc), encoding="utf-8")
