"""Node-set metrics, experiment aggregation, and the two downstream
applications: link-speed monitoring and clustering feedback."""

from __future__ import annotations

import warnings
from dataclasses import dataclass

from .roadnet import RoadNetwork


@dataclass
class NodeSetMetrics:
    precision: float
    recall: float
    iou: float
    n_samples: int


@dataclass
class PairwiseClusterMetrics:
    precision: float
    recall: float
    f1: float


def node_set_metrics(pred_nodes, gt_nodes) -> tuple[float, float, float]:
    """Per-sample precision/recall/IoU on road-node sets (duplicates collapse)."""
    gt = set(gt_nodes)
    if not gt:
        raise ValueError("ground-truth path is empty")
    pred = set(pred_nodes)
    if not pred:
        return 0.0, 0.0, 0.0
    hit = len(pred & gt)
    return hit / len(pred), hit / len(gt), hit / len(pred | gt)


def evaluate(preds, gts) -> NodeSetMetrics:
    """Arithmetic means of per-sample node-set metrics."""
    if len(preds) != len(gts):
        raise ValueError("prediction/ground-truth sample count mismatch")
    if not preds:
        raise ValueError("nothing to evaluate")
    p_total = r_total = i_total = 0.0
    for pred, gt in zip(preds, gts):
        p, r, i = node_set_metrics(pred, gt)
        p_total += p
        r_total += r
        i_total += i
    n = len(preds)
    return NodeSetMetrics(precision=p_total / n, recall=r_total / n,
                          iou=i_total / n, n_samples=n)


# ---------------------------------------------------------------------------
# road-speed monitoring
# ---------------------------------------------------------------------------

def _edge_key(u: int, v: int) -> tuple[int, int]:
    return (u, v) if u < v else (v, u)


def speed_map(trips: list[tuple[list[int], list[tuple[int, float]]]],
              net: RoadNetwork) -> dict[tuple[int, int], tuple[float, int]]:
    """Per-link mean speeds (km/h) from recovered paths and record times.

    Each trip is (path nodes, anchors) where anchors are (node, timestamp)
    pairs at observed nodes.  Times at uncovered interior nodes are linearly
    interpolated along cumulative path distance, which makes the speed on
    every link between two anchors the span's uniform speed.  Trips with
    non-monotonic anchor times are skipped with a warning; links outside the
    first/last anchor carry no observation.
    """
    sums: dict[tuple[int, int], float] = {}
    counts: dict[tuple[int, int], int] = {}
    for path, anchors in trips:
        positions = _match_anchor_positions(path, anchors)
        if positions is None:
            warnings.warn("skipping trip: anchors not matchable to path")
            continue
        times = [t for _, t in anchors]
        if any(t2 <= t1 for t1, t2 in zip(times, times[1:])):
            warnings.warn("skipping trip: non-monotonic anchor timestamps")
            continue
        for (i1, t1), (i2, t2) in zip(zip(positions, times), zip(positions[1:], times[1:])):
            span = 0.0
            for k in range(i1, i2):
                span += net.edge_length(path[k], path[k + 1])
            if span <= 0.0:
                continue
            speed_kmh = span / (t2 - t1) * 3.6
            for k in range(i1, i2):
                key = _edge_key(path[k], path[k + 1])
                sums[key] = sums.get(key, 0.0) + speed_kmh
                counts[key] = counts.get(key, 0) + 1
    return {key: (sums[key] / counts[key], counts[key]) for key in sorted(sums)}


def _match_anchor_positions(path: list[int], anchors) -> list[int] | None:
    """Match each anchor node to its next occurrence along the path."""
    positions = []
    start = 0
    for node, _ in anchors:
        pos = None
        for i in range(start, len(path)):
            if path[i] == node:
                pos = i
                break
        if pos is None:
            return None
        positions.append(pos)
        start = pos
    return positions


# ---------------------------------------------------------------------------
# clustering feedback
# ---------------------------------------------------------------------------

def pairwise_cluster_metrics(assignments: dict[int, int],
                             vehicles: dict[int, int]) -> PairwiseClusterMetrics:
    """Pairwise precision/recall/F1 of a clustering against vehicle identity.

    A record pair counts as a true positive when co-clustered and from the
    same vehicle.  ``assignments`` may omit records (treated as singletons);
    the record universe is the keys of ``vehicles``.
    """
    def pair_count(groups: dict) -> int:
        return sum(n * (n - 1) // 2 for n in groups.values())

    cluster_sizes: dict[int, int] = {}
    vehicle_sizes: dict[int, int] = {}
    joint_sizes: dict[tuple[int, int], int] = {}
    for rid, veh in vehicles.items():
        vehicle_sizes[veh] = vehicle_sizes.get(veh, 0) + 1
        cid = assignments.get(rid)
        if cid is None:
            continue
        cluster_sizes[cid] = cluster_sizes.get(cid, 0) + 1
        joint_sizes[(cid, veh)] = joint_sizes.get((cid, veh), 0) + 1

    tp = pair_count(joint_sizes)
    cluster_pairs = pair_count(cluster_sizes)
    vehicle_pairs = pair_count(vehicle_sizes)
    precision = tp / cluster_pairs if cluster_pairs else 0.0
    recall = tp / vehicle_pairs if vehicle_pairs else 0.0
    f1 = 2 * precision * recall / (precision + recall) if precision + recall else 0.0
    return PairwiseClusterMetrics(precision=precision, recall=recall, f1=f1)


def clustering_feedback(clusters: list[tuple[int, list[int]]],
                        recovered_paths: dict[int, list[int]],
                        records_by_id: dict):
    """Remove off-trajectory records from clusters and measure the effect.

    Records whose node is not on their cluster's recovered path are dropped.
    Returns (filtered clusters, metrics before, metrics after); both metric
    sets are pairwise against ground-truth vehicle ids over the same record
    universe, so removed records count as unclustered singletons.
    """
    vehicles = {rid: records_by_id[rid].gt_vehicle
                for _, rids in clusters for rid in rids}
    before_assign = {rid: cid for cid, rids in clusters for rid in rids}

    filtered: list[tuple[int, list[int]]] = []
    after_assign: dict[int, int] = {}
    for cid, rids in clusters:
        path = recovered_paths.get(cid)
        if path is None:
            filtered.append((cid, list(rids)))
            for rid in rids:
                after_assign[rid] = cid
            continue
        path_set = set(path)
        kept = [rid for rid in rids if records_by_id[rid].node in path_set]
        filtered.append((cid, kept))
        for rid in kept:
            after_assign[rid] = cid

    before = pairwise_cluster_metrics(before_assign, vehicles)
    after = pairwise_cluster_metrics(after_assign, vehicles)
    return filtered, before, after
