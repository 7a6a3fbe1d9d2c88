"""Synthetic world generation: networks, cameras, vehicles, records with
simulated multi-modal features, tracklets, and the two labeled-dataset
construction schemes (noise-by-similarity-rank and noise-by-walk-membership).

All randomness flows through a master seed split per component and per
vehicle, so serial and parallel generation agree and identical seeds give
byte-identical dataset files.
"""

from __future__ import annotations

import json
import math
import string
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .ndcore import SeededRng, seeded_rng
from .roadnet import (GeoPoint, NodePath, RoadNetwork, build_network,
                      load_network, save_network, shortest_path)

METERS_PER_DEG_LAT = EARTH_DEG = 111_194.92664455873  # mean-sphere meters per degree

PLATE_ALPHABET = string.ascii_uppercase + string.digits


@dataclass(frozen=True)
class Camera:
    camera_id: int
    node: int
    position: GeoPoint


@dataclass
class Record:
    record_id: int
    t: float
    node: int
    camera_id: int
    app_feature: np.ndarray               # unit vector, float32
    plate_text: str | None
    plate_feature: np.ndarray | None      # unit vector or absent
    gt_vehicle: int


@dataclass
class Tracklet:
    record_id: int
    points: list[tuple[GeoPoint, float]]  # >= 2, strictly increasing times


@dataclass
class VehicleTrajectory:
    vehicle_id: int
    nodes: list[int]
    times: list[float]


@dataclass
class LabeledCluster:
    cluster_id: int
    record_ids: list[int]
    labels: list[int]                     # 1 = true record, 0 = noise
    gt_trajectory: NodePath


@dataclass
class VehicleConfig:
    n_vehicles: int = 100
    speed_min_mps: float = 8.0
    speed_max_mps: float = 15.0
    twin_probability: float = 0.0
    twin_perturbation: float = 0.06       # identity offset between twin vehicles
    twin_proximity_hops: int = 0          # >0: twins start near their base
    twin_time_spread_s: float = 0.0       # >0: twins start near the base's time
    plate_capture_probability: float = 1.0
    plate_block_probability: float = 0.0  # vehicle-level: plate never captured
    feature_noise: float = 0.0
    feature_dim: int = 64
    plate_feature_dim: int = 32
    route_mode: str = "shortest_path"     # or "random_walk"
    walk_min_len: int = 8
    walk_max_len: int = 20
    start_window_s: float = 600.0
    tracklet_radius_m: float = 120.0


# ---------------------------------------------------------------------------
# network + camera generation
# ---------------------------------------------------------------------------

def generate_network(rows: int, cols: int, spacing_m: float = 500.0,
                     jitter: float = 0.0, seed: int = 0,
                     origin_lat: float = 30.0, origin_lon: float = 120.0) -> RoadNetwork:
    """Connected jittered grid; deterministic per seed.

    ``jitter`` is a fraction of spacing applied independently per axis; it
    must stay below 0.4 so the grid cannot fold onto itself.
    """
    if rows < 2 or cols < 2:
        raise ValueError("grid needs rows, cols >= 2")
    if not (0.0 <= jitter < 0.4):
        raise ValueError("jitter must lie in [0, 0.4)")
    rng = seeded_rng(seed).split("network")
    dlat = spacing_m / METERS_PER_DEG_LAT
    dlon = spacing_m / (METERS_PER_DEG_LAT * math.cos(math.radians(origin_lat)))

    nodes: dict[int, GeoPoint] = {}
    for r in range(rows):
        for c in range(cols):
            nid = r * cols + c + 1
            off_lat = rng.uniform(-jitter, jitter) * dlat if jitter > 0 else 0.0
            off_lon = rng.uniform(-jitter, jitter) * dlon if jitter > 0 else 0.0
            nodes[nid] = GeoPoint(origin_lat + r * dlat + off_lat,
                                  origin_lon + c * dlon + off_lon)

    edges: list[tuple[int, int, float | None]] = []
    for r in range(rows):
        for c in range(cols):
            nid = r * cols + c + 1
            if c + 1 < cols:
                edges.append((nid, nid + 1, None))
            if r + 1 < rows:
                edges.append((nid, nid + cols, None))
    return build_network(nodes, edges)


def place_cameras(net: RoadNetwork, coverage: float, seed: int = 0) -> list[Camera]:
    """Equip ``floor(coverage * |V|)`` nodes with cameras, uniformly sampled."""
    if not (0.0 < coverage <= 1.0):
        raise ValueError("coverage must lie in (0, 1]")
    rng = seeded_rng(seed).split("cameras")
    k = int(math.floor(coverage * net.n_nodes))
    chosen = sorted(int(n) for n in rng.choice(sorted(net.nodes), size=k, replace=False))
    return [Camera(camera_id=i + 1, node=n, position=net.nodes[n])
            for i, n in enumerate(chosen)]


# ---------------------------------------------------------------------------
# vehicle simulation
# ---------------------------------------------------------------------------

def random_walk(net: RoadNetwork, rng: SeededRng, length: int, start: int | None = None) -> list[int]:
    """Walk of ``length`` nodes avoiding immediate backtracking when possible."""
    if start is None:
        start = int(rng.choice(sorted(net.nodes)))
    walk = [start]
    while len(walk) < length:
        options = sorted(net.adjacency[walk[-1]])
        if len(walk) >= 2 and len(options) > 1:
            options = [n for n in options if n != walk[-2]]
        walk.append(int(rng.choice(options)))
    return walk


def _hop_ball(net: RoadNetwork, center: int, hops: int) -> list[int]:
    """Sorted node ids within ``hops`` edges of ``center``."""
    seen = {center}
    frontier = [center]
    for _ in range(hops):
        nxt = []
        for n in frontier:
            for m in net.adjacency[n]:
                if m not in seen:
                    seen.add(m)
                    nxt.append(m)
        frontier = nxt
    return sorted(seen)


def unit_sphere_vector(rng: SeededRng, dim: int) -> np.ndarray:
    v = rng.normal(size=dim).astype(np.float32)
    return v / np.linalg.norm(v)


def plate_hash_embedding(plate: str, dim: int) -> np.ndarray:
    """Deterministic unit vector derived from the plate string alone."""
    rng = seeded_rng(0).split("plate-embed").split(plate)
    return unit_sphere_vector(rng, dim)


def _interpolate(p: GeoPoint, q: GeoPoint, frac: float) -> GeoPoint:
    return GeoPoint(p.lat + (q.lat - p.lat) * frac, p.lon + (q.lon - p.lon) * frac)


def _tracklet_points(net: RoadNetwork, prev: int, node: int, nxt: int,
                     t_node: float, speed: float, radius_m: float) -> list[tuple[GeoPoint, float]]:
    """Five points from the entry-side midpoint through the node to the
    exit-side midpoint, capped at ``radius_m`` from the node."""
    p_prev, p_node, p_next = net.nodes[prev], net.nodes[node], net.nodes[nxt]
    len_in = net.edge_length(prev, node)
    len_out = net.edge_length(node, nxt)
    d_in = min(radius_m, len_in / 2.0)
    d_out = min(radius_m, len_out / 2.0)
    points = []
    for dist in (d_in, d_in / 2.0):
        frac = dist / len_in
        points.append((_interpolate(p_node, p_prev, frac), t_node - dist / speed))
    points.append((p_node, t_node))
    for dist in (d_out / 2.0, d_out):
        frac = dist / len_out
        points.append((_interpolate(p_node, p_next, frac), t_node + dist / speed))
    return points


def simulate_vehicles(net: RoadNetwork, cameras: list[Camera], cfg: VehicleConfig,
                      seed: int = 0):
    """Simulate vehicle passes and camera records.

    Returns (trajectories, records, tracklets): one trajectory per vehicle
    with per-node pass times from a constant sampled speed; a record at
    every camera-equipped node visited; tracklets tracing turn geometry at
    interior nodes.  Records are sorted chronologically.
    """
    if cfg.n_vehicles < 1:
        raise ValueError("need at least one vehicle")
    master = seeded_rng(seed).split("vehicles")
    camera_at = {cam.node: cam.camera_id for cam in cameras}
    node_ids = sorted(net.nodes)

    # identities and plates first: twins copy an earlier vehicle's identity
    id_rng = master.split("identities")
    identities: list[np.ndarray] = []
    twin_base: list[int | None] = []      # 0-based base vehicle index or None
    plates: list[str] = []
    plate_blocked: list[bool] = []
    used_plates: set[str] = set()
    for v in range(cfg.n_vehicles):
        if v > 0 and id_rng.uniform() < cfg.twin_probability:
            base_idx = int(id_rng.integers(0, v))
            base = identities[base_idx]
            vec = base + id_rng.normal(0.0, cfg.twin_perturbation,
                                       size=cfg.feature_dim).astype(np.float32)
            vec = vec / np.linalg.norm(vec)
            twin_base.append(base_idx)
        else:
            vec = unit_sphere_vector(id_rng, cfg.feature_dim)
            twin_base.append(None)
        identities.append(vec.astype(np.float32))
        plate_blocked.append(bool(id_rng.uniform() < cfg.plate_block_probability))
        while True:
            plate = "".join(PLATE_ALPHABET[int(i)]
                            for i in id_rng.integers(0, len(PLATE_ALPHABET), size=6))
            if plate not in used_plates:
                used_plates.add(plate)
                plates.append(plate)
                break

    trajectories: list[VehicleTrajectory] = []
    records: list[Record] = []
    tracklets: list[Tracklet] = []
    next_record_id = 1

    start_nodes: list[int] = []
    start_times: list[float] = []
    for v in range(1, cfg.n_vehicles + 1):
        rng = master.split(f"veh{v}")
        speed = float(rng.uniform(cfg.speed_min_mps, cfg.speed_max_mps))
        start_t = float(rng.uniform(0.0, cfg.start_window_s))

        base_idx = twin_base[v - 1]
        start: int | None = None
        if base_idx is not None and cfg.twin_proximity_hops > 0:
            # same-looking cars roam the same neighborhood around the same time
            ball = _hop_ball(net, start_nodes[base_idx], cfg.twin_proximity_hops)
            start = int(rng.choice(ball))
            if cfg.twin_time_spread_s > 0:
                start_t = max(0.0, start_times[base_idx]
                              + float(rng.uniform(-cfg.twin_time_spread_s,
                                                  cfg.twin_time_spread_s)))

        if cfg.route_mode == "shortest_path":
            a = start if start is not None else int(rng.choice(node_ids))
            b = int(rng.choice([n for n in node_ids if n != a]))
            path_nodes = shortest_path(net, a, b).nodes
        elif cfg.route_mode == "random_walk":
            length = int(rng.integers(cfg.walk_min_len, cfg.walk_max_len + 1))
            path_nodes = random_walk(net, rng, length, start=start)
        else:
            raise ValueError(f"unknown route_mode {cfg.route_mode!r}")
        start_nodes.append(path_nodes[0])
        start_times.append(start_t)

        times = [start_t]
        for u, w in zip(path_nodes, path_nodes[1:]):
            times.append(times[-1] + net.edge_length(u, w) / speed)
        trajectories.append(VehicleTrajectory(vehicle_id=v, nodes=list(path_nodes),
                                              times=times))

        for k, (node, t_node) in enumerate(zip(path_nodes, times)):
            if node not in camera_at:
                continue
            noise = rng.normal(0.0, cfg.feature_noise, size=cfg.feature_dim).astype(np.float32) \
                if cfg.feature_noise > 0 else 0.0
            feat = identities[v - 1] + noise
            feat = (feat / np.linalg.norm(feat)).astype(np.float32)

            if not plate_blocked[v - 1] and rng.uniform() < cfg.plate_capture_probability:
                plate_text = plates[v - 1]
                base = plate_hash_embedding(plate_text, cfg.plate_feature_dim)
                pnoise = rng.normal(0.0, cfg.feature_noise,
                                    size=cfg.plate_feature_dim).astype(np.float32) \
                    if cfg.feature_noise > 0 else 0.0
                plate_feat = base + pnoise
                plate_feat = (plate_feat / np.linalg.norm(plate_feat)).astype(np.float32)
            else:
                plate_text = None
                plate_feat = None

            rec = Record(record_id=next_record_id, t=t_node, node=node,
                         camera_id=camera_at[node], app_feature=feat,
                         plate_text=plate_text, plate_feature=plate_feat,
                         gt_vehicle=v)
            records.append(rec)
            if 0 < k < len(path_nodes) - 1:
                tracklets.append(Tracklet(
                    record_id=next_record_id,
                    points=_tracklet_points(net, path_nodes[k - 1], node,
                                            path_nodes[k + 1], t_node, speed,
                                            cfg.tracklet_radius_m)))
            next_record_id += 1

    records.sort(key=lambda r: (r.t, r.record_id))
    return trajectories, records, tracklets


# ---------------------------------------------------------------------------
# labeled dataset construction
# ---------------------------------------------------------------------------

def _stitch_shortest(net: RoadNetwork, nodes: list[int]) -> NodePath:
    """Join a node sequence with shortest paths, collapsing duplicate junctions."""
    dedup = [nodes[0]]
    for n in nodes[1:]:
        if n != dedup[-1]:
            dedup.append(n)
    out = [dedup[0]]
    total = 0.0
    for target in dedup[1:]:
        seg = shortest_path(net, out[-1], target)
        out.extend(seg.nodes[1:])
        total += seg.total_length
    return NodePath(nodes=out, total_length=total)


def build_scheme1(clusters, records_by_id: dict[int, Record], net: RoadNetwork,
                  noise_quantile: float = 0.2) -> list[LabeledCluster]:
    """Label the low-similarity tail of each cluster as noise and stitch the
    remaining records chronologically with shortest paths.

    A record is noise when its cosine similarity to the cluster centroid
    falls strictly below the ``noise_quantile`` empirical quantile; clusters
    left with fewer than two true records are skipped.
    """
    out: list[LabeledCluster] = []
    for cluster in clusters:
        recs = [records_by_id[rid] for rid in cluster.record_ids]
        sims = np.array([float(np.dot(r.app_feature, cluster.centroid)) for r in recs])
        cutoff = float(np.quantile(sims, noise_quantile))
        labels = [0 if s < cutoff else 1 for s in sims]
        true_recs = sorted((r for r, lab in zip(recs, labels) if lab == 1),
                           key=lambda r: (r.t, r.record_id))
        if len(true_recs) < 2:
            continue
        gt = _stitch_shortest(net, [r.node for r in true_recs])
        out.append(LabeledCluster(cluster_id=cluster.cluster_id,
                                  record_ids=list(cluster.record_ids),
                                  labels=labels, gt_trajectory=gt))
    return out


def build_majority_labels(clusters, records_by_id: dict[int, Record],
                          trajectories: list[VehicleTrajectory],
                          net: RoadNetwork) -> list[LabeledCluster]:
    """Simulator-truth labeling: each cluster's ground truth is its majority
    vehicle's trajectory and records from other vehicles are noise.

    This mirrors fully simulated dataset construction, where clustering is
    the only noise source and every cluster keeps its injected noise rate
    (no coverage gate).  Ties on the majority count go to the lower vehicle
    id.
    """
    traj_by_vehicle = {t.vehicle_id: t for t in trajectories}
    out: list[LabeledCluster] = []
    for cluster in clusters:
        recs = [records_by_id[rid] for rid in cluster.record_ids]
        counts: dict[int, int] = {}
        for r in recs:
            counts[r.gt_vehicle] = counts.get(r.gt_vehicle, 0) + 1
        majority = min(counts, key=lambda v: (-counts[v], v))
        traj = traj_by_vehicle[majority]
        gt = NodePath(nodes=list(traj.nodes),
                      total_length=sum(net.edge_length(u, v)
                                       for u, v in zip(traj.nodes, traj.nodes[1:])))
        out.append(LabeledCluster(cluster_id=cluster.cluster_id,
                                  record_ids=list(cluster.record_ids),
                                  labels=[1 if r.gt_vehicle == majority else 0
                                          for r in recs],
                                  gt_trajectory=gt))
    return out


def build_scheme2(net: RoadNetwork, clusters, records_by_id: dict[int, Record],
                  walks: list[list[int]] | None = None, match_fraction: float = 0.7,
                  n_walks: int = 100, walk_min_len: int = 8, walk_max_len: int = 20,
                  seed: int = 0) -> list[LabeledCluster]:
    """Match walk trajectories to clusters and label off-walk records as noise.

    A cluster matches a walk when at least ``match_fraction`` of its record
    nodes lie on the walk; the walk becomes the ground-truth trajectory.
    Walks may be supplied (e.g. simulated vehicle routes); otherwise random
    walks are generated.  Each cluster is consumed by at most one walk, and
    walks matching nothing are discarded.
    """
    if walks is None:
        rng = seeded_rng(seed).split("scheme2-walks")
        walks = []
        for _ in range(n_walks):
            length = int(rng.integers(walk_min_len, walk_max_len + 1))
            walks.append(random_walk(net, rng, length))

    walk_sets = [set(w) for w in walks]
    out: list[LabeledCluster] = []
    for cluster in clusters:
        recs = [records_by_id[rid] for rid in cluster.record_ids]
        # best-covering walk wins; earlier walk on exact coverage ties
        best_idx = -1
        best_cover = 0.0
        for wi, walk_set in enumerate(walk_sets):
            cover = sum(1 for r in recs if r.node in walk_set) / len(recs)
            if cover > best_cover:
                best_cover = cover
                best_idx = wi
        if best_idx < 0 or best_cover < match_fraction:
            continue
        walk = walks[best_idx]
        walk_set = walk_sets[best_idx]
        gt = NodePath(nodes=list(walk),
                      total_length=sum(net.edge_length(u, v)
                                       for u, v in zip(walk, walk[1:])))
        out.append(LabeledCluster(cluster_id=cluster.cluster_id,
                                  record_ids=list(cluster.record_ids),
                                  labels=[1 if r.node in walk_set else 0 for r in recs],
                                  gt_trajectory=gt))
    return out


# ---------------------------------------------------------------------------
# dataset serialization
# ---------------------------------------------------------------------------

@dataclass
class Dataset:
    net: RoadNetwork
    cameras: list[Camera]
    trajectories: list[VehicleTrajectory]
    records: list[Record]
    tracklets: list[Tracklet]
    clusters: list = field(default_factory=list)          # clusterer.Cluster
    labeled: list[LabeledCluster] = field(default_factory=list)

    @property
    def records_by_id(self) -> dict[int, Record]:
        return {r.record_id: r for r in self.records}

    @property
    def tracklets_by_record(self) -> dict[int, Tracklet]:
        return {tk.record_id: tk for tk in self.tracklets}


def _record_to_json(r: Record) -> dict:
    return {
        "record_id": r.record_id,
        "t": float(r.t),
        "node": r.node,
        "camera_id": r.camera_id,
        "app_feature": [float(x) for x in r.app_feature],
        "plate_text": r.plate_text,
        "plate_feature": None if r.plate_feature is None
        else [float(x) for x in r.plate_feature],
        "gt_vehicle": r.gt_vehicle,
    }


def _record_from_json(d: dict) -> Record:
    return Record(
        record_id=int(d["record_id"]), t=float(d["t"]), node=int(d["node"]),
        camera_id=int(d["camera_id"]),
        app_feature=np.asarray(d["app_feature"], dtype=np.float32),
        plate_text=d["plate_text"],
        plate_feature=None if d["plate_feature"] is None
        else np.asarray(d["plate_feature"], dtype=np.float32),
        gt_vehicle=int(d["gt_vehicle"]),
    )


def _write_jsonl(path: Path, rows) -> None:
    with path.open("w", encoding="utf-8") as fh:
        for row in rows:
            fh.write(json.dumps(row) + "\n")


def _read_jsonl(path: Path) -> list[dict]:
    with path.open("r", encoding="utf-8") as fh:
        return [json.loads(line) for line in fh if line.strip()]


def emit_dataset(ds: Dataset, out_dir) -> list[str]:
    """Write the dataset file set; returns the file names written."""
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    written = []

    save_network(ds.net, out / "network.json")
    written.append("network.json")

    (out / "cameras.json").write_text(json.dumps(
        [{"camera_id": c.camera_id, "node": c.node,
          "lat": c.position.lat, "lon": c.position.lon} for c in ds.cameras]),
        encoding="utf-8")
    written.append("cameras.json")

    _write_jsonl(out / "records.jsonl", (_record_to_json(r) for r in ds.records))
    written.append("records.jsonl")

    _write_jsonl(out / "tracklets.jsonl", (
        {"record_id": tk.record_id,
         "points": [{"lat": p.lat, "lon": p.lon, "t": float(t)} for p, t in tk.points]}
        for tk in ds.tracklets))
    written.append("tracklets.jsonl")

    _write_jsonl(out / "trajectories.jsonl", (
        {"vehicle_id": tr.vehicle_id, "nodes": tr.nodes,
         "times": [float(t) for t in tr.times]}
        for tr in ds.trajectories))
    written.append("trajectories.jsonl")

    if ds.clusters:
        (out / "clusters.json").write_text(json.dumps(
            [{"cluster_id": c.cluster_id, "threshold": c.threshold,
              "record_ids": list(c.record_ids)} for c in ds.clusters]),
            encoding="utf-8")
        written.append("clusters.json")

    if ds.labeled:
        _write_jsonl(out / "labels.jsonl", (
            {"cluster_id": lc.cluster_id, "record_id": rid, "s_star": lab}
            for lc in ds.labeled
            for rid, lab in zip(lc.record_ids, lc.labels)))
        written.append("labels.jsonl")
        _write_jsonl(out / "gt_paths.jsonl", (
            {"cluster_id": lc.cluster_id, "nodes": lc.gt_trajectory.nodes,
             "total_length": lc.gt_trajectory.total_length}
            for lc in ds.labeled))
        written.append("gt_paths.jsonl")
    return written


def load_dataset(in_dir, with_clusters: bool = True) -> Dataset:
    """Round-trip loader for :func:`emit_dataset` output."""
    src = Path(in_dir)
    net = load_network(src / "network.json")
    cameras = [Camera(camera_id=int(c["camera_id"]), node=int(c["node"]),
                      position=GeoPoint(float(c["lat"]), float(c["lon"])))
               for c in json.loads((src / "cameras.json").read_text(encoding="utf-8"))]
    records = [_record_from_json(d) for d in _read_jsonl(src / "records.jsonl")]
    tracklets = [Tracklet(record_id=int(d["record_id"]),
                          points=[(GeoPoint(float(p["lat"]), float(p["lon"])), float(p["t"]))
                                  for p in d["points"]])
                 for d in _read_jsonl(src / "tracklets.jsonl")]
    trajectories = [VehicleTrajectory(vehicle_id=int(d["vehicle_id"]),
                                      nodes=[int(n) for n in d["nodes"]],
                                      times=[float(t) for t in d["times"]])
                    for d in _read_jsonl(src / "trajectories.jsonl")]
    ds = Dataset(net=net, cameras=cameras, trajectories=trajectories,
                 records=records, tracklets=tracklets)

    if with_clusters and (src / "clusters.json").exists():
        from .clusterer import Cluster
        raw = json.loads((src / "clusters.json").read_text(encoding="utf-8"))
        by_id = ds.records_by_id
        for c in raw:
            rec_ids = [int(r) for r in c["record_ids"]]
            # recompute the running-mean centroid in insertion order
            total = np.zeros_like(by_id[rec_ids[0]].app_feature, dtype=np.float32)
            for rid in rec_ids:
                total += by_id[rid].app_feature
            centroid = (total / np.linalg.norm(total)).astype(np.float32)
            ds.clusters.append(Cluster(cluster_id=int(c["cluster_id"]),
                                       record_ids=rec_ids, centroid=centroid,
                                       threshold=float(c["threshold"])))
    if with_clusters and (src / "labels.jsonl").exists():
        order_by_cluster: dict[int, list[tuple[int, int]]] = {}
        for row in _read_jsonl(src / "labels.jsonl"):
            order_by_cluster.setdefault(int(row["cluster_id"]), []).append(
                (int(row["record_id"]), int(row["s_star"])))
        gt_by_cluster = {int(row["cluster_id"]):
                         NodePath(nodes=[int(n) for n in row["nodes"]],
                                  total_length=float(row["total_length"]))
                         for row in _read_jsonl(src / "gt_paths.jsonl")}
        for cid in sorted(gt_by_cluster):
            rows = order_by_cluster[cid]
            ds.labeled.append(LabeledCluster(
                cluster_id=cid, record_ids=[r for r, _ in rows],
                labels=[lab for _, lab in rows],
                gt_trajectory=gt_by_cluster[cid]))
    return ds
