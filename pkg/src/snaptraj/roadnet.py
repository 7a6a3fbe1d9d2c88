"""Geo-referenced road-network graph: loading, routing, geometry, bearings.

Networks are undirected, connected graphs over intersections with dense
integer ids 1..|V|.  Instances are immutable after construction and safe
for concurrent reads; the shortest-path cache only ever adds entries.
"""

from __future__ import annotations

import heapq
import json
import math
from dataclasses import dataclass, field
from pathlib import Path

EARTH_RADIUS_M = 6_371_008.8


class NetworkError(ValueError):
    """Malformed or invalid network input."""


@dataclass(frozen=True)
class GeoPoint:
    lat: float
    lon: float

    def __post_init__(self):
        if not (-90.0 <= self.lat <= 90.0):
            raise ValueError(f"latitude out of range: {self.lat}")
        if not (-180.0 <= self.lon <= 180.0):
            raise ValueError(f"longitude out of range: {self.lon}")


@dataclass
class NodePath:
    """Ordered node-id sequence; ``total_length`` covers network-adjacent hops."""

    nodes: list[int]
    total_length: float = 0.0

    def __len__(self) -> int:
        return len(self.nodes)


@dataclass
class RoadNetwork:
    nodes: dict[int, GeoPoint]
    edges: dict[tuple[int, int], float]          # key (min(u,v), max(u,v)) -> meters
    adjacency: dict[int, dict[int, float]]
    _sp_cache: dict[int, dict[int, tuple[float, tuple[int, ...]]]] = field(
        default_factory=dict, repr=False, compare=False)

    @property
    def n_nodes(self) -> int:
        return len(self.nodes)

    @property
    def n_edges(self) -> int:
        return len(self.edges)

    def edge_length(self, u: int, v: int) -> float:
        return self.edges[(u, v) if u < v else (v, u)]

    def has_edge(self, u: int, v: int) -> bool:
        return (min(u, v), max(u, v)) in self.edges


def geodesic_distance(p: GeoPoint, q: GeoPoint) -> float:
    """Haversine distance in meters on the mean-radius sphere."""
    phi1, phi2 = math.radians(p.lat), math.radians(q.lat)
    dphi = phi2 - phi1
    dlam = math.radians(q.lon - p.lon)
    a = math.sin(dphi / 2.0) ** 2 + math.cos(phi1) * math.cos(phi2) * math.sin(dlam / 2.0) ** 2
    return 2.0 * EARTH_RADIUS_M * math.asin(min(1.0, math.sqrt(a)))


def bearing(p: GeoPoint, q: GeoPoint) -> float:
    """Clockwise angle from true north of p->q, in [0, 360).

    Four-quadrant arctangent on the local equirectangular plane, with the
    longitude axis scaled by cos of the mean latitude so that the reverse
    bearing is exactly 180 degrees away.
    """
    if p.lat == q.lat and p.lon == q.lon:
        raise ValueError("bearing undefined for coincident points")
    mean_lat = math.radians((p.lat + q.lat) / 2.0)
    dx = (q.lon - p.lon) * math.cos(mean_lat)
    dy = q.lat - p.lat
    ang = math.degrees(math.atan2(dx, dy))
    return ang % 360.0


def angular_difference(a: float, b: float) -> float:
    """Absolute angle between two bearings, folded to [0, 180]."""
    d = abs(a - b) % 360.0
    return min(d, 360.0 - d)


def build_network(nodes: dict[int, GeoPoint],
                  edges: list[tuple[int, int, float | None]]) -> RoadNetwork:
    """Validate parts and assemble a RoadNetwork.

    Edge length defaults to the geodesic distance between endpoints.
    Rejects non-dense ids, dangling edges, non-positive lengths, self-loops,
    and disconnected graphs.
    """
    if not nodes:
        raise NetworkError("network has no nodes")
    ids = sorted(nodes)
    if ids != list(range(1, len(ids) + 1)):
        raise NetworkError("node ids must be dense integers 1..|V|")

    edge_map: dict[tuple[int, int], float] = {}
    adjacency: dict[int, dict[int, float]] = {n: {} for n in ids}
    for u, v, length in edges:
        if u not in nodes or v not in nodes:
            raise NetworkError(f"edge ({u}, {v}) references unknown node")
        if u == v:
            raise NetworkError(f"self-loop at node {u}")
        key = (u, v) if u < v else (v, u)
        if key in edge_map:
            raise NetworkError(f"duplicate edge {key}")
        if length is None:
            length = geodesic_distance(nodes[u], nodes[v])
        length = float(length)
        if not (length > 0.0):
            raise NetworkError(f"edge {key} has non-positive length")
        edge_map[key] = length
        adjacency[u][v] = length
        adjacency[v][u] = length

    # connectivity check
    seen = {ids[0]}
    frontier = [ids[0]]
    while frontier:
        n = frontier.pop()
        for m in adjacency[n]:
            if m not in seen:
                seen.add(m)
                frontier.append(m)
    if len(seen) != len(ids):
        raise NetworkError("graph is not connected")

    return RoadNetwork(nodes=nodes, edges=edge_map, adjacency=adjacency)


def load_network(source) -> RoadNetwork:
    """Load the JSON network format and return a validated RoadNetwork."""
    if isinstance(source, (str, Path)):
        try:
            doc = json.loads(Path(source).read_text(encoding="utf-8"))
        except json.JSONDecodeError as exc:
            raise NetworkError(f"malformed network file: {exc}") from exc
    else:
        doc = source
    if not isinstance(doc, dict) or "nodes" not in doc or "edges" not in doc:
        raise NetworkError("network file must be an object with 'nodes' and 'edges'")

    nodes: dict[int, GeoPoint] = {}
    for entry in doc["nodes"]:
        nid = int(entry["id"])
        if nid in nodes:
            raise NetworkError(f"duplicate node id {nid}")
        nodes[nid] = GeoPoint(float(entry["lat"]), float(entry["lon"]))

    edges = [(int(e["u"]), int(e["v"]), e.get("length_m")) for e in doc["edges"]]
    return build_network(nodes, edges)


def save_network(net: RoadNetwork, path) -> None:
    doc = {
        "nodes": [{"id": n, "lat": p.lat, "lon": p.lon} for n, p in sorted(net.nodes.items())],
        "edges": [{"u": u, "v": v, "length_m": length}
                  for (u, v), length in sorted(net.edges.items())],
    }
    Path(path).write_text(json.dumps(doc), encoding="utf-8")


def neighbors(net: RoadNetwork, n: int) -> set[int]:
    if n not in net.adjacency:
        raise KeyError(f"unknown node {n}")
    return set(net.adjacency[n])


def nearest_node(net: RoadNetwork, p: GeoPoint) -> int:
    """Node minimizing geodesic distance to ``p``; ties go to the lowest id."""
    best_id = None
    best_d = math.inf
    for nid in sorted(net.nodes):
        d = geodesic_distance(net.nodes[nid], p)
        if d < best_d:
            best_d = d
            best_id = nid
    return best_id


def _single_source(net: RoadNetwork, a: int) -> dict[int, tuple[float, tuple[int, ...]]]:
    """Dijkstra from ``a`` with lexicographic tie-breaking on node sequences.

    Labels (distance, path) are totally ordered; both components grow
    monotonically along edges, so the greedy settle order is exact.
    """
    settled: dict[int, tuple[float, tuple[int, ...]]] = {}
    heap: list[tuple[float, tuple[int, ...]]] = [(0.0, (a,))]
    while heap:
        dist, path = heapq.heappop(heap)
        node = path[-1]
        if node in settled:
            continue
        settled[node] = (dist, path)
        for nbr, length in net.adjacency[node].items():
            if nbr not in settled:
                heapq.heappush(heap, (dist + length, path + (nbr,)))
    return settled


def shortest_path(net: RoadNetwork, a: int, b: int) -> NodePath:
    """Minimum-length path a->b; ties resolved to the lexicographically
    smallest node sequence.  Results are cached per source node."""
    if a not in net.nodes:
        raise KeyError(f"unknown node {a}")
    if b not in net.nodes:
        raise KeyError(f"unknown node {b}")
    if a == b:
        return NodePath(nodes=[a], total_length=0.0)
    source = net._sp_cache.get(a)
    if source is None:
        source = _single_source(net, a)
        net._sp_cache[a] = source
    dist, path = source[b]
    return NodePath(nodes=list(path), total_length=dist)


def path_length(net: RoadNetwork, nodes: list[int]) -> float:
    """Sum of edge lengths along a node sequence (all hops must be adjacent)."""
    total = 0.0
    for u, v in zip(nodes, nodes[1:]):
        total += net.edge_length(u, v)
    return total


def is_adjacent_path(net: RoadNetwork, nodes: list[int]) -> bool:
    return all(net.has_edge(u, v) for u, v in zip(nodes, nodes[1:]))
