"""Multi-modal record similarity and threshold-gated incremental clustering.

Records stream chronologically into clusters; each record joins the cluster
whose centroid it matches best above the threshold, otherwise it opens a new
cluster.  Centroid similarity fuses the same three modalities as the
pairwise score: appearance cosine against the running-mean centroid, plus
plate-text and plate-feature channels when both sides carry plate evidence.
The same stream clustered at a normal and a high threshold yields the
coarse clusters to be denoised and the fine, high-precision anchors.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

MODAL_WEIGHTS = (0.5, 0.3, 0.2)  # appearance / plate-text match / plate feature


def _clamp01(x: float) -> float:
    return min(1.0, max(0.0, x))


def _fused(cos_app: float, text_match: float, cos_plate: float,
           weights: tuple[float, float, float]) -> float:
    w_app, w_text, w_feat = weights
    return _clamp01(w_app * cos_app + w_text * text_match + w_feat * cos_plate)


@dataclass
class Cluster:
    cluster_id: int
    record_ids: list[int]
    centroid: np.ndarray                      # unit-norm appearance mean
    threshold: float
    _sum: np.ndarray | None = field(default=None, repr=False)
    _plate_counts: dict = field(default_factory=dict, repr=False)
    _plate_sum: np.ndarray | None = field(default=None, repr=False)

    @property
    def majority_plate(self) -> str | None:
        if not self._plate_counts:
            return None
        # highest count, earliest-seen plate on ties (dict keeps insertion order)
        best, best_n = None, 0
        for plate, n in self._plate_counts.items():
            if n > best_n:
                best, best_n = plate, n
        return best

    @property
    def plate_centroid(self) -> np.ndarray | None:
        if self._plate_sum is None:
            return None
        norm = float(np.linalg.norm(self._plate_sum))
        if norm == 0.0:
            return None
        return (self._plate_sum / norm).astype(np.float32)

    def add(self, record) -> None:
        self.record_ids.append(record.record_id)
        if self._sum is None:
            self._sum = record.app_feature.astype(np.float32).copy()
        else:
            self._sum += record.app_feature
        self.centroid = (self._sum / np.linalg.norm(self._sum)).astype(np.float32)
        if record.plate_text is not None:
            self._plate_counts[record.plate_text] = \
                self._plate_counts.get(record.plate_text, 0) + 1
            if record.plate_feature is not None:
                if self._plate_sum is None:
                    self._plate_sum = record.plate_feature.astype(np.float32).copy()
                else:
                    self._plate_sum += record.plate_feature

    def centroid_similarity(self, record,
                            weights: tuple[float, float, float] = MODAL_WEIGHTS) -> float:
        """Record-to-centroid similarity over the available modalities."""
        cos_app = float(np.dot(record.app_feature, self.centroid))
        plate = self.majority_plate
        plate_centroid = self.plate_centroid
        if record.plate_text is not None and plate is not None \
                and record.plate_feature is not None and plate_centroid is not None:
            text_match = 1.0 if record.plate_text == plate else 0.0
            cos_plate = float(np.dot(record.plate_feature, plate_centroid))
            return _fused(cos_app, text_match, cos_plate, weights)
        return _clamp01(cos_app)


@dataclass
class ClusterGraph:
    """A cluster seen as a complete similarity-weighted graph over its records."""
    cluster_id: int
    record_ids: list[int]
    weights: np.ndarray               # (n, n), symmetric, unit diagonal
    app_features: np.ndarray          # (n, d_app)


def pairwise_similarity(a, b, weights: tuple[float, float, float] = MODAL_WEIGHTS) -> float:
    """Fused similarity across appearance, plate text, and plate feature.

    When either plate is missing, appearance cosine is the only usable
    criterion; scores are clamped to [0, 1] either way.
    """
    cos_app = float(np.dot(a.app_feature, b.app_feature))
    if a.plate_text is not None and b.plate_text is not None:
        text_match = 1.0 if a.plate_text == b.plate_text else 0.0
        cos_plate = float(np.dot(a.plate_feature, b.plate_feature))
        return _fused(cos_app, text_match, cos_plate, weights)
    return _clamp01(cos_app)


def cluster(records, threshold: float) -> list[Cluster]:
    """Single chronological pass over ``records`` (assumed sorted by time).

    Each record joins the best-matching existing cluster at or above
    ``threshold``, ties going to the earliest cluster, else starts a new one.
    The scan is vectorized over cluster centroids but scores exactly what
    ``Cluster.centroid_similarity`` computes.
    """
    if not (0.0 < threshold < 1.0):
        raise ValueError("threshold must lie in (0, 1)")
    clusters: list[Cluster] = []
    state = {"cap": 64, "centroids": None, "plate_cents": None,
             "evidence": None, "majority": []}

    def ensure_capacity(n_rows: int, d_app: int):
        if state["centroids"] is None:
            state["centroids"] = np.zeros((state["cap"], d_app), dtype=np.float32)
            state["evidence"] = np.zeros(state["cap"], dtype=bool)
        while state["cap"] < n_rows:
            state["cap"] *= 2
            for key in ("centroids", "plate_cents"):
                old = state[key]
                if old is None:
                    continue
                fresh = np.zeros((state["cap"], old.shape[1]), dtype=np.float32)
                fresh[:old.shape[0]] = old
                state[key] = fresh
            fresh_ev = np.zeros(state["cap"], dtype=bool)
            fresh_ev[:state["evidence"].shape[0]] = state["evidence"]
            state["evidence"] = fresh_ev

    def sync(idx: int):
        c = clusters[idx]
        state["centroids"][idx] = c.centroid
        pc = c.plate_centroid
        if pc is not None:
            if state["plate_cents"] is None:
                state["plate_cents"] = np.zeros((state["cap"], pc.shape[0]),
                                                dtype=np.float32)
            state["plate_cents"][idx] = pc
            state["evidence"][idx] = True
        if idx >= len(state["majority"]):
            state["majority"].append(c.majority_plate)
        else:
            state["majority"][idx] = c.majority_plate

    w_app, w_text, w_feat = MODAL_WEIGHTS
    for rec in records:
        n = len(clusters)
        if n:
            cos_app = state["centroids"][:n] @ rec.app_feature
            sims = np.clip(cos_app, 0.0, 1.0)
            evidence = state["evidence"][:n]
            if rec.plate_text is not None and rec.plate_feature is not None \
                    and state["plate_cents"] is not None and evidence.any():
                cos_plate = state["plate_cents"][:n] @ rec.plate_feature
                majority = state["majority"]
                text = np.array([1.0 if majority[i] == rec.plate_text else 0.0
                                 for i in range(n)], dtype=np.float32)
                fused = np.clip(w_app * cos_app + w_text * text + w_feat * cos_plate,
                                0.0, 1.0)
                sims = np.where(evidence, fused, sims)
            best = int(np.argmax(sims))
            if float(sims[best]) >= threshold:
                clusters[best].add(rec)
                sync(best)
                continue
        c = Cluster(cluster_id=n + 1, record_ids=[],
                    centroid=rec.app_feature.copy(), threshold=threshold)
        c.add(rec)
        clusters.append(c)
        ensure_capacity(len(clusters), rec.app_feature.shape[0])
        sync(len(clusters) - 1)
    return clusters


def build_cluster_graph(c: Cluster, records_by_id: dict) -> ClusterGraph:
    """Complete weighted graph over the cluster's records with unit diagonal."""
    recs = [records_by_id[rid] for rid in c.record_ids]
    n = len(recs)
    weights = np.eye(n, dtype=np.float32)
    for i in range(n):
        for j in range(i + 1, n):
            w = pairwise_similarity(recs[i], recs[j])
            weights[i, j] = weights[j, i] = w
    app = np.stack([r.app_feature for r in recs]).astype(np.float32)
    return ClusterGraph(cluster_id=c.cluster_id, record_ids=list(c.record_ids),
                        weights=weights, app_features=app)


def cluster_graphs_to_json(clusters: list[Cluster], records_by_id: dict,
                           min_records: int = 2) -> list[dict]:
    """Diagnostics dump: JSON adjacency with pairwise weights per cluster."""
    out = []
    for c in clusters:
        if len(c.record_ids) < min_records:
            continue
        g = build_cluster_graph(c, records_by_id)
        out.append({
            "cluster_id": c.cluster_id,
            "threshold": c.threshold,
            "record_ids": list(g.record_ids),
            "weights": [[float(x) for x in row] for row in g.weights],
        })
    return out


def match_fine_to_coarse(normal_cluster: Cluster, high_clusters: list[Cluster]) -> Cluster | None:
    """Anchor selection: the high-threshold cluster with maximal record overlap.

    Ties prefer the larger cluster, then the lower id; zero overlap with
    every high cluster returns ``None`` (the empty-anchor sentinel).
    """
    member = set(normal_cluster.record_ids)
    best: Cluster | None = None
    best_key = (0, 0, 0)
    for hc in high_clusters:
        overlap = sum(1 for rid in hc.record_ids if rid in member)
        if overlap == 0:
            continue
        key = (overlap, len(hc.record_ids), -hc.cluster_id)
        if key > best_key:
            best_key = key
            best = hc
    return best
