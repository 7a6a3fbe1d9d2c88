"""Deterministic reference recoverers.

SP stitches chronologically ordered record nodes with shortest paths;
SP+tklet first expands records to upstream/self/downstream nodes; HMM map
matching runs Viterbi over per-record candidate nodes; the hard-margin
filter drops records scored below 0.5 before any of them.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .recovery import updown_nodes
from .roadnet import (NodePath, RoadNetwork, geodesic_distance, shortest_path)
from .synthgen import Record, Tracklet


@dataclass
class HmmConfig:
    candidate_radius_m: float = 300.0
    emission_sigma_m: float = 50.0
    detour_beta: float = 2.0
    max_candidates: int = 5

    def __post_init__(self):
        if min(self.candidate_radius_m, self.emission_sigma_m,
               self.detour_beta, self.max_candidates) <= 0:
            raise ValueError("HmmConfig fields must all be positive")


def _chronological(records: list[Record]) -> list[Record]:
    return sorted(records, key=lambda r: (r.t, r.record_id))


def _stitch(net: RoadNetwork, nodes: list[int]) -> NodePath:
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


def sp_recover(records: list[Record], net: RoadNetwork) -> NodePath:
    """Chronological record nodes joined pairwise by shortest paths."""
    if not records:
        raise ValueError("no records to recover from")
    return _stitch(net, [r.node for r in _chronological(records)])


def sp_tklet_recover(records: list[Record], tracklets_by_record: dict[int, Tracklet],
                     net: RoadNetwork, margin_deg: float = 20.0) -> NodePath:
    """SP over the record nodes expanded with tracklet up/downstream nodes."""
    if not records:
        raise ValueError("no records to recover from")
    nodes: list[int] = []
    for rec in _chronological(records):
        tk = tracklets_by_record.get(rec.record_id)
        if tk is None:
            nodes.append(rec.node)
            continue
        up, down = updown_nodes(tk, net, rec.node, margin_deg)
        if up is not None:
            nodes.append(up)
        nodes.append(rec.node)
        if down is not None:
            nodes.append(down)
    return _stitch(net, nodes)


def viterbi(log_init: np.ndarray, log_trans: list[np.ndarray],
            log_emit: list[np.ndarray]) -> list[int]:
    """Most probable state sequence through a lattice of log-probabilities.

    ``log_emit[t]`` has one entry per state at step t; ``log_trans[t]`` is
    (states_t, states_t+1).  Ties resolve to the lowest state index.
    """
    n_steps = len(log_emit)
    score = log_init + log_emit[0]
    back: list[np.ndarray] = []
    for t in range(1, n_steps):
        cand = score[:, None] + log_trans[t - 1]          # (prev, next)
        best_prev = np.argmax(cand, axis=0)
        back.append(best_prev)
        score = cand[best_prev, np.arange(cand.shape[1])] + log_emit[t]
    states = [int(np.argmax(score))]
    for best_prev in reversed(back):
        states.append(int(best_prev[states[-1]]))
    states.reverse()
    return states


def _candidates(net: RoadNetwork, node: int, cfg: HmmConfig) -> list[int]:
    center = net.nodes[node]
    scored = []
    for nid in sorted(net.nodes):
        d = geodesic_distance(center, net.nodes[nid])
        if d <= cfg.candidate_radius_m:
            scored.append((d, nid))
    scored.sort()
    chosen = [nid for _, nid in scored[:cfg.max_candidates]]
    if node not in chosen:                 # the record's own node always stays
        chosen = [node] + chosen[:cfg.max_candidates - 1]
    return chosen


def hmm_recover(records: list[Record], net: RoadNetwork,
                cfg: HmmConfig | None = None) -> NodePath:
    """Map matching over candidate nodes near each record.

    Emission favors candidates near the observed node
    (log p = -d^2 / (2 sigma^2)); transitions penalize detours by
    -beta * max(0, network distance / great-circle distance - 1).  The
    Viterbi-selected states are then stitched with shortest paths.
    """
    if not records:
        raise ValueError("no records to recover from")
    cfg = cfg or HmmConfig()
    recs = _chronological(records)
    cands = [_candidates(net, r.node, cfg) for r in recs]

    two_sigma_sq = 2.0 * cfg.emission_sigma_m ** 2
    log_emit = []
    for rec, cand in zip(recs, cands):
        center = net.nodes[rec.node]
        log_emit.append(np.array(
            [-geodesic_distance(center, net.nodes[c]) ** 2 / two_sigma_sq
             for c in cand]))

    log_trans = []
    for prev, nxt in zip(cands, cands[1:]):
        mat = np.zeros((len(prev), len(nxt)))
        for i, u in enumerate(prev):
            for j, v in enumerate(nxt):
                if u == v:
                    continue
                net_d = shortest_path(net, u, v).total_length
                gc_d = max(geodesic_distance(net.nodes[u], net.nodes[v]), 1.0)
                mat[i, j] = -cfg.detour_beta * max(0.0, net_d / gc_d - 1.0)
        log_trans.append(mat)

    states = viterbi(np.zeros(len(cands[0])), log_trans, log_emit)
    matched = [cands[t][s] for t, s in enumerate(states)]
    return _stitch(net, matched)


def dhm_filter(records: list[Record], scores: list[float],
               threshold: float = 0.5) -> list[Record]:
    """Keep records whose denoise score is at least the hard margin.

    Order is preserved; scoring below the threshold marks a record as noise.
    The boundary is inclusive-keep at exactly 0.5.
    """
    if len(records) != len(scores):
        raise ValueError("records/scores length mismatch")
    return [r for r, s in zip(records, scores) if s >= threshold]
