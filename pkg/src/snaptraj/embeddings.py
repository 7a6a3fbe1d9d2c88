"""Spatiotemporal token embeddings: cosine time encoding plus road-node
vectors pretrained with skip-gram negative sampling over unbiased random
walks.

Token layout shared with the generator: PAD = 0, road nodes keep their own
ids 1..|V|, then BOS = |V|+1 and EOS = |V|+2.  The embedding table therefore
has |V|+3 rows; the PAD/BOS/EOS rows are initialized small-random and are
never touched by walk training.
"""

from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np

from .ndcore import seeded_rng
from .roadnet import RoadNetwork
from .synthgen import random_walk

PAD_TOKEN = 0


def bos_token(n_nodes: int) -> int:
    return n_nodes + 1


def eos_token(n_nodes: int) -> int:
    return n_nodes + 2


def table_rows(n_nodes: int) -> int:
    return n_nodes + 3


@dataclass
class Node2VecConfig:
    dim: int = 64
    walks_per_node: int = 10
    walk_length: int = 20
    window: int = 5
    negatives: int = 5
    epochs: int = 5
    lr: float = 0.025
    time_scale_s: float = 60.0


def time_encode(t: float, d: int) -> np.ndarray:
    """Cosine encoding: entry j (1-based) is cos(t * alpha^(-(j-1)/beta))
    with alpha = beta = sqrt(d)."""
    if d < 1:
        raise ValueError("dimension must be >= 1")
    root = math.sqrt(d)
    j = np.arange(d, dtype=np.float64)
    freqs = root ** (-j / root)
    return np.cos(t * freqs).astype(np.float32)


def time_encode_batch(times: np.ndarray, d: int) -> np.ndarray:
    """Vectorized :func:`time_encode` over an arbitrary-shape time array."""
    root = math.sqrt(d)
    j = np.arange(d, dtype=np.float64)
    freqs = root ** (-j / root)
    return np.cos(np.asarray(times, dtype=np.float64)[..., None] * freqs).astype(np.float32)


def token_embed(node: int, t: float, table: np.ndarray,
                time_scale_s: float = 60.0) -> np.ndarray:
    """Spatiotemporal token embedding: node row plus encoded rescaled time."""
    if not (0 <= node < table.shape[0]):
        raise KeyError(f"node token {node} outside embedding table")
    return table[node] + time_encode(t / time_scale_s, table.shape[1])


def pretrain_node2vec(net: RoadNetwork, cfg: Node2VecConfig | None = None,
                      seed: int = 0) -> np.ndarray:
    """Skip-gram with negative sampling on unbiased (p = q = 1) random walks.

    Returns the input-vector table of shape (|V|+3, dim).  Node rows are
    rescaled to a common norm sqrt(dim/2) after training so the spatial
    component carries the same weight as the summed time encoding; the
    PAD/BOS/EOS rows stay small-random.  Determinism: walks, shuffling, and
    negative draws all come from streams split off ``seed``.
    """
    cfg = cfg or Node2VecConfig()
    n_nodes = net.n_nodes
    rng = seeded_rng(seed).split("node2vec")

    init = rng.split("init")
    table = ((init.uniform(size=(table_rows(n_nodes), cfg.dim)) - 0.5) / cfg.dim) \
        .astype(np.float32)
    # specials stay small-random and untrained
    specials = init.split("specials")
    for row in (PAD_TOKEN, bos_token(n_nodes), eos_token(n_nodes)):
        table[row] = specials.uniform(-0.01, 0.01, size=cfg.dim).astype(np.float32)
    w_out = np.zeros_like(table)

    walk_rng = rng.split("walks")
    walks = [random_walk(net, walk_rng, cfg.walk_length, start=node)
             for node in sorted(net.nodes)
             for _ in range(cfg.walks_per_node)]

    counts = np.zeros(table_rows(n_nodes), dtype=np.float64)
    for walk in walks:
        for node in walk:
            counts[node] += 1
    neg_weights = counts ** 0.75
    neg_probs = neg_weights / neg_weights.sum()

    total_steps = cfg.epochs * len(walks)
    step = 0
    for epoch in range(cfg.epochs):
        order = rng.split(f"epoch{epoch}").permutation(len(walks))
        neg_rng = rng.split(f"neg{epoch}")
        for wi in order:
            walk = walks[int(wi)]
            lr = cfg.lr * max(1e-4, 1.0 - step / total_steps)
            step += 1
            centers, contexts = [], []
            for i, c in enumerate(walk):
                lo, hi = max(0, i - cfg.window), min(len(walk), i + cfg.window + 1)
                for j in range(lo, hi):
                    if j != i:
                        centers.append(c)
                        contexts.append(walk[j])
            if not centers:
                continue
            c_idx = np.asarray(centers, dtype=np.int64)
            o_idx = np.asarray(contexts, dtype=np.int64)
            negs = neg_rng.choice(table_rows(n_nodes),
                                  size=(len(c_idx), cfg.negatives), p=neg_probs)
            out_idx = np.concatenate([o_idx[:, None], negs], axis=1)  # (P, 1+k)
            labels = np.zeros(out_idx.shape, dtype=np.float32)
            labels[:, 0] = 1.0

            vc = table[c_idx]                              # (P, d)
            vo = w_out[out_idx]                            # (P, 1+k, d)
            score = np.einsum("pd,pkd->pk", vc, vo)
            g = (1.0 / (1.0 + np.exp(-score)) - labels) * lr
            grad_c = np.einsum("pk,pkd->pd", g, vo)
            np.add.at(w_out, out_idx, g[..., None] * vc[:, None, :].astype(np.float32))
            np.add.at(table, c_idx, -grad_c.astype(np.float32))

    target_norm = math.sqrt(cfg.dim / 2.0)
    node_rows = table[1:n_nodes + 1]
    norms = np.linalg.norm(node_rows, axis=1, keepdims=True)
    table[1:n_nodes + 1] = node_rows / np.maximum(norms, 1e-9) * target_norm
    return table
