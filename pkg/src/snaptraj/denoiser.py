"""Fine/coarse soft-denoising: a shared 2-layer GCN runs over the normal
cluster graph and its matched high-threshold anchor graph; the anchor's
mean readout scores each record through a bilinear form squeezed to (0, 1).
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from . import ndcore as nd
from .ndcore import Parameter, SeededRng, Tensor


@dataclass
class DenoiserConfig:
    in_dim: int = 64        # token-embedding width fed to the GCN
    hidden: int = 64
    out_dim: int = 64
    app_dim: int = 64


@dataclass
class GraphTensors:
    """One cluster graph prepared for scoring."""
    x: Tensor                 # (n, in_dim) token embeddings
    adj_norm: np.ndarray      # (n, n) symmetric-normalized weights
    app: np.ndarray           # (n, app_dim) appearance features


@dataclass
class DenoiseScores:
    """Per-record scores in (0, 1) plus the pre-sigmoid logits; both stay on
    the tape so losses and attention masks share one graph."""
    scores: Tensor            # (n,)
    logits: Tensor            # (n,)

    @property
    def values(self) -> list[float]:
        return [float(x) for x in self.scores.data]


def _glorot(rng: SeededRng, shape) -> np.ndarray:
    fan_in, fan_out = shape[0], shape[-1]
    limit = np.sqrt(6.0 / (fan_in + fan_out))
    return rng.uniform(-limit, limit, size=shape).astype(np.float32)


def init_denoiser_params(cfg: DenoiserConfig, rng: SeededRng) -> dict[str, Parameter]:
    feat = cfg.out_dim + cfg.app_dim
    make = lambda name, arr: Parameter(name, arr)
    # start the bilinear as a calibrated appearance-cosine against the anchor:
    # identity on the appearance block, near-zero elsewhere, bias placing the
    # decision boundary around cos ~ 0.95; training refines from there
    bilinear = 0.02 * _glorot(rng.split("wb"), (feat, feat))
    app_block = np.arange(cfg.out_dim, feat)
    bilinear[app_block, app_block] += 40.0
    return {
        "denoiser.gcn_w1": make("denoiser.gcn_w1", _glorot(rng.split("w1"), (cfg.in_dim, cfg.hidden))),
        "denoiser.gcn_b1": make("denoiser.gcn_b1", np.zeros(cfg.hidden, dtype=np.float32)),
        "denoiser.gcn_w2": make("denoiser.gcn_w2", _glorot(rng.split("w2"), (cfg.hidden, cfg.out_dim))),
        "denoiser.gcn_b2": make("denoiser.gcn_b2", np.zeros(cfg.out_dim, dtype=np.float32)),
        "denoiser.bilinear_w": make("denoiser.bilinear_w", bilinear.astype(np.float32)),
        "denoiser.bilinear_b": make("denoiser.bilinear_b",
                                    np.asarray(-38.0, dtype=np.float32)),
    }


def denoiser_param_shapes(cfg: DenoiserConfig) -> dict[str, tuple]:
    feat = cfg.out_dim + cfg.app_dim
    return {
        "denoiser.gcn_w1": (cfg.in_dim, cfg.hidden),
        "denoiser.gcn_b1": (cfg.hidden,),
        "denoiser.gcn_w2": (cfg.hidden, cfg.out_dim),
        "denoiser.gcn_b2": (cfg.out_dim,),
        "denoiser.bilinear_w": (feat, feat),
        "denoiser.bilinear_b": (),
    }


def normalized_adjacency(weights: np.ndarray) -> np.ndarray:
    """Symmetric normalization D^{-1/2} W D^{-1/2} of a similarity matrix
    that already carries unit self-loops on its diagonal.  Idempotent inputs
    are expected: normalize the raw weight matrix exactly once."""
    w = np.asarray(weights, dtype=np.float32)
    deg = w.sum(axis=1)
    inv_sqrt = 1.0 / np.sqrt(np.maximum(deg, 1e-12))
    return (w * inv_sqrt[:, None] * inv_sqrt[None, :]).astype(np.float32)


def gcn_forward(x: Tensor, adj_norm: np.ndarray, params: dict[str, Parameter]) -> Tensor:
    """Two rounds of A_hat @ X @ W with a ReLU between them."""
    adj = nd.constant(adj_norm)
    h = nd.relu(nd.add(nd.matmul(nd.matmul(adj, x), params["denoiser.gcn_w1"]),
                       params["denoiser.gcn_b1"]))
    return nd.add(nd.matmul(nd.matmul(adj, h), params["denoiser.gcn_w2"]),
                  params["denoiser.gcn_b2"])


def readout(features: Tensor) -> Tensor:
    """Mean over nodes; callers map the empty-anchor sentinel to zeros."""
    return nd.tmean(features, axis=0)


def denoise_scores(norm_graph: GraphTensors, high_graph: GraphTensors | None,
                   params: dict[str, Parameter]) -> DenoiseScores:
    """Score every record of the normal graph against the anchor readout.

    Per record i: f_i = [gcn(x)_i, app_i]; the score is
    sigmoid(f_i^T W anchor + b).  A missing anchor (no matched high cluster)
    contributes a zero vector, leaving scores at sigmoid(bias).
    """
    f_st = gcn_forward(norm_graph.x, norm_graph.adj_norm, params)
    f = nd.concat([f_st, nd.constant(norm_graph.app)], axis=1)   # (n, out+app)

    if high_graph is None:
        anchor = nd.constant(np.zeros(f.data.shape[1], dtype=np.float32))
    else:
        h_st = gcn_forward(high_graph.x, high_graph.adj_norm, params)
        h = nd.concat([h_st, nd.constant(high_graph.app)], axis=1)
        anchor = readout(h)

    projected = nd.matmul(params["denoiser.bilinear_w"],
                          nd.reshape(anchor, (f.data.shape[1], 1)))   # (feat, 1)
    logits = nd.add(nd.reshape(nd.matmul(f, projected), (f.data.shape[0],)),
                    params["denoiser.bilinear_b"])
    # clamp keeps scores strictly inside (0,1) at float32 resolution; the
    # loss reads the raw logits so training never sees the clamp
    return DenoiseScores(scores=nd.sigmoid(nd.clip(logits, -15.0, 15.0)),
                         logits=logits)


def denoise_loss(scores: DenoiseScores | Tensor, labels) -> Tensor:
    """Mean binary cross-entropy between scores and the 0/1 noise labels.

    Given full DenoiseScores, the loss is computed from the logits so the
    gradient survives sigmoid saturation.
    """
    labels = np.asarray(labels, dtype=np.float32)
    if isinstance(scores, DenoiseScores):
        if labels.shape != scores.logits.data.shape:
            raise ValueError("scores/labels length mismatch")
        return nd.bce_with_logits(scores.logits, labels)
    if labels.shape != scores.data.shape:
        raise ValueError("scores/labels length mismatch")
    return nd.binary_cross_entropy(scores, labels)
