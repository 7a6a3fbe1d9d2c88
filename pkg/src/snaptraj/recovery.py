"""Sequence-to-sequence trajectory generation.

Cluster records become chronologically ordered tokens (optionally expanded
with tracklet-derived upstream/downstream nodes), a Transformer encoder
builds memory, and an autoregressive decoder emits road-node ids until the
end token.  Denoise scores multiply decoder cross-attention columns so
suspect records fade without being deleted; the denoiser and generator
co-train on a joint loss.
"""

from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np

from . import ndcore as nd
from .clusterer import (Cluster, build_cluster_graph, cluster as run_clustering,
                        match_fine_to_coarse)
from .denoiser import (DenoiserConfig, GraphTensors, denoise_scores,
                       denoiser_param_shapes, init_denoiser_params,
                       normalized_adjacency)
from .embeddings import (PAD_TOKEN, bos_token, table_rows, time_encode_batch)
from .ndcore import Parameter, SeededRng, Tensor, seeded_rng
from .roadnet import (NodePath, RoadNetwork, angular_difference, bearing)
from .synthgen import Record, Tracklet

NEG_INF = -1e9


@dataclass
class RecoveryConfig:
    enc_layers: int = 2
    dec_layers: int = 2
    heads: int = 4
    dim: int = 64
    ff_dim: int = 256
    max_decode_len: int = 64
    gcn_hidden: int = 64
    gcn_out: int = 64
    app_dim: int = 64
    use_tracklets: bool = True
    use_denoiser: bool = True
    renormalize_attention: bool = False
    bearing_margin_deg: float = 20.0
    time_scale_s: float = 60.0


@dataclass
class TrainConfig:
    epochs: int = 30
    batch_size: int = 16
    lr: float = 1e-3
    lr_decay: str = "cosine"          # "cosine" | "constant"
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8
    lambda_denoise: float = 1.0
    dropout: float = 0.1
    train_embeddings: bool = True


@dataclass
class TokenSequence:
    """Node tokens in record-chronological order with score/provenance
    bookkeeping; tracklet-inserted tokens sit adjacent to their source."""
    tokens: list[int]
    times: list[float]
    provenance: list[str]            # "record" | "up" | "down"
    source_index: list[int]          # index into the originating record list
    scores: list[float] | None = None


@dataclass
class RecoveredPath:
    nodes: list[int]
    scores: list[float] | None
    truncated: bool
    adjacency_violations: int = 0
    cluster_id: int | None = None


# ---------------------------------------------------------------------------
# tracklet geometry
# ---------------------------------------------------------------------------

def _tracklet_bearings(tk: Tracklet) -> tuple[float, float]:
    if len(tk.points) < 2:
        raise ValueError("tracklet needs at least two points")
    (p0, _), (p1, _) = tk.points[0], tk.points[1]
    (q0, _), (q1, _) = tk.points[-2], tk.points[-1]
    if (p0.lat, p0.lon) == (p1.lat, p1.lon) or (q0.lat, q0.lon) == (q1.lat, q1.lon):
        raise ValueError("degenerate tracklet: coincident consecutive points")
    return bearing(p0, p1), bearing(q0, q1)


def updown_nodes(tk: Tracklet, net: RoadNetwork, node: int,
                 margin_deg: float = 20.0) -> tuple[int | None, int | None]:
    """Pick at most one upstream and one downstream neighbor of ``node``.

    The entry bearing comes from the tracklet's first two points and the exit
    bearing from its last two.  A neighbor qualifies as upstream when the
    neighbor-to-node bearing matches the entry bearing within ``margin_deg``
    (folded to <= 180), downstream when the node-to-neighbor bearing matches
    the exit bearing; the closest match wins.
    """
    bearing_in, bearing_out = _tracklet_bearings(tk)
    p_node = net.nodes[node]
    best_up, best_up_diff = None, margin_deg
    best_down, best_down_diff = None, margin_deg
    for nbr in sorted(net.adjacency[node]):
        p_nbr = net.nodes[nbr]
        up_diff = angular_difference(bearing(p_nbr, p_node), bearing_in)
        if up_diff < best_up_diff or (up_diff == best_up_diff and best_up is None):
            best_up, best_up_diff = nbr, up_diff
        down_diff = angular_difference(bearing(p_node, p_nbr), bearing_out)
        if down_diff < best_down_diff or (down_diff == best_down_diff and best_down is None):
            best_down, best_down_diff = nbr, down_diff
    return best_up, best_down


def tracklet_to_updown(tk: Tracklet, net: RoadNetwork, node: int,
                       margin_deg: float = 20.0) -> list[int]:
    """Node list [n_up?, node, n_down?] derived from the tracklet bearings."""
    up, down = updown_nodes(tk, net, node, margin_deg)
    out = [node]
    if up is not None:
        out.insert(0, up)
    if down is not None:
        out.append(down)
    return out


# ---------------------------------------------------------------------------
# token sequences
# ---------------------------------------------------------------------------

def build_token_sequence(records: list[Record]) -> TokenSequence:
    """Chronologically ordered record tokens (no tracklet expansion yet)."""
    order = sorted(range(len(records)), key=lambda i: (records[i].t, records[i].record_id))
    return TokenSequence(
        tokens=[records[i].node for i in order],
        times=[records[i].t for i in order],
        provenance=["record"] * len(records),
        source_index=list(order),
    )


def augment_with_tracklets(seq: TokenSequence, records: list[Record],
                           tracklets_by_record: dict[int, Tracklet],
                           net: RoadNetwork, margin_deg: float = 20.0) -> TokenSequence:
    """Expand each token that has a tracklet into [up, self, down] in place.

    Scores (when present) are repeated onto inserted tokens; tokens without
    tracklets pass through unchanged.
    """
    tokens, times, prov, src = [], [], [], []
    scores = [] if seq.scores is not None else None
    for pos, tok in enumerate(seq.tokens):
        rec = records[seq.source_index[pos]]
        tk = tracklets_by_record.get(rec.record_id)
        up = down = None
        if tk is not None:
            up, down = updown_nodes(tk, net, tok, margin_deg)
        for node, kind in ((up, "up"), (tok, "record"), (down, "down")):
            if node is None:
                continue
            tokens.append(node)
            times.append(seq.times[pos])
            prov.append(kind)
            src.append(seq.source_index[pos])
            if scores is not None:
                scores.append(seq.scores[pos])
    return TokenSequence(tokens=tokens, times=times, provenance=prov,
                         source_index=src, scores=scores)


# ---------------------------------------------------------------------------
# model parameters
# ---------------------------------------------------------------------------

def _glorot(rng: SeededRng, shape) -> np.ndarray:
    fan_in, fan_out = shape[0], shape[-1]
    limit = math.sqrt(6.0 / (fan_in + fan_out))
    return rng.uniform(-limit, limit, size=shape).astype(np.float32)


def _attn_param_names(prefix: str) -> list[str]:
    return [f"{prefix}.{w}" for w in ("wq", "wk", "wv", "wo", "bq", "bk", "bv", "bo")]


class RecoveryModel:
    """Parameter container plus the encode/decode computations."""

    def __init__(self, n_nodes: int, cfg: RecoveryConfig,
                 params: dict[str, Parameter]):
        self.n_nodes = n_nodes
        self.cfg = cfg
        self.params = params

    @property
    def n_classes(self) -> int:
        return self.n_nodes + 1          # road nodes plus the end token

    @property
    def bos(self) -> int:
        return bos_token(self.n_nodes)

    @property
    def eos_class(self) -> int:
        return self.n_nodes

    @classmethod
    def param_shapes(cls, n_nodes: int, cfg: RecoveryConfig) -> dict[str, tuple]:
        d, ff = cfg.dim, cfg.ff_dim
        shapes: dict[str, tuple] = {"node_embed": (table_rows(n_nodes), d)}

        def attn(prefix):
            for w in ("wq", "wk", "wv", "wo"):
                shapes[f"{prefix}.{w}"] = (d, d)
            for b in ("bq", "bk", "bv", "bo"):
                shapes[f"{prefix}.{b}"] = (d,)

        def ln(prefix):
            shapes[f"{prefix}.g"] = (d,)
            shapes[f"{prefix}.b"] = (d,)

        for i in range(cfg.enc_layers):
            attn(f"enc{i}.attn")
            ln(f"enc{i}.ln1")
            shapes[f"enc{i}.ff.w1"] = (d, ff)
            shapes[f"enc{i}.ff.b1"] = (ff,)
            shapes[f"enc{i}.ff.w2"] = (ff, d)
            shapes[f"enc{i}.ff.b2"] = (d,)
            ln(f"enc{i}.ln2")
        ln("enc.final_ln")
        for i in range(cfg.dec_layers):
            attn(f"dec{i}.self")
            ln(f"dec{i}.ln1")
            attn(f"dec{i}.cross")
            ln(f"dec{i}.ln2")
            shapes[f"dec{i}.ff.w1"] = (d, ff)
            shapes[f"dec{i}.ff.b1"] = (ff,)
            shapes[f"dec{i}.ff.w2"] = (ff, d)
            shapes[f"dec{i}.ff.b2"] = (d,)
            ln(f"dec{i}.ln3")
        ln("dec.final_ln")
        # output projection is tied to the node-embedding table; only the
        # per-class bias is a free parameter
        shapes["out.b"] = (n_nodes + 1,)
        if cfg.use_denoiser:
            shapes.update(denoiser_param_shapes(
                DenoiserConfig(in_dim=cfg.dim, hidden=cfg.gcn_hidden,
                               out_dim=cfg.gcn_out, app_dim=cfg.app_dim)))
        return shapes

    @classmethod
    def init(cls, n_nodes: int, cfg: RecoveryConfig, rng: SeededRng,
             node_table: np.ndarray | None = None) -> "RecoveryModel":
        params: dict[str, Parameter] = {}
        for name, shape in cls.param_shapes(n_nodes, cfg).items():
            if name.startswith("denoiser."):
                continue
            if name == "node_embed" and node_table is not None:
                if tuple(node_table.shape) != tuple(shape):
                    raise ValueError("pretrained node table has wrong shape")
                params[name] = Parameter(name, node_table.astype(np.float32).copy())
            elif name.endswith((".g",)):
                params[name] = Parameter(name, np.ones(shape, dtype=np.float32))
            elif name.endswith((".b", ".bq", ".bk", ".bv", ".bo", ".b1", ".b2")):
                params[name] = Parameter(name, np.zeros(shape, dtype=np.float32))
            elif ".cross.w" in name:
                # near-identity start: cross-attention begins as similarity
                # addressing over the tied embeddings and copies what it reads
                eye = np.eye(shape[0], dtype=np.float32)
                params[name] = Parameter(
                    name, eye + 0.1 * _glorot(rng.split(name), shape))
            else:
                params[name] = Parameter(name, _glorot(rng.split(name), shape))
        if cfg.use_denoiser:
            params.update(init_denoiser_params(
                DenoiserConfig(in_dim=cfg.dim, hidden=cfg.gcn_hidden,
                               out_dim=cfg.gcn_out, app_dim=cfg.app_dim),
                rng.split("denoiser")))
        return cls(n_nodes, cfg, params)

    # -- persistence --------------------------------------------------------

    def save(self, path, meta: dict | None = None) -> None:
        meta = dict(meta or {})
        meta["n_nodes"] = self.n_nodes
        meta["model_config"] = {k: getattr(self.cfg, k) for k in vars(self.cfg)}
        nd.save_checkpoint(path, self.params, meta)

    @classmethod
    def load(cls, path) -> tuple["RecoveryModel", dict]:
        arrays, meta = nd.load_checkpoint(path)
        cfg = RecoveryConfig(**meta["model_config"])
        n_nodes = int(meta["n_nodes"])
        expected = cls.param_shapes(n_nodes, cfg)
        arrays, _ = nd.load_checkpoint(path, expected_shapes=expected)
        params = {name: Parameter(name, arr) for name, arr in arrays.items()}
        return cls(n_nodes, cfg, params), meta


# ---------------------------------------------------------------------------
# transformer forward pieces
# ---------------------------------------------------------------------------

def _linear(x: Tensor, w: Parameter, b: Parameter) -> Tensor:
    return nd.add(nd.matmul(x, w), b)


def soft_masked_attention(att: Tensor, scores: Tensor,
                          renormalize: bool = False) -> Tensor:
    """Scale attention columns by per-token denoise scores.

    ``scores`` broadcasts over attention rows (last axis = memory tokens).
    Rows are left unrenormalized by default; the opt-in renormalization
    divides each row by its new mass for ablation runs.
    """
    masked = nd.hadamard(att, scores)
    if renormalize:
        denom = nd.tsum(masked, axis=-1, keepdims=True)
        masked = nd.hadamard(masked, nd.reciprocal(nd.add(denom, nd.constant(1e-9))))
    return masked


def _multi_head(params: dict[str, Parameter], prefix: str, q_in: Tensor,
                kv_in: Tensor, heads: int, bias: np.ndarray | None = None,
                col_scores: Tensor | None = None, renormalize: bool = False) -> Tensor:
    b_sz, t_q, d = q_in.data.shape
    t_k = kv_in.data.shape[1]
    dh = d // heads
    q = _linear(q_in, params[f"{prefix}.wq"], params[f"{prefix}.bq"])
    k = _linear(kv_in, params[f"{prefix}.wk"], params[f"{prefix}.bk"])
    v = _linear(kv_in, params[f"{prefix}.wv"], params[f"{prefix}.bv"])
    q = nd.transpose(nd.reshape(q, (b_sz, t_q, heads, dh)), (0, 2, 1, 3))
    k = nd.transpose(nd.reshape(k, (b_sz, t_k, heads, dh)), (0, 2, 1, 3))
    v = nd.transpose(nd.reshape(v, (b_sz, t_k, heads, dh)), (0, 2, 1, 3))
    logits = nd.scale(nd.matmul(q, nd.transpose(k, (0, 1, 3, 2))), 1.0 / math.sqrt(dh))
    if bias is not None:
        logits = nd.add(logits, nd.constant(bias))
    att = nd.softmax(logits, axis=-1)
    if col_scores is not None:
        att = soft_masked_attention(att, col_scores, renormalize)
    ctx = nd.matmul(att, v)
    ctx = nd.reshape(nd.transpose(ctx, (0, 2, 1, 3)), (b_sz, t_q, d))
    return _linear(ctx, params[f"{prefix}.wo"], params[f"{prefix}.bo"])


def _feed_forward(params, prefix: str, x: Tensor) -> Tensor:
    h = nd.relu(_linear(x, params[f"{prefix}.w1"], params[f"{prefix}.b1"]))
    return _linear(h, params[f"{prefix}.w2"], params[f"{prefix}.b2"])


def _layer_norm(params, prefix: str, x: Tensor) -> Tensor:
    return nd.layer_norm(x, params[f"{prefix}.g"], params[f"{prefix}.b"])


class _Dropout:
    """Seeded inverted dropout applied to residual-branch outputs during
    training only; masks come from one split stream so runs stay
    reproducible."""

    def __init__(self, rng: SeededRng, rate: float):
        self.rng = rng
        self.rate = float(rate)

    def __call__(self, x: Tensor) -> Tensor:
        if self.rate <= 0.0:
            return x
        keep = (self.rng.uniform(size=x.data.shape) >= self.rate)
        mask = keep.astype(np.float32) / (1.0 - self.rate)
        return nd.hadamard(x, nd.constant(mask))


def _pad_bias(pad_mask: np.ndarray) -> np.ndarray:
    """(B, T) boolean pad mask -> (B, 1, 1, T) additive bias."""
    return (pad_mask[:, None, None, :] * NEG_INF).astype(np.float32)


def _causal_bias(t: int) -> np.ndarray:
    bias = np.triu(np.full((t, t), NEG_INF, dtype=np.float32), k=1)
    return bias[None, None, :, :]


def sinusoidal_positions(length: int, dim: int) -> np.ndarray:
    pos = np.arange(length, dtype=np.float64)[:, None]
    i = np.arange(dim, dtype=np.float64)[None, :]
    angles = pos / np.power(10000.0, (2.0 * (i // 2)) / dim)
    enc = np.where(i % 2 == 0, np.sin(angles), np.cos(angles))
    return enc.astype(np.float32)


def embed_tokens(model: RecoveryModel, tokens: np.ndarray, times: np.ndarray) -> Tensor:
    """Token embedding: node-table rows plus the cosine time encoding."""
    b_sz, t = tokens.shape
    emb = nd.embedding_lookup(model.params["node_embed"], tokens.reshape(-1))
    emb = nd.reshape(emb, (b_sz, t, model.cfg.dim))
    te = time_encode_batch(times / model.cfg.time_scale_s, model.cfg.dim)
    return nd.add(emb, nd.constant(te))


def encode(model: RecoveryModel, tokens: np.ndarray, times: np.ndarray,
           pad_mask: np.ndarray, dropout: "_Dropout | None" = None) -> Tensor:
    """Run the encoder stack; PAD positions are masked out of self-attention.

    The encoder adds no positional signal beyond the time encoding inside
    each token embedding, so equal-timestamp tokens commute.
    """
    if tokens.shape[1] == 0:
        raise ValueError("cannot encode an empty sequence")
    if tokens.shape[1] > 3 * model.cfg.max_decode_len:
        raise ValueError("input sequence exceeds the configured maximum length")
    x = embed_tokens(model, tokens, times)
    bias = _pad_bias(pad_mask)
    drop = dropout if dropout is not None else (lambda t: t)
    # pre-LN residual blocks: stable to train without warmup at this scale
    for i in range(model.cfg.enc_layers):
        normed = _layer_norm(model.params, f"enc{i}.ln1", x)
        x = nd.add(x, drop(_multi_head(model.params, f"enc{i}.attn", normed, normed,
                                       model.cfg.heads, bias=bias)))
        normed = _layer_norm(model.params, f"enc{i}.ln2", x)
        x = nd.add(x, drop(_feed_forward(model.params, f"enc{i}.ff", normed)))
    return _layer_norm(model.params, "enc.final_ln", x)


def decode(model: RecoveryModel, memory: Tensor, mem_pad: np.ndarray,
           dec_tokens: np.ndarray, col_scores: Tensor | None = None,
           dropout: "_Dropout | None" = None) -> Tensor:
    """Teacher-forced decoder pass returning logits (B, U, |V|+1).

    Decoder inputs take sinusoidal positional encodings; cross-attention is
    softly masked column-wise by the denoise scores when provided.
    """
    b_sz, t_u = dec_tokens.shape
    emb = nd.embedding_lookup(model.params["node_embed"], dec_tokens.reshape(-1))
    emb = nd.reshape(emb, (b_sz, t_u, model.cfg.dim))
    x = nd.add(emb, nd.constant(sinusoidal_positions(t_u, model.cfg.dim)[None, :, :]))
    causal = _causal_bias(t_u)
    cross_bias = _pad_bias(mem_pad)
    drop = dropout if dropout is not None else (lambda t: t)
    for i in range(model.cfg.dec_layers):
        normed = _layer_norm(model.params, f"dec{i}.ln1", x)
        x = nd.add(x, drop(_multi_head(model.params, f"dec{i}.self", normed, normed,
                                       model.cfg.heads, bias=causal)))
        normed = _layer_norm(model.params, f"dec{i}.ln2", x)
        x = nd.add(x, drop(_multi_head(model.params, f"dec{i}.cross", normed, memory,
                                       model.cfg.heads, bias=cross_bias,
                                       col_scores=col_scores,
                                       renormalize=model.cfg.renormalize_attention)))
        normed = _layer_norm(model.params, f"dec{i}.ln3", x)
        x = nd.add(x, drop(_feed_forward(model.params, f"dec{i}.ff", normed)))
    x = _layer_norm(model.params, "dec.final_ln", x)
    # tied output projection: class c < |V| scores against node row c+1,
    # the end-token class against its own special row
    class_rows = np.concatenate([np.arange(1, model.n_nodes + 1),
                                 [model.n_nodes + 2]]).astype(np.int64)
    weight = nd.take(model.params["node_embed"], class_rows)   # (C, d)
    return nd.add(nd.matmul(x, nd.transpose(weight, (1, 0))), model.params["out.b"])


def generate(model: RecoveryModel, memory: Tensor, mem_pad: np.ndarray,
             col_scores: Tensor | None = None) -> tuple[list[int], bool]:
    """Greedy argmax decoding from BOS until EOS or the length cap.

    Returns (node ids with consecutive duplicates collapsed, truncated flag).
    Only road nodes and the end token are in the output vocabulary, so PAD
    and BOS can never be emitted.
    """
    prefix = [model.bos]
    emitted: list[int] = []
    truncated = True
    for _ in range(model.cfg.max_decode_len):
        dec_tokens = np.asarray([prefix], dtype=np.int64)
        logits = decode(model, memory, mem_pad, dec_tokens, col_scores=col_scores)
        cls = int(np.argmax(logits.data[0, -1]))
        if cls == model.eos_class:
            truncated = False
            break
        node = cls + 1
        emitted.append(node)
        prefix.append(node)
    nodes: list[int] = []
    for n in emitted:
        if not nodes or nodes[-1] != n:
            nodes.append(n)
    return nodes, truncated


# ---------------------------------------------------------------------------
# sample assembly + training
# ---------------------------------------------------------------------------

@dataclass
class TrainSample:
    cluster_id: int
    records: list[Record]
    labels: np.ndarray                  # per record, cluster order
    seq: TokenSequence                  # augmented per config (scores unset)
    norm_weights: np.ndarray
    norm_app: np.ndarray
    high_records: list[Record] | None
    high_weights: np.ndarray | None
    high_app: np.ndarray | None
    dec_in: list[int]
    targets: list[int]


def _graph_tensors(model: RecoveryModel, records: list[Record],
                   weights: np.ndarray, app: np.ndarray) -> GraphTensors:
    tokens = np.asarray([r.node for r in records], dtype=np.int64)
    times = np.asarray([r.t for r in records], dtype=np.float64)
    # the denoiser reads token embeddings as constants: its loss must not
    # pull the generator's shared table toward score-discriminative shapes
    emb = nd.constant(model.params["node_embed"].data[tokens])
    te = time_encode_batch(times / model.cfg.time_scale_s, model.cfg.dim)
    x = nd.add(emb, nd.constant(te))
    return GraphTensors(x=x, adj_norm=normalized_adjacency(weights), app=app)


def build_train_samples(labeled, normal_clusters: list[Cluster],
                        high_clusters: list[Cluster], records_by_id: dict[int, Record],
                        tracklets_by_record: dict[int, Tracklet], net: RoadNetwork,
                        cfg: RecoveryConfig, min_cluster_size: int = 4) -> list[TrainSample]:
    """Assemble per-cluster training samples; clusters that are too small to
    recover (three records or fewer by default) are skipped."""
    by_id = {c.cluster_id: c for c in normal_clusters}
    samples: list[TrainSample] = []
    for lc in labeled:
        cluster_obj = by_id.get(lc.cluster_id)
        if cluster_obj is None or len(lc.record_ids) < min_cluster_size:
            continue
        records = [records_by_id[rid] for rid in lc.record_ids]
        labels = np.asarray(lc.labels, dtype=np.float32)

        seq = build_token_sequence(records)
        # scores are in cluster order == chronological order; keep the
        # sequence aligned with the label vector via source_index
        if cfg.use_tracklets:
            seq = augment_with_tracklets(seq, records, tracklets_by_record, net,
                                         cfg.bearing_margin_deg)
        cap = 3 * cfg.max_decode_len
        if len(seq.tokens) > cap:
            seq = TokenSequence(tokens=seq.tokens[:cap], times=seq.times[:cap],
                                provenance=seq.provenance[:cap],
                                source_index=seq.source_index[:cap])

        norm_graph = None
        high_graph = None
        high = None
        if cfg.use_denoiser:
            norm_graph = build_cluster_graph(cluster_obj, records_by_id)
            high = match_fine_to_coarse(cluster_obj, high_clusters)
            if high is not None:
                high_graph = build_cluster_graph(high, records_by_id)

        gt_nodes = lc.gt_trajectory.nodes
        n_nodes = net.n_nodes
        dec_in = [bos_token(n_nodes)] + list(gt_nodes)
        targets = [n - 1 for n in gt_nodes] + [n_nodes]
        if len(dec_in) > cfg.max_decode_len:
            dec_in = dec_in[:cfg.max_decode_len]
            targets = targets[:cfg.max_decode_len]

        samples.append(TrainSample(
            cluster_id=lc.cluster_id, records=records, labels=labels, seq=seq,
            norm_weights=norm_graph.weights if norm_graph is not None else None,
            norm_app=norm_graph.app_features if norm_graph is not None else None,
            high_records=[records_by_id[r] for r in high.record_ids] if high else None,
            high_weights=high_graph.weights if high_graph is not None else None,
            high_app=high_graph.app_features if high_graph is not None else None,
            dec_in=dec_in, targets=targets))
    return samples


def _batch_arrays(samples: list[TrainSample], n_nodes: int):
    t_max = max(len(s.seq.tokens) for s in samples)
    u_max = max(len(s.dec_in) for s in samples)
    b = len(samples)
    tokens = np.full((b, t_max), PAD_TOKEN, dtype=np.int64)
    times = np.zeros((b, t_max), dtype=np.float64)
    pad = np.ones((b, t_max), dtype=bool)
    dec = np.full((b, u_max), PAD_TOKEN, dtype=np.int64)
    tgt = np.full((b, u_max), -1, dtype=np.int64)
    for i, s in enumerate(samples):
        m = len(s.seq.tokens)
        tokens[i, :m] = s.seq.tokens
        times[i, :m] = s.seq.times
        pad[i, :m] = False
        u = len(s.dec_in)
        dec[i, :u] = s.dec_in
        tgt[i, :u] = s.targets
    return tokens, times, pad, dec, tgt, t_max


def _batch_scores(model: RecoveryModel, batch: list[TrainSample], t_max: int):
    """Run the denoiser per sample and assemble the (B,1,1,T) score tensor.

    Returns (score tensor, flat score tensor, flat labels) so the loss can
    reuse the exact same graph outputs.
    """
    rows = []
    flat_logits = []
    flat_labels = []
    for s in batch:
        norm_gt = _graph_tensors(model, s.records, s.norm_weights, s.norm_app)
        high_gt = None
        if s.high_records:
            high_gt = _graph_tensors(model, s.high_records, s.high_weights, s.high_app)
        result = denoise_scores(norm_gt, high_gt, model.params)   # per record
        flat_logits.append(result.logits)
        flat_labels.append(s.labels)
        tok_scores = nd.take(result.scores,
                             np.asarray(s.seq.source_index, dtype=np.int64))
        deficit = t_max - len(s.seq.tokens)
        if deficit > 0:
            tok_scores = nd.concat(
                [tok_scores, nd.constant(np.zeros(deficit, dtype=np.float32))])
        rows.append(nd.reshape(tok_scores, (1, t_max)))
    stacked = nd.concat(rows, axis=0)                             # (B, T)
    col = nd.reshape(stacked, (len(batch), 1, 1, t_max))
    return col, nd.concat(flat_logits), np.concatenate(flat_labels)


def train(train_samples: list[TrainSample], net: RoadNetwork, cfg: RecoveryConfig,
          tcfg: TrainConfig, seed: int, node_table: np.ndarray | None = None,
          val_samples: list[TrainSample] | None = None):
    """Co-train the generator and denoiser; returns (model, loss curve rows).

    Deterministic per seed: parameter init, batch bucketing, and epoch
    shuffling all derive from split RNG streams.
    """
    if not train_samples:
        raise ValueError("empty training set")
    rng = seeded_rng(seed).split("train")
    model = RecoveryModel.init(net.n_nodes, cfg, rng.split("params"), node_table)
    if not tcfg.train_embeddings:
        table = model.params["node_embed"]
        table.trainable = False
        table.requires_grad = False
    opt = nd.Adam([p for p in model.params.values() if p.trainable],
                  lr=tcfg.lr, beta1=tcfg.beta1, beta2=tcfg.beta2, eps=tcfg.eps)
    drop_stream = rng.split("dropout")

    # bucket by token length so batches stay dense
    ordered = sorted(train_samples, key=lambda s: (len(s.seq.tokens), s.cluster_id))
    batches = [ordered[i:i + tcfg.batch_size]
               for i in range(0, len(ordered), tcfg.batch_size)]
    curve = []
    for epoch in range(tcfg.epochs):
        if tcfg.lr_decay == "cosine":
            frac = epoch / max(1, tcfg.epochs)
            opt.lr = tcfg.lr * (0.1 + 0.9 * 0.5 * (1 + math.cos(math.pi * frac)))
        order = rng.split(f"epoch{epoch}").permutation(len(batches))
        gen_total = de_total = 0.0
        n_batches = 0
        for bi in order:
            batch = batches[int(bi)]
            dropout = _Dropout(drop_stream, tcfg.dropout) if tcfg.dropout > 0 else None
            loss, gen_loss, de_loss = _batch_loss(model, batch, tcfg,
                                                  with_denoiser=cfg.use_denoiser,
                                                  dropout=dropout)
            opt.zero_grad()
            nd.backward(loss)
            opt.step()
            gen_total += gen_loss
            de_total += de_loss
            n_batches += 1
        row = {"epoch": epoch, "train_gen": gen_total / n_batches,
               "train_de": de_total / n_batches,
               "train_total": (gen_total + tcfg.lambda_denoise * de_total) / n_batches}
        if val_samples:
            val_gen = val_de = 0.0
            val_batches = [val_samples[i:i + tcfg.batch_size]
                           for i in range(0, len(val_samples), tcfg.batch_size)]
            for vb in val_batches:
                _, g, dl = _batch_loss(model, vb, tcfg, with_denoiser=cfg.use_denoiser)
                val_gen += g
                val_de += dl
            row["val_gen"] = val_gen / len(val_batches)
            row["val_de"] = val_de / len(val_batches)
        curve.append(row)
    return model, curve


def _batch_loss(model: RecoveryModel, batch: list[TrainSample], tcfg: TrainConfig,
                with_denoiser: bool, dropout: "_Dropout | None" = None):
    tokens, times, pad, dec, tgt, t_max = _batch_arrays(batch, model.n_nodes)
    col_scores = None
    de_loss_t = None
    if with_denoiser:
        col_scores, flat_logits, flat_labels = _batch_scores(model, batch, t_max)
        de_loss_t = nd.bce_with_logits(flat_logits, flat_labels)
    memory = encode(model, tokens, times, pad, dropout=dropout)
    logits = decode(model, memory, pad, dec, col_scores=col_scores, dropout=dropout)
    flat = nd.reshape(logits, (logits.data.shape[0] * logits.data.shape[1],
                               model.n_classes))
    gen_loss_t = nd.cross_entropy(flat, tgt.reshape(-1), ignore_index=-1)
    if de_loss_t is not None and tcfg.lambda_denoise != 0.0:
        loss = nd.add(gen_loss_t, nd.scale(de_loss_t, tcfg.lambda_denoise))
    else:
        loss = gen_loss_t
    return loss, float(gen_loss_t.data), float(de_loss_t.data) if de_loss_t is not None else 0.0


# ---------------------------------------------------------------------------
# inference
# ---------------------------------------------------------------------------

def recover(records: list[Record], tracklets_by_record: dict[int, Tracklet],
            net: RoadNetwork, model: RecoveryModel,
            high_clusters: list[Cluster] | None = None,
            high_threshold: float = 0.9, cluster_id: int | None = None,
            all_records_by_id: dict[int, Record] | None = None) -> RecoveredPath:
    """Full inference for one cluster: graphs -> scores -> augment -> encode
    -> generate.

    When no global high-threshold clustering is supplied, the cluster's own
    records are re-clustered at ``high_threshold`` to pick the anchor; with a
    global clustering, ``all_records_by_id`` lets the anchor graph cover the
    matched high cluster in full.
    """
    if len(records) <= 3:
        raise ValueError("recovery needs more than three records")
    records = sorted(records, key=lambda r: (r.t, r.record_id))
    records_by_id = {r.record_id: r for r in records}
    seq = build_token_sequence(records)

    scores_list: list[float] | None = None
    col_scores = None
    if model.cfg.use_denoiser:
        pseudo = Cluster(cluster_id=cluster_id or 0,
                         record_ids=[r.record_id for r in records],
                         centroid=np.zeros(1, dtype=np.float32), threshold=0.0)
        norm_graph = build_cluster_graph(pseudo, records_by_id)
        if high_clusters is None:
            high_clusters = run_clustering(records, high_threshold)
        high = match_fine_to_coarse(pseudo, high_clusters)
        norm_gt = _graph_tensors(model, records, norm_graph.weights,
                                 norm_graph.app_features)
        high_gt = None
        if high is not None:
            lookup = all_records_by_id or records_by_id
            high_ids = [rid for rid in high.record_ids if rid in lookup]
            anchor_cluster = Cluster(cluster_id=high.cluster_id, record_ids=high_ids,
                                     centroid=high.centroid, threshold=high.threshold)
            hg = build_cluster_graph(anchor_cluster, lookup)
            high_recs = [lookup[rid] for rid in high_ids]
            high_gt = _graph_tensors(model, high_recs, hg.weights, hg.app_features)
        scores_t = denoise_scores(norm_gt, high_gt, model.params)
        scores_list = scores_t.values
        seq.scores = list(scores_list)

    if model.cfg.use_tracklets:
        seq = augment_with_tracklets(seq, records, tracklets_by_record, net,
                                     model.cfg.bearing_margin_deg)

    tokens = np.asarray([seq.tokens], dtype=np.int64)
    times = np.asarray([seq.times], dtype=np.float64)
    pad = np.zeros_like(tokens, dtype=bool)
    if model.cfg.use_denoiser:
        token_scores = np.asarray(seq.scores, dtype=np.float32)
        col_scores = nd.constant(token_scores[None, None, None, :])
    memory = encode(model, tokens, times, pad)
    nodes, truncated = generate(model, memory, pad, col_scores=col_scores)
    violations = sum(1 for u, v in zip(nodes, nodes[1:]) if not net.has_edge(u, v))
    return RecoveredPath(nodes=nodes, scores=scores_list, truncated=truncated,
                         adjacency_violations=violations, cluster_id=cluster_id)


def recovered_to_path(net: RoadNetwork, rec: RecoveredPath) -> NodePath:
    """NodePath view of a recovered node sequence; length covers adjacent hops."""
    total = 0.0
    for u, v in zip(rec.nodes, rec.nodes[1:]):
        if net.has_edge(u, v):
            total += net.edge_length(u, v)
    return NodePath(nodes=list(rec.nodes), total_length=total)
