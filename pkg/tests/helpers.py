"""Shared test machinery: finite-difference gradient checks, the
4-way-intersection geometry rig, and the noisy benchmark driver used by the
acceptance suite."""

import numpy as np

from snaptraj import ndcore as nd
from snaptraj.baselines import dhm_filter, hmm_recover, sp_recover, sp_tklet_recover
from snaptraj.clusterer import cluster as run_clustering
from snaptraj.config import noisy_benchmark_config
from snaptraj.embeddings import Node2VecConfig, pretrain_node2vec
from snaptraj.evalkit import clustering_feedback, node_set_metrics
from snaptraj.ndcore import Tensor
from snaptraj.pipeline import _model_scores, _vehicle_config, recovery_config
from snaptraj.recovery import (TrainConfig, build_train_samples, recover, train)
from snaptraj.roadnet import GeoPoint, build_network
from snaptraj.synthgen import (Tracklet, build_majority_labels,
                               generate_network, place_cameras,
                               simulate_vehicles)


# ---------------------------------------------------------------------------
# finite differences
# ---------------------------------------------------------------------------

def fd_gradient(f, x: np.ndarray, h: float = 1e-3) -> np.ndarray:
    grad = np.zeros_like(x)
    flat = x.ravel()
    gflat = grad.ravel()
    for i in range(flat.size):
        orig = flat[i]
        flat[i] = orig + h
        hi = f(x)
        flat[i] = orig - h
        lo = f(x)
        flat[i] = orig
        gflat[i] = (hi - lo) / (2 * h)
    return grad


def check_op(build, shapes, seed, rel_tol=1e-4):
    """Autodiff vs central differences for every input slot (float64)."""
    rng = np.random.default_rng(seed)
    arrays = [rng.normal(size=shape) * 0.7 for shape in shapes]
    tensors = [Tensor(a.copy(), requires_grad=True, dtype=np.float64) for a in arrays]
    loss = build(tensors)
    nd.backward(loss)
    for slot, (arr, tensor) in enumerate(zip(arrays, tensors)):
        def f(x, slot=slot):
            inputs = [Tensor(a, dtype=np.float64) for a in arrays]
            inputs[slot] = Tensor(x, dtype=np.float64)
            return float(build(inputs).data)
        numeric = fd_gradient(f, arr.copy())
        analytic = tensor.grad
        denom = max(1.0, np.abs(numeric).max(), np.abs(analytic).max())
        assert np.abs(analytic - numeric).max() / denom < rel_tol, \
            f"slot {slot}: max abs diff {np.abs(analytic - numeric).max()}"


# ---------------------------------------------------------------------------
# 4-way intersection geometry rig
# ---------------------------------------------------------------------------

DIRECTIONS = {"N": (1, 0), "E": (0, 1), "S": (-1, 0), "W": (0, -1)}
NEIGHBOR_OF = {"N": 2, "E": 3, "S": 4, "W": 5}


def cross_net():
    """4-way cross: 1 center, 2 north, 3 east, 4 south, 5 west."""
    step = 0.0045
    nodes = {1: GeoPoint(30.0, 120.0),
             2: GeoPoint(30.0 + step, 120.0),
             3: GeoPoint(30.0, 120.0 + step),
             4: GeoPoint(30.0 - step, 120.0),
             5: GeoPoint(30.0, 120.0 - step)}
    return build_network(nodes, [(1, 2, None), (1, 3, None), (1, 4, None), (1, 5, None)])


def tracklet_through(entry: str, exit_: str, record_id=1, rotate_exit_deg=0.0) -> Tracklet:
    """Tracklet passing the center, entering FROM ``entry`` toward ``exit_``."""
    import math
    din = DIRECTIONS[entry]
    dout = DIRECTIONS[exit_]
    if rotate_exit_deg:
        ang = math.radians(rotate_exit_deg)
        dout = (dout[0] * math.cos(ang) - dout[1] * math.sin(ang),
                dout[0] * math.sin(ang) + dout[1] * math.cos(ang))
    pts = []
    t = 0.0
    for dist in (0.001, 0.0005):
        pts.append((GeoPoint(30.0 + din[0] * dist, 120.0 + din[1] * dist), t))
        t += 1.0
    pts.append((GeoPoint(30.0, 120.0), t))
    t += 1.0
    for dist in (0.0005, 0.001):
        pts.append((GeoPoint(30.0 + dout[0] * dist, 120.0 + dout[1] * dist), t))
        t += 1.0
    return Tracklet(record_id=record_id, points=pts)


# ---------------------------------------------------------------------------
# ROC-AUC (rank statistic)
# ---------------------------------------------------------------------------

def roc_auc(scores, labels) -> float:
    scores = np.asarray(scores, dtype=np.float64)
    labels = np.asarray(labels)
    pos = scores[labels == 1]
    neg = scores[labels == 0]
    if len(pos) == 0 or len(neg) == 0:
        raise ValueError("AUC needs both classes")
    order = np.argsort(np.concatenate([pos, neg]), kind="mergesort")
    ranks = np.empty(len(order), dtype=np.float64)
    ranks[order] = np.arange(1, len(order) + 1)
    # average tied ranks
    combined = np.concatenate([pos, neg])
    sorted_vals = combined[order]
    i = 0
    while i < len(sorted_vals):
        j = i
        while j + 1 < len(sorted_vals) and sorted_vals[j + 1] == sorted_vals[i]:
            j += 1
        if j > i:
            ranks[order[i:j + 1]] = (i + 1 + j + 1) / 2.0
        i = j + 1
    rank_sum = ranks[:len(pos)].sum()
    return (rank_sum - len(pos) * (len(pos) + 1) / 2.0) / (len(pos) * len(neg))


# ---------------------------------------------------------------------------
# noisy benchmark driver
# ---------------------------------------------------------------------------

def run_noisy_benchmark(seed: int, epochs: int = 70, lr: float = 2e-3,
                        dropout: float = 0.25, holdout_fraction: float = 0.2,
                        n2v_epochs: int = 5):
    """Build the noisy world, co-train the three model variants, and collect
    every statistic the acceptance criteria assert on."""
    cfg = noisy_benchmark_config(seed)
    cfg.training.epochs = epochs
    cfg.training.lr = lr
    cfg.training.holdout_fraction = holdout_fraction
    cfg.embedding.epochs = n2v_epochs

    net = generate_network(cfg.network.rows, cfg.network.cols,
                           cfg.network.spacing_m, cfg.network.jitter, seed=seed)
    cameras = place_cameras(net, cfg.cameras.coverage, seed=seed)
    trajectories, records, tracklets = simulate_vehicles(
        net, cameras, _vehicle_config(cfg), seed=seed)
    normal = run_clustering(records, cfg.clustering.normal_threshold)
    high = run_clustering(records, cfg.clustering.high_threshold)
    by_id = {r.record_id: r for r in records}
    tklets = {t.record_id: t for t in tracklets}

    n_fp = n_tot = 0
    for c in normal:
        vs = [by_id[r].gt_vehicle for r in c.record_ids]
        majority = max(set(vs), key=vs.count)
        n_fp += sum(1 for v in vs if v != majority)
        n_tot += len(vs)
    fp_rate = n_fp / n_tot

    labeled = build_majority_labels(normal, by_id, trajectories, net)
    usable = sorted((lc for lc in labeled if len(lc.record_ids) >= 4),
                    key=lambda lc: lc.cluster_id)
    rng = nd.seeded_rng(seed).split("holdout")
    perm = rng.permutation(len(usable))
    n_hold = int(round(len(usable) * holdout_fraction))
    hold_idx = set(int(i) for i in perm[:n_hold])
    train_lc = [usable[i] for i in range(len(usable)) if i not in hold_idx]
    hold_lc = [usable[i] for i in range(len(usable)) if i in hold_idx]

    e = cfg.embedding
    table = pretrain_node2vec(net, Node2VecConfig(
        dim=e.dim, walks_per_node=e.walks_per_node, walk_length=e.walk_length,
        window=e.window, negatives=e.negatives, epochs=e.epochs, lr=e.lr,
        time_scale_s=e.time_scale_s), seed=seed)

    tcfg = TrainConfig(epochs=epochs, batch_size=cfg.training.batch_size, lr=lr,
                       dropout=dropout, lambda_denoise=cfg.training.lambda_denoise)
    variants = {}
    base = recovery_config(cfg)
    for name, tracklets_on, denoiser_on in (("full", True, True),
                                            ("no_tracklet", False, True),
                                            ("no_denoiser", True, False)):
        rcfg = type(base)(**{**vars(base), "use_tracklets": tracklets_on,
                             "use_denoiser": denoiser_on})
        samples = build_train_samples(train_lc, normal, high, by_id, tklets,
                                      net, rcfg)
        model, curve = train(samples, net, rcfg, tcfg, seed=seed, node_table=table)
        variants[name] = {"model": model, "curve": curve}

    gt = {lc.cluster_id: lc.gt_trajectory.nodes for lc in hold_lc}
    model_metrics = {}
    model_paths = {}
    for name, entry in variants.items():
        per = []
        paths = {}
        for lc in hold_lc:
            recs = [by_id[r] for r in lc.record_ids]
            result = recover(recs, tklets, net, entry["model"],
                             high_clusters=high, cluster_id=lc.cluster_id,
                             all_records_by_id=by_id)
            paths[lc.cluster_id] = result.nodes
            per.append(node_set_metrics(result.nodes, gt[lc.cluster_id]))
        model_metrics[name] = tuple(np.mean([m[k] for m in per]) for k in range(3))
        model_paths[name] = paths

    full_model = variants["full"]["model"]
    baseline_metrics = {}
    for method in ("sp", "sp+tklet", "sp+dhm"):
        per = []
        for lc in hold_lc:
            recs = sorted((by_id[r] for r in lc.record_ids),
                          key=lambda r: (r.t, r.record_id))
            if method == "sp":
                nodes = sp_recover(recs, net).nodes
            elif method == "sp+tklet":
                nodes = sp_tklet_recover(recs, tklets, net).nodes
            else:
                scores = _model_scores(full_model, recs, high, by_id)
                kept = dhm_filter(recs, scores) or \
                    [recs[int(np.argmax(scores))]]
                nodes = sp_recover(kept, net).nodes
            per.append(node_set_metrics(nodes, gt[lc.cluster_id]))
        baseline_metrics[method] = tuple(np.mean([m[k] for m in per])
                                         for k in range(3))

    all_scores, all_labels = [], []
    for lc in hold_lc:
        recs = sorted((by_id[r] for r in lc.record_ids),
                      key=lambda r: (r.t, r.record_id))
        scores = _model_scores(full_model, recs, high, by_id)
        order = {r.record_id: s for r, s in zip(recs, scores)}
        all_scores.extend(order[rid] for rid in lc.record_ids)
        all_labels.extend(lc.labels)
    auc = roc_auc(all_scores, all_labels) if 0 in all_labels else None

    clusters = [(lc.cluster_id, list(lc.record_ids)) for lc in hold_lc]
    _, before, after = clustering_feedback(clusters, model_paths["full"], by_id)

    dhm_paths = {}
    for lc in hold_lc:
        recs = sorted((by_id[r] for r in lc.record_ids),
                      key=lambda r: (r.t, r.record_id))
        scores = _model_scores(full_model, recs, high, by_id)
        kept = dhm_filter(recs, scores) or [recs[int(np.argmax(scores))]]
        dhm_paths[lc.cluster_id] = sp_recover(kept, net).nodes
    _, before_dhm, after_dhm = clustering_feedback(clusters, dhm_paths, by_id)

    return {
        "cfg": cfg, "net": net, "records": records, "by_id": by_id,
        "high": high, "tklets": tklets,
        "hold_lc": hold_lc, "n_train": len(train_lc), "fp_rate": fp_rate,
        "variants": variants, "model_metrics": model_metrics,
        "baseline_metrics": baseline_metrics, "auc": auc,
        "feedback_before": before, "feedback_after": after,
        "feedback_dhm_before": before_dhm, "feedback_dhm_after": after_dhm,
    }
