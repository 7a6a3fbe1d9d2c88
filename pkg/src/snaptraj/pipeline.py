"""Pipeline stages behind the CLI: each stage reads and writes only the
documented run-directory files, so stages can be re-run or driven directly
from tests.

Every run directory holds a config snapshot and a manifest recording the
config hash, seed, tool version, and a digest per emitted file.  Artifacts
themselves are timestamp-free, so identical configs reproduce identical
bytes.
"""

from __future__ import annotations

import hashlib
import json
from pathlib import Path

import numpy as np

from . import __version__
from .baselines import HmmConfig, dhm_filter, hmm_recover, sp_recover, sp_tklet_recover
from .clusterer import (Cluster, cluster as run_clustering,
                        cluster_graphs_to_json, match_fine_to_coarse)
from .config import RunConfig
from .denoiser import denoise_scores
from .embeddings import Node2VecConfig, pretrain_node2vec
from .evalkit import evaluate, node_set_metrics, speed_map, clustering_feedback
from .ndcore import seeded_rng
from .recovery import (RecoveryConfig, RecoveryModel, TrainConfig,
                       build_train_samples, recover, train, _graph_tensors)
from .report import (format_metrics_grid, plot_feedback, plot_loss_curves,
                     plot_metrics_grid, plot_speed_map, speed_geojson,
                     trajectories_geojson, write_geojson, write_loss_curve_csv,
                     write_metrics_grid)
from .synthgen import (Dataset, VehicleConfig, build_majority_labels,
                       build_scheme1, build_scheme2, emit_dataset,
                       generate_network, load_dataset, place_cameras,
                       simulate_vehicles)

RECOVER_METHODS = ("sp", "sp+tklet", "hmm", "model", "model-dhm", "hmm+dhm")


def _meta(cfg: RunConfig) -> dict:
    return {"config_hash": cfg.config_hash(), "seed": cfg.seed, "version": __version__}


def _sha256(path: Path) -> str:
    return hashlib.sha256(path.read_bytes()).hexdigest()


def update_manifest(run_dir: Path, cfg: RunConfig, stage: str, files: list[str]) -> None:
    manifest_path = run_dir / "manifest.json"
    manifest = json.loads(manifest_path.read_text(encoding="utf-8")) \
        if manifest_path.exists() else {"stages": {}}
    manifest.update(_meta(cfg))
    manifest["stages"][stage] = {name: _sha256(run_dir / name) for name in sorted(files)}
    manifest_path.write_text(json.dumps(manifest, sort_keys=True, indent=1),
                             encoding="utf-8")


def write_config_snapshot(cfg: RunConfig, run_dir: Path) -> None:
    doc = {"meta": _meta(cfg), "config": cfg.to_dict()}
    (run_dir / "config.json").write_text(json.dumps(doc, sort_keys=True, indent=1),
                                         encoding="utf-8")


def load_config_snapshot(run_dir: Path) -> RunConfig:
    doc = json.loads((run_dir / "config.json").read_text(encoding="utf-8"))
    return RunConfig.from_dict(doc["config"])


def _vehicle_config(cfg: RunConfig) -> VehicleConfig:
    v = cfg.vehicles
    return VehicleConfig(
        n_vehicles=v.n_vehicles, speed_min_mps=v.speed_min_mps,
        speed_max_mps=v.speed_max_mps, twin_probability=v.twin_probability,
        twin_perturbation=v.twin_perturbation,
        twin_proximity_hops=v.twin_proximity_hops,
        twin_time_spread_s=v.twin_time_spread_s,
        plate_capture_probability=v.plate_capture_probability,
        plate_block_probability=v.plate_block_probability,
        feature_noise=v.feature_noise, feature_dim=v.feature_dim,
        plate_feature_dim=v.plate_feature_dim, route_mode=v.route_mode,
        walk_min_len=v.walk_min_len, walk_max_len=v.walk_max_len,
        start_window_s=v.start_window_s, tracklet_radius_m=v.tracklet_radius_m)


def recovery_config(cfg: RunConfig) -> RecoveryConfig:
    m = cfg.model
    return RecoveryConfig(
        enc_layers=m.enc_layers, dec_layers=m.dec_layers, heads=m.heads,
        dim=m.dim, ff_dim=m.ff_dim, max_decode_len=m.max_decode_len,
        gcn_hidden=m.gcn_hidden, gcn_out=m.gcn_out,
        app_dim=cfg.vehicles.feature_dim,
        use_tracklets=m.use_tracklets, use_denoiser=m.use_denoiser,
        renormalize_attention=m.renormalize_attention,
        bearing_margin_deg=m.bearing_margin_deg,
        time_scale_s=cfg.embedding.time_scale_s)


# ---------------------------------------------------------------------------
# stages
# ---------------------------------------------------------------------------

def stage_gen(cfg: RunConfig, run_dir: Path) -> Dataset:
    """Generate the synthetic world and write the dataset files."""
    run_dir.mkdir(parents=True, exist_ok=True)
    net = generate_network(cfg.network.rows, cfg.network.cols,
                           cfg.network.spacing_m, cfg.network.jitter,
                           seed=cfg.seed, origin_lat=cfg.network.origin_lat,
                           origin_lon=cfg.network.origin_lon)
    cameras = place_cameras(net, cfg.cameras.coverage, seed=cfg.seed)
    trajectories, records, tracklets = simulate_vehicles(
        net, cameras, _vehicle_config(cfg), seed=cfg.seed)
    ds = Dataset(net=net, cameras=cameras, trajectories=trajectories,
                 records=records, tracklets=tracklets)
    files = emit_dataset(ds, run_dir)
    write_config_snapshot(cfg, run_dir)
    update_manifest(run_dir, cfg, "gen", files)
    return ds


def stage_cluster(cfg: RunConfig, run_dir: Path) -> Dataset:
    """Cluster records at both thresholds and build the labeled clusters."""
    ds = load_dataset(run_dir, with_clusters=False)
    records = sorted(ds.records, key=lambda r: (r.t, r.record_id))
    normal = run_clustering(records, cfg.clustering.normal_threshold)
    high = run_clustering(records, cfg.clustering.high_threshold)
    ds.clusters = normal + high

    by_id = ds.records_by_id
    if cfg.labeling.scheme == "scheme1":
        labeled = build_scheme1(normal, by_id, ds.net,
                                noise_quantile=cfg.labeling.noise_quantile)
    elif cfg.labeling.scheme == "majority":
        labeled = build_majority_labels(normal, by_id, ds.trajectories, ds.net)
    elif cfg.labeling.scheme == "scheme2":
        walks = [tr.nodes for tr in ds.trajectories] \
            if cfg.labeling.walks_from_vehicles else None
        labeled = build_scheme2(ds.net, normal, by_id, walks=walks,
                                match_fraction=cfg.labeling.match_fraction,
                                n_walks=cfg.labeling.n_walks,
                                walk_min_len=cfg.labeling.walk_min_len,
                                walk_max_len=cfg.labeling.walk_max_len,
                                seed=cfg.seed)
    else:
        raise ValueError(f"unknown labeling scheme {cfg.labeling.scheme!r}")
    ds.labeled = labeled
    files = emit_dataset(ds, run_dir)
    dump = cluster_graphs_to_json(normal, by_id,
                                  min_records=cfg.clustering.min_cluster_size)
    (run_dir / "cluster_graphs.json").write_text(json.dumps(dump),
                                                 encoding="utf-8")
    files.append("cluster_graphs.json")
    update_manifest(run_dir, cfg, "cluster", files)
    return ds


def split_clusters(ds: Dataset, cfg: RunConfig):
    """Deterministic train/holdout split of the labeled clusters."""
    usable = [lc for lc in ds.labeled
              if len(lc.record_ids) >= cfg.clustering.min_cluster_size]
    order = sorted(usable, key=lambda lc: lc.cluster_id)
    rng = seeded_rng(cfg.seed).split("holdout")
    perm = rng.permutation(len(order))
    n_hold = int(round(len(order) * cfg.training.holdout_fraction))
    hold_idx = set(int(i) for i in perm[:n_hold])
    train_set = [order[i] for i in range(len(order)) if i not in hold_idx]
    hold_set = [order[i] for i in range(len(order)) if i in hold_idx]
    return train_set, hold_set


def _split_thresholds(ds: Dataset, cfg: RunConfig):
    normal = [c for c in ds.clusters if c.threshold == cfg.clustering.normal_threshold]
    high = [c for c in ds.clusters if c.threshold == cfg.clustering.high_threshold]
    return normal, high


def stage_train(cfg: RunConfig, run_dir: Path,
                node_table: np.ndarray | None = None) -> RecoveryModel:
    """Pretrain node embeddings, co-train the model, write the checkpoint."""
    ds = load_dataset(run_dir)
    normal, high = _split_thresholds(ds, cfg)
    train_lc, hold_lc = split_clusters(ds, cfg)
    if not train_lc:
        raise ValueError("no usable labeled clusters to train on")

    if node_table is None:
        e = cfg.embedding
        node_table = pretrain_node2vec(
            ds.net, Node2VecConfig(dim=e.dim, walks_per_node=e.walks_per_node,
                                   walk_length=e.walk_length, window=e.window,
                                   negatives=e.negatives, epochs=e.epochs,
                                   lr=e.lr, time_scale_s=e.time_scale_s),
            seed=cfg.seed)

    rcfg = recovery_config(cfg)
    by_id = ds.records_by_id
    tklets = ds.tracklets_by_record
    samples = build_train_samples(train_lc, normal, high, by_id, tklets, ds.net,
                                  rcfg, cfg.clustering.min_cluster_size)
    val_samples = build_train_samples(hold_lc, normal, high, by_id, tklets, ds.net,
                                      rcfg, cfg.clustering.min_cluster_size)
    t = cfg.training
    model, curve = train(samples, ds.net, rcfg,
                         TrainConfig(epochs=t.epochs, batch_size=t.batch_size,
                                     lr=t.lr, lr_decay=t.lr_decay, beta1=t.beta1,
                                     beta2=t.beta2, eps=t.eps,
                                     lambda_denoise=t.lambda_denoise,
                                     dropout=t.dropout,
                                     train_embeddings=t.train_embeddings),
                         seed=cfg.seed, node_table=node_table,
                         val_samples=val_samples or None)

    meta = _meta(cfg)
    meta["holdout_cluster_ids"] = sorted(lc.cluster_id for lc in hold_lc)
    model.save(run_dir / "checkpoint.json", meta)
    write_loss_curve_csv(curve, run_dir / "loss_curve.csv")
    plot_loss_curves(curve, run_dir / "loss_curve.png")
    update_manifest(run_dir, cfg, "train",
                    ["checkpoint.json", "loss_curve.csv", "loss_curve.png"])
    return model


def _model_scores(model: RecoveryModel, records, high_clusters, records_by_id):
    """Denoise scores for one cluster's records under a trained model."""
    from .clusterer import build_cluster_graph
    pseudo = Cluster(cluster_id=0, record_ids=[r.record_id for r in records],
                     centroid=np.zeros(1, dtype=np.float32), threshold=0.0)
    graph = build_cluster_graph(pseudo, records_by_id)
    high = match_fine_to_coarse(pseudo, high_clusters)
    norm_gt = _graph_tensors(model, records, graph.weights, graph.app_features)
    high_gt = None
    if high is not None:
        anchor = Cluster(cluster_id=high.cluster_id,
                         record_ids=list(high.record_ids),
                         centroid=high.centroid, threshold=high.threshold)
        hg = build_cluster_graph(anchor, records_by_id)
        high_gt = _graph_tensors(model, [records_by_id[r] for r in high.record_ids],
                                 hg.weights, hg.app_features)
    scores = denoise_scores(norm_gt, high_gt, model.params)
    return scores.values


def stage_recover(cfg: RunConfig, run_dir: Path, method: str) -> list[dict]:
    """Recover a trajectory per labeled cluster with the selected method."""
    if method not in RECOVER_METHODS:
        raise ValueError(f"unknown method {method!r}; choose from {RECOVER_METHODS}")
    ds = load_dataset(run_dir)
    normal, high = _split_thresholds(ds, cfg)
    by_id = ds.records_by_id
    tklets = ds.tracklets_by_record
    usable = [lc for lc in ds.labeled
              if len(lc.record_ids) >= cfg.clustering.min_cluster_size]

    model = None
    if method in ("model", "model-dhm", "hmm+dhm"):
        model, _ = RecoveryModel.load(run_dir / "checkpoint.json")

    hmm_cfg = HmmConfig(candidate_radius_m=cfg.hmm.candidate_radius_m,
                        emission_sigma_m=cfg.hmm.emission_sigma_m,
                        detour_beta=cfg.hmm.detour_beta,
                        max_candidates=cfg.hmm.max_candidates)

    rows = []
    for lc in sorted(usable, key=lambda c: c.cluster_id):
        records = sorted((by_id[r] for r in lc.record_ids),
                         key=lambda r: (r.t, r.record_id))
        scores = None
        truncated = False
        if method == "sp":
            nodes = sp_recover(records, ds.net).nodes
        elif method == "sp+tklet":
            nodes = sp_tklet_recover(records, tklets, ds.net,
                                     cfg.model.bearing_margin_deg).nodes
        elif method == "hmm":
            nodes = hmm_recover(records, ds.net, hmm_cfg).nodes
        elif method == "model":
            result = recover(records, tklets, ds.net, model, high_clusters=high,
                             high_threshold=cfg.clustering.high_threshold,
                             cluster_id=lc.cluster_id, all_records_by_id=by_id)
            nodes, scores, truncated = result.nodes, result.scores, result.truncated
        else:  # hard-margin filtering ahead of a classical recoverer
            scores = _model_scores(model, records, high, by_id)
            kept = dhm_filter(records, scores, cfg.dhm.threshold)
            if not kept:
                # everything filtered: keep the single most trusted record
                kept = [records[int(np.argmax(scores))]]
            if method == "model-dhm":
                nodes = sp_recover(kept, ds.net).nodes
            else:
                nodes = hmm_recover(kept, ds.net, hmm_cfg).nodes
        rows.append({"cluster_id": lc.cluster_id, "nodes": nodes,
                     "scores": scores, "truncated": truncated, "method": method})

    out_name = f"recovered_{method.replace('+', '_')}.jsonl"
    with (run_dir / out_name).open("w", encoding="utf-8") as fh:
        for row in rows:
            fh.write(json.dumps(row) + "\n")
    update_manifest(run_dir, cfg, f"recover:{method}", [out_name])
    return rows


def _load_recovered(run_dir: Path, method: str) -> dict[int, dict]:
    path = run_dir / f"recovered_{method.replace('+', '_')}.jsonl"
    if not path.exists():
        raise FileNotFoundError(f"no recovered trajectories for method {method!r}; "
                                f"run the recover stage first")
    out = {}
    with path.open("r", encoding="utf-8") as fh:
        for line in fh:
            row = json.loads(line)
            out[int(row["cluster_id"])] = row
    return out


def _holdout_ids(run_dir: Path) -> set[int] | None:
    ckpt = run_dir / "checkpoint.json"
    if not ckpt.exists():
        return None
    meta = json.loads(ckpt.read_text(encoding="utf-8")).get("meta", {})
    ids = meta.get("holdout_cluster_ids")
    return set(ids) if ids else None


def stage_eval(cfg: RunConfig, run_dir: Path, methods: list[str],
               holdout_only: bool = False) -> list[dict]:
    """Comparison grid across methods; writes JSON, CSV, and a figure."""
    ds = load_dataset(run_dir)
    gt = {lc.cluster_id: lc.gt_trajectory.nodes for lc in ds.labeled}
    keep: set[int] | None = None
    if holdout_only:
        keep = _holdout_ids(run_dir)
        if keep is None:
            raise ValueError("holdout evaluation requires a trained checkpoint")

    rows = []
    for method in methods:
        recovered = _load_recovered(run_dir, method)
        preds, gts = [], []
        for cid, row in sorted(recovered.items()):
            if cid not in gt or (keep is not None and cid not in keep):
                continue
            preds.append(row["nodes"])
            gts.append(gt[cid])
        metrics = evaluate(preds, gts)
        rows.append({"method": method, "precision": metrics.precision,
                     "recall": metrics.recall, "iou": metrics.iou,
                     "n": metrics.n_samples})

    report_dir = run_dir / "report"
    report_dir.mkdir(exist_ok=True)
    doc = {"meta": _meta(cfg), "holdout_only": holdout_only, "methods": rows}
    (report_dir / "metrics.json").write_text(json.dumps(doc, sort_keys=True, indent=1),
                                             encoding="utf-8")
    write_metrics_grid(rows, report_dir / "metrics_grid.csv")
    plot_metrics_grid(rows, report_dir / "metrics_by_method.png")
    update_manifest(run_dir, cfg, "eval",
                    ["report/metrics.json", "report/metrics_grid.csv",
                     "report/metrics_by_method.png"])
    return rows


def stage_speed(cfg: RunConfig, run_dir: Path, method: str = "model"):
    """Per-link speeds from recovered trajectories and record timestamps."""
    ds = load_dataset(run_dir)
    recovered = _load_recovered(run_dir, method)
    by_id = ds.records_by_id
    labeled = {lc.cluster_id: lc for lc in ds.labeled}

    trips = []
    for cid, row in sorted(recovered.items()):
        lc = labeled.get(cid)
        if lc is None or len(row["nodes"]) < 2:
            continue
        records = sorted((by_id[r] for r in lc.record_ids),
                         key=lambda r: (r.t, r.record_id))
        path = row["nodes"]
        anchors = []
        start = 0
        for rec in records:
            pos = None
            for i in range(start, len(path)):
                if path[i] == rec.node:
                    pos = i
                    break
            if pos is None:
                continue
            anchors.append((rec.node, rec.t))
            start = pos
        if len(anchors) >= 2:
            trips.append((path, anchors))

    speeds = speed_map(trips, ds.net)
    report_dir = run_dir / "report"
    report_dir.mkdir(exist_ok=True)
    with (report_dir / "speeds.csv").open("w", encoding="utf-8", newline="") as fh:
        fh.write("u,v,speed_kmh,n_obs\n")
        for (u, v), (kmh, count) in sorted(speeds.items()):
            fh.write(f"{u},{v},{kmh!r},{count}\n")
    doc = speed_geojson(ds.net, speeds)
    doc["meta"] = _meta(cfg)
    write_geojson(doc, report_dir / "speed_map.geojson")
    plot_speed_map(ds.net, speeds, report_dir / "speed_map.png", cameras=ds.cameras)
    update_manifest(run_dir, cfg, "speed",
                    ["report/speeds.csv", "report/speed_map.geojson",
                     "report/speed_map.png"])
    return speeds


def stage_feedback(cfg: RunConfig, run_dir: Path, method: str = "model"):
    """Filter clusters by recovered trajectories and report pairwise quality."""
    ds = load_dataset(run_dir)
    recovered = _load_recovered(run_dir, method)
    usable = [lc for lc in ds.labeled
              if len(lc.record_ids) >= cfg.clustering.min_cluster_size
              and lc.cluster_id in recovered]
    clusters = [(lc.cluster_id, list(lc.record_ids)) for lc in usable]
    paths = {cid: recovered[cid]["nodes"] for cid, _ in clusters}
    filtered, before, after = clustering_feedback(clusters, paths, ds.records_by_id)

    report_dir = run_dir / "report"
    report_dir.mkdir(exist_ok=True)
    doc = {
        "meta": _meta(cfg), "method": method,
        "before": {"precision": before.precision, "recall": before.recall,
                   "f1": before.f1},
        "after": {"precision": after.precision, "recall": after.recall,
                  "f1": after.f1},
        "clusters": [{"cluster_id": cid, "kept_record_ids": rids}
                     for cid, rids in filtered],
    }
    (report_dir / "feedback.json").write_text(json.dumps(doc, sort_keys=True, indent=1),
                                              encoding="utf-8")
    plot_feedback(before, after, report_dir / "feedback.png")
    update_manifest(run_dir, cfg, "feedback",
                    ["report/feedback.json", "report/feedback.png"])
    return before, after


def stage_export_geojson(cfg: RunConfig, run_dir: Path, method: str = "model") -> Path:
    """Recovered trajectories plus camera points as a FeatureCollection."""
    ds = load_dataset(run_dir)
    recovered = _load_recovered(run_dir, method)
    gt = {lc.cluster_id: lc.gt_trajectory.nodes for lc in ds.labeled}
    paths = []
    for cid, row in sorted(recovered.items()):
        entry = {"cluster_id": cid, "method": method, "nodes": row["nodes"]}
        if cid in gt and row["nodes"]:
            _, _, iou = node_set_metrics(row["nodes"], gt[cid])
            entry["iou"] = iou
        if len(row["nodes"]) >= 2:
            paths.append(entry)
    doc = trajectories_geojson(ds.net, paths, cameras=ds.cameras)
    doc["meta"] = _meta(cfg)
    export_dir = run_dir / "export"
    export_dir.mkdir(exist_ok=True)
    out = export_dir / f"trajectories_{method.replace('+', '_')}.geojson"
    write_geojson(doc, out)
    update_manifest(run_dir, cfg, f"export-geojson:{method}",
                    [f"export/{out.name}"])
    return out
