"""Run configuration: one JSON document covering every stage, with strict
unknown-key rejection and a content hash recorded into all outputs."""

from __future__ import annotations

import hashlib
import json
from dataclasses import asdict, dataclass, field, fields
from pathlib import Path


class ConfigError(ValueError):
    pass


def _from_dict(cls, data: dict, path: str):
    if not isinstance(data, dict):
        raise ConfigError(f"'{path}' must be a JSON object")
    known = {f.name for f in fields(cls)}
    unknown = set(data) - known
    if unknown:
        raise ConfigError(f"unknown config keys under '{path}': {sorted(unknown)}")
    kwargs = {}
    for f in fields(cls):
        if f.name not in data:
            continue
        value = data[f.name]
        if f.name in _SECTIONS and path == "config":
            kwargs[f.name] = _from_dict(_SECTIONS[f.name], value, f"{path}.{f.name}")
        else:
            kwargs[f.name] = value
    return cls(**kwargs)


@dataclass
class NetworkSection:
    rows: int = 10
    cols: int = 10
    spacing_m: float = 500.0
    jitter: float = 0.1
    origin_lat: float = 30.0
    origin_lon: float = 120.0


@dataclass
class CamerasSection:
    coverage: float = 0.4


@dataclass
class VehiclesSection:
    n_vehicles: int = 100
    speed_min_mps: float = 8.0
    speed_max_mps: float = 15.0
    twin_probability: float = 0.0
    twin_perturbation: float = 0.06
    twin_proximity_hops: int = 0
    twin_time_spread_s: float = 0.0
    plate_capture_probability: float = 1.0
    plate_block_probability: float = 0.0
    feature_noise: float = 0.0
    feature_dim: int = 64
    plate_feature_dim: int = 32
    route_mode: str = "shortest_path"
    walk_min_len: int = 8
    walk_max_len: int = 20
    start_window_s: float = 600.0
    tracklet_radius_m: float = 120.0


@dataclass
class ClusteringSection:
    normal_threshold: float = 0.8
    high_threshold: float = 0.9
    min_cluster_size: int = 4


@dataclass
class LabelingSection:
    scheme: str = "scheme2"              # "scheme1" | "scheme2" | "majority"
    noise_quantile: float = 0.2
    match_fraction: float = 0.7
    walks_from_vehicles: bool = True     # scheme2: use simulated routes as walks
    n_walks: int = 100
    walk_min_len: int = 8
    walk_max_len: int = 20


@dataclass
class EmbeddingSection:
    dim: int = 64
    walks_per_node: int = 10
    walk_length: int = 20
    window: int = 5
    negatives: int = 5
    epochs: int = 5
    lr: float = 0.025
    time_scale_s: float = 60.0


@dataclass
class ModelSection:
    enc_layers: int = 2
    dec_layers: int = 2
    heads: int = 4
    dim: int = 64
    ff_dim: int = 256
    max_decode_len: int = 64
    gcn_hidden: int = 64
    gcn_out: int = 64
    use_tracklets: bool = True
    use_denoiser: bool = True
    renormalize_attention: bool = False
    bearing_margin_deg: float = 20.0


@dataclass
class TrainingSection:
    epochs: int = 30
    batch_size: int = 16
    lr: float = 1e-3
    lr_decay: str = "cosine"
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8
    lambda_denoise: float = 1.0
    dropout: float = 0.1
    train_embeddings: bool = True
    holdout_fraction: float = 0.2


@dataclass
class HmmSection:
    candidate_radius_m: float = 300.0
    emission_sigma_m: float = 50.0
    detour_beta: float = 2.0
    max_candidates: int = 5


@dataclass
class DhmSection:
    threshold: float = 0.5


_SECTIONS = {
    "network": NetworkSection,
    "cameras": CamerasSection,
    "vehicles": VehiclesSection,
    "clustering": ClusteringSection,
    "labeling": LabelingSection,
    "embedding": EmbeddingSection,
    "model": ModelSection,
    "training": TrainingSection,
    "hmm": HmmSection,
    "dhm": DhmSection,
}


@dataclass
class RunConfig:
    seed: int = 0
    network: NetworkSection = field(default_factory=NetworkSection)
    cameras: CamerasSection = field(default_factory=CamerasSection)
    vehicles: VehiclesSection = field(default_factory=VehiclesSection)
    clustering: ClusteringSection = field(default_factory=ClusteringSection)
    labeling: LabelingSection = field(default_factory=LabelingSection)
    embedding: EmbeddingSection = field(default_factory=EmbeddingSection)
    model: ModelSection = field(default_factory=ModelSection)
    training: TrainingSection = field(default_factory=TrainingSection)
    hmm: HmmSection = field(default_factory=HmmSection)
    dhm: DhmSection = field(default_factory=DhmSection)

    @classmethod
    def from_dict(cls, data: dict) -> "RunConfig":
        if not isinstance(data, dict):
            raise ConfigError("config must be a JSON object")
        return _from_dict(cls, data, "config")

    def to_dict(self) -> dict:
        return asdict(self)

    def config_hash(self) -> str:
        canonical = json.dumps(self.to_dict(), sort_keys=True, separators=(",", ":"))
        return hashlib.sha256(canonical.encode("utf-8")).hexdigest()[:16]


def load_config(path) -> RunConfig:
    try:
        data = json.loads(Path(path).read_text(encoding="utf-8"))
    except json.JSONDecodeError as exc:
        raise ConfigError(f"config is not valid JSON: {exc}") from exc
    return RunConfig.from_dict(data)


def default_config() -> RunConfig:
    return RunConfig()


def noiseless_oracle_config(seed: int = 0) -> RunConfig:
    """Fully covered, noise-free world routed by shortest paths: classical
    recovery should be exact here."""
    cfg = RunConfig(seed=seed)
    cfg.network = NetworkSection(rows=10, cols=10, jitter=0.1)
    cfg.cameras = CamerasSection(coverage=1.0)
    cfg.vehicles = VehiclesSection(n_vehicles=100, twin_probability=0.0,
                                   plate_capture_probability=1.0,
                                   feature_noise=0.0, route_mode="shortest_path")
    cfg.labeling = LabelingSection(scheme="scheme1")
    return cfg


def noisy_benchmark_config(seed: int = 0) -> RunConfig:
    """Random-walk routed vehicles with appearance twins injecting false
    positives into the clusters; partial camera coverage and plate capture."""
    cfg = RunConfig(seed=seed)
    cfg.network = NetworkSection(rows=20, cols=20, jitter=0.12)
    cfg.cameras = CamerasSection(coverage=0.4)
    cfg.vehicles = VehiclesSection(n_vehicles=1250, twin_probability=0.45,
                                   twin_perturbation=0.06,
                                   twin_proximity_hops=3,
                                   twin_time_spread_s=240.0,
                                   plate_capture_probability=0.28,
                                   plate_block_probability=0.1,
                                   feature_noise=0.03, route_mode="random_walk",
                                   walk_min_len=8, walk_max_len=24,
                                   start_window_s=1200.0)
    cfg.labeling = LabelingSection(scheme="majority")
    cfg.training = TrainingSection(epochs=70, lr=2e-3, dropout=0.25,
                                   holdout_fraction=0.2)
    return cfg
