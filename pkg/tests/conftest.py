import numpy as np
import pytest

from snaptraj.clusterer import cluster as run_clustering
from snaptraj.synthgen import (VehicleConfig, generate_network, place_cameras,
                               simulate_vehicles)


@pytest.fixture(scope="session")
def small_net():
    return generate_network(5, 5, spacing_m=500.0, jitter=0.1, seed=11)


@pytest.fixture(scope="session")
def small_world(small_net):
    """Fully covered noiseless world: 20 vehicles on shortest-path routes."""
    cameras = place_cameras(small_net, coverage=1.0, seed=11)
    cfg = VehicleConfig(n_vehicles=20, feature_noise=0.0, twin_probability=0.0,
                        plate_capture_probability=1.0, route_mode="shortest_path",
                        speed_min_mps=10.0, speed_max_mps=10.0)
    trajectories, records, tracklets = simulate_vehicles(small_net, cameras, cfg, seed=11)
    return {"net": small_net, "cameras": cameras, "trajectories": trajectories,
            "records": records, "tracklets": tracklets, "cfg": cfg}


@pytest.fixture(scope="session")
def noisy_world():
    """Partially covered world with twins and feature noise, random-walk routes."""
    net = generate_network(8, 8, spacing_m=500.0, jitter=0.1, seed=23)
    cameras = place_cameras(net, coverage=0.5, seed=23)
    cfg = VehicleConfig(n_vehicles=60, feature_noise=0.03, twin_probability=0.3,
                        twin_perturbation=0.06, plate_capture_probability=0.75,
                        plate_block_probability=0.45, route_mode="random_walk",
                        walk_min_len=8, walk_max_len=16, start_window_s=900.0)
    trajectories, records, tracklets = simulate_vehicles(net, cameras, cfg, seed=23)
    clusters = run_clustering(records, 0.8)
    return {"net": net, "cameras": cameras, "trajectories": trajectories,
            "records": records, "tracklets": tracklets, "clusters": clusters,
            "cfg": cfg}
