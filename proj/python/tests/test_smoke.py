import numpy as np
import pytest

import flowdrive


@pytest.fixture(scope="module")
def pipeline(tmp_path_factory):
    d = tmp_path_factory.mktemp("pipeline")
    data, clusters, model = d / "data.bin", d / "clusters.bin", d / "model.ckpt"
    counts = flowdrive.generate_dataset(str(data), 120, seed=4)
    cluster_counts = flowdrive.fit_clusters(str(data), str(clusters), k=4, seed=1)
    log = flowdrive.train(
        str(data), str(model), clusters=str(clusters),
        options={"max_steps": "8", "batch": "4", "dim": "16", "heads": "2", "strategy": "cluster"},
    )
    return counts, cluster_counts, log, model


def test_names():
    assert "lane_change" in flowdrive.kinds()
    assert len(flowdrive.kinds()) == 9
    assert flowdrive.planners()[-1] == "expert_replay"


def test_oracle_integration_is_exact():
    rng = np.random.default_rng(0)
    z, x = rng.normal(size=(3, 16, 4)), rng.normal(size=(3, 16, 4))
    for steps in (1, 8, 64):
        out = flowdrive.integrate_oracle(z, x, steps)
        assert out.shape == x.shape
        assert np.max(np.abs(out - x)) < 1e-13


def test_pipeline(pipeline):
    counts, cluster_counts, log, model_path = pipeline
    assert sum(counts.values()) == 120
    assert sum(cluster_counts) == 120 and len(cluster_counts) == 4
    assert log["steps"] == 8
    assert all(np.isfinite(log["log_loss"]))

    model = flowdrive.Model.load(str(model_path))
    assert model.step == 8
    assert "dim = 16" in model.config
    a = model.sample("lane_change", 2, noise_seed=5)
    b = model.sample("lane_change", 2, noise_seed=5)
    assert a.shape == (5, model.horizon, 3)
    assert np.array_equal(a, b)
    # zero offsets reproduce the unguided sample bit for bit
    plain = model.sample("lane_change", 2, lat=[0.0], times=[], noise_seed=5)
    assert np.array_equal(plain[0], a[2])


def test_expert_scenario():
    r = flowdrive.run_scenario("lead_follow", 3)
    assert r["score"]["total"] >= 90.0
    assert r["trace"].shape == (151, 5)
    assert r["events"] == []


def test_flow_scenario_and_errors(pipeline):
    model = flowdrive.Model.load(str(pipeline[3]))
    r = flowdrive.run_scenario("lane_follow", 1, planner="flowdrive", mode="reactive", model=model, duration=2.0)
    assert 0.0 <= r["score"]["total"] <= 100.0
    assert r["trace"].shape[0] == 21
    with pytest.raises(flowdrive.Error):
        flowdrive.run_scenario("lane_follow", 1, planner="flowdrive")
    with pytest.raises(flowdrive.Error):
        flowdrive.run_scenario("bogus", 1)
