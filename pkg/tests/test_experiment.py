import numpy as np
import pytest

from latent_probe import env as grasp
from latent_probe.agent import Policy, read_metrics, write_metrics
from latent_probe.experiment import (
    ExperimentPlan,
    PlanError,
    ProbeConfig,
    RunRecord,
    aggregate_curves,
    baseline_band,
    collect_images,
    final_success,
    init_sweep,
    load_records,
    probe_timeline,
    run_grid,
)
from latent_probe.nn import InitScheme
from latent_probe.nn.serialization import CheckpointError
from latent_probe.vae import VAE, ImageDataset


@pytest.fixture(scope="module")
def untrained_vae(tmp_path_factory):
    path = tmp_path_factory.mktemp("vae") / "vae.lprb"
    VAE(latent_dim=16, image_size=64, seed=0).save(path)
    return path


def test_plan_validation(tmp_path):
    with pytest.raises(PlanError):
        ExperimentPlan(out=tmp_path, seeds=0).validate()
    with pytest.raises(PlanError):
        ExperimentPlan(out=tmp_path, conditions=()).validate()
    with pytest.raises(PlanError):
        ExperimentPlan(out=tmp_path, conditions=[("static_static", "pixels")]).validate()
    with pytest.raises(ValueError):
        ExperimentPlan(out=tmp_path, init="zeros").validate()
    plan = ExperimentPlan(out=tmp_path, snapshots=(500, 250, 250))
    assert plan.snapshots == (0, 250, 500)


def test_missing_vae_fails_before_any_run(tmp_path):
    plan = ExperimentPlan(out=tmp_path, conditions=[("static_static", "latent")], train_vae=False)
    with pytest.raises(PlanError):
        run_grid(plan)
    plan = ExperimentPlan(out=tmp_path, conditions=[("static_static", "latent")],
                          vae_checkpoint=tmp_path / "absent.lprb")
    with pytest.raises(PlanError):
        run_grid(plan)
    assert not (tmp_path / "runs").exists()


def test_zero_episode_plan(tmp_path):
    plan = ExperimentPlan(out=tmp_path, conditions=[("static_static", "image")], seeds=1, episodes=0)
    (record,) = run_grid(plan)
    assert record.ok and list(record.snapshot_paths) == [0]
    assert record.snapshot_paths[0].exists()
    assert read_metrics(record.metrics_path) == []


def test_full_grid_record_count_and_round_trip(tmp_path, untrained_vae):
    plan = ExperimentPlan(out=tmp_path, seeds=3, episodes=0, vae_checkpoint=untrained_vae)
    records = run_grid(plan)
    assert len(records) == 12 and all(r.ok for r in records)
    assert len({(r.condition, r.seed) for r in records}) == 12
    back = load_records(tmp_path / "records.json")
    assert [r.to_json() for r in back] == [r.to_json() for r in records]
    for r in records:
        assert r.metrics_path.exists() and all(p.exists() for p in r.snapshot_paths.values())
        assert len(r.config_hash) == 16


def test_rerun_reproduces_metrics(tmp_path):
    def once(sub):
        plan = ExperimentPlan(out=tmp_path / sub, conditions=[("static_random", "image")], seeds=1, episodes=3)
        (r,) = run_grid(plan)
        return r.metrics_path.read_bytes(), r.config_hash
    assert once("a") == once("b")


def test_failed_run_is_isolated(tmp_path, untrained_vae):
    plan = ExperimentPlan(out=tmp_path, seeds=1, episodes=0, vae_checkpoint=untrained_vae)
    # corrupt the VAE after validation by pointing the latent run at a non-checkpoint
    bad = tmp_path / "bad.lprb"
    bad.write_bytes(b"not a checkpoint")
    plan.vae_checkpoint = bad
    records = run_grid(plan)
    latent = [r for r in records if r.representation == "latent"]
    image = [r for r in records if r.representation == "image"]
    assert all(not r.ok for r in latent) and all(r.ok for r in image)


def fake_record(tmp_path, name, curve, task="static_static", rep="latent", seed=0):
    path = tmp_path / f"{name}.csv"
    write_metrics(path, [{"episode": i + 1, "steps": 40, "return": "-1.0", "success": 0,
                          "windowed_success": repr(float(v))} for i, v in enumerate(curve)])
    return RunRecord(task, rep, seed, tmp_path, metrics_path=path)


def test_aggregate_single_seed(tmp_path):
    rec = fake_record(tmp_path, "a", [0.1, 0.2, 0.5])
    curve = aggregate_curves([rec])["static_static-latent"]
    np.testing.assert_array_equal(curve.mean, [0.1, 0.2, 0.5])
    np.testing.assert_array_equal(curve.std, 0)


def test_aggregate_hand_arithmetic(tmp_path):
    recs = [fake_record(tmp_path, "a", [0.2] * 5, seed=0), fake_record(tmp_path, "b", [0.4] * 7, seed=1)]
    curve = aggregate_curves(recs)["static_static-latent"]
    assert len(curve.mean) == 5 and curve.runs == 2
    np.testing.assert_allclose(curve.mean, 0.3)
    np.testing.assert_allclose(curve.std, 0.1)
    assert final_success(recs) == {"static_static-latent": [0.2, 0.4]}


def test_aggregate_skips_failed_runs(tmp_path):
    good = fake_record(tmp_path, "a", [0.5])
    bad = RunRecord("static_static", "latent", 1, tmp_path, error="boom")
    assert aggregate_curves([good, bad])["static_static-latent"].runs == 1


def test_collect_images_split(tmp_path):
    ds = collect_images(["static_random", "static_static"], 5, seed=0)
    assert isinstance(ds, ImageDataset) and len(ds) == 5
    assert ds.meta["tasks"] == ["static_random", "static_static"]
    with pytest.raises(ValueError):
        collect_images([], 3, 0)


def test_baseline_band():
    lo, hi = baseline_band(np.arange(1001.0))
    assert lo == 5.0 and hi == 995.0


def test_probe_timeline_order_and_errors(tmp_path):
    plan = ExperimentPlan(out=tmp_path, conditions=[("static_static", "image")], seeds=1, episodes=4,
                          snapshots=(0, 1, 2, 3, 4))
    (record,) = run_grid(plan)
    cfg = ProbeConfig(driver="scripted")
    reports = probe_timeline(record, cfg, tmp_path / "probe")
    assert [r.meta["snapshot_episode"] for r in reports] == [0, 1, 2, 3, 4]
    assert (tmp_path / "probe" / "static_static-image-0_timeline.csv").exists()
    record.snapshot_paths[2].write_bytes(b"garbage")
    with pytest.raises(CheckpointError, match="policy_ep2"):
        probe_timeline(record, cfg)


def test_init_sweep_shares_episode_data():
    vae = VAE(latent_dim=16, image_size=64, seed=0)
    reports = init_sweep(vae, grasp.EnvConfig(), seed=0)
    assert [r.meta["init"] for r in reports] == ["he_normal", "orthogonal", "beta_1_3", "beta_0.5_0.5"]
    base = reports[0].activations
    for r in reports[1:]:
        assert r.activations.rewards.tobytes() == base.rewards.tobytes()
        assert r.activations.step.tobytes() == base.step.tobytes()
        assert r.activations.X.tobytes() != base.X.tobytes()
    with pytest.raises(ValueError):
        init_sweep(vae, grasp.EnvConfig(), cfg=ProbeConfig(driver="policy"))


@pytest.mark.slow
def test_tiny_pipeline_end_to_end(tmp_path):
    plan = ExperimentPlan(out=tmp_path, conditions=[("static_static", "latent")], seeds=1, episodes=50,
                          vae_images=200, vae_epochs=100, snapshots=(0, 50))
    (record,) = run_grid(plan)
    assert record.ok, record.error
    vae_dir = tmp_path / "vae"
    assert len(ImageDataset.load(vae_dir / "images.lprb")) == 200
    history = np.loadtxt(vae_dir / "vae_history.csv", delimiter=",", skiprows=1)
    assert history.shape == (100, 4) and history[-1, 2] < history[0, 2]
    vae = VAE.load(record.vae_checkpoint)
    rows = read_metrics(record.metrics_path)
    assert len(rows) == 50 and all(0 <= r["windowed_success"] <= 1 for r in rows)
    for ep, path in record.snapshot_paths.items():
        policy = Policy.load(path)
        assert policy.input_dim == vae.latent_dim
    reports = probe_timeline(record, ProbeConfig(driver="scripted"))
    assert len(reports) == 2 and all(r.projected.shape[1] == 3 for r in reports)
