import numpy as np
import pytest

from vaeaudit.attack import AttackConfig, max_damage_attack
from vaeaudit.dataio import SubgroupKey, build_subgroups, sample_evaluation_set
from vaeaudit.robustness import (
    DisparityMetrics,
    RobustnessError,
    RobustnessRecord,
    adversarial_deviation,
    aggregate,
    disparity_metrics,
    evaluate_subgroups,
    marginal_aggregate,
    read_records_csv,
    scatter_data,
    stats_payload,
    write_records_csv,
    write_scatter_csv,
)

from conftest import IdentityModel, interior_image, make_dataset


def key_of(male: str, young: str) -> SubgroupKey:
    return SubgroupKey((("Male", male), ("Young", young)))


def record(sid: str, key: SubgroupKey, deviation: float, status: str = "ok") -> RobustnessRecord:
    return RobustnessRecord(
        sample_id=sid,
        subgroup=key,
        deviation=deviation,
        recon_loss=0.01,
        beta=1.0,
        achieved_objective=deviation,
        status=status,
    )


# ---------------------------------------------------------------------------
# Deviation


def test_zero_delta_gives_exactly_zero(tiny_model):
    x = interior_image(tiny_model.config.input_dims, seed=0)
    assert adversarial_deviation(tiny_model, x, np.zeros_like(x)) == 0.0


def test_identity_model_deviation_is_delta_norm():
    shape = (4, 4, 1)
    model = IdentityModel(shape)
    x = interior_image(shape, seed=1, margin=0.2)
    delta = np.random.default_rng(2).uniform(-0.05, 0.05, size=shape)
    # reconstruction is lossless, so the deviation is ||clip(x+d) - x||_2 = ||d||_2
    assert adversarial_deviation(model, x, delta) == pytest.approx(
        float(np.sqrt(np.sum(delta**2)))
    )


def test_deviation_clamps_before_encoding():
    shape = (2, 2, 1)
    model = IdentityModel(shape)
    x = np.full(shape, 0.95)
    delta = np.full(shape, 0.2)  # pushes past 1.0; clamp caps the effect at 0.05
    assert adversarial_deviation(model, x, delta) == pytest.approx(
        float(np.sqrt(np.sum(np.full(shape, 0.05) ** 2)))
    )


def test_deviation_shape_mismatch():
    model = IdentityModel((2, 2, 1))
    with pytest.raises(RobustnessError):
        adversarial_deviation(model, np.zeros((2, 2, 1)), np.zeros((3, 3, 1)))


# ---------------------------------------------------------------------------
# Subgroup evaluation


@pytest.fixture(scope="module")
def small_eval():
    dataset, table = make_dataset(majority=4, minority=2)
    eval_set = sample_evaluation_set(table, 2, seed=0)
    return dataset, table, eval_set


def test_evaluate_subgroups_covers_evaluation_set(small_eval):
    dataset, _, eval_set = small_eval
    model = IdentityModel(dataset.image_shape)
    config = AttackConfig(budget=0.02, steps=4, seed=7)
    records = evaluate_subgroups(model, dataset, eval_set, config)
    assert len(records) == len(eval_set.all_ids)
    assert [r.sample_id for r in records] == sorted(eval_set.all_ids)
    assert all(r.ok for r in records)
    assert all(r.beta == 1.0 for r in records)
    for r in records:
        assert r.subgroup == eval_set.subgroup_of(r.sample_id)


def test_evaluate_subgroups_deterministic(small_eval):
    dataset, _, eval_set = small_eval
    model = IdentityModel(dataset.image_shape)
    config = AttackConfig(budget=0.02, steps=4, seed=7)
    r1 = evaluate_subgroups(model, dataset, eval_set, config)
    r2 = evaluate_subgroups(model, dataset, eval_set, config)
    assert r1 == r2


def test_evaluate_subgroups_workers_match_serial(small_eval):
    dataset, _, eval_set = small_eval
    model = IdentityModel(dataset.image_shape)
    config = AttackConfig(budget=0.02, steps=4, seed=7)
    serial = evaluate_subgroups(model, dataset, eval_set, config, workers=1)
    threaded = evaluate_subgroups(model, dataset, eval_set, config, workers=4)
    assert serial == threaded


def test_evaluate_subgroups_reuses_precomputed(small_eval):
    dataset, _, eval_set = small_eval
    model = IdentityModel(dataset.image_shape)
    config = AttackConfig(budget=0.02, steps=4, seed=7)

    fresh = []
    records = evaluate_subgroups(
        model, dataset, eval_set, config, artifact_sink=fresh.append
    )
    assert len(fresh) == len(records)
    precomputed = {a.sample_id: a for a in fresh}

    class NoAttackModel(IdentityModel):
        def _encode_t(self, x_t):
            raise AssertionError("attack should not run when artifacts are supplied")

    reused = []
    records2 = evaluate_subgroups(
        NoAttackModel(dataset.image_shape),
        dataset,
        eval_set,
        config,
        artifact_sink=reused.append,
        precomputed=precomputed,
    )
    assert reused == []  # nothing recomputed
    assert records2 == records


def test_evaluate_subgroups_budget_violation_becomes_failed_record(small_eval):
    dataset, _, eval_set = small_eval
    model = IdentityModel(dataset.image_shape)
    config = AttackConfig(budget=0.02, steps=4, seed=7)
    fresh = []
    evaluate_subgroups(model, dataset, eval_set, config, artifact_sink=fresh.append)
    precomputed = {a.sample_id: a for a in fresh}
    bad_id = sorted(precomputed)[0]
    bad = precomputed[bad_id]
    precomputed[bad_id] = type(bad)(
        sample_id=bad.sample_id,
        delta=np.full_like(bad.delta, 10.0),
        achieved_objective=bad.achieved_objective,
        trajectory=bad.trajectory,
        config=bad.config,
    )
    records = evaluate_subgroups(model, dataset, eval_set, config, precomputed=precomputed)
    by_id = {r.sample_id: r for r in records}
    assert by_id[bad_id].status == "failed"
    assert np.isnan(by_id[bad_id].deviation)
    assert all(r.ok for sid, r in by_id.items() if sid != bad_id)


# ---------------------------------------------------------------------------
# Aggregation


def test_aggregate_quartiles_linear_interpolation():
    key = key_of("+", "+")
    records = [record(f"s{i}", key, float(v)) for i, v in enumerate([1, 2, 3, 4])]
    stats = aggregate(records)[key]
    assert stats.q1 == pytest.approx(1.75)
    assert stats.median == pytest.approx(2.5)
    assert stats.q3 == pytest.approx(3.25)
    assert stats.mean == pytest.approx(2.5)
    assert stats.variance == pytest.approx(1.25)  # population variance
    assert stats.min == 1.0 and stats.max == 4.0
    assert stats.count == 4 and stats.failed == 0


def test_aggregate_excludes_failures_from_stats():
    key = key_of("+", "+")
    records = [record(f"s{i}", key, float(i + 1)) for i in range(3)]
    records.append(record("s9", key, float("nan"), status="failed"))
    stats = aggregate(records)[key]
    assert stats.count == 3
    assert stats.failed == 1
    assert stats.median == pytest.approx(2.0)


def test_aggregate_omits_fully_failed_subgroup():
    good, bad = key_of("+", "+"), key_of("-", "-")
    records = [record("a", good, 1.0), record("b", bad, float("nan"), status="failed")]
    stats = aggregate(records)
    assert good in stats and bad not in stats


def test_aggregate_empty_rejected():
    with pytest.raises(RobustnessError):
        aggregate([])


def test_marginal_aggregate_groups_by_one_attribute():
    records = [
        record("a", key_of("+", "+"), 1.0),
        record("b", key_of("+", "-"), 3.0),
        record("c", key_of("-", "+"), 5.0),
        record("d", key_of("-", "-"), 7.0),
    ]
    marginal = marginal_aggregate(records, "Male")
    male_pos = SubgroupKey((("Male", "+"),))
    male_neg = SubgroupKey((("Male", "-"),))
    assert set(marginal) == {male_pos, male_neg}
    assert marginal[male_pos].mean == pytest.approx(2.0)
    assert marginal[male_neg].mean == pytest.approx(6.0)
    with pytest.raises(RobustnessError):
        marginal_aggregate(records, "Smiling")


def test_disparity_metrics_ratio_gap_worst():
    records = [
        record("a", key_of("+", "+"), 1.0),
        record("b", key_of("+", "+"), 1.0),
        record("c", key_of("-", "-"), 4.0),
        record("d", key_of("-", "-"), 4.0),
    ]
    d = disparity_metrics(aggregate(records))
    assert d.median_ratio == pytest.approx(4.0)
    assert d.median_gap == pytest.approx(3.0)
    assert d.worst_subgroup == key_of("-", "-")


def test_disparity_infinite_ratio_serializes_as_string():
    records = [
        record("a", key_of("+", "+"), 0.0),
        record("b", key_of("-", "-"), 2.0),
    ]
    d = disparity_metrics(aggregate(records))
    assert np.isinf(d.median_ratio)
    assert d.to_dict()["median_ratio"] == "inf"


def test_disparity_needs_two_subgroups():
    records = [record("a", key_of("+", "+"), 1.0)]
    with pytest.raises(RobustnessError):
        disparity_metrics(aggregate(records))


def test_scatter_data_sorted_and_ok_only():
    records = [
        record("b", key_of("+", "+"), 2.0),
        record("a", key_of("+", "+"), 1.0),
        record("c", key_of("+", "+"), float("nan"), status="failed"),
    ]
    points = scatter_data(records)
    assert [p.deviation for p in points] == [1.0, 2.0]


# ---------------------------------------------------------------------------
# Persistence


def test_records_csv_round_trip(tmp_path):
    records = [
        record("a", key_of("+", "+"), 0.123456789012345),
        record("b", key_of("-", "+"), 2.0),
        record("c", key_of("+", "-"), float("nan"), status="failed"),
    ]
    path = tmp_path / "records.csv"
    write_records_csv(records, path)
    loaded = read_records_csv(path)
    assert len(loaded) == 3
    for orig, back in zip(records, loaded):
        assert back.sample_id == orig.sample_id
        assert back.subgroup == orig.subgroup
        assert back.status == orig.status
        if orig.ok:
            assert back.deviation == orig.deviation  # repr round-trips exactly
        else:
            assert np.isnan(back.deviation)


def test_records_csv_header(tmp_path):
    path = tmp_path / "records.csv"
    write_records_csv([record("a", key_of("+", "+"), 1.0)], path)
    header = path.read_text().splitlines()[0]
    assert header == "id,subgroup,beta,deviation,recon_loss,achieved_objective,status"


def test_stats_payload_structure():
    records = [
        record("a", key_of("+", "+"), 1.0),
        record("b", key_of("-", "-"), 2.0),
    ]
    stats = aggregate(records)
    payload = stats_payload(stats, disparity_metrics(stats))
    assert payload["units"]["deviation"] == "l2_pixel_grid"
    assert set(payload["subgroups"]) == {"Male+-Young+", "Male--Young-"}
    assert payload["disparity"]["worst_subgroup"] == "Male--Young-"


def test_scatter_csv(tmp_path):
    points = scatter_data([record("a", key_of("+", "+"), 1.5)])
    path = tmp_path / "scatter.csv"
    write_scatter_csv(points, path)
    lines = path.read_text().splitlines()
    assert lines[0] == "recon_loss,deviation,subgroup,beta"
    assert lines[1] == "0.01,1.5,Male+-Young+,1.0"
