import math

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from flowsiam.core import AnomalyKind, DatasetError, Label, dataset_to_json
from flowsiam.simgen import (
    DEFAULT_TEST_STREETS,
    DEFAULT_TRAIN_STREET,
    KMH,
    NORMAL,
    OVER_SPEED,
    UNDER_SPEED,
    GeneratorConfig,
    Scenario,
    ScenarioKind,
    Shape,
    SpeedClass,
    StreetProfile,
    export_fcd,
    generate_dataset,
    generate_fleet,
    import_fcd,
    make_scenario,
    sample_target_speed,
)


def test_speed_class_table_values():
    assert (NORMAL.mean_mult, NORMAL.std_mult, NORMAL.min_mult, NORMAL.max_mult) == (1.0, 0.1, 0.9, 1.1)
    assert (OVER_SPEED.mean_mult, OVER_SPEED.min_mult, OVER_SPEED.max_mult) == (1.25, 1.2, 1.3)
    assert (UNDER_SPEED.mean_mult, UNDER_SPEED.min_mult, UNDER_SPEED.max_mult) == (0.75, 0.7, 0.8)
    with pytest.raises(ValueError):
        SpeedClass("bad", 1.0, 0.1, 1.1, 1.2)


def test_sample_target_speed_bounds():
    rng = np.random.default_rng(0)
    normal = [sample_target_speed(NORMAL, 50 * KMH, rng) / KMH for _ in range(500)]
    under = [sample_target_speed(UNDER_SPEED, 40 * KMH, rng) / KMH for _ in range(500)]
    assert 45 - 1e-9 <= min(normal) and max(normal) <= 55 + 1e-9
    assert 28 - 1e-9 <= min(under) and max(under) <= 32 + 1e-9


def test_sample_target_speed_zero_std():
    cls = SpeedClass("flat", 1.0, 0.0, 0.9, 1.1)
    assert sample_target_speed(cls, 10.0, np.random.default_rng(0)) == 10.0


def test_scenario_invariants():
    with pytest.raises(ValueError):
        ScenarioKind(Scenario.RAISE, 10.0, 9.0, 5.0)
    with pytest.raises(ValueError):
        ScenarioKind(Scenario.CONSTANT, 10.0, 12.0, 0.0)
    s = ScenarioKind(Scenario.DECLINE, 10.0, 6.0, 30.0)
    assert s.limit_at(29.9) == 10.0 and s.limit_at(30.0) == 6.0


def test_street_shapes():
    s = np.array([0.0, 100.0])
    x, y = StreetProfile("a", 300, 1, 10, Shape.STRAIGHT).position(s)
    np.testing.assert_allclose(x, s)
    np.testing.assert_allclose(y, 0)
    curve = StreetProfile("c", 1000, 1, 10, Shape.CURVED)
    x, y = curve.position(np.array([1000.0]))
    r = 1000 / (math.pi / 2)
    np.testing.assert_allclose([x[0], y[0]], [r, r])
    turns = StreetProfile("t", 300, 1, 10, Shape.WITH_TURNS)
    x, y = turns.position(np.array([150.0, 300.0]))
    np.testing.assert_allclose(x, [100, 200])
    np.testing.assert_allclose(y, [50, 100])
    south = StreetProfile("s", 300, 1, 10, Shape.STRAIGHT, heading=-math.pi / 2)
    x, y = south.position(np.array([100.0]))
    np.testing.assert_allclose([x[0], y[0]], [0, -100], atol=1e-12)


def _fleet(kind=Scenario.CONSTANT, abnormal=None, seed=0, street=DEFAULT_TRAIN_STREET, **kw):
    cfg = GeneratorConfig(**kw)
    rng = np.random.default_rng(seed)
    return generate_fleet(cfg, street, make_scenario(kind, street, cfg, rng), abnormal, rng), cfg


def test_identical_members_when_std_zero():
    classes = {"Normal": SpeedClass("Normal", 1.0, 0.0, 0.9, 1.1)}
    cfg = GeneratorConfig()
    street = StreetProfile("wide", 5000, 5, 50 * KMH)  # one lane each: no car-following interaction
    rng = np.random.default_rng(0)
    f = generate_fleet(cfg, street, make_scenario(Scenario.CONSTANT, street, cfg, rng), None, rng, classes=classes)
    speeds = np.stack([t.speed for t in f.members])
    assert np.all(speeds == speeds[0])


def test_abnormal_member_speed_band():
    f, cfg = _fleet(abnormal=AnomalyKind.OVER_SPEED, seed=3, street=StreetProfile("w", 5000, 5, 50 * KMH))
    odd = f.flags["abnormal_member"]
    assert f.label is Label.ABNORMAL
    for k, t in enumerate(f.members):
        steady = t.speed[-1] / KMH
        if k == odd:
            assert 60 - 1e-6 <= steady <= 65 + 1e-6
        else:
            assert 45 - 1e-6 <= steady <= 55 + 1e-6


def test_raise_scenario_nondecreasing_after_change():
    f, cfg = _fleet(Scenario.RAISE, seed=1, street=StreetProfile("w", 5000, 5, 50 * KMH))
    rng = np.random.default_rng(1)
    change = make_scenario(Scenario.RAISE, StreetProfile("w", 5000, 5, 50 * KMH), cfg, rng).change_time
    k0 = int(math.ceil(change))
    for t in f.members:
        seg = t.speed[k0:]
        assert np.all(np.diff(seg) >= -1e-9)


@settings(max_examples=25, deadline=None)
@given(st.integers(0, 10_000), st.sampled_from(list(Scenario)), st.sampled_from([None, *AnomalyKind]))
def test_gap_invariant_and_label_soundness(seed, kind, abnormal):
    street = DEFAULT_TEST_STREETS[seed % len(DEFAULT_TEST_STREETS)]
    cfg = GeneratorConfig()
    rng = np.random.default_rng(seed)
    f = generate_fleet(cfg, street, make_scenario(kind, street, cfg, rng), abnormal, rng)
    mult = np.asarray(f.flags["multipliers"])
    outside = np.sum((mult < NORMAL.min_mult) | (mult > NORMAL.max_mult))
    assert (f.label is Label.ABNORMAL) == (abnormal is not None) == (outside == 1)
    # arc positions rebuilt from recorded speeds (dt = 1 s), independent of street shape
    lanes = np.arange(f.m) % street.lanes
    arc = np.stack([np.concatenate([[0], np.cumsum(t.speed[1:])]) for t in f.members])
    start = (f.m - 1 - np.arange(f.m)) * max(cfg.headway_s * street.speed_limit, 2 * cfg.min_gap)
    s = arc + start[:, None]
    for k in range(1, f.m):
        same = [j for j in range(k) if lanes[j] == lanes[k]]
        if same and not f.flags.get("street_too_short"):
            assert np.all(s[same[-1]] - s[k] >= cfg.min_gap - 1e-9)


def test_generate_dataset_counts_and_determinism():
    cfg = GeneratorConfig(seed=5, n_flows=40, abnormal_fraction=0.15, streets=list(DEFAULT_TEST_STREETS))
    a, b = generate_dataset(cfg), generate_dataset(cfg)
    assert dataset_to_json(a) == dataset_to_json(b)
    assert sum(f.label is Label.ABNORMAL for f in a.flows) == 6
    assert len(a.streets()) == 4


def test_training_corpus_shape():
    ds = generate_dataset(GeneratorConfig(n_flows=1332, m=5, T=4))
    assert ds.n_trajectories() == 6660
    assert all(f.label is Label.NORMAL for f in ds.flows)


def test_generator_config_validation():
    with pytest.raises(ValueError):
        generate_dataset(GeneratorConfig(streets=[]))
    with pytest.raises(ValueError):
        generate_dataset(GeneratorConfig(abnormal_fraction=1.5))
    with pytest.raises(ValueError):
        generate_dataset(GeneratorConfig(scenario_mix={"Constant": 0.0}))


def test_fcd_roundtrip(tmp_path):
    ds = generate_dataset(GeneratorConfig(seed=2, n_flows=3, T=20))
    p = tmp_path / "fcd.csv"
    export_fcd(ds, p)
    back = import_fcd(p, m=5, T=20)
    assert len(back) == 3
    for f, g in zip(ds.flows, back.flows):
        assert g.flags["provenance"] == "fcd-import" and g.label is Label.NORMAL
        for a, b in zip(f.members, g.members):
            np.testing.assert_allclose(a.samples, b.samples, atol=1e-9)


def test_fcd_single_group_and_skips(tmp_path):
    p = tmp_path / "one.csv"
    rows = ["time,vehicle_id,x,y,speed"]
    for t in range(4):
        for v in range(3):
            rows.append(f"{t},v{v},{t * 10 + v},0,10")
    rows.append("10,late,0,0,1")
    p.write_text("\n".join(rows) + "\n")
    ds = import_fcd(p, m=3, T=4)
    assert len(ds) == 1 and ds.flows[0].m == 3


def test_fcd_out_of_order_names_record(tmp_path):
    p = tmp_path / "bad.csv"
    p.write_text("time,vehicle_id,x,y,speed\n1,a,0,0,1\n0,b,0,0,1\n")
    with pytest.raises(DatasetError, match="out of order.*'0', 'b'"):
        import_fcd(p, m=2, T=2)


def test_fcd_xml(tmp_path):
    p = tmp_path / "fcd.xml"
    steps = "".join(
        f'<timestep time="{t}.00"><vehicle id="a" x="{t}" y="0" speed="1"/><vehicle id="b" x="{t + 5}" y="0" speed="1"/></timestep>'
        for t in range(5)
    )
    p.write_text(f"<fcd-export>{steps}</fcd-export>")
    ds = import_fcd(p, m=2, T=5)
    assert len(ds) == 1
    np.testing.assert_allclose(ds.flows[0].members[1].column("x"), [5, 6, 7, 8, 9])
    bad = tmp_path / "bad.xml"
    bad.write_text('<fcd-export><timestep time="1"><vehicle id="a" x="oops" y="0" speed="1"/></timestep></fcd-export>')
    with pytest.raises(DatasetError, match="malformed"):
        import_fcd(bad, m=2, T=2)
