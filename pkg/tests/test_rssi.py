import math
import random

import numpy as np
import pytest
from hypothesis import assume, given
from hypothesis import strategies as st

from proxgate.errors import (
    FormatError,
    IncompleteSession,
    InvalidConfig,
    InvalidDistance,
    InvalidSample,
    MissingSetting,
    SchemaError,
)
from proxgate.registry import derive_signature
from proxgate.rssi import (
    DATASET_DEVICE_A,
    DATASET_DEVICE_B,
    Category,
    ColumnMapping,
    PathLossParams,
    RssiSample,
    WearSetting,
    combine_settings,
    dataset_from_samples,
    featurize,
    load_dataset,
    read_dataset,
    synth_dataset,
    synth_rssi,
    write_csv,
)

from .conftest import SECRET, ids

A = derive_signature(ids(1), SECRET)
B = derive_signature(ids(2), SECRET)
HEADER = "setting,distance_m,rssi_a_dbm,rssi_b_dbm,timestamp_unix\n"


def test_setting_categories():
    assert WearSetting.LL.category is Category.CROSSWISE
    assert WearSetting.RR.category is Category.CROSSWISE
    assert WearSetting.RL.category is Category.DIRECT
    assert WearSetting.LR.category is Category.DIRECT


def test_parse_single_row(tmp_path):
    path = tmp_path / "one.csv"
    path.write_text(HEADER + "RL,1.0,-58.4,-61.2,1650000000\n")
    samples = load_dataset(path)
    assert len(samples) == 2
    a_to_b, b_to_a = samples
    assert (a_to_b.measurer, a_to_b.target) == (DATASET_DEVICE_A, DATASET_DEVICE_B)
    assert (b_to_a.measurer, b_to_a.target) == (DATASET_DEVICE_B, DATASET_DEVICE_A)
    assert a_to_b.rssi_dbm == -58.4 and b_to_a.rssi_dbm == -61.2
    assert all(s.setting is WearSetting.RL and s.distance_m == 1.0 for s in samples)
    assert a_to_b.timestamp == 1650000000.0


def test_single_rssi_column_gives_one_sample_per_row(tmp_path):
    path = tmp_path / "single.csv"
    path.write_text("place,dist,rssi\nLL,0.5,-50\nRR,2.5,-70\n")
    mapping = ColumnMapping(setting="place", distance="dist", rssi_a="rssi", rssi_b=None, timestamp=None)
    samples = load_dataset(path, mapping)
    assert len(samples) == 2
    data = dataset_from_samples(samples, threshold_m=2.0)
    assert data.dim == 1
    assert data.labels.tolist() == [True, False]


def test_foreign_setting_labels_are_mapped(tmp_path):
    path = tmp_path / "foreign.csv"
    path.write_text("pos,d,a,b\nright-left,1.5,-60,-61\n")
    mapping = ColumnMapping.from_dict(
        {"setting": "pos", "distance": "d", "rssi_a": "a", "rssi_b": "b", "timestamp": None,
         "setting_values": {"right-left": "RL"}}
    )
    assert {s.setting for s in load_dataset(path, mapping)} == {WearSetting.RL}


def test_empty_file(tmp_path):
    path = tmp_path / "empty.csv"
    path.write_text("")
    with pytest.raises(FormatError):
        load_dataset(path)
    path.write_text(HEADER)
    with pytest.raises(FormatError):
        load_dataset(path)


def test_missing_file(tmp_path):
    with pytest.raises(OSError):
        load_dataset(tmp_path / "absent.csv")


def test_missing_column(tmp_path):
    path = tmp_path / "bad.csv"
    path.write_text("setting,distance_m,rssi_a_dbm\nRL,1,-50\n")
    with pytest.raises(SchemaError):
        load_dataset(path)


def test_malformed_rows_within_budget_are_reported(tmp_path):
    path = tmp_path / "glitch.csv"
    rows = [f"RR,1.0,-60,-61,{i}" for i in range(200)]
    rows[17] = "RR,1.0,-160,-61,17"  # out of physical range
    path.write_text(HEADER + "\n".join(rows) + "\n")
    result = read_dataset(path)
    assert result.rows == 200
    assert result.rejected and result.rejected[0][0] == 19  # file line number
    assert len(result.samples) == 2 * 199


def test_malformed_rows_over_budget_fail(tmp_path):
    path = tmp_path / "broken.csv"
    rows = [f"RR,1.0,-60,-61,{i}" for i in range(100)]
    rows[3] = "RR,abc,-60,-61,3"
    rows[4] = "XX,1.0,-60,-61,4"
    path.write_text(HEADER + "\n".join(rows) + "\n")
    with pytest.raises(FormatError, match="2/100"):
        load_dataset(path)


def test_sample_invariants():
    with pytest.raises(InvalidSample):
        RssiSample(A, B, 5.0, 0.0)
    with pytest.raises(InvalidSample):
        RssiSample(A, B, -111.0, 0.0)
    with pytest.raises(InvalidSample):
        RssiSample(A, A, -60.0, 0.0)
    with pytest.raises(InvalidSample):
        RssiSample(A, B, -60.0, 0.0, distance_m=0.0)
    with pytest.raises(InvalidSample):
        RssiSample(A, B, -60.0, 0.0, distance_m=100.5)


def _sample(setting, row=0):
    return RssiSample(A, B, -60.0, 0.0, 1.0, setting, row)


def test_combine_only_ll():
    crosswise, direct = combine_settings([_sample(WearSetting.LL, i) for i in range(5)])
    assert len(crosswise) == 5 and direct == []


def test_combine_table_one_counts():
    counts = {WearSetting.RR: 8168, WearSetting.LL: 7874, WearSetting.RL: 13117, WearSetting.LR: 8485}
    samples = [_sample(s, i) for s, n in counts.items() for i in range(n)]
    crosswise, direct = combine_settings(samples)
    assert len(crosswise) == 16_042
    assert len(direct) == 21_602
    assert len(crosswise) + len(direct) == 37_644


def test_combine_random_partition_matches_per_sample_oracle():
    rng = random.Random(9)
    samples = [_sample(rng.choice(list(WearSetting)), i) for i in range(1000)]
    crosswise, direct = combine_settings(samples)
    expected_cross = [s for s in samples if s.setting.value in ("LL", "RR")]
    expected_direct = [s for s in samples if s.setting.value in ("RL", "LR")]
    assert crosswise == expected_cross
    assert direct == expected_direct
    assert {id(s) for s in crosswise}.isdisjoint({id(s) for s in direct})


def test_combine_requires_setting():
    with pytest.raises(MissingSetting):
        combine_settings([_sample(WearSetting.LL), _sample(None)])


def test_synth_rssi_reference_points():
    rng = np.random.default_rng(0)
    quiet = PathLossParams(shadowing_sigma_db=0.0)
    assert synth_rssi(1.0, quiet, rng) == -59.0
    assert synth_rssi(10.0, quiet, rng) == pytest.approx(-79.0, abs=1e-12)


def test_synth_rssi_rejects_nonpositive_distance():
    rng = np.random.default_rng(0)
    for d in (0.0, -1.0):
        with pytest.raises(InvalidDistance):
            synth_rssi(d, PathLossParams(), rng)


def test_synth_rssi_clamps():
    rng = np.random.default_rng(0)
    assert synth_rssi(1e-9, PathLossParams(shadowing_sigma_db=0.0), rng) == 0.0
    assert synth_rssi(1e9, PathLossParams(shadowing_sigma_db=0.0), rng) == -110.0


def test_synth_rssi_monte_carlo_moments():
    params = PathLossParams(shadowing_sigma_db=3.0, rng_seed=123)
    rng = np.random.default_rng(params.rng_seed)
    draws = np.array([synth_rssi(2.0, params, rng) for _ in range(10_000)])
    closed_form_mean = -59.0 - 20.0 * math.log10(2.0)  # -65.0206
    assert abs(draws.mean() - closed_form_mean) < 0.1
    assert abs(closed_form_mean - (-65.02)) < 0.01
    assert abs(draws.std() - 3.0) < 0.15


@given(st.floats(0.05, 50.0), st.floats(0.05, 50.0))
def test_path_loss_monotone_without_shadowing(d1, d2):
    assume(d2 > d1 * 1.000001)
    rng = np.random.default_rng(0)
    params = PathLossParams(shadowing_sigma_db=0.0)
    assert synth_rssi(d1, params, rng) > synth_rssi(d2, params, rng)


def test_synth_dataset_noiseless_labels():
    data = synth_dataset(10, threshold_m=2.0, params=PathLossParams(shadowing_sigma_db=0.0, rng_seed=4))
    assert data.labels.tolist() == (data.distances <= 2.0).tolist()
    assert np.all(data.features[:, 0] == data.features[:, 1])


def test_synth_dataset_is_deterministic():
    p = PathLossParams(rng_seed=77)
    a, b = synth_dataset(500, params=p), synth_dataset(500, params=p)
    assert a.features.tobytes() == b.features.tobytes()
    assert a.labels.tobytes() == b.labels.tobytes()
    c = synth_dataset(500, params=PathLossParams(rng_seed=78))
    assert a.features.tobytes() != c.features.tobytes()


def test_synth_dataset_class_balance():
    data = synth_dataset(10_000, params=PathLossParams(rng_seed=5))
    grid = [0.5 * i for i in range(1, 11)]
    analytic = sum(d <= 2.0 for d in grid) / len(grid)
    assert analytic == 0.4
    assert abs(data.labels.mean() - analytic) <= 0.02


def test_synth_dataset_label_consistency_brute_force():
    data = synth_dataset(3000, threshold_m=3.25, params=PathLossParams(rng_seed=8))
    for dist, label in zip(data.distances, data.labels):
        assert label == (dist <= 3.25)


def test_synth_dataset_config_errors():
    with pytest.raises(InvalidConfig):
        synth_dataset(10, distances=())
    with pytest.raises(InvalidConfig):
        synth_dataset(0)


def test_csv_export_roundtrip(tmp_path):
    data = synth_dataset(50, params=PathLossParams(rng_seed=2))
    path = tmp_path / "synth.csv"
    write_csv(path, data, [WearSetting.LR] * len(data))
    back = dataset_from_samples(load_dataset(path), threshold_m=2.0)
    assert back.features.tobytes() == data.features.tobytes()
    assert back.labels.tolist() == data.labels.tolist()


def test_featurize_single_reading():
    s = [RssiSample(A, B, -60.0, 0.0), RssiSample(B, A, -62.0, 0.0)]
    assert featurize(s).tolist() == [-60.0, -62.0]


def test_featurize_median_damps_outlier():
    s = [RssiSample(A, B, v, 0.0) for v in (-60.0, -58.0, -90.0)] + [RssiSample(B, A, -62.0, 0.0)]
    assert featurize(s).tolist() == [-60.0, -62.0]


def test_featurize_orientation():
    s = [RssiSample(B, A, -62.0, 0.0), RssiSample(A, B, -60.0, 0.0)]
    assert featurize(s, first=A).tolist() == [-60.0, -62.0]
    assert featurize(s, first=B).tolist() == [-62.0, -60.0]


def test_featurize_incomplete():
    with pytest.raises(IncompleteSession):
        featurize([RssiSample(A, B, -60.0, 0.0)])
    with pytest.raises(IncompleteSession):
        featurize([])
