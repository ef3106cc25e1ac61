import math

import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from triaxbnn import datapipe as dp
from triaxbnn.datapipe import Dataset, TriaxSeries

from conftest import make_dataset, make_series


@pytest.mark.parametrize("s1,s3,p,q", [(300, 300, 300, 0), (500, 200, 300, 300), (0, 0, 0, 0)])
def test_invariants(s1, s3, p, q):
    assert dp.compute_invariants(s1, s3) == (p, q)


# -- RMS normalization -------------------------------------------------------------

def _series_with_p(tid, p_values, sigma3=100.0):
    N = len(p_values)
    states = np.column_stack([[1.0, *p_values], np.ones(N + 1), np.linspace(0, 1, N + 1)])
    return TriaxSeries(tid, "cyclic-CU", sigma3, 0.7, states, np.ones((N, 4)))


def test_rms_of_constant_is_one():
    ds = Dataset([_series_with_p("a", [4.0, 4.0, 4.0])])
    out, _ = dp.rms_normalize(ds)
    np.testing.assert_allclose(out[0].states[1:, 0], 1.0, rtol=0, atol=1e-15)


def test_rms_hand_computation():
    ds = Dataset([_series_with_p("a", [3.0, 4.0]), _series_with_p("b", [0.0, 0.0])])
    out, st_ = dp.rms_normalize(ds)
    assert st_.group_scale(100.0)[0] == 2.5
    np.testing.assert_allclose(out[0].states[1:, 0], [1.2, 1.6], rtol=1e-15)


def test_zero_rms_rejected():
    ds = Dataset([_series_with_p("a", [0.0, 0.0])])
    with pytest.raises(dp.NormalizationError, match="zero RMS"):
        dp.rms_normalize(ds)


def test_rms_groups_are_exact_sigma3_classes(rng):
    ds = make_dataset(rng, M=4, sigma3s=(100.0, 200.0))
    st_ = dp.fit_norm(ds)
    assert sorted(st_.p_rms) == [repr(100.0), repr(200.0)]


def test_unseen_group_uses_nearest_in_log_space(rng):
    st_ = dp.fit_norm(make_dataset(rng, M=4, sigma3s=(10.0, 1000.0)))
    assert st_.group_scale(90.0) == st_.group_scale(10.0)
    assert st_.group_scale(120.0) == st_.group_scale(1000.0)


# -- min-max --------------------------------------------------------------------

def test_minmax_endpoints_and_midpoint(rng):
    ds = make_dataset(rng)
    out, st_ = dp.minmax_scale(ds)
    third = np.concatenate([s.states[:, 2] for s in out])
    assert third.min() == 0.0 and third.max() == 1.0
    lo, hi = -1.0, 3.0
    assert (1.0 - lo) / (hi - lo) == 0.5
    delta = np.concatenate([s.inputs[:, 2] for s in out])
    assert set(np.unique(delta)) == {0.0, 1.0}


def test_constant_field_rejected_unless_allowed(rng):
    ds = make_dataset(rng, sigma3s=(100.0,))
    with pytest.raises(dp.NormalizationError, match="theta.sigma3"):
        dp.minmax_scale(ds)
    out, st_ = dp.minmax_scale(ds, allow_constant=True)
    assert all(s.theta[0] == 0.0 for s in out)


# -- round trip and equivariance -------------------------------------------------

@settings(max_examples=30, deadline=None)
@given(st.integers(0, 2**32 - 1), st.integers(1, 5), st.integers(2, 30))
def test_normalization_round_trip(seed, M, N):
    rng = np.random.default_rng(seed)
    ds = make_dataset(rng, M=M, N=N, sigma3s=(50.0, 300.0, 800.0))
    st_ = dp.fit_norm(ds, allow_constant=True)
    back = dp.denormalize(dp.normalize(ds, st_), st_)
    for a, b in zip(ds, back):
        np.testing.assert_allclose(b.states, a.states, rtol=1e-12, atol=1e-12)
        np.testing.assert_allclose(b.inputs, a.inputs, rtol=1e-12, atol=1e-12)


@settings(max_examples=30, deadline=None)
@given(st.integers(0, 2**32 - 1), st.floats(1e-3, 1e3))
def test_group_scale_equivariance(seed, c):
    rng = np.random.default_rng(seed)
    ds = make_dataset(rng, M=4, sigma3s=(100.0, 200.0))
    scaled = Dataset([TriaxSeries(s.test_id, s.kind, s.sigma3, s.e0,
                                  s.states * ([c, 1.0, 1.0] if s.sigma3 == 100.0 else 1.0),
                                  s.inputs) for s in ds])
    a, _ = dp.rms_normalize(ds)
    b, _ = dp.rms_normalize(scaled)
    for x, y in zip(a, b):
        np.testing.assert_allclose(y.states[:, 0], x.states[:, 0], rtol=1e-14)
        np.testing.assert_array_equal(y.states[:, 1:], x.states[:, 1:])


def test_norm_stats_json_roundtrip(rng):
    st_ = dp.fit_norm(make_dataset(rng))
    again = dp.NormStats.from_dict(st_.to_dict())
    assert again.fingerprint() == st_.fingerprint()


# -- windows ----------------------------------------------------------------------

@pytest.mark.parametrize("H", range(1, 21))
def test_window_count(H, rng):
    ds = make_dataset(rng, M=3, N=20)
    assert len(dp.segment_windows(ds, H)) == 3 * (20 - H + 1)


@pytest.mark.parametrize("N,H,count", [(100, 10, 91), (5, 5, 1), (5, 1, 5)])
def test_window_count_examples(N, H, count, rng):
    ds = Dataset([make_series(rng, "a", N=N)])
    assert len(dp.segment_windows(ds, H)) == count


def test_window_contents_and_overlap(rng):
    ds = make_dataset(rng, M=1, N=12)
    ws = dp.segment_windows(ds, 4)
    s = ds[0]
    for w in ws:
        np.testing.assert_array_equal(w.s_init, s.states[w.k - 1])
        np.testing.assert_array_equal(w.targets, s.states[w.k:w.k + 4])
        np.testing.assert_array_equal(w.inputs, s.inputs[w.k - 1:w.k + 3])
    for a, b in zip(ws, ws[1:]):
        np.testing.assert_array_equal(a.targets[1:], b.targets[:-1])


def test_window_too_long(rng):
    with pytest.raises(ValueError, match="exceeds"):
        dp.segment_windows(make_dataset(rng, N=5), 6)


def test_monotonic_uses_two_inputs(rng):
    ds = make_dataset(rng, kind="monotonic-CD", N=10)
    assert ds.input_dim == 2
    assert dp.window_batch(ds, 3).inputs.shape == (3 * 8, 3, 2)


# -- splits -----------------------------------------------------------------------

def test_default_void_ratio_split():
    from triaxbnn.triaxsim import default_suite, generate_dataset
    ds = generate_dataset(default_suite("undrained", n_cycles=1, steps_per_branch=2))
    spec = dp.split_by_e0(ds, [0.6], [0.575, 0.775, 0.95])
    tr, va, te = dp.split_dataset(ds, spec)
    assert (len(tr), len(va), len(te)) == (12, 1, 3)
    assert set(tr.ids) | set(va.ids) | set(te.ids) == set(ds.ids)


def test_pressure_split():
    from triaxbnn.triaxsim import generate_dataset, monotonic_suite
    ds = generate_dataset(monotonic_suite(e0s=(0.7,), steps=5))
    tr, va, te = dp.split_dataset(ds, dp.split_by_sigma3(ds, [10, 640], [5, 800]))
    assert sorted(s.sigma3 for s in te) == [5.0, 800.0]
    assert sorted(s.sigma3 for s in va) == [10.0, 640.0]
    assert min(s.sigma3 for s in tr) == 20.0 and max(s.sigma3 for s in tr) == 480.0


def test_identity_split(small_ds):
    tr, va, te = dp.split_dataset(small_ds, {"train": small_ds.ids})
    assert len(tr) == len(small_ds) and len(va) == len(te) == 0


@pytest.mark.parametrize("spec,msg", [
    ({"train": ["T0", "T1"], "test": ["T1", "T2"]}, "both"),
    ({"train": ["T0", "T1"]}, "not assigned"),
    ({"train": ["T0", "T1", "T2", "T9"]}, "unknown"),
])
def test_bad_splits(small_ds, spec, msg):
    with pytest.raises(dp.SplitError, match=msg):
        dp.split_dataset(small_ds, spec)


def test_statistics_come_from_training_split_only(small_ds):
    spec = {"train": ["T0", "T1"], "test": ["T2"]}
    _, _, te, stats = dp.prepare_splits(small_ds, spec)
    assert stats.fingerprint() == dp.fit_norm(small_ds.subset(["T0", "T1"]),
                                              allow_constant=True).fingerprint()
    assert np.asarray(te[0].states).shape == small_ds[2].states.shape


# -- CSV --------------------------------------------------------------------------

def test_csv_round_trip(tmp_path, rng):
    ds = make_dataset(rng, M=2)
    dp.save_csv(ds, tmp_path / "d.csv")
    back = dp.load_csv(tmp_path / "d.csv")
    assert back.ids == ds.ids
    for a, b in zip(ds, back):
        assert np.array_equal(a.states, b.states) and np.array_equal(a.inputs, b.inputs)
        assert (a.sigma3, a.e0, a.kind, a.third_kind) == (b.sigma3, b.e0, b.kind, b.third_kind)


def test_csv_missing_column(tmp_path, rng):
    ds = make_dataset(rng, M=1)
    dp.save_csv(ds, tmp_path / "d.csv")
    lines = (tmp_path / "d.csv").read_text().splitlines()
    cols = lines[0].split(",")
    drop = cols.index("q_kpa")
    text = "\n".join(",".join(c for i, c in enumerate(l.split(",")) if i != drop) for l in lines)
    (tmp_path / "bad.csv").write_text(text)
    with pytest.raises(dp.SchemaError, match="q_kpa"):
        dp.load_csv(tmp_path / "bad.csv")


def test_csv_malformed_row_reports_line(tmp_path, rng):
    dp.save_csv(make_dataset(rng, M=1), tmp_path / "d.csv")
    lines = (tmp_path / "d.csv").read_text().splitlines()
    lines[4] = lines[4].replace(lines[4].split(",")[9], "abc", 1)
    (tmp_path / "bad.csv").write_text("\n".join(lines))
    with pytest.raises(dp.SchemaError, match=":5:"):
        dp.load_csv(tmp_path / "bad.csv")


def test_csv_header_only_is_empty(tmp_path):
    (tmp_path / "e.csv").write_text(",".join(dp.CSV_COLUMNS) + "\n")
    assert len(dp.load_csv(tmp_path / "e.csv")) == 0


def test_csv_inconsistent_lengths(tmp_path, rng):
    ds = Dataset([make_series(rng, "a", N=5), make_series(rng, "b", N=6)])
    dp.save_csv(ds, tmp_path / "d.csv")
    with pytest.raises(dp.SchemaError, match="different lengths"):
        dp.load_csv(tmp_path / "d.csv")
