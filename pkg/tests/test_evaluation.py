import math
import statistics

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from geoformer.dataset_store import CHANNELS
from geoformer.errors import ConfigError, DataError
from geoformer.evaluation import (
    AblationResult,
    AblationSpec,
    MetricReport,
    ablation_table,
    metrics,
    n_trimmed,
    nmad,
    read_reports_csv,
    rollup,
    stratified,
    subset_mask,
    trim_outliers,
    write_reports_csv,
    write_reports_json,
)


def oracle(pred, true):
    """Textbook formulas in plain Python, one element at a time."""
    n = len(pred)
    res = [p - t for p, t in zip(pred, true)]
    rmse = math.sqrt(math.fsum(r * r for r in res) / n)
    mae = math.fsum(abs(r) for r in res) / n
    me = math.fsum(res) / n
    med = statistics.median(res)
    nm = 1.4826 * statistics.median([abs(r - med) for r in res])
    mp, mt = math.fsum(pred) / n, math.fsum(true) / n
    cov = math.fsum((p - mp) * (t - mt) for p, t in zip(pred, true))
    vp = math.fsum((p - mp) ** 2 for p in pred)
    vt = math.fsum((t - mt) ** 2 for t in true)
    cc = cov / math.sqrt(vp * vt)
    r2 = 1 - math.fsum(r * r for r in res) / vt
    return dict(rmse=rmse, mae=mae, me=me, nmad=nm, cc=cc, r2=r2)


def test_metrics_match_oracle_random():
    rng = np.random.default_rng(11)
    for _ in range(200):
        n = int(rng.integers(2, 80))
        t = rng.normal(10, 5, n)
        p = t + rng.normal(rng.normal(), rng.uniform(0.1, 4), n)
        got = metrics(p, t)
        want = oracle(p.tolist(), t.tolist())
        for k, v in want.items():
            assert math.isclose(getattr(got, k), v, rel_tol=1e-12, abs_tol=1e-12), (k, n)


def test_nmad_hand_case():
    assert nmad([1, 2, 3, 4, 100]) == 1.4826
    assert metrics([1.0, 2.0, 3.0, 4.0, 100.0], [0.0] * 5).nmad == 1.4826


def test_identity_predictions():
    t = np.array([1.0, 4.0, 2.0, 8.0])
    r = metrics(t, t)
    assert (r.rmse, r.mae, r.me, r.nmad, r.cc, r.r2) == (0, 0, 0, 0, 1, 1)


def test_errors_and_flags():
    with pytest.raises(DataError):
        metrics([1.0], [1.0])
    with pytest.raises(DataError):
        metrics([1.0, np.nan], [1.0, 2.0])
    with pytest.raises(DataError):
        metrics([1.0, 2.0], [1.0, 2.0, 3.0])
    r = metrics([1.0, 2.0, 3.0], [2.0, 2.0, 2.0])
    assert math.isnan(r.cc) and math.isnan(r.r2) and "zero_target_variance" in r.flags
    r = metrics([2.0, 2.0, 2.0], [1.0, 2.0, 3.0])
    assert math.isnan(r.cc) and r.r2 == pytest.approx(1 - 2 / 2) and r.flags == ["zero_prediction_variance"]


vec = st.lists(st.floats(-1e3, 1e3, allow_nan=False), min_size=3, max_size=40)


@settings(max_examples=100, deadline=None)
@given(vec, st.integers(0, 2**31 - 1))
def test_report_invariants(t, seed):
    t = np.array(t)
    p = t + np.random.default_rng(seed).normal(0, 3, t.size)
    r = metrics(p, t)
    assert r.rmse >= abs(r.me) - 1e-12 and r.nmad >= 0
    if not math.isnan(r.cc):
        assert -1 <= r.cc <= 1
    if not math.isnan(r.r2):
        assert r.r2 <= 1


def test_affine_asymmetry():
    rng = np.random.default_rng(3)
    t = rng.normal(20, 6, 200)
    p = t + rng.normal(0, 2, 200)
    a, b = metrics(p, t), metrics(2.5 * p + 7, t)
    assert b.cc == pytest.approx(a.cc, abs=1e-12)
    assert abs(b.r2 - a.r2) > 0.1 and abs(b.rmse - a.rmse) > 1


def test_shift_asymmetry():
    rng = np.random.default_rng(4)
    t = rng.normal(20, 6, 200)
    p = t + rng.normal(0, 2, 200)
    a, b = metrics(p, t), metrics(p + 3.0, t)
    assert b.nmad == pytest.approx(a.nmad, abs=1e-9)
    assert b.rmse > a.rmse + 1


def test_composition_over_disjoint_sets():
    rng = np.random.default_rng(5)
    parts = [(rng.normal(0, 1, n) + 1, rng.normal(0, 1, n)) for n in (7, 30, 120)]
    reps = [metrics(p, t) for p, t in parts]
    whole = metrics(np.concatenate([p for p, _ in parts]), np.concatenate([t for _, t in parts]))
    N = sum(r.n for r in reps)
    assert whole.me == pytest.approx(sum(r.n * r.me for r in reps) / N, abs=1e-14)
    assert whole.rmse ** 2 == pytest.approx(sum(r.n * r.rmse ** 2 for r in reps) / N, rel=1e-13)


# -- stratified ------------------------------------------------------------------

def _labels(n, seed):
    rng = np.random.default_rng(seed)
    h = rng.gamma(2.0, 8.0, n)
    lp = rng.uniform(0, 1, n)
    return h, lp


def test_single_bin_equals_global():
    h, lp = _labels(300, 0)
    p = h + np.random.default_rng(1).normal(0, 2, 300)
    [r] = stratified(p, h, (h, lp), h_edges=(0, np.inf), lp_edges=(0, 1))
    g = metrics(p, h)
    for m in ("rmse", "mae", "me", "nmad", "cc", "r2", "n"):
        assert getattr(r, m) == getattr(g, m)
    assert r.stratum == "h[0,inf)|lp[0,1)"


def test_partition_reassembles_me():
    h, lp = _labels(2000, 2)
    p = h + np.random.default_rng(3).normal(0.3, 2, h.size)
    reps = stratified(p, h, (h, lp), n_min=0)
    assert sum(r.n for r in reps) == h.size
    assert all(r.n == 0 or r.n >= 2 for r in reps)
    me = sum(r.n * r.me for r in reps if r.n)
    assert me / h.size == pytest.approx(metrics(p, h).me, abs=1e-12)


def test_underestimation_confined_to_tall_bin():
    h, lp = _labels(3000, 4)
    p = np.where(h > 50, h - 8.0, h + 0.0)
    reps = stratified(p, h, (h, lp), lp_edges=(0, 1))
    for r in reps:
        if r.n == 0:
            continue
        if r.stratum.startswith("h[50,"):
            assert r.me == pytest.approx(-8.0)
        else:
            assert r.me == 0.0


def test_empty_bin_sparse_nan():
    h = np.array([1.0, 2.0, 3.0, 15.0, 16.0])
    lp = np.full(5, 0.05)
    reps = stratified(h + 1, h, (h, lp))
    assert len(reps) == 25
    e = reps[-1]
    assert e.n == 0 and "sparse" in e.flags and math.isnan(e.rmse)
    assert all("sparse" in r.flags for r in reps)
    assert reps[0].n == 3 and reps[0].me == 1.0


def test_top_edge_closed_and_bad_edges():
    h = np.array([5.0, 5.0, 5.0])
    lp = np.array([1.0, 1.0, 0.7])
    reps = stratified(h, h, (h, lp), n_min=0)
    assert sum(r.n for r in reps) == 3
    assert [r.n for r in reps if r.n] == [3]
    with pytest.raises(ConfigError):
        stratified(h, h, (h, lp), h_edges=(0, 10, 10))


def test_stratified_accepts_samples():
    from geoformer.dataset_store import Sample

    s = [Sample("c", i, 0, 5.0 + i, 0.2) for i in range(40)]
    reps = stratified([x.h_ave for x in s], [x.h_ave for x in s], s)
    assert sum(r.n for r in reps) == 40


def test_subset_mask():
    h = np.array([4.9, 5.0, 14.99, 15.0, 10.0])
    lp = np.array([0.2, 0.2, 0.2, 0.2, 0.5])
    assert subset_mask((h, lp)).tolist() == [False, True, True, False, False]


# -- trimming --------------------------------------------------------------------

def test_trim_counts():
    assert n_trimmed(1000, 0.001) == 1
    assert n_trimmed(1001, 0.001) == 2
    assert n_trimmed(999, 0.001) == 1
    assert n_trimmed(10, 0.1) == 1
    with pytest.raises(ConfigError):
        trim_outliers([1, 2], [1, 2], q=0.5)


def test_trim_hand_fixture():
    n = 1000
    t = np.zeros(n)
    p = np.where(np.arange(n) % 2 == 0, 1.0, -1.0)
    p[500] = 100.0
    res = trim_outliers(p, t, q=0.001)
    assert res.dropped.tolist() == [500]
    assert res.before.rmse == pytest.approx(math.sqrt((999 + 100 ** 2) / 1000), abs=1e-12)
    assert res.after.rmse == pytest.approx(1.0, abs=1e-15)
    assert res.kept.size == 999


@settings(max_examples=60, deadline=None)
@given(st.lists(st.floats(-50, 50, allow_nan=False), min_size=4, max_size=200), st.floats(0.001, 0.4))
def test_trim_never_raises_rmse(res, q):
    r = np.array(res)
    out = trim_outliers(r, np.zeros_like(r), q=q)
    assert out.after.rmse <= out.before.rmse + 1e-12
    assert out.dropped.size == n_trimmed(r.size, q)
    assert np.min(np.abs(r[out.dropped])) >= np.max(np.abs(r[out.kept]))


# -- ablation specs and reports -----------------------------------------------------

def test_named_specs_consistent():
    assert AblationSpec.named("no_dem").dropped == ("DEM",)
    assert AblationSpec.named("no_sar").dropped == ("VV", "VH")
    assert AblationSpec.named("no_optical").dropped == ("B2", "B3", "B4", "B8")
    assert AblationSpec.named("enlarged").capacity_scale == 2
    assert AblationSpec.named("full").dropped == ()


def test_inconsistent_specs_rejected():
    keep = [c != "DEM" for c in CHANNELS]
    with pytest.raises(ConfigError, match="must drop"):
        AblationSpec("no_sar", keep)
    with pytest.raises(ConfigError, match="capacity"):
        AblationSpec("full", [True] * 7, capacity_scale=2)
    with pytest.raises(ConfigError, match="every input"):
        AblationSpec("full", [False] * 7)
    with pytest.raises(ConfigError):
        AblationSpec.named("no_thermal")


def _rep(model, task, rmse, mae, r2, stratum="test"):
    return MetricReport(rmse, mae, 0.0, 0.0, 0.9, r2, 100, task, model, stratum)


def test_ablation_table_layout_fixture():
    res = {
        "full": AblationResult(AblationSpec.named("full"), {"bh": _rep("full", "bh", 3.19, 1.44, 0.661),
                                                           "bf": _rep("full", "bf", 0.051, 0.031, 0.801)}, {}, 1, 1),
        "no_dem": AblationResult(AblationSpec.named("no_dem"), {"bh": _rep("no_dem", "bh", 3.67, 1.68, 0.552),
                                                               "bf": _rep("no_dem", "bf", 0.052, 0.032, 0.794)},
                                 {}, 1, 1),
    }
    table = ablation_table(res, "structural").splitlines()
    assert table[0].split() == ["Model", "BH", "MAE", "BH", "RMSE", "BH", "R2", "BF", "MAE", "BF", "RMSE", "BF", "R2"]
    assert table[1].split()[-6:] == ["1.44", "3.19", "0.661", "0.031", "0.051", "0.801"]
    assert table[2].startswith("Without DEM") and "3.67" in table[2]


def test_rollup_and_csv_json(tmp_path):
    reps = [_rep("GeoFormer 5x5", "bh", 3.19, 1.53, 0.66, "all"), _rep("GeoFormer 5x5", "bf", 0.05, 0.03, 0.8, "all")]
    text = rollup(reps)
    assert "[Building Height (BH)]" in text and "[Building Footprint (BF)]" in text
    assert "3.19" in text
    back = read_reports_csv(write_reports_csv(tmp_path / "r.csv", reps))
    assert [r.as_row() for r in back] == [r.as_row() for r in reps]
    import json

    nanrep = MetricReport.empty("bh", "m", "x", ["sparse"])
    doc = json.loads(write_reports_json(tmp_path / "r.json", [nanrep]).read_text())
    assert doc["reports"][0]["rmse"] is None and doc["reports"][0]["flags"] == "sparse"
