import json
import math

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st
from scipy import ndimage

from geoformer.ccap import (
    CcapConfig,
    EventRow,
    cluster_sizes,
    entropy,
    event_compare,
    event_table,
    label,
    overall,
    read_mask_pgm,
    select_threshold,
    urban_mask,
    write_ccap_outputs,
    write_event_csv,
    write_event_json,
)
from geoformer.errors import ConfigError, DataError


def brute_force(bf, bh, lo=0.005, hi=0.15, n=30, floor=5.0, penalty=0.0):
    """Independent route: scipy labeling, numpy entropy, first argmax."""
    cands = np.linspace(lo, hi, n)
    scores = np.full(n, -np.inf)
    for i, lam in enumerate(cands):
        m = (bf >= lam) & (bh >= floor)
        if not m.any():
            continue
        lab, k = ndimage.label(m)
        sizes = np.sort(np.bincount(lab.ravel())[1:])
        p = np.sort(sizes / sizes.sum())
        scores[i] = -np.sum(p * np.log(p)) - penalty * m.mean()
    if np.all(np.isinf(scores)):
        return None
    return float(cands[int(np.argmax(scores))])


def random_case(rng):
    r, c = rng.integers(2, 17, size=2)
    kind = rng.integers(3)
    if kind == 0:
        bf = rng.uniform(0, 0.2, (r, c))
    elif kind == 1:
        bf = ndimage.uniform_filter(rng.uniform(0, 0.3, (r, c)), 3)
    else:
        bf = np.where(rng.random((r, c)) < 0.5, rng.uniform(0.0, 0.16, (r, c)), 0.0)
    bh = rng.uniform(0, 15, (r, c))
    return bf, bh


def test_brute_force_corpus():
    rng = np.random.default_rng(2024)
    checked = 0
    for _ in range(100):
        bf, bh = random_case(rng)
        want = brute_force(bf, bh)
        if want is None:
            with pytest.raises(DataError, match="no urban area"):
                select_threshold(bf, bh)
            continue
        assert select_threshold(bf, bh).lam_star == want
        checked += 1
    assert checked > 80


def test_labeling_matches_scipy():
    rng = np.random.default_rng(1)
    for _ in range(300):
        m = rng.random(tuple(rng.integers(1, 20, 2))) < rng.random()
        a, n = label(m, 4)
        b, nb = ndimage.label(m)
        assert n == nb and np.array_equal(a, b)
        a, n = label(m, 8)
        b, nb = ndimage.label(m, structure=np.ones((3, 3)))
        assert n == nb and np.array_equal(a, b)


def test_entropy_cases():
    assert entropy([7]) == 0.0
    assert entropy([3, 3, 3, 3]) == pytest.approx(math.log(4), abs=1e-15)
    assert entropy([1, 1, 2], probabilities="size_histogram") == pytest.approx(
        -(2 / 3 * math.log(2 / 3) + 1 / 3 * math.log(1 / 3)))
    assert math.isnan(entropy([]))
    sizes = [5, 1, 9, 2, 2, 7]
    assert entropy(sizes) == entropy(sizes[::-1]) == entropy(sorted(sizes))


def hand_grid():
    bf = np.zeros((8, 8))
    bh = np.full((8, 8), 10.0)
    bf[0:2, 0:2] = 0.1225
    bf[0:2, 6:8] = 0.1225
    bf[2, :] = 0.0125
    for c in (0, 2, 4, 6):
        bf[3, c] = 0.0125
        bf[4, c] = 0.0325
    bf[7, 7] = 0.9
    bh[7, 7] = 3.0  # below the height floor
    return bf, bh


def test_hand_built_two_scale_grid():
    bf, bh = hand_grid()
    res = select_threshold(bf, bh)
    h_mixed = -(2 * (1 / 3) * math.log(1 / 3) + 4 * (1 / 12) * math.log(1 / 12))
    expect = [0.0] * 2 + [h_mixed] * 4 + [math.log(2)] * 18 + [math.nan] * 6
    for got, want in zip(res.entropies, expect):
        if math.isnan(want):
            assert math.isnan(got)
        else:
            assert got == pytest.approx(want, abs=1e-14)
    assert res.lam_star == pytest.approx(0.015)
    assert res.n_clusters == 6 and res.size_hist == {4: 2, 1: 4}
    assert not res.mask[7, 7]


def test_base_invariance_of_argmax():
    rng = np.random.default_rng(8)
    for _ in range(30):
        bf, bh = random_case(rng)
        try:
            res = select_threshold(bf, bh)
        except DataError:
            continue
        cands = CcapConfig().candidates
        for base in (2.0, 10.0):
            ents = []
            for lam in cands:
                m = urban_mask(bf, bh, lam)
                ents.append(entropy(cluster_sizes(m), base=base) if m.any() else -math.inf)
            assert cands[int(np.argmax(ents))] == res.lam_star


def test_mask_monotone_random_grids():
    rng = np.random.default_rng(9)
    cands = CcapConfig().candidates
    for _ in range(1000):
        shape = tuple(rng.integers(1, 17, 2))
        bf, bh = rng.uniform(0, 0.2, shape), rng.uniform(0, 12, shape)
        prev = None
        for lam in cands:
            m = urban_mask(bf, bh, lam)
            if prev is not None:
                assert not np.any(m & ~prev)
            prev = m


@settings(max_examples=40, deadline=None)
@given(st.integers(0, 2**31 - 1), st.integers(0, 6), st.integers(0, 6))
def test_translation_and_padding_invariance(seed, dr, dc):
    bf, bh = random_case(np.random.default_rng(seed))
    big_bf = np.zeros((bf.shape[0] + 9, bf.shape[1] + 9))
    big_bh = np.zeros_like(big_bf)
    big_bf[dr:dr + bf.shape[0], dc:dc + bf.shape[1]] = bf
    big_bh[dr:dr + bf.shape[0], dc:dc + bf.shape[1]] = bh
    try:
        a = select_threshold(bf, bh)
    except DataError:
        with pytest.raises(DataError):
            select_threshold(big_bf, big_bh)
        return
    b = select_threshold(big_bf, big_bh)
    assert a.lam_star == b.lam_star
    assert np.array_equal(a.entropies, b.entropies, equal_nan=True)


def test_penalty_shifts_choice():
    bf, bh = hand_grid()
    cfg = CcapConfig(penalty=100.0)
    res = select_threshold(bf, bh, cfg)
    assert res.lam_star > 0.03
    assert res.lam_star == brute_force(bf, bh, penalty=100.0)


def test_config_and_input_errors():
    with pytest.raises(ConfigError):
        CcapConfig(lam_lo=0.2, lam_hi=0.1)
    with pytest.raises(ConfigError):
        CcapConfig(n_steps=1)
    with pytest.raises(DataError):
        select_threshold(np.zeros((3, 3)), np.zeros((3, 4)))
    with pytest.raises(DataError):
        select_threshold(np.full((3, 3), 1.5), np.zeros((3, 3)))
    with pytest.raises(DataError, match="no urban area"):
        select_threshold(np.zeros((4, 4)), np.full((4, 4), 20.0))


def test_outputs(tmp_path):
    bf, bh = hand_grid()
    res = select_threshold(bf, bh)
    pgm, js = write_ccap_outputs(tmp_path, res, CcapConfig())
    assert np.array_equal(read_mask_pgm(pgm), res.mask)
    assert pgm.stat().st_size == len(b"P5\n8 8\n255\n") + 64
    doc = json.loads(js.read_text())
    assert doc["lambda_star"] == res.lam_star and doc["entropies"][-1] is None


# -- event comparison ------------------------------------------------------------------

def city(seed=0, n=40):
    """Low-rise cells are dense, high-rise cells sparser; all urban."""
    rng = np.random.default_rng(seed)
    low = rng.random((n, n)) < 0.5
    bf = np.where(low, rng.uniform(0.35, 0.45, (n, n)), rng.uniform(0.2, 0.3, (n, n)))
    bh = np.where(low, rng.uniform(5.5, 8, (n, n)), rng.uniform(12, 25, (n, n)))
    return bf, bh, low


def test_identical_epochs_zero_delta():
    bf, bh, _ = city()
    row = event_compare((bf, bh), (bf, bh), (20, 20), city="x")
    assert row.d_bf == 0.0 and row.d_bh == 0.0
    assert row.n_before == row.n_after == int(np.sum(((np.indices((40, 40)) - 20) ** 2).sum(0) <= 225))


def test_collapse_mechanism():
    bf, bh, low = city(3)
    bf1 = np.where(low, 0.0, bf)
    bh1 = np.where(low, 0.0, bh)
    row = event_compare((bf, bh), (bf1, bh1), (20, 20), city="collapse")
    assert row.bf_after < row.bf_before
    assert row.bh_after > row.bh_before
    assert row.n_after < row.n_before


def test_empty_region_error():
    bf, bh, _ = city()
    bh1 = bh.copy()
    bh1[10:31, 10:31] = 0.0
    with pytest.raises(DataError, match="empty masked region after"):
        event_compare((bf, bh), (bf, bh1), (20, 20), radius=500)
    with pytest.raises(DataError, match="aligned"):
        event_compare((bf, bh), (bf[:-1], bh[:-1]), (20, 20))


def test_event_table_layout(tmp_path):
    rows = [EventRow("Islahiye", 100, 50, 0.3148, 0.1417, 8.60, 9.66),
            EventRow("Antakya", 300, 200, 0.3721, 0.2976, 9.22, 10.20)]
    table = event_table(rows)
    assert table[0] == ["City", "BF Before", "BF After", "BH Before", "BH After"]
    assert table[1] == ["Islahiye", "0.3148", "0.1417", "8.60", "9.66"]
    assert rows[0].bf_change_pct == pytest.approx(-55.0, abs=0.1)
    o = overall(rows)
    assert o.bf_before == pytest.approx((100 * 0.3148 + 300 * 0.3721) / 400)
    assert o.bh_after == pytest.approx((50 * 9.66 + 200 * 10.20) / 250)
    assert table[-1][0] == "Overall"
    text = write_event_csv(tmp_path / "e.csv", rows).read_text().splitlines()
    assert text[1] == "Islahiye,0.3148,0.1417,8.60,9.66"
    doc = json.loads(write_event_json(tmp_path / "e.json", rows).read_text())
    assert doc[-1]["city"] == "Overall" and doc[0]["lam_before"] is None
