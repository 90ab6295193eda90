import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from homsim import correlate as C

stamps = st.lists(st.integers(0, 20_000), max_size=60).map(lambda x: np.sort(np.array(x, np.int64)))


def _start_stop_reference(a, b, cfg):
    counts = np.zeros(cfg.n_bins, np.int64)
    for t in a:
        later = b[b >= t + cfg.tau_min]
        if len(later):
            i = C.bin_index(np.array([later[0] - t]), cfg)[0]
            if i >= 0:
                counts[i] += 1
    return counts


def test_config_validation():
    with pytest.raises(C.CorrelationError):
        C.HistogramConfig(0, -10, 10)
    with pytest.raises(C.CorrelationError):
        C.HistogramConfig(3, -10, 10)
    with pytest.raises(C.CorrelationError):
        C.HistogramConfig(10, 10, -10)
    with pytest.raises(C.CorrelationError):
        C.HistogramConfig(10, -10, 10, "sideways")
    with pytest.raises(C.CorrelationError):
        C.HistogramConfig.centered(100, 3)


def test_centered_layout_has_odd_bins_around_zero():
    cfg = C.HistogramConfig.centered(1000, 100)
    assert cfg.n_bins % 2 == 1
    assert cfg.tau_min == -cfg.tau_max
    assert cfg.tau_max >= 1000


def test_bin_edges_are_half_open_away_from_zero():
    cfg = C.HistogramConfig(10, -20, 20)
    idx = C.bin_index(np.array([-20, -11, -10, -1, 0, 9, 10, 19, 20, -21]), cfg)
    # negative side: (lo, hi]; positive side: [lo, hi)
    assert idx.tolist() == [-1, 0, 0, 1, 2, 2, 3, 3, -1, -1]


@settings(max_examples=60, deadline=None)
@given(stamps, stamps, st.sampled_from([2, 10, 50]))
def test_full_mode_equals_brute_force(a, b, w):
    cfg = C.HistogramConfig.centered(1000, w)
    assert np.array_equal(C.cross_histogram(a, b, cfg, workers=1).counts,
                          C.brute_force_histogram(a, b, cfg).counts)


@settings(max_examples=60, deadline=None)
@given(stamps, stamps)
def test_start_stop_matches_reference(a, b):
    cfg = C.HistogramConfig.centered(1000, 20, "start-stop")
    assert np.array_equal(C.cross_histogram(a, b, cfg, workers=1).counts, _start_stop_reference(a, b, cfg))


@settings(max_examples=60, deadline=None)
@given(stamps, stamps, st.integers(1, 9))
def test_chunking_never_changes_counts(a, b, chunks):
    cfg = C.HistogramConfig.centered(2000, 40)
    ref = C.cross_histogram(a, b, cfg, chunks=1, workers=1)
    got = C.cross_histogram(a, b, cfg, chunks=chunks, workers=3)
    assert np.array_equal(ref.counts, got.counts)


@settings(max_examples=60, deadline=None)
@given(stamps, stamps)
def test_channel_swap_reflects_histogram(a, b):
    cfg = C.HistogramConfig.centered(1000, 20)
    ab = C.cross_histogram(a, b, cfg, workers=1).counts
    ba = C.cross_histogram(b, a, cfg, workers=1).counts
    assert np.array_equal(ab, ba[::-1])


def test_large_random_streams_match_brute_force():
    g = np.random.default_rng(4)
    a = np.sort(g.integers(0, 10**7, 10_000))
    b = np.sort(g.integers(0, 10**7, 10_000))
    cfg = C.HistogramConfig.centered(20_000, 100)
    assert np.array_equal(C.cross_histogram(a, b, cfg).counts, C.brute_force_histogram(a, b, cfg).counts)


def test_rejects_unsorted_and_same_channel():
    cfg = C.HistogramConfig.centered(100, 10)
    with pytest.raises(C.CorrelationError):
        C.cross_histogram(np.array([5, 1]), np.array([1, 2]), cfg)
    a = np.array([1, 2])
    with pytest.raises(C.CorrelationError):
        C.cross_histogram(a, a, cfg)
    with pytest.raises(C.CorrelationError):
        C.cross_histogram(a, np.array([3]), cfg, channels=(1, 1))


def test_empty_inputs():
    cfg = C.HistogramConfig.centered(100, 10)
    h = C.cross_histogram(np.array([], np.int64), np.array([5]), cfg)
    assert h.counts.sum() == 0 and h.metadata["events_a"] == 0


def test_histogram_add_and_validation():
    cfg = C.HistogramConfig.centered(100, 10)
    h = C.Histogram(cfg.edges, np.ones(cfg.n_bins, np.int64), metadata={"pairs": 3})
    s = h + h
    assert s.counts.sum() == 2 * cfg.n_bins and s.metadata["pairs"] == 6
    with pytest.raises(C.CorrelationError):
        h + C.Histogram(cfg.edges + 1, h.counts)
    with pytest.raises(C.CorrelationError):
        C.Histogram(cfg.edges, h.counts[:-1])
    with pytest.raises(C.CorrelationError):
        C.Histogram(cfg.edges, -h.counts)


def test_lifetime_histogram_folds_by_period():
    stamps = np.array([100, 1100, 2150, 10_050])
    h = C.lifetime_histogram(stamps, 1000.0, 100)
    # phases 100, 100, 150 land in [100, 200); 50 lands in [0, 100)
    assert h.counts.tolist()[:2] == [1, 3]
    assert h.counts.sum() == 4


# ---------------------------------------------------------------- pulsed peaks

def _comb(heights=None, period_ps=10_000):
    """Rectangular peaks 20 bins wide (100 ps bins) with per-bin ``heights[k]`` (default 10)."""
    cfg = C.HistogramConfig.centered(5 * period_ps, 100)
    counts = np.zeros(cfg.n_bins, np.int64)
    centers = 0.5 * (cfg.edges[:-1] + cfg.edges[1:])
    for k in range(-4, 5):
        sel = np.abs(centers - k * period_ps) <= 1000
        assert sel.sum() == 21
        counts[sel] = (heights or {}).get(k, 10)
    return C.Histogram(cfg.edges, counts)


def test_peak_areas_and_g2():
    h = _comb({0: 2, 1: 5, -1: 5})
    pa = C.peak_areas(h, 10.0, 8.0)
    assert pa.n_ref == pytest.approx(210.0)
    assert pa.areas[1] == pytest.approx(105.0)
    assert C.pulsed_g2_zero(pa) == pytest.approx(0.2)
    assert pa.ratio(-1) == pytest.approx(0.5)
    assert set(pa.reference_ks) == {k for k in range(-4, 5) if abs(k) >= 2}


def test_peak_area_window_sum_handles_partial_bins():
    cfg = C.HistogramConfig(100, 0, 1000)
    h = C.Histogram(cfg.edges, np.full(10, 10))
    assert C._window_sum(h, 500.0, 150.0) == pytest.approx(15.0)


def test_peak_areas_errors():
    h = _comb()
    with pytest.raises(C.CorrelationError):
        C.peak_areas(h, 10.0, 12.0)
    with pytest.raises(C.CorrelationError):
        C.peak_areas(h, 0.0, 1.0)
    pa = C.peak_areas(h, 10.0, 8.0, k_range=[0])
    with pytest.raises(C.CorrelationError):
        C.pulsed_g2_zero(pa)


# ---------------------------------------------------------------- normalisation

def test_plateau_normalisation():
    cfg = C.HistogramConfig.centered(10_000, 100)
    counts = np.full(cfg.n_bins, 50)
    counts[cfg.n_bins // 2] = 5
    h = C.normalize(C.Histogram(cfg.edges, counts), "plateau", plateau=[(-10, -5), (5, 10)])
    assert h.divisor == pytest.approx(50.0)
    assert h.normalized[cfg.n_bins // 2] == pytest.approx(0.1)
    assert h.metadata["normalization"]["method"] == "plateau"
    assert np.allclose(h.sigma, np.sqrt(counts) / 50.0)


def test_peak_normalisations():
    h = _comb({0: 2})
    m = C.normalize(h, "peak_mean", period=10.0)
    assert m.divisor == pytest.approx(210.0)
    amp = C.normalize(h, "peak_amplitude", period=10.0, window=8.0)
    assert amp.divisor == pytest.approx(10.0)
    none = C.normalize(m, "none")
    assert none.divisor == 1.0 and np.array_equal(none.normalized, h.counts)


@pytest.mark.parametrize("kw", [
    {"method": "plateau"},
    {"method": "plateau", "plateau": (500, 600)},
    {"method": "peak_mean"},
    {"method": "weird"},
    {"method": "peak_mean", "period": 10.0, "reference_ks": [99]},
])
def test_normalisation_errors(kw):
    with pytest.raises(C.CorrelationError):
        C.normalize(_comb(), **kw)


def test_zero_divisor_rejected():
    cfg = C.HistogramConfig.centered(10_000, 100)
    with pytest.raises(C.CorrelationError):
        C.normalize(C.Histogram(cfg.edges, np.zeros(cfg.n_bins, np.int64)), "plateau", plateau=(5, 10))
