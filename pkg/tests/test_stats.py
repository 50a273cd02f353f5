import itertools

import numpy as np
import pytest
import scipy.stats
from hypothesis import given, settings
from hypothesis import strategies as st

from llab.errors import ConfigError, DegenerateInput
from llab.images import ImageSet, synth_scene
from llab.models import Encoder, Reconstructor
from llab.stats import (compare_encoders, judge_similarity, midranks, paired_bootstrap,
                        pixel_metrics, wilcoxon_null_pmf, wilcoxon_signed_rank)


def brute_force_p(diffs, alternative="greater"):
    d = np.asarray(diffs, float)
    d = d[d != 0]
    r = scipy.stats.rankdata(np.abs(d))
    w = r[d > 0].sum()
    hits_hi = hits_lo = 0
    total = 0
    for signs in itertools.product([0, 1], repeat=len(d)):
        s = float(np.dot(signs, r))
        hits_hi += s >= w - 1e-9
        hits_lo += s <= w + 1e-9
        total += 1
    if alternative == "greater":
        return hits_hi / total
    if alternative == "less":
        return hits_lo / total
    return min(1.0, 2 * min(hits_hi, hits_lo) / total)


def test_all_positive_n5_is_one_over_32():
    res = wilcoxon_signed_rank([0.1, 0.2, 0.3, 0.4, 0.5])
    assert res.exact and res.p_value == 1 / 32


@pytest.mark.parametrize("seed", range(8))
def test_exact_matches_enumeration_with_ties(seed):
    rng = np.random.default_rng(seed)
    n = int(rng.integers(5, 12))
    d = np.round(rng.normal(0.2, 1.0, n), 1)
    d[d == 0] = 0.3
    for alt in ("greater", "less", "two-sided"):
        assert wilcoxon_signed_rank(d, alt).p_value == pytest.approx(brute_force_p(d, alt),
                                                                     abs=1e-12)


@pytest.mark.parametrize("seed", range(5))
def test_exact_and_normal_agree_at_n25(seed):
    d = np.random.default_rng(100 + seed).normal(0.25, 1.0, 25)
    exact = wilcoxon_signed_rank(d, method="exact").p_value
    approx = wilcoxon_signed_rank(d, method="approx").p_value
    assert abs(exact - approx) < 0.01


@pytest.mark.parametrize("seed", range(5))
def test_against_scipy(seed):
    rng = np.random.default_rng(seed)
    d = rng.normal(0.1, 1.0, 40)
    ours = wilcoxon_signed_rank(d, method="approx").p_value
    ref = scipy.stats.wilcoxon(d, alternative="greater", method="approx", correction=True).pvalue
    assert ours == pytest.approx(ref, rel=1e-9)
    small = d[:15]
    ref = scipy.stats.wilcoxon(small, alternative="greater", method="exact").pvalue
    assert wilcoxon_signed_rank(small).p_value == pytest.approx(ref, rel=1e-12)


def test_zero_differences_dropped_and_degenerate():
    res = wilcoxon_signed_rank([0, 0, 1, 2, 3, 4, 5])
    assert res.n == 5 and res.n_zero == 2
    with pytest.raises(DegenerateInput):
        wilcoxon_signed_rank(np.zeros(10))
    with pytest.raises(ValueError):
        wilcoxon_signed_rank([1, 2, 3])


@settings(max_examples=40, deadline=None)
@given(st.lists(st.integers(1, 6), min_size=1, max_size=14))
def test_null_pmf_is_symmetric_distribution(values):
    ranks = midranks(np.array(values, float))
    pmf = wilcoxon_null_pmf(ranks)
    assert pmf.sum() == pytest.approx(1.0, abs=1e-12)
    np.testing.assert_allclose(pmf, pmf[::-1], atol=1e-15)


@settings(max_examples=40, deadline=None)
@given(st.lists(st.integers(-5, 5), min_size=1, max_size=30))
def test_midranks_match_scipy(values):
    np.testing.assert_allclose(midranks(np.array(values, float)),
                               scipy.stats.rankdata(values))


def test_bootstrap_determinism_and_floor():
    rng = np.random.default_rng(0)
    d = rng.normal(0.05, 0.2, 50)
    a = paired_bootstrap(d, B=10_000, seed=3)
    b = paired_bootstrap(d, B=10_000, seed=3)
    assert a.p_value == b.p_value
    assert paired_bootstrap(np.abs(d) + 0.01, B=10_000, seed=1).p_value == 1 / 10_001
    assert paired_bootstrap(-np.abs(d) - 0.01, B=10_000, seed=1).p_value == 1.0
    with pytest.raises(ValueError):
        paired_bootstrap(d, B=10)
    with pytest.raises(ValueError):
        paired_bootstrap(d[:5], B=1000)


def test_bootstrap_near_normal_theory():
    d = np.random.default_rng(7).normal(0.03, 0.2, 200)
    p = paired_bootstrap(d, B=20_000, seed=0).p_value
    z = d.mean() / (d.std(ddof=0) / np.sqrt(len(d)))
    assert p == pytest.approx(scipy.stats.norm.sf(z), abs=0.02)


def test_pixel_metrics():
    a = np.zeros((4, 4, 3))
    b = np.full((4, 4, 3), 0.1)
    m = pixel_metrics(a, b)
    assert m["mse"] == pytest.approx(0.01) and m["psnr"] == pytest.approx(20.0)
    same = pixel_metrics(a, a)
    assert same["psnr"] == 99.0 and same["psnr_capped"]


def _frozen_encoder(seed):
    enc = Encoder(16, 4, 16, 1, 2, seed=seed)
    enc.freeze()
    return enc


def _eval_set(n=12):
    rng = np.random.default_rng(0)
    return ImageSet("eval", [f"i{k}" for k in range(n)],
                    np.stack([synth_scene(rng, 16) for _ in range(n)]))


def test_judge_similarity_identity_is_one():
    judge = _frozen_encoder(1)
    img = _eval_set(1).pixels[0]
    assert judge_similarity(judge, img, img).value == pytest.approx(1.0)


def test_compare_guards_and_degenerate_case():
    enc, judge = _frozen_encoder(2), _frozen_encoder(3)
    rec = Reconstructor(4, 16, 4, 1, 2, seed=0)
    images = _eval_set()
    with pytest.raises(ConfigError):
        compare_encoders(enc, rec, enc, rec, enc, images, B=1000)
    comp = compare_encoders(enc, rec, enc, rec, judge, images, B=1000)
    assert comp.degenerate and comp.wilcoxon is None
    other = Reconstructor(4, 16, 4, 1, 2, seed=1)
    comp = compare_encoders(enc, rec, enc, other, judge, images, B=1000, seed=4)
    assert not comp.degenerate and 0 < comp.wilcoxon.p_value <= 1
    np.testing.assert_allclose(comp.diffs, comp.sim_a - comp.sim_b)
