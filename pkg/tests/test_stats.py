"""Chi-squared quantiles and matrix roots against independent oracles."""
import math

import numpy as np
import pytest
import scipy.stats

from cyclefqi.stats import chi2_cdf, chi2_quantile, regularized_gamma_p, symmetric_inv_sqrt, symmetric_sqrt


def test_quantile_matches_scipy_grid():
    for dof in (1, 2, 3, 5, 10, 30, 100):
        for p in (0.01, 0.1, 0.5, 0.9, 0.95, 0.99, 0.999):
            ours = chi2_quantile(dof, p)
            ref = scipy.stats.chi2(dof).ppf(p)
            assert ours == pytest.approx(ref, abs=1e-7), (dof, p)


def test_quantile_key_values():
    assert chi2_quantile(3, 0.95) == pytest.approx(7.8147, abs=1e-3)
    # dof 1 quantile is the square of the normal 0.975 quantile
    z = scipy.stats.norm.ppf(0.975)
    assert chi2_quantile(1, 0.95) == pytest.approx(z * z, abs=1e-3)
    assert chi2_quantile(1, 0.95) == pytest.approx(3.8415, abs=1e-3)


def test_quantile_closed_form_two_dof():
    # chi^2_2 CDF is 1 - exp(-x/2), so the 1 - e^-1 quantile is exactly 2
    assert chi2_quantile(2, 1.0 - math.exp(-1.0)) == pytest.approx(2.0, abs=1e-8)


def test_cdf_matches_scipy():
    xs = np.linspace(0.01, 40.0, 50)
    for dof in (1, 3, 7, 50):
        ref = scipy.stats.chi2(dof).cdf(xs)
        ours = np.array([chi2_cdf(x, dof) for x in xs])
        assert np.allclose(ours, ref, atol=1e-12)


def test_gamma_p_against_scipy():
    from scipy.special import gammainc

    for a in (0.5, 1.5, 5.0, 25.0):
        for x in (0.01, 0.5, 2.0, 10.0, 60.0):
            assert regularized_gamma_p(a, x) == pytest.approx(gammainc(a, x), abs=1e-12)


def test_quantile_validates_inputs():
    with pytest.raises(ValueError):
        chi2_quantile(0, 0.5)
    with pytest.raises(ValueError):
        chi2_quantile(101, 0.5)
    with pytest.raises(ValueError):
        chi2_quantile(3, 0.0)
    with pytest.raises(ValueError):
        chi2_quantile(3, 1.0)


def test_matrix_roots_roundtrip():
    rng = np.random.default_rng(0)
    a = rng.normal(size=(4, 4))
    spd = a @ a.T + 0.5 * np.eye(4)
    root = symmetric_sqrt(spd)
    assert np.allclose(root @ root, spd, atol=1e-10)
    inv_root = symmetric_inv_sqrt(spd)
    assert np.allclose(inv_root @ spd @ inv_root, np.eye(4), atol=1e-10)
