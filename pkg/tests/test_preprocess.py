"""Tests for zero replacement, normalization and environmental scaling."""

from unittest.mock import patch

import numpy as np
import pytest

from pheno_ml.data import EnvGroup, EnvTable, OtuTable
from pheno_ml.errors import DataError
from pheno_ml.preprocess import (
    CLR,
    COM,
    CSS,
    TSS,
    BayesMult,
    EnvScaler,
    MultRepl,
    NoReplacement,
    Pseudo,
    Rarefy,
    apply_spec,
    fit_spec,
    normalize,
    parse_spec,
    preprocess_grid,
    replace_zeros,
    scale_env,
    with_seed,
)


def _table(counts):
    counts = np.asarray(counts, dtype=float)
    return OtuTable(
        sample_ids=tuple(f"s{i}" for i in range(counts.shape[0])),
        otu_names=tuple(f"o{j}" for j in range(counts.shape[1])),
        counts=counts,
    )


class TestPreprocessGrid:
    """Test the 20 canonical NM pipelines."""

    def test_order_and_labels(self):
        """NM numbering is normalization-major with four zero strategies each."""
        grid = preprocess_grid()
        assert len(grid) == 20
        assert grid[0].label == "NM1:TSS+none"
        assert grid[5].label == "NM6:CSS+pseudo"
        assert grid[19].label == "NM20:clr+bayesMult"

    def test_parse_spec(self):
        """Specs resolve from "NM6", "6" and full labels."""
        assert parse_spec("NM6").index == 6
        assert parse_spec("6").label == "NM6:CSS+pseudo"
        assert parse_spec("NM_12:COM+bayesMult").index == 12
        with pytest.raises(DataError):
            parse_spec("NM21")

    def test_all_pipelines_run(self):
        """Every pipeline runs on a sparse 50x30 count table."""
        rng = np.random.default_rng(3)
        counts = rng.poisson(2.0, size=(50, 30)) * (rng.uniform(size=(50, 30)) < 0.7)
        counts[:, 0] += 1
        table = _table(counts)
        for spec in preprocess_grid(seed=1):
            out = apply_spec(table, spec)
            assert out.counts.shape == (50, 30)
            assert np.isfinite(out.counts).all()


class TestNormalize:
    """Test normalization invariants."""

    def setup_method(self):
        rng = np.random.default_rng(0)
        counts = rng.poisson(5.0, size=(50, 30)).astype(float)
        counts[:, 0] += 1
        self.table = _table(counts)

    def test_tss_rows_sum_to_one(self):
        """TSS rows are closed."""
        out = normalize(self.table, TSS())
        np.testing.assert_allclose(out.counts.sum(axis=1), 1.0, atol=1e-12)
        assert out.transform == "TSS"

    def test_clr_rows_center(self):
        """clr rows sum to zero."""
        out = normalize(replace_zeros(self.table, Pseudo()), CLR())
        np.testing.assert_allclose(out.counts.sum(axis=1), 0.0, atol=1e-9)

    def test_com_and_rarefy_reach_min_depth(self):
        """COM and rarefy rows end at the smallest depth."""
        target = self.table.depths.min()
        np.testing.assert_allclose(normalize(self.table, COM()).counts.sum(axis=1), target)
        rarefied = normalize(self.table, Rarefy(seed=4)).counts
        np.testing.assert_array_equal(rarefied.sum(axis=1), np.full(50, target))
        assert (rarefied <= self.table.counts).all()

    def test_rarefy_is_seeded(self):
        """The same seed gives the same subsample."""
        a = normalize(self.table, Rarefy(seed=9)).counts
        b = normalize(self.table, Rarefy(seed=9)).counts
        np.testing.assert_array_equal(a, b)

    def test_css_scales_rows(self):
        """CSS keeps zeros and produces non-negative values."""
        out = normalize(self.table, CSS()).counts
        assert ((out == 0) == (self.table.counts == 0)).all()
        assert (out >= 0).all()

    def test_clr_with_zeros_needs_fallback(self):
        """clr refuses zeros unless the pseudo-count fallback is allowed."""
        table = _table([[0.0, 2.0, 3.0], [1.0, 1.0, 1.0]])
        with pytest.raises(DataError, match="strictly positive"):
            normalize(table, CLR())
        out = normalize(table, CLR(), pseudo_fallback=True)
        np.testing.assert_allclose(out.counts.sum(axis=1), 0.0, atol=1e-12)

    def test_zero_row(self):
        """An entirely zero row cannot be closed."""
        with pytest.raises(DataError, match="entirely zero"):
            normalize(_table([[0.0, 0.0], [1.0, 2.0]]), TSS())


class TestReplaceZeros:
    """Test zero-replacement strategies."""

    def setup_method(self):
        self.table = _table([[0.0, 4.0, 6.0], [5.0, 0.0, 1.0], [1.0, 2.0, 7.0]])

    def test_none_is_identity(self):
        """NoReplacement returns the table untouched."""
        assert replace_zeros(self.table, NoReplacement()) is self.table

    def test_pseudo(self):
        """Pseudo replaces zeros only."""
        out = replace_zeros(self.table, Pseudo(0.5)).counts
        np.testing.assert_array_equal(out[0], [0.5, 4.0, 6.0])
        np.testing.assert_array_equal(out[2], [1.0, 2.0, 7.0])

    @pytest.mark.parametrize("method", [MultRepl(), MultRepl(delta=0.01), BayesMult()])
    def test_multiplicative_preserves_closure(self, method):
        """Multiplicative replacements keep row totals and make every entry positive."""
        out = replace_zeros(self.table, method).counts
        np.testing.assert_allclose(out.sum(axis=1), self.table.depths, atol=1e-9)
        assert (out > 0).all()

    def test_multrepl_keeps_ratios(self):
        """Nonzero parts keep their ratios."""
        out = replace_zeros(self.table, MultRepl(delta=0.01)).counts
        assert out[0, 2] / out[0, 1] == pytest.approx(6.0 / 4.0)

    def test_multrepl_delta_too_large(self):
        """A delta that would push nonzero parts below zero is rejected."""
        with pytest.raises(DataError, match="too large"):
            replace_zeros(self.table, MultRepl(delta=1.5))

    def test_bayes_mult_zero_value(self):
        """A zero cell becomes (s/p)/(m+s) of the row total."""
        out = replace_zeros(self.table, BayesMult(prior_strength=0.5)).counts
        expected = (0.5 / 3) / (10.0 + 0.5) * 10.0
        assert out[0, 0] == pytest.approx(expected)

    def test_rarefy_runs_before_replacement(self):
        """With rarefy, zeros are replaced in the subsampled table."""
        spec = parse_spec(16, seed=2)
        out = apply_spec(self.table, spec)
        assert (out.counts > 0).all()
        np.testing.assert_allclose(out.counts.sum(axis=1), self.table.depths.min(), atol=1e-9)


class TestScaleEnv:
    """Test environmental scaling with train-only statistics."""

    def setup_method(self):
        values = np.array([[1.0, 5.0], [2.0, 5.0], [3.0, 5.0], [10.0, 5.0]])
        self.env = EnvTable(
            sample_ids=("a", "b", "c", "d"),
            feature_names=("x", "flat"),
            values=values,
            group=EnvGroup.SOIL,
        )

    def test_standardize_uses_fit_rows(self):
        """Mean and sd come from the fit rows only; constant columns map to 0."""
        out = scale_env(self.env, "standardize", [0, 1, 2]).values
        sd = np.std([1.0, 2.0, 3.0])
        assert out[1, 0] == pytest.approx(0.0)
        assert out[3, 0] == pytest.approx((10.0 - 2.0) / sd)
        np.testing.assert_array_equal(out[:, 1], 0.0)

    def test_minmax(self):
        """minmax maps the fit range onto [0, 1]."""
        out = scale_env(self.env, EnvScaler.MINMAX, range(4)).values
        assert out[0, 0] == pytest.approx(0.0)
        assert out[3, 0] == pytest.approx(1.0)

    def test_unit_norm(self):
        """unitnorm scales every row to unit length."""
        out = scale_env(self.env, "unitnorm", range(4)).values
        np.testing.assert_allclose(np.linalg.norm(out, axis=1), 1.0)

    def test_quantile_normal_is_monotone(self):
        """The quantile transform preserves order."""
        out = scale_env(self.env, "quantile", range(4)).values[:, 0]
        assert np.all(np.diff(out) > 0)

    def test_parse_aliases(self):
        """Scaler names accept common spellings."""
        assert EnvScaler.parse("Quantile-Normal") is EnvScaler.QUANTILE_NORMAL
        assert EnvScaler.parse("standard") is EnvScaler.STANDARDIZE
        with pytest.raises(DataError):
            EnvScaler.parse("zscore-ish")


def test_clr_ignores_row_scaling():
    """Multiplying a row by a positive constant leaves its clr values unchanged."""
    rng = np.random.default_rng(1)
    base = rng.uniform(0.5, 20.0, size=(30, 12))
    scales = rng.uniform(0.1, 50.0, size=(30, 1))
    a = normalize(_table(base), CLR()).counts
    b = normalize(_table(base * scales), CLR()).counts
    np.testing.assert_allclose(a, b, atol=1e-9)


class TestFitSpec:
    """Test freezing cross-sample references on training rows."""

    def setup_method(self):
        self.train = _table([[10, 10, 0], [20, 5, 5], [4, 4, 0]])
        self.test = _table([[50, 50, 0], [2, 3, 0]])

    def test_com_uses_training_depth(self):
        """Held-out rows are scaled to the smallest training depth."""
        spec = parse_spec(9)
        fitted = fit_spec(self.train, spec)
        assert fitted.norm.depth == 8.0
        np.testing.assert_allclose(apply_spec(self.test, fitted).counts.sum(axis=1), 8.0)
        np.testing.assert_allclose(
            apply_spec(self.train, fitted).counts, apply_spec(self.train, spec).counts
        )

    def test_com_depth_follows_zero_replacement(self):
        """With pseudo counts the reference depth is taken after replacement."""
        fitted = fit_spec(self.train, parse_spec(10))
        assert fitted.norm.depth == 9.0

    def test_css_reference_from_training(self):
        """The CSS reference is frozen, so one held-out row does not move another."""
        spec = parse_spec(5)
        fitted = fit_spec(self.train, spec)
        assert fitted.norm.reference > 0
        np.testing.assert_allclose(
            apply_spec(self.train, fitted).counts, apply_spec(self.train, spec).counts
        )
        both = apply_spec(self.test, fitted).counts
        alone = apply_spec(_table([[50, 50, 0]]), fitted).counts
        np.testing.assert_allclose(both[0], alone[0])

    def test_rarefy_depth_and_shallow_rows(self):
        """Held-out rows are rarefied to the training depth; shallower rows stay whole."""
        fitted = fit_spec(self.train, parse_spec(13, seed=3))
        assert fitted.norm.depth == 8
        with patch("pheno_ml.preprocess.logger") as log:
            out = apply_spec(self.test, fitted).counts
        assert out[0].sum() == 8
        np.testing.assert_array_equal(out[1], [2, 3, 0])
        log.warning.assert_called_once()

    def test_per_sample_pipelines_are_unchanged(self):
        """TSS and clr need no fitted reference."""
        for index in (1, 2, 17, 20):
            spec = parse_spec(index)
            assert fit_spec(self.train, spec) == spec

    def test_with_seed_keeps_depth(self):
        """Reseeding a fitted rarefy spec keeps its depth."""
        fitted = with_seed(fit_spec(self.train, parse_spec(13)), 7)
        assert fitted.norm == Rarefy(seed=7, depth=8)


def test_maxabs_and_robust_scalers():
    """maxabs divides by the fit rows' peak; robust centers on the median over the IQR."""
    env = EnvTable(
        sample_ids=("a", "b", "c", "d"),
        feature_names=("x", "flat"),
        values=np.array([[1.0, 5.0], [2.0, 5.0], [3.0, 5.0], [10.0, 5.0]]),
        group=EnvGroup.SOIL,
    )
    out = scale_env(env, "maxabs", range(4)).values
    assert out[3, 0] == pytest.approx(1.0)
    np.testing.assert_allclose(out[:, 1], 1.0)
    out = scale_env(env, "robust", range(4)).values
    assert out[0, 0] == pytest.approx((1.0 - 2.5) / 3.0)
    np.testing.assert_allclose(out[:, 1], 0.0)
