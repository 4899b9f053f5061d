"""Tests for the selection criteria, TOTAL voting and the combined score."""

import math

import numpy as np
import pytest

from pheno_ml.errors import DataError
from pheno_ml.featsel import (
    CRITERIA,
    RfeSettings,
    anova_f_scores,
    combined_score,
    max_value_rank,
    mutual_information,
    rfe,
    select_features,
    total_score,
)
from pheno_ml.synth import synth_generate

FAST = RfeSettings(gb_rounds=10, rf_trees=20)


class TestUnivariateScores:
    """Test ANOVA F and mutual information."""

    def setup_method(self):
        self.y = np.array([0, 0, 1, 1])

    def test_anova_hand_value(self):
        """[1, 2, 3, 4] against [0, 0, 1, 1] has F = 8."""
        X = np.array([[1.0], [2.0], [3.0], [4.0]])
        assert anova_f_scores(X, self.y)[0] == pytest.approx(8.0)

    def test_anova_edge_cases(self):
        """A perfectly separating column scores inf and a constant one scores 0."""
        X = np.column_stack([self.y, np.full(4, 3.0)]).astype(float)
        scores = anova_f_scores(X, self.y)
        assert scores[0] == np.inf
        assert scores[1] == 0.0

    def test_mutual_information(self):
        """MI of the labels with themselves is H(y); a constant column has none."""
        X = np.column_stack([self.y, np.ones(4)]).astype(float)
        mi = mutual_information(X, self.y)
        assert mi[0] == pytest.approx(math.log(2))
        assert mi[1] == 0.0

    def test_needs_both_classes(self):
        """A single-class label vector is rejected."""
        with pytest.raises(DataError, match="both classes"):
            anova_f_scores(np.ones((3, 1)), np.zeros(3))


class TestRfe:
    """Test recursive feature elimination."""

    def setup_method(self):
        rng = np.random.default_rng(4)
        self.y = np.array([0, 1] * 20)
        self.X = np.column_stack([self.y, rng.normal(size=40), rng.normal(size=40)]).astype(float)

    @pytest.mark.parametrize("estimator", ["LR", "DT", "GB", "RF"])
    def test_informative_column_survives(self, estimator):
        """The column equal to the labels is the last one standing."""
        assert rfe(estimator, self.X, self.y, 1, seed=0, settings=FAST) == [0]

    def test_identity(self):
        """Keeping every column eliminates nothing."""
        assert rfe("DT", self.X, self.y, 3) == [0, 1, 2]

    def test_zero_select(self):
        """n_select=0 is an error."""
        with pytest.raises(DataError, match="n_select"):
            rfe("LR", self.X, self.y, 0)


class TestVoting:
    """Test TOTAL, the max-value criterion and the 0-3 combination."""

    def test_max_value_rank(self):
        """Columns rank by their largest entry, ties by name."""
        X = np.array([[9.0, 1.0, 5.0], [0.0, 0.0, 0.0]])
        assert max_value_rank(X, ["a", "b", "c"], 0.3) == ["a"]
        assert max_value_rank(np.ones((2, 10)), [f"o{j}" for j in range(10)]) == [
            "o0",
            "o1",
            "o2",
        ]

    def test_max_value_cut_rounds_up(self):
        """0.34 of three columns rounds up to two; just under a third keeps one."""
        X = np.array([[9.0, 1.0, 5.0], [0.0, 0.0, 0.0]])
        assert max_value_rank(X, ["a", "b", "c"], 0.34) == ["a", "c"]
        assert max_value_rank(X, ["a", "b", "c"], 0.33) == ["a"]

    def test_total_score(self):
        """Votes add up per OTU and the top cut follows TOTAL."""
        flags = np.zeros((len(CRITERIA), 4), dtype=bool)
        flags[:, 0] = True
        flags[:, 1] = True
        flags[:5, 2] = True
        scores, ml_selected = total_score(flags, ["Firmicutes", "Patescibacteria", "Myxo", "X"])
        assert [s.total for s in scores] == [7, 7, 5, 0]
        assert ml_selected == ["Firmicutes", "Patescibacteria"]
        assert scores[2].flag("KBest") and not scores[2].flag("Max")

    def test_combined_score(self):
        """1 for the ML cut, 2 for the network cut, 3 for both."""
        combo = combined_score(["a", "b"], ["b", "c"], ["a", "b", "c", "d", "e"])
        assert [s.combined for s in combo.scores] == [1, 3, 2, 0, 0]
        assert combo.subsets["OTU-S3"] == ["b"]
        assert combo.subsets["OTU-S1"] == ["a"]
        assert combo.subsets["OTU-S2"] == ["c"]
        assert combo.subsets["OTU-S0"] == ["d"]

    def test_unknown_otu(self):
        """Selections must come from the table."""
        with pytest.raises(DataError, match="not in the table"):
            combined_score(["zz"], [], ["a"])


def test_select_features_on_planted_signal():
    """End to end, planted OTUs dominate the ML cut and S0 matches S3 in size."""
    data = synth_generate(n=80, p=12, n_signal=3, effect=5.0, seed=1)
    selection = select_features(data.table, data.labels, seed=0, settings=FAST)
    assert len(selection.scores) == 12
    assert len(selection.ml_selected) == 4
    assert len(selection.net_selected) == 4
    assert len(set(data.signal_otus) & set(selection.ml_selected)) >= 2
    subsets = selection.subsets
    assert set(subsets) == {"OTU-S0", "OTU-S1", "OTU-S2", "OTU-S3"}
    assert len(subsets["OTU-S0"]) == len(subsets["OTU-S3"])
    assert all(0 <= s.combined <= 3 for s in selection.scores)
