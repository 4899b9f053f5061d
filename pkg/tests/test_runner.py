"""Tests for synthetic data, run configuration and the grid runner."""

import json
from dataclasses import replace

import numpy as np
import pytest

from pheno_ml.data import TaxonomicLevel
from pheno_ml.errors import ConfigError, DataError
from pheno_ml.runner import (
    Cell,
    RunConfig,
    assemble_cell,
    augment_stage,
    baseline_cell,
    grid_cells,
    prepare_level,
    run_cell,
    run_grid,
)
from pheno_ml.synth import synth_generate, synth_levels, write_synth


class TestSynth:
    """Test the planted-signal generator."""

    def test_generate(self):
        """Shapes, planted labels and signal OTUs are consistent."""
        data = synth_generate(n=50, p=20, n_signal=4, seed=2)
        assert data.table.n == 50
        assert data.table.p == 20
        assert len(data.signal_otus) == 4
        scab = data.metadata.response("Scab")
        np.testing.assert_array_equal(scab > 0, data.labels.labels == 1)
        assert (data.table.depths > 0).all()

    def test_seeded(self):
        """The same seed reproduces the counts."""
        a = synth_generate(n=20, p=8, seed=5).table.counts
        b = synth_generate(n=20, p=8, seed=5).table.counts
        np.testing.assert_array_equal(a, b)

    def test_levels_nest(self):
        """Coarser levels are sums of finer groups, so every level has the same depths."""
        levels = synth_levels(synth_generate(n=10, p=16, seed=0).table)
        assert [lv.p for lv in levels.values()] == [1, 2, 4, 8, 16]
        genus = levels[TaxonomicLevel.GENUS].depths
        for table in levels.values():
            np.testing.assert_allclose(table.depths, genus)
        assert levels[TaxonomicLevel.FAMILY].otu_names[0] == "Family_01"

    def test_bad_arguments(self):
        """Impossible parameters are rejected."""
        with pytest.raises(DataError, match="n_signal"):
            synth_generate(p=3, n_signal=4)
        with pytest.raises(DataError, match="imbalance"):
            synth_generate(imbalance=1.0)


class TestRunConfig:
    """Test the flat config file format."""

    def test_from_synth_file(self, tmp_path):
        """The generated run.cfg parses with paths resolved next to it."""
        path = write_synth(tmp_path, n=40, p=8)
        config = RunConfig.from_file(path)
        assert set(config.otu) == {"Phylum", "Class", "Order", "Family", "Genus"}
        assert config.metadata == tmp_path / "metadata.csv"
        assert config.rf.n_estimators == [50]
        assert config.filter.min_prevalence == 1
        assert config.bnn.chain == 200
        config.check_paths()

    def test_overrides_and_ranges(self, tmp_path):
        """Keyword overrides win and NM ranges expand."""
        path = tmp_path / "run.cfg"
        path.write_text("metadata = m.csv\ngrid.nm = 1-3,9\nmodel = rf\n")
        config = RunConfig.from_file(path, model="BNN", predictors=None)
        assert config.grid.nm == [1, 2, 3, 9]
        assert config.model == "bnn"
        assert config.predictors == "ALL-OTU"

    @pytest.mark.parametrize(
        "line, message",
        [
            ("colour = blue", "unknown key"),
            ("response = Height", "response must be one of"),
            ("grid.nm = 0-3", "NM index"),
            ("no equals sign", "expected 'key = value'"),
        ],
    )
    def test_invalid(self, tmp_path, line, message):
        """Bad keys and values are configuration errors."""
        path = tmp_path / "run.cfg"
        path.write_text(line + "\n")
        with pytest.raises(ConfigError, match=message):
            RunConfig.from_file(path)

    def test_missing_inputs(self, tmp_path):
        """check_paths names the first missing requirement."""
        with pytest.raises(ConfigError, match="no metadata"):
            RunConfig().check_paths()
        config = RunConfig(metadata=tmp_path / "m.csv", predictors="Soil")
        with pytest.raises(ConfigError, match="no OTU table"):
            config.check_paths()

    def test_predictor_parts(self):
        """Combined predictor sets split into an OTU part and environmental groups."""
        config = RunConfig(predictors="OTU-S3+Soil+DS")
        assert config.otu_subset == "OTU-S3"
        assert [g.value for g in config.env_groups] == ["Soil", "DS"]
        assert RunConfig(predictors="Alpha").otu_subset is None

    def test_canonical_cell_order(self):
        """Cells run NM-major, then level from Phylum to Genus, then aug."""
        config = RunConfig(grid={"nm": "2,1", "levels": "Genus,Phylum", "aug": "1,0"})
        cells = grid_cells(config)
        assert cells[:3] == [Cell(1, "Phylum", 0), Cell(1, "Phylum", 1), Cell(1, "Genus", 0)]
        assert len(cells) == 8

    def test_cell_seeds(self):
        """Cell seeds are reproducible and differ between cells."""
        assert Cell(1, "Genus", 0).seed(7) == Cell(1, "Genus", 0).seed(7)
        assert Cell(1, "Genus", 0).seed(7) != Cell(1, "Genus", 1).seed(7)
        assert Cell(1, "Genus", 0).seed(7) != Cell(1, "Genus", 0).seed(8)


class TestGridRunner:
    """Run small grids end to end on synthetic data."""

    def setup_method(self):
        self.grid = {"nm": "1,6", "levels": "Genus", "aug": "0"}

    def _config(self, tmp_path, **overrides):
        path = write_synth(tmp_path / "data", n=60, p=16, n_signal=5, effect=5.0, seed=3)
        return RunConfig.from_file(path, grid=self.grid, **overrides)

    def test_run_grid_writes_outputs(self, tmp_path):
        """Results, FMS records and timings hold one line per cell in canonical order."""
        config = self._config(tmp_path)
        outputs = run_grid(config, tmp_path / "out")
        rows = [json.loads(line) for line in outputs.results.read_text().splitlines()]
        assert [row["nm_index"] for row in rows] == [1, 6]
        assert all(row["status"] == "ok" for row in rows)
        assert all(0.0 <= row["weighted_f1"] <= 1.0 for row in rows)
        assert rows[0]["preprocess"] == "NM1:TSS+none"
        assert rows[0]["n_train"] + rows[0]["n_test"] == 60
        assert rows[0]["model_summary"]["best"]["n_estimators"] == 50
        assert max(row["weighted_f1"] for row in rows) > 0.6
        assert len(outputs.fms_records.read_text().splitlines()) == 2
        timings = [json.loads(line) for line in outputs.timings.read_text().splitlines()]
        assert [t["nm_index"] for t in timings] == [1, 6]

    def test_selected_subset_with_soil(self, tmp_path):
        """An OTU subset plus Soil stacks the subset columns and twelve soil features."""
        config = self._config(tmp_path, predictors="OTU-S3+Soil")
        data = prepare_level(config, "Genus")
        members = data.selection.subsets["OTU-S3"]
        record = run_cell(config, data, Cell(1, "Genus", 0))
        if members:
            assert record.status == "ok"
            assert record.n_features == len(members) + 12
        else:
            assert record.status.startswith("error")

    def test_augmented_cell(self, tmp_path):
        """Augmentation grows only the training rows."""
        config = self._config(tmp_path)
        data = prepare_level(config, "Genus")
        record = run_cell(config, data, Cell(1, "Genus", 1))
        assert record.status == "ok"
        assert record.n_train == 300
        assert record.n_test == data.test.size

    def test_bnn_capacity_skip(self, tmp_path):
        """A BNN over the weight cap is skipped without failing the grid."""
        config = self._config(tmp_path, model="bnn", bnn={"weight_cap": 10})
        data = prepare_level(config, "Genus")
        record = run_cell(config, data, Cell(1, "Genus", 0))
        assert record.status == "skipped: capacity"
        assert record.weighted_f1 is None

    def test_baseline_cell(self, tmp_path):
        """The exceedance test runs on a scored cell."""
        config = self._config(tmp_path)
        data = prepare_level(config, "Genus")
        record, result = baseline_cell(config, data, Cell(1, "Genus", 0), strategy=3, n=3)
        assert record.status == "ok"
        assert result.f_original == record.weighted_f1
        assert result.n + result.failed == 3
        assert result.strategy == "PERMUTED_LABELS"


class TestAugmentStage:
    """Test which table a cell augments."""

    def test_stage_per_cell(self):
        """Normalized tables by default, raw counts for rarefaction and env-only sets."""
        config = RunConfig()
        assert augment_stage(config, Cell(1, "Genus", 0)) is None
        assert augment_stage(config, Cell(1, "Genus", 1)) == "normalized"
        assert augment_stage(config, Cell(17, "Genus", 1)) == "normalized"
        assert augment_stage(config, Cell(13, "Genus", 1)) == "raw"
        assert augment_stage(RunConfig(predictors="Soil"), Cell(1, "Genus", 1)) == "raw"

    def test_stage_is_recorded(self, tmp_path):
        """Every result record carries its augmentation stage."""
        path = write_synth(tmp_path / "data", n=60, p=16, seed=3)
        config = RunConfig.from_file(path, grid={"nm": "1,13", "levels": "Genus", "aug": "1"})
        data = prepare_level(config, "Genus")
        records = [run_cell(config, data, cell) for cell in grid_cells(config)]
        assert [r.aug_stage for r in records] == ["normalized", "raw"]
        assert all(r.status == "ok" for r in records)


class TestTrainingIsolation:
    """Held-out samples never change a training feature."""

    def setup_method(self):
        self.grid = {"nm": "1", "levels": "Genus", "aug": "0"}

    @pytest.mark.parametrize("nm", [5, 9, 13])
    def test_editing_a_test_row_keeps_training_features(self, tmp_path, nm):
        """A much shallower test sample leaves the fitted depth and reference alone."""
        path = write_synth(tmp_path / "data", n=60, p=16, seed=3)
        config = RunConfig.from_file(path, grid=self.grid)
        data = prepare_level(config, "Genus")
        cell = Cell(nm, "Genus", 0)
        seed = cell.seed(config.seed)
        before = assemble_cell(config, data, cell, seed)

        counts = data.table.counts.astype(float).copy()
        row = data.test[0]
        counts[row] = np.maximum(np.floor(counts[row] / 50), 1)
        edited = replace(data, table=data.table.with_counts(counts))
        after = assemble_cell(config, edited, cell, seed)

        np.testing.assert_array_equal(after.X_train, before.X_train)
        assert not np.array_equal(after.X_test, before.X_test)


class TestGridAcceptance:
    """Whole-grid behavior on planted and pure-noise synthetic data."""

    def setup_method(self):
        self.rf = {
            "n_estimators": 5,
            "min_samples_split": 8,
            "min_samples_leaf": 3,
            "max_depth": 80,
            "criterion": "gini",
        }

    def test_full_grid_has_one_record_per_cell(self, tmp_path):
        """20 pipelines over 5 levels with and without augmentation give 200 records."""
        path = write_synth(tmp_path / "data", n=60, p=16, seed=4)
        config = RunConfig.from_file(
            path,
            grid={"nm": "1-20", "levels": "Phylum,Class,Order,Family,Genus", "aug": "0,1"},
            rf=self.rf,
            split={"folds": 2},
            augment={"target": 40},
        )
        outputs = run_grid(config, tmp_path / "out")
        rows = [json.loads(line) for line in outputs.results.read_text().splitlines()]
        assert len(rows) == 200
        cells = grid_cells(config)
        assert [(r["nm_index"], r["level"], r["aug"]) for r in rows] == [
            (c.nm_index, c.level, c.aug) for c in cells
        ]
        assert all(r["aug_stage"] == augment_stage(config, c) for r, c in zip(rows, cells))

    def test_worker_count_does_not_change_outputs(self, tmp_path):
        """Serial and parallel runs write byte-identical results and FMS records."""
        path = write_synth(tmp_path / "data", n=60, p=16, seed=5)
        config = RunConfig.from_file(
            path,
            grid={"nm": "1,9,13,17", "levels": "Family,Genus", "aug": "0,1"},
            rf=self.rf,
            split={"folds": 2},
            augment={"target": 40},
        )
        serial = run_grid(config, tmp_path / "serial", n_jobs=1)
        parallel = run_grid(config, tmp_path / "parallel", n_jobs=4)
        assert serial.results.read_bytes() == parallel.results.read_bytes()
        assert serial.fms_records.read_bytes() == parallel.fms_records.read_bytes()

    def test_planted_signal_is_recovered(self, tmp_path):
        """The forest scores a strong planted signal at weighted F1 of at least 0.9."""
        path = write_synth(tmp_path / "data", n=200, p=40, n_signal=5, effect=5.0, seed=1)
        config = RunConfig.from_file(path, grid={"nm": "1", "levels": "Genus", "aug": "0"})
        data = prepare_level(config, "Genus")
        record = run_cell(config, data, Cell(1, "Genus", 0))
        assert record.status == "ok"
        assert record.weighted_f1 >= 0.9

    def test_noise_scores_near_chance(self, tmp_path):
        """Without signal the median weighted F1 stays near a coin flip."""
        scores = []
        for seed in range(10):
            path = write_synth(tmp_path / str(seed), n=200, p=40, effect=0.0, seed=seed)
            config = RunConfig.from_file(
                path, grid={"nm": "1", "levels": "Genus", "aug": "0"}, rf=self.rf
            )
            data = prepare_level(config, "Genus")
            scores.append(run_cell(config, data, Cell(1, "Genus", 0)).weighted_f1)
        assert 0.35 <= float(np.median(scores)) <= 0.65
