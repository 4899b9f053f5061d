"""Tests for table types, ingestion and binarization."""

import numpy as np
import pytest

from pheno_ml.data import (
    METADATA_COLUMNS,
    EnvGroup,
    OtuTable,
    ResponseSet,
    TaxonomicLevel,
    align,
    binarize,
    binarize_disease,
    binarize_yield,
    filter_rare_otus,
    load_env_table,
    load_metadata,
    load_otu_table,
)
from pheno_ml.errors import DataError, EmptyTableError, IngestionError

METADATA_HEADER = ",".join(METADATA_COLUMNS)


def _table(counts, names=None):
    counts = np.asarray(counts, dtype=float)
    n, p = counts.shape
    return OtuTable(
        sample_ids=tuple(f"s{i}" for i in range(n)),
        otu_names=tuple(names or [f"o{j}" for j in range(p)]),
        counts=counts,
    )


class TestLoadOtuTable:
    """Test OTU CSV ingestion."""

    def test_parses_counts(self, tmp_path):
        """A 3x2 table parses into n=3, p=2 with the right values."""
        path = tmp_path / "otu.csv"
        path.write_text("sample_id,A,B\ns1,1,2\ns2,0,3\ns3,4,0\n")
        table = load_otu_table(path, "Genus")
        assert table.n == 3
        assert table.p == 2
        assert table.otu_names == ("A", "B")
        np.testing.assert_array_equal(table.counts, [[1, 2], [0, 3], [4, 0]])
        assert table.level is TaxonomicLevel.GENUS

    def test_negative_count(self, tmp_path):
        """A negative entry is reported with its position."""
        path = tmp_path / "otu.csv"
        path.write_text("sample_id,A,B\ns1,1,2\ns2,-1,3\n")
        with pytest.raises(IngestionError, match=r"negative count at \(2,A\)") as info:
            load_otu_table(path, "Genus")
        assert info.value.row == 2
        assert info.value.column == "A"

    def test_malformed_header(self, tmp_path):
        """The first column must be sample_id."""
        path = tmp_path / "otu.csv"
        path.write_text("id,A\ns1,1\n")
        with pytest.raises(IngestionError, match="malformed header"):
            load_otu_table(path, "Phylum")

    def test_duplicate_sample(self, tmp_path):
        """Duplicate sample ids are rejected."""
        path = tmp_path / "otu.csv"
        path.write_text("sample_id,A\ns1,1\ns1,2\n")
        with pytest.raises(IngestionError, match="duplicate sample id"):
            load_otu_table(path, "Class")

    def test_missing_file(self, tmp_path):
        """A missing file is an ingestion error."""
        with pytest.raises(IngestionError, match="file not found"):
            load_otu_table(tmp_path / "nope.csv", "Genus")


def test_otu_table_rejects_negative_unless_clr():
    """Only clr tables may hold negative values."""
    with pytest.raises(DataError, match="negative count"):
        _table([[1.0, -0.5]])
    table = _table([[1.0, 2.0]]).with_counts(np.array([[-0.3, 0.3]]), transform="clr")
    assert table.transform == "clr"


def test_taxonomic_level_parse():
    """Levels parse case-insensitively and keep their coarse-to-fine order."""
    assert TaxonomicLevel.parse("phylum") is TaxonomicLevel.PHYLUM
    assert TaxonomicLevel.parse(5) is TaxonomicLevel.GENUS
    assert TaxonomicLevel.FAMILY.label == "Family"
    with pytest.raises(DataError):
        TaxonomicLevel.parse("species")


class TestFilterRareOtus:
    """Test prevalence filtering."""

    def test_keeps_prevalent(self):
        """OTUs present in fewer samples than the cutoff are dropped."""
        table = _table([[1, 0, 3], [2, 0, 0], [1, 1, 0]])
        filtered = filter_rare_otus(table, min_prevalence=2)
        assert filtered.otu_names == ("o0",)

    def test_empty_result(self):
        """Filtering everything out is an EmptyTableError."""
        table = _table([[1, 0], [0, 1]])
        with pytest.raises(EmptyTableError, match="empty table"):
            filter_rare_otus(table, min_prevalence=3)

    def test_drops_zero_depth_samples(self):
        """Samples left with zero depth are removed with a warning."""
        table = _table([[1, 0], [2, 0], [0, 4]])
        filtered = filter_rare_otus(table, min_prevalence=2)
        assert filtered.sample_ids == ("s0", "s1")


class TestBinarize:
    """Test response binarization rules."""

    def test_disease(self):
        """Any positive disease value is label 1."""
        labels = binarize_disease([0.0, 0.1, 0.0, 2.0])
        np.testing.assert_array_equal(labels.labels, [0, 1, 0, 1])

    def test_yield_per_variety_median(self):
        """Yield labels compare against the sample's own variety median."""
        values = [1.0, 2.0, 3.0, 10.0, 20.0, 30.0]
        varieties = ["a", "a", "a", "b", "b", "b"]
        labels = binarize_yield(values, varieties)
        np.testing.assert_array_equal(labels.labels, [0, 0, 1, 0, 0, 1])

    def test_dispatch_by_name(self):
        """binarize picks the yield rule for yield responses and the disease rule otherwise."""
        responses = ResponseSet(
            sample_ids=("a", "b", "c", "d"),
            varieties=("v", "v", "v", "v"),
            values={"Yield_Meter": np.array([1.0, 2.0, 3.0, 4.0]), "Scab": np.zeros(4)},
        )
        assert binarize(responses, "Yield_Meter").labels.tolist() == [0, 0, 1, 1]
        assert binarize(responses, "Scab").labels.tolist() == [0, 0, 0, 0]
        with pytest.raises(DataError, match="unknown response"):
            binarize(responses, "Height")


class TestMetadataAndEnv:
    """Test metadata and environmental ingestion."""

    def test_metadata_and_align(self, tmp_path):
        """Metadata aligns to the OTU table order and attaches varieties."""
        meta = tmp_path / "meta.csv"
        meta.write_text(
            METADATA_HEADER + "\n"
            "s2,B,MN,1,1,0,0,0,0\n"
            "s1,A,ND,2,2,0.5,0,0,0\n"
            "s9,A,ND,2,2,0.5,0,0,0\n"
        )
        otu = tmp_path / "otu.csv"
        otu.write_text("sample_id,X\ns1,1\ns2,2\ns3,3\n")
        table, responses = align(load_otu_table(otu, "Genus"), load_metadata(meta))
        assert table.sample_ids == ("s1", "s2")
        assert table.varieties == ("A", "B")
        assert responses.response("Scab").tolist() == [0.5, 0.0]

    def test_env_width_check(self, tmp_path):
        """A DS table must have exactly four features."""
        path = tmp_path / "ds.csv"
        path.write_text("sample_id,a,b\ns1,1,2\n")
        with pytest.raises(IngestionError, match="must have 4 features"):
            load_env_table(path, EnvGroup.DS)
        table = load_env_table(path, "DS", strict=False)
        assert table.q == 2


def test_filter_is_idempotent():
    """Filtering an already filtered table changes nothing."""
    rng = np.random.default_rng(4)
    counts = rng.poisson(1.0, size=(40, 25)) * (rng.uniform(size=(40, 25)) < 0.5)
    once = filter_rare_otus(_table(counts), min_prevalence=10)
    twice = filter_rare_otus(once, min_prevalence=10)
    assert twice.otu_names == once.otu_names
    assert twice.sample_ids == once.sample_ids
    np.testing.assert_array_equal(twice.counts, once.counts)


@pytest.mark.parametrize("transform", [np.exp, np.cbrt, lambda v: 3.0 * v + 7.0])
def test_yield_labels_ignore_monotone_transforms(transform):
    """Yield labels depend only on the order of values within each variety."""
    rng = np.random.default_rng(8)
    values = rng.uniform(1.0, 5.0, size=30)
    varieties = [("a", "b", "c")[i % 3] for i in range(30)]
    base = binarize_yield(values, varieties).labels
    np.testing.assert_array_equal(binarize_yield(transform(values), varieties).labels, base)
