"""pheno-ml: predicting plant phenotypes from microbiome abundance tables."""

__version__ = "1.0.1"
