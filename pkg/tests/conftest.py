import sys
from pathlib import Path

import pytest

sys.path.insert(0, str(Path(__file__).resolve().parents[1] / "src"))


@pytest.fixture(autouse=True)
def _clean_pheno_env(monkeypatch):
    """Keep a developer's PHENO_SEED / PHENO_JOBS out of seed and worker resolution."""
    for name in ("PHENO_SEED", "PHENO_JOBS"):
        monkeypatch.delenv(name, raising=False)
