"""Run configuration, single grid cells and the (NM x level x aug) grid runner."""

import json
import logging
import time
from dataclasses import dataclass, field
from pathlib import Path
from typing import Any, Dict, List, Optional, Sequence, Tuple, Union

import numpy as np
from joblib import Parallel, delayed
from pydantic import BaseModel, ValidationError, field_validator

from .augment import AugmentSpec, augment_training, inherit_env
from .bnn import (
    DEFAULT_WEIGHT_CAP,
    Activation,
    BayesianMLPClassifier,
    BnnArchitecture,
    HmcConfig,
    check_capacity,
)
from .data import (
    RESPONSES,
    BinaryLabels,
    EnvGroup,
    EnvTable,
    OtuTable,
    TaxonomicLevel,
    align,
    binarize,
    filter_rare_otus,
    load_env_table,
    load_metadata,
    load_otu_table,
)
from .errors import CapacityError, ConfigError, DataError, PhenoError
from .evaluate import (
    BaselineTestResult,
    Metrics,
    SplitPlan,
    exceedance_test,
    split,
    weighted_f1,
)
from .featsel import FeatureSelection, select_features
from .fms import records_from_results
from .learners import ForestConfig, RandomForestClassifier, forest_grid, grid_search_cv
from .preprocess import (
    EnvScaler,
    Rarefy,
    apply_spec,
    fit_spec,
    parse_spec,
    scale_env,
    with_seed,
)

logger = logging.getLogger(__name__)

PREDICTOR_SETS = (
    "ALL-OTU",
    "OTU-S0",
    "OTU-S1",
    "OTU-S2",
    "OTU-S3",
    "Alpha",
    "Soil",
    "DS",
    "Soil+DS",
    "Alpha+Soil",
    "Alpha+Soil+DS",
    "OTU-S3+Soil",
    "OTU-S3+DS",
    "OTU-S3+Soil+DS",
)
MODELS = ("rf", "bnn")


def _as_list(value: Any) -> Any:
    if isinstance(value, str):
        return [part.strip() for part in value.split(",") if part.strip()]
    if isinstance(value, (int, float)) or value is None:
        return [value]
    return value


def _int_range(value: Any) -> Any:
    """Expand "1-20" and "1,6,9-11" into integer lists."""
    if not isinstance(value, str):
        return _as_list(value)
    out: List[int] = []
    for part in _as_list(value):
        if "-" in part:
            lo, hi = part.split("-", 1)
            out.extend(range(int(lo), int(hi) + 1))
        else:
            out.append(int(part))
    return out


class GridSettings(BaseModel):
    nm: List[int] = list(range(1, 21))
    levels: List[str] = [level.label for level in TaxonomicLevel]
    aug: List[int] = [0, 1]

    @field_validator("nm", "aug", mode="before")
    @classmethod
    def _ranges(cls, v: Any) -> Any:
        return _int_range(v)

    @field_validator("levels", mode="before")
    @classmethod
    def _levels(cls, v: Any) -> Any:
        return [TaxonomicLevel.parse(level).label for level in _as_list(v)]

    @field_validator("nm")
    @classmethod
    def _nm(cls, v: List[int]) -> List[int]:
        bad = [i for i in v if not 1 <= i <= 20]
        if bad:
            raise ValueError(f"NM index must be in 1..20, got {bad[0]}")
        return v

    @field_validator("aug")
    @classmethod
    def _aug(cls, v: List[int]) -> List[int]:
        if any(a not in (0, 1) for a in v):
            raise ValueError("aug values must be 0 or 1")
        return v


class SplitSettings(BaseModel):
    test_fraction: float = 0.2
    folds: int = 10
    stratified: bool = True


class RfSettings(BaseModel):
    n_estimators: List[int] = [100, 200, 500]
    min_samples_split: List[int] = [8, 10]
    min_samples_leaf: List[int] = [3, 4, 5]
    max_depth: List[Optional[int]] = [80, 90]
    criterion: List[str] = ["gini", "entropy"]
    features_per_split: Optional[int] = None

    @field_validator(
        "n_estimators", "min_samples_split", "min_samples_leaf", "criterion", mode="before"
    )
    @classmethod
    def _lists(cls, v: Any) -> Any:
        return _as_list(v)

    @field_validator("max_depth", mode="before")
    @classmethod
    def _depths(cls, v: Any) -> Any:
        return [None if str(d).lower() == "none" else d for d in _as_list(v)]

    def grid(self, seed: int) -> List[ForestConfig]:
        return forest_grid(
            n_estimators=self.n_estimators,
            min_samples_split=self.min_samples_split,
            min_samples_leaf=self.min_samples_leaf,
            max_depth=self.max_depth,
            criterion=self.criterion,
            features_per_split=self.features_per_split,
            seed=seed,
        )


class BnnSettings(BaseModel):
    layers: int = 5
    width: int = 3
    activation: str = "tanh"
    chain: int = 2000
    leapfrog: int = 100
    step_size: float = 0.1
    weight_cap: int = DEFAULT_WEIGHT_CAP

    @field_validator("activation")
    @classmethod
    def _activation(cls, v: str) -> str:
        return Activation(v.strip().lower()).value

    def classifier(self, seed: int) -> BayesianMLPClassifier:
        hmc = HmcConfig(
            n_leapfrog=self.leapfrog,
            step_size=self.step_size,
            chain_length=self.chain,
            seed=seed,
        )
        return BayesianMLPClassifier(
            hmc=hmc,
            n_hidden_layers=self.layers,
            width_factor=self.width,
            activation=self.activation,
            weight_cap=self.weight_cap,
        )


class AugmentSettings(BaseModel):
    target: int = 400
    noise_divisor: float = 100.0


class SelectSettings(BaseModel):
    fraction: float = 0.3
    threshold: float = 0.2
    ridge: float = 0.1


class FilterSettings(BaseModel):
    min_prevalence: int = 15


SECTIONS = ("grid", "split", "rf", "bnn", "augment", "select", "filter")


class RunConfig(BaseModel):
    """Everything a grid run or a single cell needs."""

    otu: Dict[str, Path] = {}
    metadata: Optional[Path] = None
    env: Dict[str, Path] = {}
    response: str = "Scab"
    predictors: str = "ALL-OTU"
    model: str = "rf"
    scaler: str = "standardize"
    seed: int = 0
    out: Path = Path("results")
    grid: GridSettings = GridSettings()
    split: SplitSettings = SplitSettings()
    rf: RfSettings = RfSettings()
    bnn: BnnSettings = BnnSettings()
    augment: AugmentSettings = AugmentSettings()
    select: SelectSettings = SelectSettings()
    filter: FilterSettings = FilterSettings()

    @field_validator("otu", mode="before")
    @classmethod
    def _otu_levels(cls, v: Any) -> Any:
        return {TaxonomicLevel.parse(k).label: path for k, path in dict(v).items()}

    @field_validator("env", mode="before")
    @classmethod
    def _env_groups(cls, v: Any) -> Any:
        return {EnvGroup.parse(k).value: path for k, path in dict(v).items()}

    @field_validator("response")
    @classmethod
    def _response(cls, v: str) -> str:
        if v not in RESPONSES:
            raise ValueError(f"response must be one of {', '.join(RESPONSES)}")
        return v

    @field_validator("predictors")
    @classmethod
    def _predictors(cls, v: str) -> str:
        if v not in PREDICTOR_SETS:
            raise ValueError(f"predictor set must be one of {', '.join(PREDICTOR_SETS)}")
        return v

    @field_validator("model")
    @classmethod
    def _model(cls, v: str) -> str:
        v = v.strip().lower()
        if v not in MODELS:
            raise ValueError("model must be rf or bnn")
        return v

    @field_validator("scaler")
    @classmethod
    def _scaler(cls, v: str) -> str:
        return EnvScaler.parse(v).value

    @property
    def env_groups(self) -> List[EnvGroup]:
        return [EnvGroup.parse(part) for part in self.predictors.split("+") if "OTU" not in part]

    @property
    def otu_subset(self) -> Optional[str]:
        """"ALL-OTU", an "OTU-S*" subset name, or None for environmental-only sets."""
        for part in self.predictors.split("+"):
            if "OTU" in part:
                return part
        return None

    def check_paths(self) -> None:
        """Raise ConfigError for inputs this configuration needs but cannot find."""
        if self.metadata is None:
            raise ConfigError("run config names no metadata file")
        needed = [self.metadata]
        if self.otu_subset is not None or self.env_groups:
            for level in self.grid.levels:
                if level not in self.otu:
                    raise ConfigError(f"run config names no OTU table for level {level}")
                needed.append(self.otu[level])
        for group in self.env_groups:
            if group.value not in self.env:
                raise ConfigError(f"run config names no {group.value} table")
            needed.append(self.env[group.value])
        missing = [str(p) for p in needed if not Path(p).exists()]
        if missing:
            raise ConfigError(f"input file(s) not found: {', '.join(missing)}")

    @classmethod
    def from_file(cls, path: Union[str, Path], **overrides: Any) -> "RunConfig":
        """Parse a flat ``key = value`` file; dotted keys address sections and maps.

        Relative paths resolve against the file's directory. ``overrides`` are applied
        on top of the file (None values are ignored).
        """
        path = Path(path)
        if not path.exists():
            raise ConfigError(f"config file not found: {path}")
        base = path.parent
        data: Dict[str, Any] = {"otu": {}, "env": {}}
        for number, raw in enumerate(path.read_text(encoding="utf-8").splitlines(), 1):
            line = raw.strip()
            if not line or line.startswith("#"):
                continue
            if "=" not in line:
                raise ConfigError(f"{path}:{number}: expected 'key = value'")
            key, value = (part.strip() for part in line.split("=", 1))
            value = value.strip("'\"")
            section, _, name = key.partition(".")
            if section in ("otu", "env") and name:
                data[section][name] = base / value
            elif section == "metadata" or section == "out":
                data[section] = base / value
            elif section in SECTIONS and name:
                data.setdefault(section, {})[name] = value
            elif not name and section in cls.model_fields:
                data[section] = value
            else:
                raise ConfigError(f"{path}:{number}: unknown key {key!r}")
        data.update({k: v for k, v in overrides.items() if v is not None})
        return cls.build(data, source=str(path))

    @classmethod
    def build(cls, data: Dict[str, Any], source: str = "run config") -> "RunConfig":
        try:
            return cls.model_validate(data)
        except (ValidationError, DataError, ValueError) as e:
            raise ConfigError(f"invalid {source}: {e}") from e


class ResultRecord(BaseModel):
    """One grid cell's outcome; only deterministic fields."""

    nm_index: int
    preprocess: str
    level: str
    aug: int
    aug_stage: Optional[str] = None
    response: str
    predictors: str
    model: str
    seed: int
    status: str = "ok"
    weighted_f1: Optional[float] = None
    f1: Optional[List[float]] = None
    support: Optional[List[int]] = None
    n_train: int = 0
    n_test: int = 0
    n_features: int = 0
    model_summary: Dict[str, Any] = {}

    @field_validator("weighted_f1")
    @classmethod
    def _score(cls, v: Optional[float]) -> Optional[float]:
        if v is not None and not 0.0 <= v <= 1.0:
            raise ValueError("weighted_f1 must be in [0, 1]")
        return v


@dataclass(frozen=True)
class Cell:
    nm_index: int
    level: str
    aug: int

    def seed(self, master: int) -> int:
        level = TaxonomicLevel.parse(self.level).value
        state = np.random.SeedSequence([master, self.nm_index, level, self.aug])
        return int(state.generate_state(1)[0])


def grid_cells(config: RunConfig) -> List[Cell]:
    """Cells in canonical (NM, level, aug) order."""
    levels = sorted(config.grid.levels, key=lambda lv: TaxonomicLevel.parse(lv).value)
    return [
        Cell(nm, level, aug)
        for nm in sorted(config.grid.nm)
        for level in levels
        for aug in sorted(config.grid.aug)
    ]


@dataclass
class LevelData:
    """One level's aligned raw table, labels, fixed split and environmental blocks."""

    table: OtuTable
    labels: BinaryLabels
    train: np.ndarray
    test: np.ndarray
    env: Dict[str, EnvTable] = field(default_factory=dict)
    selection: Optional[FeatureSelection] = None


def prepare_level(config: RunConfig, level: str, n_jobs: int = 1) -> LevelData:
    """Load, align, filter and split one level; run feature selection when needed."""
    level = TaxonomicLevel.parse(level).label
    if level not in config.otu:
        raise ConfigError(f"run config names no OTU table for level {level}")
    if config.metadata is None:
        raise ConfigError("run config names no metadata file")
    responses = load_metadata(config.metadata)
    table, responses = align(load_otu_table(config.otu[level], level), responses)
    table = filter_rare_otus(table, config.filter.min_prevalence)
    responses = responses.reorder(table.sample_ids)
    labels = binarize(responses, config.response)

    plan = SplitPlan(
        test_fraction=config.split.test_fraction,
        folds=config.split.folds,
        stratified=config.split.stratified,
        seed=config.seed,
    )
    parts = split(table.n, labels.labels, plan)
    env = {
        group.value: load_env_table(config.env[group.value], group).reorder(table.sample_ids)
        for group in config.env_groups
    }

    selection = None
    subset = config.otu_subset
    if subset is not None and subset != "ALL-OTU":
        train = apply_spec(table.take(parts.train), parse_spec(1, seed=config.seed))
        selection = select_features(
            train,
            labels.take(parts.train),
            fraction=config.select.fraction,
            seed=config.seed,
            threshold=config.select.threshold,
            ridge=config.select.ridge,
            n_jobs=n_jobs,
        )
    return LevelData(
        table=table,
        labels=labels,
        train=parts.train,
        test=parts.test,
        env=env,
        selection=selection,
    )


@dataclass
class CellData:
    X_train: np.ndarray
    y_train: np.ndarray
    X_test: np.ndarray
    y_test: np.ndarray
    n_features: int


def augment_stage(config: RunConfig, cell: Cell) -> Optional[str]:
    """Which table augmentation sees: "raw" counts or the "normalized" table.

    Rarefy needs integer counts, so its cells augment raw counts; so do cells without
    an OTU block, which only need the synthetic rows' provenance.
    """
    if not cell.aug:
        return None
    if config.otu_subset is None or isinstance(parse_spec(cell.nm_index).norm, Rarefy):
        return "raw"
    return "normalized"


def assemble_cell(config: RunConfig, data: LevelData, cell: Cell, seed: int) -> CellData:
    """Preprocess, augment and stack the predictor blocks of one cell.

    Preprocessing references are fitted on the training rows, so a held-out sample
    never changes a training feature.
    """
    train = data.table.take(data.train)
    y_train = data.labels.take(data.train)
    test = data.table.take(data.test)
    y_test = data.labels.labels[data.test]
    stage = augment_stage(config, cell)
    spec = AugmentSpec(config.augment.target, config.augment.noise_divisor, seed % 2**31)

    if stage == "raw":
        train, y_train = augment_training(train, y_train, spec)
    blocks_train: List[np.ndarray] = []
    blocks_test: List[np.ndarray] = []
    subset = config.otu_subset
    if subset is not None:
        nm = with_seed(parse_spec(cell.nm_index), seed % 2**31)
        if isinstance(nm.norm, Rarefy) and stage == "raw":
            train = train.with_counts(np.round(train.counts))
        fitted = fit_spec(train, nm)
        train = apply_spec(train, fitted)
        test = apply_spec(test, with_seed(fitted, (seed + 1) % 2**31))
        if stage == "normalized":
            train, y_train = augment_training(train, y_train, spec)
        if subset != "ALL-OTU":
            members = data.selection.subsets[subset] if data.selection else []
            if not members:
                raise DataError(f"{subset} is empty at level {cell.level}")
            blocks_train.append(train.select(members).counts)
            blocks_test.append(test.select(members).counts)
        else:
            blocks_train.append(train.counts)
            blocks_test.append(test.counts)

    for group in config.env_groups:
        env = data.env[group.value]
        stacked = inherit_env(env, train.concat(test))
        scaled = scale_env(stacked, config.scaler, range(train.n)).values
        blocks_train.append(scaled[: train.n])
        blocks_test.append(scaled[train.n :])

    X_train = np.hstack(blocks_train)
    return CellData(
        X_train=X_train,
        y_train=y_train.labels,
        X_test=np.hstack(blocks_test),
        y_test=y_test,
        n_features=X_train.shape[1],
    )


def fit_model(
    config: RunConfig, X: np.ndarray, y: np.ndarray, seed: int
) -> Tuple[Any, Dict[str, Any]]:
    if config.model == "bnn":
        model = config.bnn.classifier(seed).fit(X, y)
        return model, model.samples.summary()
    result = grid_search_cv(config.rf.grid(seed), X, y, folds=config.split.folds, seed=seed)
    model = RandomForestClassifier(result.best).fit(X, y)
    summary = {"best": result.best.to_dict(), "cv_weighted_f1": result.best_score}
    return model, summary


def _blank_record(config: RunConfig, cell: Cell, seed: int) -> ResultRecord:
    return ResultRecord(
        nm_index=cell.nm_index,
        preprocess=parse_spec(cell.nm_index).label,
        level=cell.level,
        aug=cell.aug,
        aug_stage=augment_stage(config, cell),
        response=config.response,
        predictors=config.predictors,
        model=config.model,
        seed=seed,
    )


def fit_cell(config: RunConfig, data: LevelData, cell: Cell) -> Tuple[ResultRecord, Any]:
    """Fit and score one cell, returning the record and the fitted model.

    Raises CapacityError before any sampling when a BNN would exceed the weight cap.
    """
    seed = cell.seed(config.seed)
    parts = assemble_cell(config, data, cell, seed)
    if config.model == "bnn":
        arch = BnnArchitecture(
            parts.n_features, config.bnn.layers, config.bnn.width, config.bnn.activation
        )
        check_capacity(arch, config.bnn.weight_cap)
    model, summary = fit_model(config, parts.X_train, parts.y_train, seed)
    metrics = weighted_f1(parts.y_test, model.predict(parts.X_test))
    record = _blank_record(config, cell, seed).model_copy(
        update={
            "weighted_f1": metrics.weighted,
            "f1": list(metrics.f1),
            "support": list(metrics.support),
            "n_train": int(parts.y_train.size),
            "n_test": int(parts.y_test.size),
            "n_features": parts.n_features,
            "model_summary": summary,
        }
    )
    return record, model


def run_cell(config: RunConfig, data: LevelData, cell: Cell) -> ResultRecord:
    """Fit and score one cell; failures are recorded, never raised."""
    try:
        record, _ = fit_cell(config, data, cell)
    except CapacityError as e:
        logger.warning(f"cell {cell}: skipped, {e}")
        record = _blank_record(config, cell, cell.seed(config.seed))
        return record.model_copy(update={"status": "skipped: capacity"})
    except (PhenoError, ValueError, FloatingPointError, np.linalg.LinAlgError) as e:
        logger.warning(f"cell {cell}: {e}")
        record = _blank_record(config, cell, cell.seed(config.seed))
        return record.model_copy(update={"status": f"error: {e}"})
    return record


def _timed_cell(config: RunConfig, data: LevelData, cell: Cell) -> Tuple[ResultRecord, float]:
    start = time.perf_counter()
    record = run_cell(config, data, cell)
    return record, time.perf_counter() - start


@dataclass
class GridOutputs:
    results: Path
    fms_records: Path
    timings: Path
    records: List[ResultRecord]


def _write_jsonl(path: Path, rows: Sequence[str]) -> None:
    path.write_text("".join(row + "\n" for row in rows), encoding="utf-8")


def run_grid(
    config: RunConfig, out_dir: Optional[Union[str, Path]] = None, n_jobs: int = 1
) -> GridOutputs:
    """Run every cell and write results, FMS records and timings in canonical order."""
    from .formatters import score_table

    out = Path(out_dir or config.out)
    out.mkdir(parents=True, exist_ok=True)
    cells = grid_cells(config)
    levels = {cell.level for cell in cells}
    prepared = {}
    for level in sorted(levels, key=lambda lv: TaxonomicLevel.parse(lv).value):
        prepared[level] = prepare_level(config, level, n_jobs=n_jobs)
        selection = prepared[level].selection
        if selection is not None:
            (out / f"scores_{level}.csv").write_text(
                score_table.render(selection.scores), encoding="utf-8"
            )
    logger.info(f"running {len(cells)} cells with {n_jobs} job(s)")

    outcomes = Parallel(n_jobs=n_jobs)(
        delayed(_timed_cell)(config, prepared[cell.level], cell) for cell in cells
    )
    records = [record for record, _ in outcomes]
    failed = sum(1 for r in records if r.status != "ok")
    if failed:
        logger.warning(f"{failed} of {len(records)} cells did not produce a score")

    results = out / "results.jsonl"
    fms_path = out / "fms_records.jsonl"
    timings = out / "timings.jsonl"
    _write_jsonl(results, [r.model_dump_json() for r in records])
    _write_jsonl(fms_path, [r.model_dump_json() for r in records_from_results(records)])
    _write_jsonl(
        timings,
        [
            json.dumps(
                {"nm_index": r.nm_index, "level": r.level, "aug": r.aug, "seconds": elapsed}
            )
            for r, elapsed in outcomes
        ],
    )
    return GridOutputs(results=results, fms_records=fms_path, timings=timings, records=records)


def baseline_cell(
    config: RunConfig,
    data: LevelData,
    cell: Cell,
    strategy: Union[int, str],
    n: int = 200,
    alpha: float = 0.05,
    research: bool = False,
    n_jobs: int = 1,
) -> Tuple[ResultRecord, BaselineTestResult]:
    """Score one cell, then compare the score against ``n`` randomized baselines.

    Replicates reuse the cell's best forest config unless ``research`` is set, in which
    case each replicate repeats the grid search.
    """
    original = run_cell(config, data, cell)
    if original.status != "ok" or original.weighted_f1 is None:
        raise DataError(f"cell {cell} did not produce a score: {original.status}")
    seed = cell.seed(config.seed)
    parts = assemble_cell(config, data, cell, seed)
    n_train = parts.y_train.size
    X = np.vstack([parts.X_train, parts.X_test])
    y = np.concatenate([parts.y_train, parts.y_test])
    fixed = original.model_summary.get("best")

    def runner(Xb: np.ndarray, yb: np.ndarray, rep_seed: int) -> Metrics:
        Xt, yt = Xb[:n_train], yb[:n_train]
        if config.model == "bnn":
            model = config.bnn.classifier(rep_seed).fit(Xt, yt)
        elif research or fixed is None:
            model, _ = fit_model(config, Xt, yt, rep_seed)
        else:
            model = RandomForestClassifier(ForestConfig(**{**fixed, "seed": rep_seed}))
            model.fit(Xt, yt)
        return weighted_f1(yb[n_train:], model.predict(Xb[n_train:]))

    result = exceedance_test(
        original.weighted_f1, strategy, X, y, runner, n=n, alpha=alpha, seed=seed, n_jobs=n_jobs
    )
    return original, result
