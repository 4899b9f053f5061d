"""Command-line interface for pheno-ml."""

import json
import logging
import os
from dataclasses import dataclass
from pathlib import Path
from typing import List, Optional

import click
import numpy as np
import pandas as pd
import typer

from .augment import AugmentSpec, augment_training
from .data import align, binarize, filter_rare_otus, load_env_table, load_metadata, load_otu_table
from .errors import ConfigError, PhenoError
from .evaluate import BaselineStrategy, summarize_results
from .featsel import select_features
from .fms import export_tree, fit_regression_tree, load_records
from .formatters import network_dot, score_table, tree_dot
from .netinfer import class_networks, compare_networks, select_by_degree_diff
from .preprocess import apply_spec, parse_spec, preprocess_grid, scale_env
from .runner import Cell, RunConfig, baseline_cell, fit_cell, prepare_level, run_grid
from .synth import write_synth

logger = logging.getLogger("pheno_ml")


def load_env_file() -> bool:
    """Load the nearest .env file (cwd, then its parents) without overriding set variables."""
    current_dir = Path.cwd()
    for parent in [current_dir] + list(current_dir.parents):
        env_file = parent / ".env"
        if env_file.exists():
            try:
                with open(env_file, "r", encoding="utf-8") as f:
                    for line in f:
                        line = line.strip()
                        if line and not line.startswith("#") and "=" in line:
                            key, value = line.split("=", 1)
                            os.environ.setdefault(key.strip(), value.strip().strip("'\""))
                return True
            except OSError:
                pass
    return False


TAGS = {
    logging.DEBUG: ("[DEBUG]", typer.colors.BRIGHT_BLACK),
    logging.INFO: ("[INFO]", typer.colors.BLUE),
    logging.WARNING: ("[WARNING]", typer.colors.YELLOW),
    logging.ERROR: ("[ERROR]", typer.colors.RED),
}


class TaggedHandler(logging.Handler):
    """Render log records on stderr as colored ``[LEVEL] message`` lines."""

    def emit(self, record: logging.LogRecord) -> None:
        tag, color = TAGS.get(record.levelno, TAGS[logging.ERROR])
        try:
            typer.echo(typer.style(tag, fg=color, bold=True) + " " + record.getMessage(), err=True)
        except Exception:  # noqa: BLE001
            self.handleError(record)


def setup_logging(verbose: bool = False) -> None:
    logger.handlers = [h for h in logger.handlers if not isinstance(h, TaggedHandler)]
    logger.addHandler(TaggedHandler())
    logger.setLevel(logging.DEBUG if verbose else logging.INFO)
    logger.propagate = False


def _tip(message: str) -> None:
    typer.echo(typer.style("[TIP]", fg=typer.colors.YELLOW, bold=True) + " " + message, err=True)


def resolve_jobs(jobs: Optional[int]) -> int:
    if jobs is not None:
        return jobs
    try:
        return int(os.getenv("PHENO_JOBS", "1"))
    except ValueError:
        raise ConfigError(f"PHENO_JOBS must be an integer, got {os.getenv('PHENO_JOBS')!r}")


def resolve_seed(seed: Optional[int], config_seed: Optional[int] = None) -> int:
    """CLI option, then config file, then PHENO_SEED, then 0."""
    if seed is not None:
        return seed
    if config_seed is not None:
        return config_seed
    try:
        return int(os.getenv("PHENO_SEED", "0"))
    except ValueError:
        raise ConfigError(f"PHENO_SEED must be an integer, got {os.getenv('PHENO_SEED')!r}")


def _out_dir(out: Optional[Path], default: str = ".") -> Path:
    path = Path(out or default)
    path.mkdir(parents=True, exist_ok=True)
    return path


def _load_config(config: Path, **overrides) -> RunConfig:
    run = RunConfig.from_file(config, **overrides)
    run.check_paths()
    return run


def _labelled_table(otu: Path, metadata: Path, response: str, level: str, min_prevalence: int):
    table, responses = align(load_otu_table(otu, level), load_metadata(metadata))
    if min_prevalence > 0:
        table = filter_rare_otus(table, min_prevalence)
        responses = responses.reorder(table.sample_ids)
    return table, binarize(responses, response)


@dataclass
class GlobalOptions:
    """Options given before the subcommand; a subcommand's own option wins."""

    seed: Optional[int] = None
    jobs: Optional[int] = None
    out: Optional[Path] = None
    config: Optional[Path] = None
    verbose: bool = False

    def merged(
        self,
        seed: Optional[int] = None,
        jobs: Optional[int] = None,
        out: Optional[Path] = None,
        config: Optional[Path] = None,
        verbose: bool = False,
    ) -> "GlobalOptions":
        return GlobalOptions(
            seed=self.seed if seed is None else seed,
            jobs=self.jobs if jobs is None else jobs,
            out=self.out if out is None else out,
            config=self.config if config is None else config,
            verbose=self.verbose or verbose,
        )

    def require_config(self) -> Path:
        if self.config is None:
            raise click.exceptions.UsageError("Missing option '--config' / '-c'.")
        return self.config


def _options(ctx: typer.Context, **local) -> GlobalOptions:
    shared = ctx.obj if isinstance(ctx.obj, GlobalOptions) else GlobalOptions()
    opts = shared.merged(**local)
    setup_logging(opts.verbose)
    return opts


app = typer.Typer(
    add_completion=False,
    no_args_is_help=True,
    help="Microbiome phenotype prediction: preprocessing, selection, models and evaluation",
)

SEED = typer.Option(None, "--seed", help="Master seed (falls back to PHENO_SEED)")
JOBS = typer.Option(None, "--jobs", "-j", help="Worker processes (falls back to PHENO_JOBS)")
OUT = typer.Option(None, "--out", "-o", help="Output directory")
CONFIG = typer.Option(None, "--config", "-c", help="Run config file (key = value)")
VERBOSE = typer.Option(False, "--verbose", "-v", help="Log debug messages")
LEVEL = typer.Option("Genus", "--level", help="Taxonomic level of the OTU table")


@app.callback()
def global_options(
    ctx: typer.Context,
    seed: Optional[int] = SEED,
    jobs: Optional[int] = JOBS,
    out: Optional[Path] = OUT,
    config: Optional[Path] = CONFIG,
    verbose: bool = VERBOSE,
) -> None:
    ctx.obj = GlobalOptions(seed, jobs, out, config, verbose)


@app.command()
def preprocess(
    ctx: typer.Context,
    otu: Path = typer.Option(..., "--otu", help="OTU count CSV"),
    level: str = LEVEL,
    nm: str = typer.Option("all", "--nm", help="NM index (1-20) or 'all'"),
    min_prevalence: int = typer.Option(0, "--min-prevalence", help="Drop rarer OTUs first"),
    env: Optional[Path] = typer.Option(None, "--env", help="Environmental CSV to scale"),
    group: str = typer.Option("Soil", "--group", help="Environmental group: Soil, DS, Alpha"),
    scaler: str = typer.Option("standardize", "--scaler", help="Environmental scaler"),
    seed: Optional[int] = SEED,
    out: Optional[Path] = OUT,
    verbose: bool = VERBOSE,
) -> None:
    """Apply zero replacement + normalization pipelines (and optionally scale an env table)."""
    opts = _options(ctx, seed=seed, out=out, verbose=verbose)
    seed = resolve_seed(opts.seed)
    out_dir = _out_dir(opts.out)
    table = load_otu_table(otu, level)
    if min_prevalence > 0:
        table = filter_rare_otus(table, min_prevalence)
    specs = preprocess_grid(seed=seed) if nm == "all" else [parse_spec(nm, seed=seed)]
    for spec in specs:
        try:
            result = apply_spec(table, spec)
        except PhenoError as e:
            logger.warning(f"{spec.label}: {e}")
            continue
        target = out_dir / f"{otu.stem}_NM{spec.index}.csv"
        result.to_frame().to_csv(target, index=False)
        logger.info(f"{spec.label} -> {target}")
    if env is not None:
        table_env = load_env_table(env, group)
        scaled = scale_env(table_env, scaler, range(len(table_env.sample_ids)))
        frame = pd.DataFrame(scaled.values, columns=list(scaled.feature_names))
        frame.insert(0, "sample_id", scaled.sample_ids)
        target = out_dir / f"{env.stem}_{scaler}.csv"
        frame.to_csv(target, index=False)
        logger.info(f"scaled {group} table -> {target}")


@app.command()
def augment(
    ctx: typer.Context,
    otu: Path = typer.Option(..., "--otu", help="OTU table CSV of the training partition"),
    metadata: Path = typer.Option(..., "--metadata", help="Metadata CSV"),
    response: str = typer.Option("Scab", "--response", help="Response to binarize"),
    level: str = LEVEL,
    target: int = typer.Option(400, "--target", help="Samples per label after augmentation"),
    noise_divisor: float = typer.Option(100.0, "--noise-divisor", help="Noise scale divisor"),
    seed: Optional[int] = SEED,
    out: Optional[Path] = OUT,
    verbose: bool = VERBOSE,
) -> None:
    """Balance a training table with noisy copies of same-variety, same-label samples."""
    opts = _options(ctx, seed=seed, out=out, verbose=verbose)
    table, labels = _labelled_table(otu, metadata, response, level, 0)
    _tip("augment only the training partition; synthetic rows must never reach a test set")
    spec = AugmentSpec(target, noise_divisor, resolve_seed(opts.seed))
    augmented, new_labels = augment_training(table, labels, spec)
    out_dir = _out_dir(opts.out)
    frame = augmented.to_frame(with_provenance=True)
    frame.insert(1, "label", new_labels.labels)
    target_path = out_dir / f"{otu.stem}_augmented.csv"
    frame.to_csv(target_path, index=False)
    logger.info(f"{augmented.n} samples ({new_labels.class_counts()}) -> {target_path}")


@app.command("select-features")
def select_features_cmd(
    ctx: typer.Context,
    otu: Path = typer.Option(..., "--otu", help="OTU count CSV"),
    metadata: Path = typer.Option(..., "--metadata", help="Metadata CSV"),
    response: str = typer.Option("Scab", "--response", help="Response to binarize"),
    level: str = LEVEL,
    nm: int = typer.Option(1, "--nm", help="NM pipeline applied before scoring"),
    fraction: float = typer.Option(0.3, "--fraction", help="Fraction kept by each criterion"),
    min_prevalence: int = typer.Option(0, "--min-prevalence", help="Drop rarer OTUs first"),
    seed: Optional[int] = SEED,
    jobs: Optional[int] = JOBS,
    out: Optional[Path] = OUT,
    verbose: bool = VERBOSE,
) -> None:
    """Score OTUs with seven criteria and the network comparison; write scores.csv."""
    opts = _options(ctx, seed=seed, jobs=jobs, out=out, verbose=verbose)
    seed = resolve_seed(opts.seed)
    table, labels = _labelled_table(otu, metadata, response, level, min_prevalence)
    table = apply_spec(table, parse_spec(nm, seed=seed))
    selection = select_features(
        table, labels, fraction=fraction, seed=seed, n_jobs=resolve_jobs(opts.jobs)
    )
    out_dir = _out_dir(opts.out)
    (out_dir / "scores.csv").write_text(score_table.render(selection.scores), encoding="utf-8")
    (out_dir / "subsets.json").write_text(json.dumps(selection.subsets, indent=2) + "\n")
    for name, members in selection.subsets.items():
        typer.echo(f"{name}: {', '.join(members) if members else '(empty)'}")
    logger.info(f"scores -> {out_dir / 'scores.csv'}")


@app.command("net-compare")
def net_compare(
    ctx: typer.Context,
    otu: Path = typer.Option(..., "--otu", help="OTU count CSV"),
    metadata: Path = typer.Option(..., "--metadata", help="Metadata CSV"),
    response: str = typer.Option("Scab", "--response", help="Response to binarize"),
    level: str = LEVEL,
    nm: int = typer.Option(1, "--nm", help="NM pipeline applied before inference"),
    threshold: float = typer.Option(0.2, "--threshold", help="Edge threshold on |partial rho|"),
    ridge: float = typer.Option(0.1, "--ridge", help="Diagonal ridge before inversion"),
    fraction: float = typer.Option(0.3, "--fraction", help="Fraction of nodes selected"),
    min_prevalence: int = typer.Option(0, "--min-prevalence", help="Drop rarer OTUs first"),
    seed: Optional[int] = SEED,
    jobs: Optional[int] = JOBS,
    out: Optional[Path] = OUT,
    verbose: bool = VERBOSE,
) -> None:
    """Infer one network per label and rank OTUs by degree difference."""
    opts = _options(ctx, seed=seed, jobs=jobs, out=out, verbose=verbose)
    table, labels = _labelled_table(otu, metadata, response, level, min_prevalence)
    table = apply_spec(table, parse_spec(nm, seed=resolve_seed(opts.seed)))
    net0, net1 = class_networks(
        table.counts,
        labels.labels,
        table.otu_names,
        threshold=threshold,
        ridge=ridge,
        n_jobs=resolve_jobs(opts.jobs),
    )
    comparison = compare_networks(net0, net1)
    selected = set(select_by_degree_diff(comparison, fraction))
    out_dir = _out_dir(opts.out)
    frame = pd.DataFrame(comparison.rows(), columns=["otu", "degree0", "degree1", "difference"])
    frame["selected"] = [int(name in selected) for name in frame["otu"]]
    frame.to_csv(out_dir / "degree_diff.csv", index=False)
    (out_dir / "network_label0.dot").write_text(network_dot.render(net0, "label0"))
    (out_dir / "network_label1.dot").write_text(network_dot.render(net1, "label1"))
    logger.info(f"{len(net0.edges)} and {len(net1.edges)} edges; {len(selected)} OTUs selected")


@app.command()
def train(
    ctx: typer.Context,
    config: Optional[Path] = CONFIG,
    model: Optional[str] = typer.Option(None, "--model", help="rf or bnn"),
    predictors: Optional[str] = typer.Option(None, "--predictors", help="Predictor set"),
    nm: int = typer.Option(1, "--nm", help="NM pipeline index"),
    level: str = LEVEL,
    aug: int = typer.Option(0, "--aug", help="1 to augment the training partition"),
    tree_dot_path: Optional[Path] = typer.Option(
        None, "--tree-dot", help="Write the first forest tree as DOT"
    ),
    seed: Optional[int] = SEED,
    jobs: Optional[int] = JOBS,
    out: Optional[Path] = OUT,
    verbose: bool = VERBOSE,
) -> None:
    """Fit and score one (NM, level, aug) cell; prints the result record as JSON."""
    opts = _options(ctx, seed=seed, jobs=jobs, out=out, config=config, verbose=verbose)
    run = _load_config(
        opts.require_config(), model=model, predictors=predictors, seed=opts.seed
    )
    run = run.model_copy(update={"seed": resolve_seed(opts.seed, run.seed)})
    data = prepare_level(run, level, n_jobs=resolve_jobs(opts.jobs))
    cell = Cell(nm, data.table.level.label, aug)
    record, fitted = fit_cell(run, data, cell)
    typer.echo(record.model_dump_json(indent=2))
    if opts.out is not None:
        target = _out_dir(opts.out) / "result.json"
        target.write_text(record.model_dump_json(indent=2) + "\n", encoding="utf-8")
    if tree_dot_path is not None:
        if not getattr(fitted, "trees", None):
            logger.warning("--tree-dot needs a random forest; nothing written")
        else:
            tree_dot_path.write_text(tree_dot.render(fitted.trees[0]), encoding="utf-8")


@app.command()
def evaluate(
    ctx: typer.Context,
    results: Path = typer.Option(..., "--in", help="results.jsonl from run-grid"),
    out: Optional[Path] = OUT,
    verbose: bool = VERBOSE,
) -> None:
    """Summarize weighted F1 per (predictors, model, response) into a plot-ready CSV."""
    opts = _options(ctx, out=out, verbose=verbose)
    if not results.exists():
        raise PhenoError(f"file not found: {results}")
    rows = [json.loads(line) for line in results.read_text().splitlines() if line.strip()]
    summary = summarize_results(rows)
    target = _out_dir(opts.out) / "summary.csv"
    summary.to_csv(target, index=False)
    typer.echo(summary.to_string(index=False))
    logger.info(f"summary -> {target}")


@app.command()
def baseline(
    ctx: typer.Context,
    config: Optional[Path] = CONFIG,
    strategy: str = typer.Option("3", "--strategy", help="1-4 or a strategy name"),
    n: int = typer.Option(200, "--n", help="Number of baseline replicates"),
    alpha: float = typer.Option(0.05, "--alpha", help="Significance level"),
    research: bool = typer.Option(
        False, "--research", help="Repeat the grid search for every replicate"
    ),
    nm: int = typer.Option(1, "--nm", help="NM pipeline index"),
    level: str = LEVEL,
    aug: int = typer.Option(0, "--aug", help="1 to augment the training partition"),
    seed: Optional[int] = SEED,
    jobs: Optional[int] = JOBS,
    out: Optional[Path] = OUT,
    verbose: bool = VERBOSE,
) -> None:
    """Exceedance test of one cell's score against randomized baselines."""
    opts = _options(ctx, seed=seed, jobs=jobs, out=out, config=config, verbose=verbose)
    run = _load_config(opts.require_config(), seed=opts.seed)
    run = run.model_copy(update={"seed": resolve_seed(opts.seed, run.seed)})
    n_jobs = resolve_jobs(opts.jobs)
    data = prepare_level(run, level, n_jobs=n_jobs)
    cell = Cell(nm, data.table.level.label, aug)
    _, result = baseline_cell(
        run,
        data,
        cell,
        BaselineStrategy.parse(strategy),
        n=n,
        alpha=alpha,
        research=research,
        n_jobs=n_jobs,
    )
    out_dir = _out_dir(opts.out, str(run.out))
    result.to_frame().to_csv(out_dir / "baseline.csv", index=False)
    summary = result.summary()
    (out_dir / "baseline.json").write_text(json.dumps(summary, indent=2) + "\n")
    typer.echo(json.dumps(summary, indent=2))
    if not result.reject:
        _tip(f"EV {result.ev:.3f} >= alpha {alpha}; the score is not distinguishable from chance")


@app.command()
def fms(
    ctx: typer.Context,
    results: Path = typer.Option(..., "--in", help="results.jsonl or fms_records.jsonl"),
    max_depth: int = typer.Option(4, "--max-depth", help="Maximum tree depth"),
    min_split: int = typer.Option(2, "--min-split", help="Minimum records to split a node"),
    min_leaf: int = typer.Option(1, "--min-leaf", help="Minimum records per leaf"),
    out: Optional[Path] = OUT,
    verbose: bool = VERBOSE,
) -> None:
    """Fit the full-model-selection regression tree and write tree.txt and tree.dot."""
    opts = _options(ctx, out=out, verbose=verbose)
    records = load_records(results)
    tree = fit_regression_tree(records, max_depth, min_split, min_leaf)
    out_dir = _out_dir(opts.out, str(results.parent))
    text = export_tree(tree, "text")
    (out_dir / "tree.txt").write_text(text, encoding="utf-8")
    (out_dir / "tree.dot").write_text(export_tree(tree, "dot"), encoding="utf-8")
    typer.echo(text, nl=False)
    logger.info(f"{len(records)} records, {len(tree.leaves())} leaves -> {out_dir}")


@app.command()
def synth(
    ctx: typer.Context,
    n: int = typer.Option(200, "--n", help="Samples"),
    p: int = typer.Option(40, "--p", help="Genus-level OTUs"),
    n_signal: int = typer.Option(5, "--n-signal", help="OTUs carrying the planted signal"),
    effect: float = typer.Option(5.0, "--effect", help="Mean shift (1 + effect) for label 1"),
    imbalance: float = typer.Option(0.5, "--imbalance", help="Probability of label 1"),
    seed: Optional[int] = SEED,
    out: Optional[Path] = OUT,
    verbose: bool = VERBOSE,
) -> None:
    """Write a synthetic dataset (all levels, metadata, env tables) and its run.cfg."""
    opts = _options(ctx, seed=seed, out=out, verbose=verbose)
    seed = resolve_seed(opts.seed)
    config = write_synth(opts.out or Path("synth"), n, p, n_signal, effect, imbalance, seed)
    typer.echo(str(config))
    _tip(f"run the whole grid with: pheno-ml run-grid --config {config}")


@app.command("run-grid")
def run_grid_cmd(
    ctx: typer.Context,
    config: Optional[Path] = CONFIG,
    model: Optional[str] = typer.Option(None, "--model", help="rf or bnn"),
    predictors: Optional[str] = typer.Option(None, "--predictors", help="Predictor set"),
    levels: Optional[List[str]] = typer.Option(None, "--level", help="Restrict to level(s)"),
    seed: Optional[int] = SEED,
    jobs: Optional[int] = JOBS,
    out: Optional[Path] = OUT,
    verbose: bool = VERBOSE,
) -> None:
    """Run every (NM, level, aug) cell; writes results.jsonl, fms_records.jsonl, timings.jsonl."""
    opts = _options(ctx, seed=seed, jobs=jobs, out=out, config=config, verbose=verbose)
    run = RunConfig.from_file(
        opts.require_config(), model=model, predictors=predictors, seed=opts.seed
    )
    run = run.model_copy(update={"seed": resolve_seed(opts.seed, run.seed)})
    if levels:
        grid = run.grid.model_validate({**run.grid.model_dump(), "levels": levels})
        run = run.model_copy(update={"grid": grid})
    run.check_paths()
    outputs = run_grid(run, out_dir=opts.out, n_jobs=resolve_jobs(opts.jobs))
    scores = [r.weighted_f1 for r in outputs.records if r.weighted_f1 is not None]
    if scores:
        logger.info(
            f"{len(scores)}/{len(outputs.records)} cells scored; "
            f"best weighted F1 {max(scores):.3f}, median {float(np.median(scores)):.3f}"
        )
    typer.echo(str(outputs.results))


def main(argv: Optional[List[str]] = None) -> int:
    """Entry point; returns 0 on success, 1 on usage or config errors, 2 on data errors."""
    load_env_file()
    try:
        rv = app(args=argv, prog_name="pheno-ml", standalone_mode=False)
    except click.exceptions.UsageError as e:
        e.show()
        return 1
    except click.exceptions.Abort:
        typer.echo("Aborted.", err=True)
        return 1
    except ConfigError as e:
        typer.echo(f"Error: {e}", err=True)
        return 1
    except (PhenoError, OSError) as e:
        typer.echo(f"Error: {e}", err=True)
        return 2
    return rv if isinstance(rv, int) else 0


if __name__ == "__main__":
    raise SystemExit(main())
