import json
from contextlib import contextmanager
from pathlib import Path
from typing import Any, Dict, Iterator, List, Optional

import typer
from rich.console import Console
from rich.table import Table

from syndy.clustering.semcluster import cluster_records
from syndy.common.errors import SyndyError, ValidationError
from syndy.common.events import StageEvent
from syndy.common.logging_config import setup_debug_logging
from syndy.common.records import write_jsonl
from syndy.common.types import EvalReport, Ranking, SourceKind, SplitName
from syndy.dataset.emitter import load_dataset, validate_dataset
from syndy.evaluation.metrics import macro_f1, map_at_k
from syndy.evaluation.qrels import (
    TASK_MATCHING,
    load_labels,
    load_qrels,
    load_run,
    qrels_from_split,
    relation_items,
    write_jsonl_rows,
    write_qrels,
    write_run,
)
from syndy.evaluation.ranking import rank_by_embedding
from syndy.integration.embeddings import make_embedder
from syndy.orchestration.config import PipelineConfig, apply_overrides, load_config, normalized_config_text, validate_config
from syndy.orchestration.pipeline import EMBEDDING_CACHE_DIR, STAGES, PipelineRunner

EXIT_VALIDATION = 1
EXIT_FAILURE = 2

app = typer.Typer(help="syndy - synthetic misinformation datasets from LLM annotation of social-media posts")
eval_app = typer.Typer(help="Score rankings (MAP@K) and relation predictions (macro F1)")
app.add_typer(eval_app, name="eval")
console = Console()


# Callback for global options
@app.callback()
def main_callback(
    debug: bool = typer.Option(
        False,
        "--debug",
        "-d",
        help="Enable debug logging to see prompts, responses, and stage internals",
    ),
):
    """
    syndy - build claim, topic and relation datasets with LLM annotators.

    Use --debug to enable verbose debug logging that shows:
    - Prompts sent to the LLM and the completions received
    - Retries, rate-limit waits and checkpoint hits
    - Clustering and split decisions

    Debug logs are written to both stderr and .syndy/debug_logs/
    """
    if debug:
        setup_debug_logging(enabled=True, log_to_console=True, log_to_file=True)
        console.print("[yellow]Debug logging enabled[/yellow]")


@contextmanager
def _exit_codes() -> Iterator[None]:
    """Map errors to exit codes: 1 for invalid input, 2 for stage or provider failures."""
    try:
        yield
    except ValidationError as e:
        console.print(f"[bold red]Invalid input:[/bold red] {e}")
        for violation in e.violations:
            if violation != str(e):
                console.print(f"  - {violation}")
        raise typer.Exit(code=EXIT_VALIDATION)
    except SyndyError as e:
        console.print(f"[bold red]Failed:[/bold red] {e}")
        raise typer.Exit(code=EXIT_FAILURE)


def _config(
    config_file: Optional[Path],
    seed: Optional[int] = None,
    mock_dir: Optional[Path] = None,
    out: Optional[Path] = None,
    tau: Optional[float] = None,
    work_dir: Optional[Path] = None,
    extra: Optional[Dict[str, Any]] = None,
) -> PipelineConfig:
    """Config file (or defaults) with command-line flags applied on top."""
    overrides: Dict[str, Any] = {
        "seed": seed,
        "llm.mock_dir": str(mock_dir) if mock_dir else None,
        "out_dir": str(out) if out else None,
        "clustering.tau": tau,
        "work_dir": str(work_dir) if work_dir else None,
        **(extra or {}),
    }
    return apply_overrides(load_config(config_file), overrides)


def _runner(config: PipelineConfig) -> PipelineRunner:
    runner = PipelineRunner(config)

    def on_stage_start(data):
        console.print(f"  [cyan]Stage:[/cyan] {data['stage']}")

    def on_stage_complete(data):
        console.print(f"  [green]Computed:[/green] {data['stage']}")

    def on_stage_cached(data):
        console.print(f"  [dim]Cached:[/dim] {data['stage']}")

    def on_fail(data):
        console.print(f"  [red]Failed:[/red] {data['stage']}: {data.get('error')}")

    runner.on(StageEvent.STARTED, on_stage_start)
    runner.on(StageEvent.COMPLETED, on_stage_complete)
    runner.on(StageEvent.CACHED, on_stage_cached)
    runner.on(StageEvent.FAILED, on_fail)
    return runner


def _run_until(until: str, config: PipelineConfig) -> PipelineRunner:
    runner = _runner(config)
    with _exit_codes():
        runner.run(until=until)
    return runner


def _print_report(runner: PipelineRunner) -> None:
    table = Table(title="Stages")
    table.add_column("Stage", style="cyan")
    table.add_column("Status", style="magenta")
    table.add_column("Seconds", justify="right")
    for stage in STAGES:
        report = runner.report.stages.get(stage)
        if report:
            table.add_row(stage, report.status.value, f"{report.duration_seconds:.2f}")
    console.print(table)
    calls = runner.report.provider_calls
    console.print(
        f"Provider calls: llm={calls.get('llm', 0)}, embedding={calls.get('embedding', 0)}, "
        f"source={calls.get('source_requests', 0)}"
    )


def _write_json(data: Any, path: Path) -> None:
    path.parent.mkdir(parents=True, exist_ok=True)
    path.write_text(json.dumps(data, indent=2, ensure_ascii=False) + "\n", encoding="utf-8")


# Shared option declarations
ConfigOption = typer.Option(None, "--config", "-c", help="Pipeline config (JSON)", exists=True, dir_okay=False)
SeedOption = typer.Option(None, "--seed", help="Random seed (unsigned 64-bit)", min=0)
MockDirOption = typer.Option(None, "--mock-dir", help="Fixture directory of the mock LLM provider")
OutOption = typer.Option(None, "--out", "-o", help="Dataset output directory")
TauOption = typer.Option(None, "--tau", help="Cosine similarity threshold for clustering, in (0, 1]")
WorkDirOption = typer.Option(None, "--work-dir", help="Checkpoint and report directory")
SaveOption = typer.Option(None, "--save", help="Also write the stage output to this path")


# ---------------------------------------------------------------------------
# Pipeline stages
# ---------------------------------------------------------------------------


@app.command()
def keywords(
    topic: str = typer.Argument(..., help="Topic title"),
    heavy_n: Optional[int] = typer.Option(None, "--heavy-n", help="Number of heavy keywords"),
    lesser_n: Optional[int] = typer.Option(None, "--lesser-n", help="Number of lesser keywords"),
    config_file: Optional[Path] = ConfigOption,
    mock_dir: Optional[Path] = MockDirOption,
    work_dir: Optional[Path] = WorkDirOption,
    save: Optional[Path] = SaveOption,
):
    """Generate heavy and lesser keywords for one topic."""
    with _exit_codes():
        config = _config(
            config_file,
            mock_dir=mock_dir,
            work_dir=work_dir,
            extra={"topics": [topic], "keywords.heavy_n": heavy_n, "keywords.lesser_n": lesser_n},
        )
    runner = _run_until("keywords", config)
    for ks in runner.state.keyword_sets:
        table = Table(title=f"Keywords: {ks.topic_id}")
        table.add_column("Heavy", style="green")
        table.add_column("Lesser", style="cyan")
        for i in range(max(len(ks.heavy), len(ks.lesser))):
            table.add_row(ks.heavy[i] if i < len(ks.heavy) else "", ks.lesser[i] if i < len(ks.lesser) else "")
        console.print(table)
    if save:
        _write_json([ks.model_dump(mode="json") for ks in runner.state.keyword_sets], save)


@app.command()
def queries(
    config_file: Optional[Path] = ConfigOption,
    seed: Optional[int] = SeedOption,
    n: Optional[int] = typer.Option(None, "--n", help="Queries per topic"),
    mock_dir: Optional[Path] = MockDirOption,
    work_dir: Optional[Path] = WorkDirOption,
    save: Optional[Path] = SaveOption,
):
    """Sample search queries (one heavy AND two lesser keywords) for every topic."""
    with _exit_codes():
        config = _config(config_file, seed=seed, mock_dir=mock_dir, work_dir=work_dir, extra={"queries.per_topic": n})
    runner = _run_until("queries", config)
    for plan in runner.state.plans:
        suffix = " (all combinations)" if plan.truncated else ""
        console.print(f"[bold]{plan.topic_id}[/bold]: {len(plan.queries)} queries{suffix}")
        for query in plan.queries:
            console.print(f"  {query.rendered}")
    if save:
        _write_json([plan.model_dump(mode="json") for plan in runner.state.plans], save)


@app.command()
def fetch(
    config_file: Optional[Path] = ConfigOption,
    seed: Optional[int] = SeedOption,
    mock_dir: Optional[Path] = MockDirOption,
    work_dir: Optional[Path] = WorkDirOption,
    save: Optional[Path] = SaveOption,
):
    """Retrieve and deduplicate posts for every query."""
    with _exit_codes():
        config = _config(config_file, seed=seed, mock_dir=mock_dir, work_dir=work_dir)
    runner = _run_until("fetch", config)
    report = runner.state.fetch_report
    console.print(
        f"[bold green]Posts:[/bold green] {len(runner.state.posts)} "
        f"({report.retrieved} retrieved, {report.duplicates} duplicates, {report.too_short} too short, "
        f"{len(report.failed_queries)} failed queries)"
    )
    if save:
        write_jsonl(save, runner.state.posts)


@app.command()
def annotate(
    posts: Optional[Path] = typer.Option(
        None, "--posts", help="Annotate this posts.jsonl instead of running selection", exists=True, dir_okay=False
    ),
    config_file: Optional[Path] = ConfigOption,
    seed: Optional[int] = SeedOption,
    mock_dir: Optional[Path] = MockDirOption,
    work_dir: Optional[Path] = WorkDirOption,
    save: Optional[Path] = typer.Option(None, "--save", help="Directory receiving claims/topics/relations JSONL"),
):
    """Extract claims, label topics and generate relations."""
    extra = {"source.kind": SourceKind.POSTS_FILE.value, "source.endpoint": str(posts)} if posts else {}
    with _exit_codes():
        config = _config(config_file, seed=seed, mock_dir=mock_dir, work_dir=work_dir, extra=extra)
    runner = _run_until("annotate", config)
    state = runner.state
    console.print(
        f"[bold green]Annotated:[/bold green] {len(state.claims)} claims, {len(state.topics)} topic labels, "
        f"{len(state.relations)} relations ({len(state.targets)} generated targets)"
    )
    if save:
        write_jsonl(save / "claims.jsonl", state.all_claims)
        write_jsonl(save / "topics.jsonl", state.topics)
        write_jsonl(save / "relations.jsonl", state.relations)


@app.command()
def cluster(
    config_file: Optional[Path] = ConfigOption,
    seed: Optional[int] = SeedOption,
    mock_dir: Optional[Path] = MockDirOption,
    tau: Optional[float] = TauOption,
    work_dir: Optional[Path] = WorkDirOption,
    save: Optional[Path] = typer.Option(None, "--save", help="Directory receiving clusters/relations JSONL"),
):
    """Cluster claims by embedding similarity and rewrite relations onto representatives."""
    with _exit_codes():
        config = _config(config_file, seed=seed, mock_dir=mock_dir, tau=tau, work_dir=work_dir)
    runner = _run_until("cluster", config)
    state = runner.state
    stats = state.rewrite_stats
    console.print(
        f"[bold green]Clusters:[/bold green] {len(state.assignment.representatives)} over {len(state.all_claims)} "
        f"claims at tau={config.clustering.tau}; {len(state.clustered_relations)} relations kept "
        f"({stats.self_relations} collapsed, {stats.duplicates} duplicates, {stats.conflicts} conflicts)"
    )
    if save:
        write_jsonl(save / "clusters.jsonl", cluster_records(state.assignment))
        write_jsonl(save / "relations.jsonl", state.clustered_relations)


@app.command("split")
def split_command(
    config_file: Optional[Path] = ConfigOption,
    seed: Optional[int] = SeedOption,
    mock_dir: Optional[Path] = MockDirOption,
    tau: Optional[float] = TauOption,
    work_dir: Optional[Path] = WorkDirOption,
):
    """Assign posts, claims and clusters to train/dev/test without leakage."""
    with _exit_codes():
        config = _config(config_file, seed=seed, mock_dir=mock_dir, tau=tau, work_dir=work_dir)
    runner = _run_until("split", config)
    table = Table(title="Splits")
    table.add_column("Split", style="cyan")
    for column in ("units", "posts", "claims", "topics", "relations"):
        table.add_column(column.capitalize(), justify="right")
    units = runner.state.split_stats.units
    for name, bundle in runner.state.bundles.items():
        table.add_row(
            name.value,
            str(units.get(name.value, 0)),
            str(len(bundle.posts)),
            str(len(bundle.claims)),
            str(len(bundle.topics)),
            str(len(bundle.relations)),
        )
    console.print(table)
    console.print(f"Cross-split relations dropped: {runner.state.split_stats.cross_split_relations}")


def _emit(
    config_file: Optional[Path],
    seed: Optional[int],
    mock_dir: Optional[Path],
    out: Optional[Path],
    tau: Optional[float],
    work_dir: Optional[Path],
) -> None:
    with _exit_codes():
        config = _config(config_file, seed=seed, mock_dir=mock_dir, out=out, tau=tau, work_dir=work_dir)
    console.print(f"[bold green]Building dataset:[/bold green] {config.out_dir}")
    runner = _run_until("emit", config)
    _print_report(runner)
    manifest = runner.state.manifest
    if manifest:
        for split_name, counts in manifest.counts.items():
            summary = ", ".join(f"{stem}={count}" for stem, count in counts.items())
            console.print(f"  [bold]{split_name}[/bold]: {summary}")
    console.print(f"[bold green]Dataset written:[/bold green] {config.out_dir}")


@app.command("emit")
def emit_command(
    config_file: Optional[Path] = ConfigOption,
    seed: Optional[int] = SeedOption,
    mock_dir: Optional[Path] = MockDirOption,
    out: Optional[Path] = OutOption,
    tau: Optional[float] = TauOption,
    work_dir: Optional[Path] = WorkDirOption,
):
    """Write the dataset tree and manifest (earlier stages come from checkpoints when present)."""
    _emit(config_file, seed, mock_dir, out, tau, work_dir)


@app.command()
def pipeline(
    config_file: Optional[Path] = ConfigOption,
    seed: Optional[int] = SeedOption,
    mock_dir: Optional[Path] = MockDirOption,
    out: Optional[Path] = OutOption,
    tau: Optional[float] = TauOption,
    work_dir: Optional[Path] = WorkDirOption,
):
    """
    Run every stage: keywords, queries, fetch, annotate, cluster, split, emit.

    Examples:
        syndy pipeline --config topics.json --mock-dir fixtures/ --out dataset/
        syndy pipeline --config topics.json --tau 0.9
    """
    _emit(config_file, seed, mock_dir, out, tau, work_dir)


# ---------------------------------------------------------------------------
# Datasets and configs
# ---------------------------------------------------------------------------


@app.command()
def validate(dataset_dir: Path = typer.Argument(..., help="Emitted dataset directory")):
    """Check manifest digests, record invariants and cross-split leakage."""
    with _exit_codes():
        violations = validate_dataset(dataset_dir)
    if violations:
        console.print(f"[bold red]{len(violations)} violations[/bold red]")
        for violation in violations:
            console.print(f"  - {violation}")
        raise typer.Exit(code=EXIT_VALIDATION)
    console.print(f"[bold green]Dataset valid:[/bold green] {dataset_dir}")


@app.command("validate-config")
def validate_config_command(config_file: Path = typer.Argument(..., help="Pipeline config (JSON)")):
    """Print the normalized config, or every violation."""
    config, violations = validate_config(config_file)
    if config is None:
        console.print(f"[bold red]{len(violations)} violations[/bold red]")
        for violation in violations:
            console.print(f"  - {violation}")
        raise typer.Exit(code=EXIT_VALIDATION)
    typer.echo(normalized_config_text(config), nl=False)


@app.command("export-qrels")
def export_qrels(
    dataset_dir: Path = typer.Argument(..., help="Emitted dataset directory"),
    out: Path = typer.Option(..., "--out", "-o", help="Qrels directory to write"),
    split_name: SplitName = typer.Option(SplitName.TEST, "--split", help="Split to export"),
    task: str = typer.Option(TASK_MATCHING, "--task", help="matching (post -> claim) or topics (post -> topic)"),
):
    """Build evaluation qrels from one split of an emitted dataset."""
    with _exit_codes():
        bundle = load_dataset(dataset_dir)[split_name]
        qrels = qrels_from_split(bundle, task)
        write_qrels(qrels, out)
    console.print(
        f"[bold green]Qrels written:[/bold green] {out} "
        f"({len(qrels.queries)} queries, {len(qrels.candidates)} candidates, {len(qrels.relevance)} pairs)"
    )


@app.command("export-relations")
def export_relations(
    dataset_dir: Path = typer.Argument(..., help="Emitted dataset directory"),
    out: Path = typer.Option(..., "--out", "-o", help="Gold relation file to write (JSONL)"),
    split_name: SplitName = typer.Option(SplitName.TEST, "--split", help="Split to export"),
):
    """Write the gold relation labels of one split, for `eval f1 --gold`."""
    with _exit_codes():
        rows = relation_items(load_dataset(dataset_dir)[split_name])
        count = write_jsonl_rows(rows, out)
    console.print(f"[bold green]Relations written:[/bold green] {out} ({count} items)")


# ---------------------------------------------------------------------------
# Evaluation
# ---------------------------------------------------------------------------


def _write_reports(reports: Dict[str, EvalReport], path: Optional[Path]) -> None:
    if path:
        _write_json({name: report.model_dump(mode="json") for name, report in reports.items()}, path)


@eval_app.command("map")
def eval_map(
    qrels_dir: Path = typer.Option(..., "--qrels", help="Directory with queries, candidates and qrels"),
    runs: List[Path] = typer.Option([], "--run", help="Run file to score (repeatable)"),
    embedder: bool = typer.Option(False, "--embedder", help="Also rank by the configured embedding provider"),
    save_ranking: Optional[Path] = typer.Option(
        None, "--save-ranking", help="Write the embedder ranking as a run file, for later --run comparisons"
    ),
    k: Optional[int] = typer.Option(None, "--k", help="Cutoff K (default 20)", min=1),
    config_file: Optional[Path] = ConfigOption,
    report: Optional[Path] = typer.Option(None, "--report", help="Write the reports as JSON"),
):
    """MAP@K of one or more rankings."""
    with _exit_codes():
        config = _config(config_file, extra={"eval.k": k})
        if not runs and not embedder:
            raise ValidationError("nothing to score: pass --run and/or --embedder")
        if save_ranking and not embedder:
            raise ValidationError("--save-ranking needs --embedder")
        qrels = load_qrels(qrels_dir)
        rankings: Dict[str, Ranking] = {str(path): load_run(path) for path in runs}
        if embedder:
            model = make_embedder(config.embedding, cache_dir=config.work_path / EMBEDDING_CACHE_DIR)
            ranking = rank_by_embedding(qrels, model)
            rankings[f"embedder:{model.provider.model}"] = ranking
            if save_ranking:
                save_ranking.parent.mkdir(parents=True, exist_ok=True)
                write_run(ranking, save_ranking)
        reports = {name: map_at_k(ranking, qrels, config.eval.k) for name, ranking in rankings.items()}

    table = Table(title=f"MAP@{config.eval.k}")
    table.add_column("Run", style="cyan")
    table.add_column("MAP", justify="right", style="green")
    table.add_column("Queries", justify="right")
    table.add_column("Skipped", justify="right")
    for name, result in reports.items():
        table.add_row(name, f"{result.map_at_k:.4f}", str(result.query_count), str(result.skipped_queries))
    console.print(table)
    _write_reports(reports, report)


@eval_app.command("f1")
def eval_f1(
    pred: Path = typer.Option(..., "--pred", help="Predicted labels (JSONL {item_id, label})"),
    gold: Path = typer.Option(..., "--gold", help="Gold labels (JSONL {item_id, label})"),
    report: Optional[Path] = typer.Option(None, "--report", help="Write the report as JSON"),
):
    """Per-class and macro F1 of relation predictions."""
    with _exit_codes():
        result = macro_f1(load_labels(pred), load_labels(gold))

    table = Table(title="Relation classification")
    table.add_column("Label", style="cyan")
    for column in ("Precision", "Recall", "F1", "Support"):
        table.add_column(column, justify="right")
    for label, scores in result.per_class.items():
        table.add_row(label, f"{scores.precision:.4f}", f"{scores.recall:.4f}", f"{scores.f1:.4f}", str(scores.support))
    console.print(table)
    console.print(f"[bold green]Macro F1:[/bold green] {result.macro_f1:.4f} over {result.item_count} items")
    _write_reports({"f1": result}, report)


if __name__ == "__main__":
    app()
