"""Command line entry point.

One executable with subcommands for corpus preparation, training,
evaluation, serving, and reporting.  Every run that writes artifacts
also writes a ``manifest.json`` recording the command, the resolved
configuration, content hashes of the inputs, the seed, and wall-clock
time, so results can be traced back to exact inputs.

Exit codes: 0 success, 2 usage errors, 3 data errors, 4 artifact
integrity errors.
"""

from __future__ import annotations

import dataclasses
import functools
import json
import logging
import os
import sys
import time
from dataclasses import dataclass, field
from pathlib import Path

import click

from . import __version__
from .corpus import (
    concept_stats,
    derive_pairs,
    file_fingerprint,
    filter_unlinkable,
    generate_synthetic_corpus,
    load_concept_corpus,
    load_dictionary,
    load_pair_corpus,
    pair_stats,
    write_concept_corpus,
    write_dictionary,
    write_pair_corpus,
)
from .encoder import (
    DEFAULT_TOY_BUCKETS,
    POOL_FIRST,
    POOLING_MODES,
    ContextualEncoder,
    make_toy_encoder,
)
from .errors import DataError, EdgenormError, IntegrityError
from .evaluation import (
    EvalReport,
    edit_distance_decisions,
    calibrate_edit_threshold,
    error_report,
    pair_metrics,
    render_report,
    snapshot_recommendations,
    top1_accuracy,
    write_report_records,
)
from .inference import (
    SCORER_COSINE,
    SCORERS,
    batch_normalize,
    calibrate_threshold,
    classify_pair,
    dictionary_matrix,
    write_normalizations,
    write_pair_decisions,
)
from .trainer import (
    CHECKPOINT_DIR,
    SELECT_DEV_BEST,
    SELECT_TEST_BEST,
    TrainConfig,
    resolve_checkpoint,
    restore,
    train,
)

LOGGER = logging.getLogger(__name__)

EXIT_DATA = 3
EXIT_INTEGRITY = 4

CACHE_DIR_ENV = "EDGENORM_CACHE_DIR"


@dataclass
class RunManifest:
    """Everything needed to re-run a command and audit its outputs."""

    command: str
    argv: list[str]
    config: dict
    inputs: dict[str, str]
    outputs: list[str]
    seed: int | None
    tool_version: str
    started_unix: float
    wall_time: float = 0.0

    def write(self, path: str | Path) -> None:
        Path(path).write_text(
            json.dumps(dataclasses.asdict(self), indent=2, sort_keys=True) + "\n",
            encoding="utf-8",
        )


def _manifest(command: str, config: dict, inputs: list[str | Path], seed: int | None) -> RunManifest:
    return RunManifest(
        command=command,
        argv=sys.argv[1:],
        config=config,
        inputs={str(p): file_fingerprint(p) for p in inputs},
        outputs=[],
        seed=seed,
        tool_version=__version__,
        started_unix=time.time(),
    )


def _finish_manifest(manifest: RunManifest, out_dir: Path, outputs: list[Path]) -> None:
    manifest.outputs = [str(p) for p in outputs]
    manifest.wall_time = time.time() - manifest.started_unix
    manifest.write(out_dir / "manifest.json")


class _DataExit(click.ClickException):
    exit_code = EXIT_DATA


class _IntegrityExit(click.ClickException):
    exit_code = EXIT_INTEGRITY


def _mapped_errors(fn):
    """Translate package exceptions into the documented exit codes."""

    @functools.wraps(fn)
    def wrapper(*args, **kwargs):
        try:
            return fn(*args, **kwargs)
        except click.ClickException:
            raise
        except IntegrityError as exc:
            raise _IntegrityExit(str(exc)) from exc
        except (DataError,) as exc:
            raise _DataExit(str(exc)) from exc
        except ValueError as exc:
            raise click.UsageError(str(exc)) from exc
        except EdgenormError as exc:
            raise _DataExit(str(exc)) from exc
        except FileNotFoundError as exc:
            raise _DataExit(f"{exc.filename}: file not found") from exc

    return wrapper


def _default_cache_dir() -> str | None:
    return os.environ.get(CACHE_DIR_ENV)


def _load_encoder(checkpoint_path: str) -> tuple:
    resolved = resolve_checkpoint(checkpoint_path)
    handle, state = restore(resolved)
    return handle, state, resolved


@click.group()
@click.version_option(__version__)
@click.option("-v", "--verbose", count=True, help="Repeat for debug logging.")
def main(verbose: int) -> None:
    """Entity normalization with similarity-graph edge-weight training."""
    level = logging.WARNING
    if verbose == 1:
        level = logging.INFO
    elif verbose >= 2:
        level = logging.DEBUG
    logging.basicConfig(level=level, format="%(levelname)s %(name)s: %(message)s")


@main.command()
@click.option("--concepts", type=int, default=50, show_default=True)
@click.option("--variants", type=int, default=4, show_default=True)
@click.option("--seed", type=int, default=0, show_default=True)
@click.option("--pairs/--no-pairs", "with_pairs", default=False, show_default=True,
              help="Also derive labeled pair corpora from the query variants.")
@click.option("--out", "out_dir", type=click.Path(file_okay=False), required=True)
@_mapped_errors
def synth(concepts: int, variants: int, seed: int, with_pairs: bool, out_dir: str) -> None:
    """Generate a deterministic synthetic corpus for desk-scale runs."""
    if concepts < 1:
        raise click.UsageError("--concepts must be >= 1")
    if variants < 2:
        raise click.UsageError("--variants must be >= 2")
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    manifest = _manifest("synth", {"concepts": concepts, "variants": variants, "pairs": with_pairs}, [], seed)

    dictionary, train_records, test_records = generate_synthetic_corpus(concepts, variants, seed)
    outputs = [out / "dictionary.tsv", out / "train.tsv", out / "test.tsv"]
    write_dictionary(outputs[0], dictionary)
    write_concept_corpus(outputs[1], train_records)
    write_concept_corpus(outputs[2], test_records)
    if with_pairs:
        for tag, records in (("train", train_records), ("test", test_records)):
            path = out / f"pairs_{tag}.tsv"
            write_pair_corpus(path, derive_pairs(records, seed))
            outputs.append(path)
    _finish_manifest(manifest, out, outputs)

    stats = concept_stats({"train": train_records, "test": test_records})
    click.echo(
        f"dictionary entries: {len(dictionary)}  concepts: {len(dictionary.concept_universe)}"
    )
    for split, count in stats.mentions.items():
        click.echo(f"{split} mentions: {count}")


@main.command()
@click.argument("input_path", type=click.Path(exists=True, dir_okay=False))
@click.option("--format", "corpus_format", type=click.Choice(["concept", "pairs"]), required=True)
@click.option("--split", type=click.Choice(["train", "dev", "test"]), default="train",
              show_default=True, help="Split tag for concept corpora.")
@click.option("--dict", "dict_path", type=click.Path(exists=True, dir_okay=False),
              help="Dictionary TSV, required with --filter.")
@click.option("--filter/--no-filter", "apply_filter", default=False, show_default=True,
              help="Drop mentions that no dictionary entry can resolve.")
@click.option("--strip-punctuation", is_flag=True, default=False,
              help="Replace punctuation with spaces during normalization.")
@click.option("--out", "out_path", type=click.Path(dir_okay=False), required=True)
@_mapped_errors
def prepare(input_path, corpus_format, split, dict_path, apply_filter, strip_punctuation, out_path):
    """Validate a corpus file and rewrite it in canonical form."""
    out = Path(out_path)
    inputs = [input_path] + ([dict_path] if dict_path else [])
    manifest = _manifest(
        "prepare",
        {"format": corpus_format, "split": split, "filter": apply_filter,
         "strip_punctuation": strip_punctuation},
        inputs,
        None,
    )
    if corpus_format == "concept":
        records = load_concept_corpus(input_path, split, strip_punctuation=strip_punctuation)
        if apply_filter:
            if not dict_path:
                raise click.UsageError("--filter requires --dict")
            records = filter_unlinkable(records, load_dictionary(dict_path))
        write_concept_corpus(out, records)
        click.echo(f"{split} mentions: {len(records)}")
    else:
        pairs = load_pair_corpus(input_path, strip_punctuation=strip_punctuation)
        write_pair_corpus(out, pairs)
        stats = pair_stats(pairs)
        click.echo(
            f"pairs: {stats.total_pairs}  positive: {stats.positive_pairs}  "
            f"negative: {stats.negative_pairs}"
        )
    _finish_manifest(manifest, out.parent, [out])


def _config_from_flags(k, batch_size, epochs, learning_rate, weight_decay, seed,
                       selection, skip_unmatched) -> TrainConfig:
    try:
        return TrainConfig(
            k=k,
            batch_size=batch_size,
            epochs=epochs,
            learning_rate=learning_rate,
            weight_decay=weight_decay,
            seed=seed,
            selection_split=selection,
            skip_unmatched=skip_unmatched,
        )
    except ValueError as exc:
        raise click.UsageError(str(exc)) from exc


_DEFAULT_CONFIG = TrainConfig()


@main.command(name="train")
@click.option("--train", "train_paths", type=click.Path(exists=True, dir_okay=False),
              multiple=True, required=True,
              help="Concept corpus TSV; repeat to concatenate (e.g. train plus dev).")
@click.option("--eval", "eval_path", type=click.Path(exists=True, dir_okay=False), required=True,
              help="Concept corpus scored after every epoch for model selection.")
@click.option("--dict", "dict_path", type=click.Path(exists=True, dir_okay=False), required=True)
@click.option("--out", "out_dir", type=click.Path(file_okay=False), required=True)
@click.option("--encoder", "encoder_kind", type=click.Choice(["toy", "contextual"]),
              default="toy", show_default=True)
@click.option("--dim", type=int, default=32, show_default=True, help="Toy encoder dimension.")
@click.option("--buckets", type=int, default=DEFAULT_TOY_BUCKETS, show_default=True,
              help="Toy encoder hash buckets.")
@click.option("--model-name", default=None, help="Pretrained model for --encoder contextual.")
@click.option("--pooling", type=click.Choice(list(POOLING_MODES)), default=POOL_FIRST,
              show_default=True)
@click.option("--k", type=int, default=_DEFAULT_CONFIG.k, show_default=True,
              help="Candidate edges kept per query.")
@click.option("--batch-size", type=int, default=_DEFAULT_CONFIG.batch_size, show_default=True)
@click.option("--epochs", type=int, default=_DEFAULT_CONFIG.epochs, show_default=True)
@click.option("--lr", "--learning-rate", "learning_rate", type=float,
              default=_DEFAULT_CONFIG.learning_rate, show_default=True)
@click.option("--weight-decay", type=float, default=_DEFAULT_CONFIG.weight_decay, show_default=True)
@click.option("--seed", type=int, default=_DEFAULT_CONFIG.seed, show_default=True)
@click.option("--selection", type=click.Choice([SELECT_TEST_BEST, SELECT_DEV_BEST]),
              default=_DEFAULT_CONFIG.selection_split, show_default=True,
              help="Which split the --eval file represents for best-epoch selection.")
@click.option("--skip-unmatched", is_flag=True, default=False,
              help="Skip queries whose candidates contain no true link.")
@click.option("--filter/--no-filter", "apply_filter", default=True, show_default=True,
              help="Drop unlinkable mentions before training and evaluation.")
@click.option("--strip-punctuation", is_flag=True, default=False)
@_mapped_errors
def train_cmd(train_paths, eval_path, dict_path, out_dir, encoder_kind, dim, buckets,
              model_name, pooling, k, batch_size, epochs, learning_rate, weight_decay,
              seed, selection, skip_unmatched, apply_filter, strip_punctuation):
    """Fine-tune an encoder on a concept corpus."""
    config = _config_from_flags(k, batch_size, epochs, learning_rate, weight_decay,
                                seed, selection, skip_unmatched)
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    manifest = _manifest(
        "train",
        {**config.to_dict(), "encoder": encoder_kind, "dim": dim, "buckets": buckets,
         "model_name": model_name, "pooling": pooling, "filter": apply_filter,
         "strip_punctuation": strip_punctuation},
        list(train_paths) + [eval_path, dict_path],
        seed,
    )

    dictionary = load_dictionary(dict_path, strip_punctuation=strip_punctuation)
    train_records = []
    for path in train_paths:
        train_records.extend(load_concept_corpus(path, "train", strip_punctuation=strip_punctuation))
    eval_split = "test" if selection == SELECT_TEST_BEST else "dev"
    eval_records = load_concept_corpus(eval_path, eval_split, strip_punctuation=strip_punctuation)
    if apply_filter:
        train_records = filter_unlinkable(train_records, dictionary)
        eval_records = filter_unlinkable(eval_records, dictionary)

    if encoder_kind == "toy":
        handle = make_toy_encoder(dim, seed, n_buckets=buckets)
    else:
        if not model_name:
            raise click.UsageError("--encoder contextual requires --model-name")
        handle = ContextualEncoder(model_name, pooling=pooling)

    state = train(train_records, dictionary, handle, config,
                  eval_records=eval_records, run_dir=out)
    outputs = [out / "metrics.jsonl", out / "state.json", out / CHECKPOINT_DIR]
    _finish_manifest(manifest, out, outputs)
    best = f"epoch {state.best_epoch} (top-1 {state.best_metric:.4f})" if state.best_epoch else "none"
    click.echo(f"trained {config.epochs} epochs; best: {best}")


@main.command()
@click.option("--checkpoint", "checkpoint_path", type=click.Path(exists=True, file_okay=False),
              required=True, help="Checkpoint directory or run directory (best epoch used).")
@click.option("--dict", "dict_path", type=click.Path(exists=True, dir_okay=False), required=True)
@click.option("--queries", "queries_path", type=click.Path(exists=True, dir_okay=False),
              required=True, help="Concept corpus TSV with gold ids.")
@click.option("--split", type=click.Choice(["train", "dev", "test"]), default="test",
              show_default=True)
@click.option("--out", "out_prefix", type=click.Path(dir_okay=False), default=None,
              help="Write <out>.txt and <out>.jsonl reports.")
@click.option("--limit", type=int, default=20, show_default=True,
              help="Max wrong predictions listed in the report.")
@click.option("--cache-dir", default=None, help="Dictionary embedding cache directory.")
@_mapped_errors
def evaluate(checkpoint_path, dict_path, queries_path, split, out_prefix, limit, cache_dir):
    """Score top-1 normalization accuracy on a gold corpus."""
    handle, _, resolved = _load_encoder(checkpoint_path)
    dictionary = load_dictionary(dict_path)
    records = filter_unlinkable(load_concept_corpus(queries_path, split), dictionary)
    if not records:
        raise DataError(f"{queries_path}: no linkable queries for evaluation")
    cache = cache_dir or _default_cache_dir()
    matrix = dictionary_matrix(dictionary, handle, cache_dir=cache or None)
    predictions = batch_normalize([r.surface for r in records], dictionary, handle, 1,
                                  dict_matrix=matrix)
    accuracy = top1_accuracy(predictions, records)
    report = EvalReport(
        dataset=str(queries_path),
        top1=accuracy,
        wrong_top1=error_report(predictions, records, limit),
    )
    click.echo(f"checkpoint: {resolved}")
    click.echo(f"queries: {len(records)}")
    click.echo(f"top-1 accuracy: {accuracy:.4f}")
    if out_prefix:
        out = Path(out_prefix)
        out.parent.mkdir(parents=True, exist_ok=True)
        Path(f"{out}.txt").write_text(render_report(report), encoding="utf-8")
        write_report_records(f"{out}.jsonl", report)
        manifest = _manifest("evaluate", {"split": split, "limit": limit},
                             [dict_path, queries_path], None)
        _finish_manifest(manifest, out.parent, [Path(f"{out}.txt"), Path(f"{out}.jsonl")])


@main.command(name="normalize")
@click.option("--checkpoint", "checkpoint_path", type=click.Path(exists=True, file_okay=False),
              required=True)
@click.option("--dict", "dict_path", type=click.Path(exists=True, dir_okay=False), required=True)
@click.option("--queries", "queries_path", type=click.Path(exists=True, dir_okay=False),
              required=True)
@click.option("--plain", is_flag=True, default=False,
              help="Read queries as one bare surface per line instead of corpus TSV.")
@click.option("--k", type=int, default=5, show_default=True)
@click.option("--out", "out_path", type=click.Path(dir_okay=False), required=True)
@click.option("--cache-dir", default=None)
@_mapped_errors
def normalize_cmd(checkpoint_path, dict_path, queries_path, plain, k, out_path, cache_dir):
    """Write ranked dictionary candidates for each query."""
    if k < 1:
        raise click.UsageError("--k must be >= 1")
    handle, _, _ = _load_encoder(checkpoint_path)
    dictionary = load_dictionary(dict_path)
    if plain:
        from .corpus import normalize_surface

        surfaces = [
            normalize_surface(line)
            for line in Path(queries_path).read_text(encoding="utf-8").splitlines()
            if line.strip()
        ]
    else:
        surfaces = [r.surface for r in load_concept_corpus(queries_path, "test")]
    if not surfaces:
        raise DataError(f"{queries_path}: no queries")
    cache = cache_dir or _default_cache_dir()
    matrix = dictionary_matrix(dictionary, handle, cache_dir=cache or None)
    norms = batch_normalize(surfaces, dictionary, handle, k, dict_matrix=matrix)
    out = Path(out_path)
    out.parent.mkdir(parents=True, exist_ok=True)
    write_normalizations(out, norms)
    manifest = _manifest("normalize", {"k": k, "plain": plain}, [dict_path, queries_path], None)
    _finish_manifest(manifest, out.parent, [out])
    click.echo(f"wrote {sum(len(n.ranked) for n in norms)} rows for {len(norms)} queries")


@main.command(name="pairs")
@click.option("--checkpoint", "checkpoint_path", type=click.Path(exists=True, file_okay=False),
              required=True)
@click.option("--pairs", "pairs_path", type=click.Path(exists=True, dir_okay=False), required=True)
@click.option("--threshold", type=float, default=None,
              help="Decision threshold; omit only together with --calibrate.")
@click.option("--calibrate", "calibrate_path", type=click.Path(exists=True, dir_okay=False),
              default=None, help="Labeled pairs to calibrate the threshold on.")
@click.option("--scorer", type=click.Choice(list(SCORERS)), default=SCORER_COSINE,
              show_default=True)
@click.option("--out", "out_path", type=click.Path(dir_okay=False), required=True)
@click.option("--metrics/--no-metrics", "show_metrics", default=True, show_default=True,
              help="Also score the decisions against the pair labels.")
@_mapped_errors
def pairs_cmd(checkpoint_path, pairs_path, threshold, calibrate_path, scorer, out_path,
              show_metrics):
    """Classify labeled entity pairs as matched or unmatched."""
    if threshold is None and calibrate_path is None:
        raise click.UsageError("provide --threshold or --calibrate")
    handle, _, _ = _load_encoder(checkpoint_path)
    if threshold is None:
        calibration_pairs = load_pair_corpus(calibrate_path)
        threshold = calibrate_threshold(calibration_pairs, handle, scorer=scorer)
        click.echo(f"calibrated threshold: {threshold:.6f}")
    pairs = load_pair_corpus(pairs_path)
    decisions = [
        classify_pair(p.entity_a, p.entity_b, handle, threshold, scorer=scorer) for p in pairs
    ]
    out = Path(out_path)
    out.parent.mkdir(parents=True, exist_ok=True)
    write_pair_decisions(out, decisions)
    inputs = [pairs_path] + ([calibrate_path] if calibrate_path else [])
    manifest = _manifest("pairs", {"threshold": threshold, "scorer": scorer}, inputs, None)
    _finish_manifest(manifest, out.parent, [out])
    if show_metrics:
        m = pair_metrics(decisions, pairs)
        click.echo(
            f"precision: {m.precision:.4f}  recall: {m.recall:.4f}  "
            f"f1: {m.f1:.4f}  accuracy: {m.accuracy:.4f}"
        )


@main.command(name="report")
@click.option("--checkpoint", "checkpoint_path", type=click.Path(exists=True, file_okay=False),
              required=True)
@click.option("--dict", "dict_path", type=click.Path(exists=True, dir_okay=False), required=True)
@click.option("--queries", "queries_path", type=click.Path(exists=True, dir_okay=False),
              default=None, help="Concept corpus for normalization error lists.")
@click.option("--pairs", "pairs_path", type=click.Path(exists=True, dir_okay=False), default=None,
              help="Labeled pairs for false positive and negative lists.")
@click.option("--threshold", type=float, default=None, help="Pair threshold (with --pairs).")
@click.option("--edit-baseline", is_flag=True, default=False,
              help="Use the edit-distance baseline instead of the encoder for --pairs.")
@click.option("--progress", "run_dir", type=click.Path(exists=True, file_okay=False), default=None,
              help="Run directory; adds recommendation snapshots for the first, second, and best epoch.")
@click.option("--limit", type=int, default=20, show_default=True)
@click.option("--out", "out_prefix", type=click.Path(dir_okay=False), required=True,
              help="Write <out>.txt and <out>.jsonl reports.")
@_mapped_errors
def report_cmd(checkpoint_path, dict_path, queries_path, pairs_path, threshold, edit_baseline,
               run_dir, limit, out_prefix):
    """Produce qualitative error reports and progress snapshots."""
    if queries_path is None and pairs_path is None:
        raise click.UsageError("provide --queries or --pairs")
    handle, state, resolved = _load_encoder(checkpoint_path)
    dictionary = load_dictionary(dict_path)
    report = EvalReport(dataset=str(queries_path or pairs_path))

    if queries_path is not None:
        records = filter_unlinkable(load_concept_corpus(queries_path, "test"), dictionary)
        if not records:
            raise DataError(f"{queries_path}: no linkable queries")
        predictions = batch_normalize([r.surface for r in records], dictionary, handle, 1)
        report.top1 = top1_accuracy(predictions, records)
        report.wrong_top1 = error_report(predictions, records, limit)
        if run_dir is not None:
            run = Path(run_dir)
            labels: list[tuple[str, str | Path]] = []
            for label, name in (("epoch 0", "epoch_000"), ("epoch 1", "epoch_001")):
                path = run / CHECKPOINT_DIR / name
                if path.is_dir():
                    labels.append((label, path))
            labels.append(("best", resolve_checkpoint(run)))
            report.snapshots = snapshot_recommendations(records[:limit], labels, dictionary)

    if pairs_path is not None:
        pairs = load_pair_corpus(pairs_path)
        if edit_baseline:
            cutoff = calibrate_edit_threshold(pairs) if threshold is None else int(threshold)
            decisions = edit_distance_decisions(pairs, cutoff)
        else:
            if threshold is None:
                raise click.UsageError("--pairs needs --threshold (or --edit-baseline)")
            decisions = [
                classify_pair(p.entity_a, p.entity_b, handle, threshold) for p in pairs
            ]
        report.pair = pair_metrics(decisions, pairs)
        fps, fns = error_report(decisions, pairs, limit)
        report.false_positives = fps
        report.false_negatives = fns

    out = Path(out_prefix)
    out.parent.mkdir(parents=True, exist_ok=True)
    Path(f"{out}.txt").write_text(render_report(report), encoding="utf-8")
    write_report_records(f"{out}.jsonl", report)
    inputs = [dict_path] + [p for p in (queries_path, pairs_path) if p]
    manifest = _manifest("report", {"limit": limit, "threshold": threshold}, inputs, None)
    _finish_manifest(manifest, out.parent, [Path(f"{out}.txt"), Path(f"{out}.jsonl")])
    click.echo(render_report(report), nl=False)


if __name__ == "__main__":
    main()
