"""
Command-line entry point.

Subcommands:
    gen-corpus   Generate a synthetic corpus with ground truth
    annotate     Detect turns, mentions and speakers (corpus directory or plain text)
    build        Build a DialGen or DialSpk dataset with train/valid/test splits
    train        Train the character-aware model or the ablated baseline
    eval         Score a checkpoint on a dataset split
    stats        Print corpus or dataset statistics

Every command that writes output assembles it in a staging directory next to the target
and renames it into place only on success, with manifest.json written last.

Exit codes: 0 success, 1 usage or configuration error, 2 data or constraint failure,
3 numerical failure, 130 interrupted.
"""

import argparse
import dataclasses
import logging
import sys
from pathlib import Path

import numpy as np
import yaml

from dialstory import __version__
from dialstory.artifacts import RunManifest, atomic_write_text, staged_directory, write_json, write_jsonl
from dialstory.coherence import (
    CoherenceClassifier, coherence_by_mask_count, coherence_score, train_coherence_classifier,
)
from dialstory.config import (
    DecodingConfig, default_config_path, from_mapping, load_coherence_config, load_generator_config,
    load_run_config,
)
from dialstory.corpus import (
    annotate_corpus, annotation_quality, compute_stats, generate_synthetic_corpus, load_corpus,
    read_text_corpus, save_corpus,
)
from dialstory.datasets import (
    DEFAULT_MASK_RATIO, DEFAULT_PROBE_RATIO, DEFAULT_SPLIT, Dataset, build_dialgen_dataset,
    build_dialspk_dataset, compute_dataset_stats, load_dataset, save_dataset, split_examples, validate_dialgen_example,
)
from dialstory.errors import ConfigError, DataError, DialStoryError, UsageError
from dialstory.evaluation import dac_sac, generation_report, speaker_report
from dialstory.model import DialogueModel, split_generation
from dialstory.train import train_task
from dialstory.workers import parallel_map

log = logging.getLogger(__name__)

TASKS = ("dialgen", "dialspk")


class ArgumentParser(argparse.ArgumentParser):
    """argparse that raises UsageError instead of exiting, so main() owns the exit code."""

    def error(self, message):
        raise UsageError(f"{self.prog}: {message}")


def _existing(path, what):
    path = Path(path)
    if not path.exists():
        raise UsageError(f"{what} not found: {path}")
    return path


def _dump_yaml(path, payload):
    atomic_write_text(path, yaml.safe_dump(payload, sort_keys=True))


# =============================================================================
# gen-corpus
# =============================================================================

def cmd_gen_corpus(args):
    config_path = args.config or default_config_path("corpus.yaml")
    config = load_generator_config(config_path)
    if args.stories is not None:
        config = dataclasses.replace(config, story_count=args.stories)
        config.validate("corpus")
    seed = config.seed if args.seed is None else args.seed
    manifest = RunManifest(command="gen-corpus", config=dataclasses.asdict(config),
                           inputs={"config": str(config_path)}, outputs={"corpus": str(args.out)}, seed=seed)
    with staged_directory(args.out) as staging:
        corpus = generate_synthetic_corpus(config, seed=seed, workers=args.workers)
        save_corpus(corpus, staging)
        _dump_yaml(staging / "config.yaml", {"corpus": {**dataclasses.asdict(config), "seed": seed}})
        stats = compute_stats(corpus.stories)
        write_json(staging / "stats.json", dataclasses.asdict(stats))
        manifest.finish(staging)
    print(f"Wrote {len(corpus.stories)} stories to {args.out}")
    print(stats.to_table())
    return 0


# =============================================================================
# annotate
# =============================================================================

def cmd_annotate(args):
    if args.text:
        if not args.names:
            raise UsageError("annotate --text also needs --names")
        corpus = read_text_corpus(_existing(args.text, "text file"), _existing(args.names, "name list"))
        inputs = {"text": str(args.text), "names": str(args.names)}
    else:
        corpus = load_corpus(_existing(args.corpus, "corpus directory"))
        inputs = {"corpus": str(args.corpus)}
    manifest = RunManifest(command="annotate", config={"workers": args.workers}, inputs=inputs,
                           outputs={"corpus": str(args.out)}, seed=None)
    with staged_directory(args.out) as staging:
        annotated = annotate_corpus(corpus, workers=args.workers)
        save_corpus(annotated, staging)
        quality = None
        if any(story.gold_speakers is not None for story in corpus.stories):
            quality = annotation_quality(corpus.stories, annotated.stories)
            write_json(staging / "annotation_quality.json", quality.to_dict())
        manifest.finish(staging)
    print(f"Annotated {len(annotated.stories)} stories into {args.out}")
    if quality is not None:
        print(quality.to_frame().to_string(float_format=lambda v: f"{v:.2f}"))
    return 0


# =============================================================================
# build
# =============================================================================

def cmd_build(args):
    corpus = load_corpus(_existing(args.corpus, "corpus directory"))
    if args.task == "dialgen":
        examples = build_dialgen_dataset(corpus.stories, mask_ratio=args.mask_ratio, seed=args.seed)
        lengths = {story.id: len(story.tokens) for story in corpus.stories}
        for example in examples:
            validate_dialgen_example(example, lengths[example.story_id])
        settings = {"mask_ratio": args.mask_ratio}
    else:
        examples = build_dialspk_dataset(corpus.stories, probe_ratio=args.probe_ratio, seed=args.seed,
                                         speakers=args.speakers)
        settings = {"probe_ratio": args.probe_ratio, "speakers": args.speakers}
    if not examples:
        raise DataError(f"every story was skipped while building {args.task}")
    splits = split_examples(examples, args.split, seed=args.seed)
    settings.update({"split": list(args.split), "seed": args.seed, "source_stories": len(corpus.stories),
                     "skipped_stories": len(corpus.stories) - len(examples)})
    dataset = Dataset(task=args.task, splits=splits, vocab=corpus.vocab, lexicon=corpus.lexicon, meta=settings)
    manifest = RunManifest(command="build", config={"task": args.task, **settings},
                           inputs={"corpus": str(args.corpus)}, outputs={"dataset": str(args.out)}, seed=args.seed)
    with staged_directory(args.out) as staging:
        save_dataset(staging, dataset)
        manifest.finish(staging)
    print(f"Built {len(examples)} {args.task} examples "
          f"({', '.join(f'{name} {len(part)}' for name, part in splits.items())}) in {args.out}")
    print(compute_dataset_stats(splits).to_string(float_format=lambda v: f"{v:.2f}"))
    return 0


# =============================================================================
# train
# =============================================================================

def _run_config(args):
    config_path = args.config or default_config_path(f"{args.task}.yaml")
    run_config = load_run_config(config_path)
    overrides = {"task": args.task}
    if args.seed is not None:
        overrides["seed"] = args.seed
    if args.epochs is not None:
        overrides["epochs"] = args.epochs
    if args.max_steps is not None:
        overrides["max_steps"] = args.max_steps
    train_config = dataclasses.replace(run_config.train, **overrides)
    train_config.validate("train")
    return dataclasses.replace(run_config, train=train_config), config_path


def cmd_train(args):
    dataset = load_dataset(_existing(args.dataset, "dataset directory"))
    if dataset.task != args.task:
        raise UsageError(f"--task {args.task} but {args.dataset} holds a {dataset.task} dataset")
    run_config, config_path = _run_config(args)
    manifest = RunManifest(command="train", config={**run_config.to_dict(), "baseline": args.baseline},
                           inputs={"dataset": str(args.dataset), "config": str(config_path)},
                           outputs={"run": str(args.out)}, seed=run_config.train.seed)
    with staged_directory(args.out) as staging:
        _dump_yaml(staging / "config.yaml", run_config.to_dict())
        result = train_task(dataset, run_config, staging, baseline=args.baseline)
        summary = {"steps": result.steps, "best_epoch": result.best_epoch, "best_valid_loss": result.best_valid_loss,
                   "baseline": args.baseline, "parameters": result.model.parameter_count(),
                   "coverage": [report.to_record() for report in result.coverage], "history": result.history}
        write_json(staging / "summary.json", summary)
        manifest.finish(staging)
    print(f"Trained {args.task}{' baseline' if args.baseline else ''} for {result.steps} steps; "
          f"best epoch {result.best_epoch} (validation loss {result.best_valid_loss:.4f})")
    if result.coverage:
        mean = float(np.mean([r.mean for r in result.coverage]))
        print(f"Character-selection coverage: {100 * mean:.2f}% averaged over {len(result.coverage)} windows")
    return 0


# =============================================================================
# eval
# =============================================================================

def _predict_job(job):
    model, example = job
    return model.predict_speakers(example)


def _generate_job(job):
    model, example, decoding, seed, index = job
    rng = np.random.default_rng([seed, index])
    return model.generate(example, decoding, rng=rng)


def _eval_dialspk(args, model, examples, staging):
    predictions = parallel_map(_predict_job, [(model, ex) for ex in examples], args.workers)
    accuracy = dac_sac({ex.id: p for ex, p in zip(examples, predictions)}, {ex.id: ex.gold for ex in examples})
    write_jsonl(staging / "predictions.jsonl",
                [{"id": ex.id, "predicted": p, "gold": ex.gold, "candidates": ex.candidates}
                 for ex, p in zip(examples, predictions)])
    return speaker_report(accuracy, model.parameter_count())


def _coherence_classifier(args, dataset, staging):
    if args.coherence_checkpoint:
        return CoherenceClassifier.from_checkpoint(_existing(args.coherence_checkpoint, "coherence checkpoint"))
    config = load_coherence_config(args.coherence_config)
    originals = [ex.filled(ex.gold_turns) for ex in dataset.split("train")]
    fit = train_coherence_classifier(originals, len(dataset.vocab), config, seed=args.seed)
    fit.classifier.save(staging / "coherence.npz")
    write_json(staging / "coherence_classifier.json",
               {"held_out_accuracy": fit.held_out_accuracy, "pairwise_accuracy": fit.pairwise_accuracy,
                "train_pairs": fit.train_pairs, "held_out_pairs": fit.held_out_pairs, "history": fit.history})
    log.info("Coherence classifier: held-out accuracy %.2f%%, pairwise %.2f%%",
             fit.held_out_accuracy, fit.pairwise_accuracy)
    return fit.classifier


def _eval_dialgen(args, model, header, dataset, examples, staging):
    decoding = from_mapping(DecodingConfig, "decoding", header.get("decoding"))
    if args.decoding is not None:
        decoding = dataclasses.replace(decoding, strategy=args.decoding)
    if args.score_gold:
        generations = [split_generation(ex.gold_output, len(ex.gold_turns)) for ex in examples]
    else:
        seed = decoding.seed if args.seed is None else args.seed
        jobs = [(model, ex, decoding, seed, i) for i, ex in enumerate(examples)]
        generations = parallel_map(_generate_job, jobs, args.workers)
    pairs = [(generated, gold) for ex, gen in zip(examples, generations)
             for generated, gold in zip(gen.turns, ex.gold_turns)]
    report = generation_report(pairs, model.parameter_count())

    classifier = _coherence_classifier(args, dataset, staging)
    result = coherence_score([ex.filled(gen.turns) for ex, gen in zip(examples, generations)], classifier)
    report.coherence_ratio = result.ratio
    report.counts.update({"coherent": result.coherent, "coherence_total": result.total,
                          "faults": sum(len(g.faults) for g in generations)})
    by_mask = coherence_by_mask_count([len(ex.gold_turns) for ex in examples], result, classifier.threshold)
    write_json(staging / "coherence_by_mask.json", by_mask.reset_index().to_dict(orient="records"))

    vocab = dataset.vocab
    write_jsonl(staging / "generations.jsonl", [{
        "id": ex.id,
        "generated": [vocab.to_text(turn) for turn in gen.turns],
        "gold": [vocab.to_text(turn) for turn in ex.gold_turns],
        "faults": gen.faults,
        "truncated": gen.truncated,
        "selected_characters": sorted({ex.characters[t.selected] for t in gen.traces}),
        "coherence_probability": probability,
    } for ex, gen, probability in zip(examples, generations, result.probabilities)])
    print(by_mask.to_string(float_format=lambda v: f"{v:.2f}"))
    return report.validate()


def cmd_eval(args):
    model, header = DialogueModel.from_checkpoint(_existing(args.checkpoint, "checkpoint"))
    dataset = load_dataset(_existing(args.dataset, "dataset directory"))
    if header["task"] != args.task or dataset.task != args.task:
        raise UsageError(f"--task {args.task} but checkpoint is {header['task']} and dataset is {dataset.task}")
    if model.config.vocab_size != len(dataset.vocab):
        raise DataError(f"checkpoint vocabulary size {model.config.vocab_size} does not match "
                        f"the dataset vocabulary ({len(dataset.vocab)} tokens)")
    examples = dataset.split(args.split)
    if args.limit is not None:
        examples = examples[:args.limit]
    if not examples:
        raise DataError(f"split '{args.split}' is empty")
    manifest = RunManifest(command="eval", config={"task": args.task, "split": args.split, "limit": args.limit},
                           inputs={"checkpoint": str(args.checkpoint), "dataset": str(args.dataset)},
                           outputs={"report": str(args.out)}, seed=args.seed)
    with staged_directory(args.out) as staging:
        if args.task == "dialspk":
            report = _eval_dialspk(args, model, examples, staging)
        else:
            report = _eval_dialgen(args, model, header, dataset, examples, staging)
        name = "baseline" if header.get("baseline") else "character-aware"
        table = report.to_frame(name).to_string(float_format=lambda v: f"{v:.2f}")
        write_json(staging / "report.json", {"task": args.task, "split": args.split, "examples": len(examples),
                                             "model": name, **report.to_dict()})
        atomic_write_text(staging / "report.txt", table + "\n")
        manifest.finish(staging)
    print(table)
    return 0


# =============================================================================
# stats
# =============================================================================

def cmd_stats(args):
    if args.corpus:
        stats = compute_stats(load_corpus(_existing(args.corpus, "corpus directory")).stories)
        print(stats.to_table())
    else:
        dataset = load_dataset(_existing(args.dataset, "dataset directory"))
        print(f"{dataset.task} dataset")
        print(compute_dataset_stats(dataset.splits).to_string(float_format=lambda v: f"{v:.2f}"))
    return 0


# =============================================================================
# Parser
# =============================================================================

def _positive_int(text):
    try:
        value = int(text)
    except ValueError as exc:
        raise argparse.ArgumentTypeError(f"expected an integer, got {text!r}") from exc
    if value < 1:
        raise argparse.ArgumentTypeError(f"expected a positive integer, got {value}")
    return value


def build_parser():
    parser = ArgumentParser(prog="dialstory", description="Character-aware story dialogue toolkit")
    parser.add_argument("--version", action="version", version=f"%(prog)s {__version__}")
    verbosity = parser.add_mutually_exclusive_group()
    verbosity.add_argument("--verbose", "-v", action="store_true", help="Debug logging")
    verbosity.add_argument("--quiet", "-q", action="store_true", help="Warnings and errors only")
    commands = parser.add_subparsers(dest="command", metavar="COMMAND", required=True)

    gen = commands.add_parser("gen-corpus", help="Generate a synthetic corpus")
    gen.add_argument("--config", type=Path, help="Generator YAML (default: packaged corpus.yaml)")
    gen.add_argument("--out", type=Path, required=True, help="Output corpus directory")
    gen.add_argument("--seed", type=int, help="Overrides corpus.seed")
    gen.add_argument("--stories", type=_positive_int, help="Overrides corpus.story_count")
    gen.add_argument("--workers", type=_positive_int, default=1, help="Worker processes")
    gen.set_defaults(handler=cmd_gen_corpus)

    ann = commands.add_parser("annotate", help="Annotate turns, mentions and speakers")
    source = ann.add_mutually_exclusive_group(required=True)
    source.add_argument("--corpus", type=Path, help="Corpus directory to re-annotate")
    source.add_argument("--text", type=Path, help="UTF-8 text file, one story per line")
    ann.add_argument("--names", type=Path, help="YAML character name list (with --text)")
    ann.add_argument("--out", type=Path, required=True, help="Output corpus directory")
    ann.add_argument("--workers", type=_positive_int, default=1, help="Worker processes")
    ann.set_defaults(handler=cmd_annotate)

    build = commands.add_parser("build", help="Build a DialGen or DialSpk dataset")
    build.add_argument("--task", choices=TASKS, required=True)
    build.add_argument("--corpus", type=Path, required=True, help="Corpus directory")
    build.add_argument("--out", type=Path, required=True, help="Output dataset directory")
    build.add_argument("--seed", type=int, default=0, help="Masking / probing / split seed")
    build.add_argument("--mask-ratio", type=float, default=DEFAULT_MASK_RATIO, help="DialGen share of masked turns")
    build.add_argument("--probe-ratio", type=float, default=DEFAULT_PROBE_RATIO,
                       help="DialSpk share of specified turns")
    build.add_argument("--speakers", choices=("gold", "attributed"), default="gold",
                       help="DialSpk speaker labels to use")
    build.add_argument("--split", type=float, nargs=3, default=list(DEFAULT_SPLIT),
                       metavar=("TRAIN", "VALID", "TEST"), help="Split ratios, must sum to 1")
    build.set_defaults(handler=cmd_build)

    train = commands.add_parser("train", help="Train a model")
    train.add_argument("--task", choices=TASKS, required=True)
    train.add_argument("--dataset", type=Path, required=True, help="Dataset directory")
    train.add_argument("--config", type=Path, help="Run YAML (default: packaged <task>.yaml)")
    train.add_argument("--out", type=Path, required=True, help="Run directory")
    train.add_argument("--seed", type=int, help="Overrides train.seed")
    train.add_argument("--epochs", type=_positive_int, help="Overrides train.epochs")
    train.add_argument("--max-steps", type=_positive_int, help="Overrides train.max_steps")
    train.add_argument("--baseline", action="store_true", help="Train the model without character representations")
    train.set_defaults(handler=cmd_train)

    ev = commands.add_parser("eval", help="Evaluate a checkpoint")
    ev.add_argument("--task", choices=TASKS, required=True)
    ev.add_argument("--checkpoint", type=Path, required=True, help="Model checkpoint (.npz)")
    ev.add_argument("--dataset", type=Path, required=True, help="Dataset directory")
    ev.add_argument("--out", type=Path, required=True, help="Report directory")
    ev.add_argument("--split", choices=("train", "valid", "test"), default="test")
    ev.add_argument("--limit", type=_positive_int, help="Evaluate only the first N examples")
    ev.add_argument("--seed", type=int, help="Sampling and classifier seed")
    ev.add_argument("--decoding", choices=("greedy", "top_k"), help="Overrides decoding.strategy")
    ev.add_argument("--coherence-checkpoint", type=Path, help="Trained coherence classifier to reuse")
    ev.add_argument("--coherence-config", type=Path, help="Classifier YAML (default: packaged coherence.yaml)")
    ev.add_argument("--score-gold", action="store_true", help="Score the gold turns as if generated")
    ev.add_argument("--workers", type=_positive_int, default=1, help="Worker processes")
    ev.set_defaults(handler=cmd_eval)

    stats = commands.add_parser("stats", help="Print corpus or dataset statistics")
    target = stats.add_mutually_exclusive_group(required=True)
    target.add_argument("--corpus", type=Path, help="Corpus directory")
    target.add_argument("--dataset", type=Path, help="Dataset directory")
    stats.set_defaults(handler=cmd_stats)
    return parser


def main(argv=None):
    """
    Parse arguments, configure logging and dispatch.
    Returns:
        int: process exit status
    """
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except UsageError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return exc.exit_code

    level = logging.DEBUG if args.verbose else logging.WARNING if args.quiet else logging.INFO
    logging.basicConfig(level=level, format="%(asctime)s %(levelname)s %(name)s: %(message)s")
    logging.getLogger().setLevel(level)

    try:
        return args.handler(args)
    except (ConfigError, UsageError) as exc:
        log.error("%s", exc)
        return exc.exit_code
    except DialStoryError as exc:
        log.error("%s failed: %s", args.command, exc)
        return exc.exit_code
    except KeyboardInterrupt:
        print("\nInterrupted.", file=sys.stderr)
        return 130
    except Exception:
        log.exception("%s failed unexpectedly", args.command)
        return 2


if __name__ == "__main__":
    sys.exit(main())
