#!/usr/bin/env python3
"""
Tests for the training loops, checkpoints written during training and coverage tracking.
Run with pytest, or directly for a summary: python test_train.py
"""

import dataclasses
import sys
from pathlib import Path

import numpy as np
import pytest

sys.path.insert(0, str(Path(__file__).parent))

from dialstory.artifacts import read_jsonl
from dialstory.checkpoint import load_checkpoint
from dialstory.corpus import generate_synthetic_corpus
from dialstory.datasets import Dataset, build_dialgen_dataset, build_dialspk_dataset, split_examples
from dialstory.errors import DataError, NumericalError
from dialstory.model import DecoderStepTrace, DialogueModel
from dialstory.numerics import tensor
from dialstory.testing import run_module_tests, small_generator_config, small_model_config, small_run_config
from dialstory.train import LOSSES, CoverageTracker, evaluate_loss, train_baseline, train_task

_DATASETS = {}


def _dataset(task):
    if task not in _DATASETS:
        corpus = generate_synthetic_corpus(small_generator_config(story_count=8))
        build = build_dialgen_dataset if task == "dialgen" else build_dialspk_dataset
        examples = build(corpus.stories, seed=0)
        _DATASETS[task] = Dataset(task=task, splits=split_examples(examples, (0.5, 0.25, 0.25)),
                                  vocab=corpus.vocab, lexicon=corpus.lexicon)
    return _DATASETS[task]


def _single_example_dataset(task):
    base = _dataset(task)
    example = base.split("train")[0]
    return dataclasses.replace(base, splits={"train": [example], "valid": [example], "test": []})


def test_dialgen_run_writes_checkpoints_and_metrics(tmp_path):
    dataset = _dataset("dialgen")
    result = train_task(dataset, small_run_config("dialgen", epochs=2, max_steps=3), tmp_path)
    assert result.steps == 3
    for name in ("metrics.jsonl", "best.npz", "final.npz", "checkpoints/epoch-000.npz"):
        assert (tmp_path / name).exists(), name
    rows = read_jsonl(tmp_path / "metrics.jsonl")
    step_rows = [r for r in rows if "loss" in r]
    assert [r["step"] for r in step_rows] == [1, 2, 3]
    assert all(np.isfinite(r["loss"]) for r in step_rows)
    assert any("valid_loss" in r for r in rows)

    header, params, optim = load_checkpoint(tmp_path / "final.npz")
    assert header["tag"] == "final" and header["step"] == 3
    assert header["optimizer"]["step"] == 3
    assert optim and set(params) == set(result.model.named_parameters())
    best_header, _, best_optim = load_checkpoint(tmp_path / "best.npz")
    assert best_header["tag"] == "best" and best_optim == {}


def test_training_is_reproducible(tmp_path):
    dataset = _dataset("dialgen")
    config = small_run_config("dialgen", max_steps=2, seed=3)
    train_task(dataset, config, tmp_path / "a")
    train_task(dataset, config, tmp_path / "b")
    assert (tmp_path / "a" / "final.npz").read_bytes() == (tmp_path / "b" / "final.npz").read_bytes()
    assert read_jsonl(tmp_path / "a" / "metrics.jsonl") == read_jsonl(tmp_path / "b" / "metrics.jsonl")


def test_repeated_steps_fit_a_single_example():
    dataset = _single_example_dataset("dialgen")
    config = small_run_config("dialgen", epochs=20, batch_size=1, learning_rate=3e-2)
    result = train_task(dataset, config)
    losses = [row["train_loss"] for row in result.history]
    assert losses[-1] < 0.7 * losses[0]
    assert result.best_epoch is not None
    assert result.best_valid_loss == pytest.approx(min(row["valid_loss"] for row in result.history))


def test_dialspk_training_and_reload(tmp_path):
    dataset = _dataset("dialspk")
    result = train_task(dataset, small_run_config("dialspk", epochs=1), tmp_path)
    assert result.coverage == []
    model, header = DialogueModel.from_checkpoint(tmp_path / "best.npz")
    assert header["task"] == "dialspk"
    example = dataset.split("test")[0]
    predictions = model.predict_speakers(example)
    assert len(predictions) == len(example.gold)


def test_baseline_run_is_marked_in_checkpoint(tmp_path):
    dataset = _dataset("dialgen")
    train_baseline(dataset, small_run_config("dialgen", max_steps=1), tmp_path)
    model, header = DialogueModel.from_checkpoint(tmp_path / "final.npz")
    assert header["baseline"] is True and model.baseline
    assert "select.weight" not in model.named_parameters()


def test_task_and_vocabulary_mismatches_are_rejected():
    dataset = _dataset("dialgen")
    with pytest.raises(DataError, match="dialspk"):
        train_task(dataset, small_run_config("dialspk"))
    config = small_run_config("dialgen")
    config = dataclasses.replace(config, model=dataclasses.replace(config.model, vocab_size=7))
    with pytest.raises(DataError, match="vocab_size"):
        train_task(dataset, config)


def test_non_finite_loss_names_step_and_batch():
    dataset = _dataset("dialspk")
    original = LOSSES["dialspk"]
    LOSSES["dialspk"] = lambda example, model: tensor([np.nan])
    try:
        with pytest.raises(NumericalError, match=r"step 1 .*batch examples: story-"):
            train_task(dataset, small_run_config("dialspk"))
    finally:
        LOSSES["dialspk"] = original


def test_evaluate_loss_handles_empty_split():
    dataset = _dataset("dialspk")
    model = DialogueModel(small_model_config(len(dataset.vocab), layers_decoder=0), task="dialspk")
    assert evaluate_loss(model, [], "dialspk") is None
    value = evaluate_loss(model, dataset.split("valid"), "dialspk")
    assert np.isfinite(value) and value > 0
    assert not model.training


def test_coverage_tracker_reports_full_windows_only():
    tracker = CoverageTracker(window=2)
    trace = lambda k: DecoderStepTrace(selected=k, scores=np.zeros(4))
    tracker.add("s1", 4, [trace(0), trace(1)])
    assert tracker.step(1) is None
    tracker.add("s1", 4, [trace(1)])
    tracker.add("s2", 5, [trace(2)])
    report = tracker.step(2)
    assert report.per_story == {"s1": 0.5, "s2": 0.2}
    assert report.mean == pytest.approx(0.35)
    assert (report.first_step, report.last_step) == (1, 2)
    tracker.add("s3", 2, [trace(0)])
    assert tracker.step(3) is None
    assert len(tracker.reports) == 1


def test_dialgen_run_tracks_coverage():
    dataset = _dataset("dialgen")
    result = train_task(dataset, small_run_config("dialgen", coverage_window=1, max_steps=2))
    assert len(result.coverage) == 2
    for report in result.coverage:
        assert 0.0 < report.mean <= 1.0


def main():
    return run_module_tests(globals())


if __name__ == "__main__":
    sys.exit(main())
