#!/usr/bin/env python3
"""
End-to-end training experiments on the synthetic corpus with the packaged configurations.
These take tens of minutes on a CPU and are deselected by default; run them with
pytest -m slow test_acceptance.py, or directly for a summary: python test_acceptance.py
"""

import dataclasses
import sys
from pathlib import Path

import numpy as np
import pytest

sys.path.insert(0, str(Path(__file__).parent))

from dialstory.coherence import coherence_score, derangement, train_coherence_classifier
from dialstory.config import GeneratorConfig, default_config_path, load_coherence_config, load_run_config
from dialstory.corpus import generate_synthetic_corpus
from dialstory.datasets import Dataset, build_dialgen_dataset, build_dialspk_dataset, split_examples
from dialstory.evaluation import dac_sac
from dialstory.model import DialogueModel
from dialstory.numerics import backward
from dialstory.optim import Adam
from dialstory.testing import run_module_tests
from dialstory.train import dialgen_loss, evaluate_loss, train_baseline, train_task

pytestmark = pytest.mark.slow

STORY_COUNT = 2000
OVERFIT_EXAMPLES = 50
OVERFIT_STEPS = 500
OVERFIT_BATCH = 8
COHERENCE_TRAIN_STORIES = 1000
COHERENCE_HELD_OUT_STORIES = 200

_CORPORA = {}


def _corpus(story_count):
    if story_count not in _CORPORA:
        _CORPORA[story_count] = generate_synthetic_corpus(GeneratorConfig(story_count=story_count))
    return _CORPORA[story_count]


def _dataset(task, corpus):
    build = build_dialgen_dataset if task == "dialgen" else build_dialspk_dataset
    examples = build(corpus.stories, seed=0)
    return Dataset(task=task, splits=split_examples(examples, seed=0), vocab=corpus.vocab, lexicon=corpus.lexicon)


def _speaker_accuracy(model, examples):
    predictions = {example.id: model.predict_speakers(example) for example in examples}
    return dac_sac(predictions, {example.id: example.gold for example in examples})


def test_character_representations_beat_the_baseline_on_speakers():
    dataset = _dataset("dialspk", _corpus(STORY_COUNT))
    run_config = load_run_config(default_config_path("dialspk.yaml"))
    full = train_task(dataset, run_config)
    baseline = train_baseline(dataset, run_config)

    test_examples = dataset.split("test")
    full_accuracy = _speaker_accuracy(full.model, test_examples)
    baseline_accuracy = _speaker_accuracy(baseline.model, test_examples)
    print(f"DAC {full_accuracy.dac:.2f} / SAC {full_accuracy.sac:.2f}, "
          f"baseline DAC {baseline_accuracy.dac:.2f} / SAC {baseline_accuracy.sac:.2f}")
    assert full_accuracy.dac >= 85.0
    assert full_accuracy.sac >= 50.0
    assert full_accuracy.dac - baseline_accuracy.dac >= 10.0


def test_dialgen_loss_halves_on_a_small_overfit_set():
    corpus = _corpus(OVERFIT_EXAMPLES * 2)
    examples = build_dialgen_dataset(corpus.stories, seed=0)[:OVERFIT_EXAMPLES]
    assert len(examples) == OVERFIT_EXAMPLES
    run_config = load_run_config(default_config_path("dialgen.yaml"))
    config = dataclasses.replace(run_config.model, vocab_size=len(corpus.vocab), dropout=0.0)
    model = DialogueModel(config, task="dialgen", seed=0)
    optimizer = Adam(model.named_parameters(), run_config.train.learning_rate)
    rng = np.random.default_rng(0)

    initial = evaluate_loss(model, examples, "dialgen")
    order = []
    for _ in range(OVERFIT_STEPS):
        if len(order) < OVERFIT_BATCH:
            order.extend(rng.permutation(len(examples)).tolist())
        batch, order = order[:OVERFIT_BATCH], order[OVERFIT_BATCH:]
        total = None
        for i in batch:
            loss = dialgen_loss(examples[i], model)
            total = loss if total is None else total + loss
        backward(total * (1.0 / len(batch)))
        optimizer.step()
    final = evaluate_loss(model, examples, "dialgen")
    print(f"Overfit loss {initial:.4f} -> {final:.4f}")
    assert final <= 0.5 * initial


def test_character_selection_covers_most_characters():
    dataset = _dataset("dialgen", _corpus(STORY_COUNT))
    run_config = load_run_config(default_config_path("dialgen.yaml"))
    result = train_task(dataset, run_config)
    assert result.coverage, "training ended before the first coverage window closed"
    coverage = float(np.mean([report.mean for report in result.coverage]))
    print(f"Mean coverage over {len(result.coverage)} windows: {100 * coverage:.2f}%")
    assert coverage >= 0.9


def test_gold_infills_are_more_coherent_than_shuffled_ones():
    corpus = _corpus(COHERENCE_TRAIN_STORIES + COHERENCE_HELD_OUT_STORIES)
    train_stories = corpus.stories[:COHERENCE_TRAIN_STORIES]
    held_out = corpus.stories[COHERENCE_TRAIN_STORIES:]
    fit = train_coherence_classifier([story.tokens for story in train_stories], len(corpus.vocab),
                                     load_coherence_config())
    assert fit.held_out_accuracy >= 80.0

    rng = np.random.default_rng(0)
    examples = build_dialgen_dataset(held_out, seed=0)
    gold = [example.filled(example.gold_turns) for example in examples]
    shuffled = [example.filled([example.gold_turns[i] for i in derangement(len(example.gold_turns), rng)])
                for example in examples]
    gold_ratio = coherence_score(gold, fit.classifier).ratio
    shuffled_ratio = coherence_score(shuffled, fit.classifier).ratio
    print(f"Coherence: gold {gold_ratio:.2f}%, shuffled {shuffled_ratio:.2f}%")
    assert gold_ratio > shuffled_ratio


def main():
    return run_module_tests(globals())


if __name__ == "__main__":
    sys.exit(main())
