#!/usr/bin/env python3
"""
Tests for the encoder-decoder, character selection and the speaker heads.
Run with pytest, or directly for a summary: python test_model.py
"""

import sys
from dataclasses import replace
from pathlib import Path

import numpy as np
import pytest
from numpy.testing import assert_allclose, assert_array_equal

sys.path.insert(0, str(Path(__file__).parent))

from dialstory.config import DecodingConfig
from dialstory.datasets import DialGenExample, DialSpkExample
from dialstory.errors import DataError, ShapeError
from dialstory.model import CharacterBank, DialogueModel, split_generation
from dialstory.numerics import (FINITE_DIFFERENCE_STEP, backward, no_grad, numerical_gradient, precision, relative_error,
                                softmax, tensor)
from dialstory.testing import run_module_tests, small_model_config
from dialstory.train import dialgen_loss, dialspk_loss
from dialstory.vocab import CLOSE_QUOTE, END, MASK, OPEN_QUOTE, PROBE, RESERVED_TOKENS, SEP, START

VOCAB_SIZE = 30


def _tiny_config(**overrides):
    settings = dict(model_dim=8, attention_heads=2, feedforward_dim=16, max_sequence_length=64)
    settings.update(overrides)
    return small_model_config(VOCAB_SIZE, **settings)


def _dialgen_example():
    tokens = [20, 21, 13, OPEN_QUOTE, MASK, CLOSE_QUOTE, 22, 14, 23, OPEN_QUOTE, MASK, CLOSE_QUOTE, 15, 20]
    return DialGenExample(id="tiny", story_id="tiny", input_tokens=tokens, masked_turn_indices=[0, 1],
                          gold_turns=[[24, 25, 26], [27, 28]], characters=[0, 1, 2],
                          mentions=[(0, 0, 1), (1, 1, 2), (2, 8, 9), (0, 13, 14)])


def _dialspk_example():
    tokens = [20, 21, 22, PROBE, OPEN_QUOTE, 24, 25, CLOSE_QUOTE, 23, PROBE, OPEN_QUOTE, 26, CLOSE_QUOTE, 21]
    return DialSpkExample(id="tiny", story_id="tiny", tokens=tokens, candidates=[0, 1, 2], specified_turns=[0, 1],
                          gold=[0, 1], probe_positions=[3, 9], mentions=[(0, 0, 1), (1, 1, 2), (2, 2, 3), (1, 13, 14)])


def _check_parameter_gradients(model, loss_fn, names, tolerance=1e-6, step=1e-6):
    # A small step keeps the finite differences clear of relu kinks and selection flips
    loss = loss_fn()
    backward(loss)
    params = model.named_parameters()
    for name in names:
        analytic = params[name].grad
        assert analytic is not None, name
        numeric = numerical_gradient(loss_fn, params[name], step=step)
        assert relative_error(analytic, numeric) < tolerance, name


# Randomized instances for the full-parameter check
ORACLE_INSTANCES = 20
ORACLE_VOCAB = 16
ORACLE_STEP = FINITE_DIFFERENCE_STEP
ORACLE_TOLERANCE = 1e-6
SELECTION_MARGIN = 0.05
FIRST_WORD = len(RESERVED_TOKENS)


def _oracle_config(**overrides):
    # silu keeps the loss smooth everywhere, so a 1e-4 step never straddles a kink
    settings = dict(model_dim=8, attention_heads=2, feedforward_dim=16, max_sequence_length=32, activation="silu")
    settings.update(overrides)
    return small_model_config(ORACLE_VOCAB, **settings)


def _random_mentions(rng, narration, count):
    """Each of `count` characters gets one narration position, plus up to two repeat mentions."""
    extra = int(rng.integers(0, min(2, len(narration) - count) + 1))
    positions = rng.choice(narration, size=count + extra, replace=False)
    owners = list(range(count)) + rng.integers(0, count, size=extra).tolist()
    return [(int(cid), int(p), int(p) + 1) for cid, p in zip(owners, positions)]


def _random_dialgen_example(rng, index):
    length = int(rng.integers(12, 33))
    tokens = rng.integers(FIRST_WORD, ORACLE_VOCAB, size=length).tolist()
    placeholders = int(rng.integers(1, 3))
    starts = [2 + j * (length // 2) for j in range(placeholders)]
    for start in starts:
        tokens[start:start + 3] = [OPEN_QUOTE, MASK, CLOSE_QUOTE]
    reserved = {start + k for start in starts for k in range(3)}
    narration = [p for p in range(length) if p not in reserved]
    count = int(rng.integers(1, 5))
    gold = [rng.integers(FIRST_WORD, ORACLE_VOCAB, size=int(rng.integers(1, 5))).tolist() for _ in starts]
    return DialGenExample(id=f"random-{index}", story_id=f"random-{index}", input_tokens=tokens,
                          masked_turn_indices=list(range(placeholders)), gold_turns=gold,
                          characters=list(range(count)), mentions=_random_mentions(rng, narration, count))


def _random_dialspk_example(rng, index):
    length = int(rng.integers(12, 33))
    tokens = rng.integers(FIRST_WORD, ORACLE_VOCAB, size=length).tolist()
    turns = int(rng.integers(1, 3))
    probes = [1 + j * (length // 2) for j in range(turns)]
    for probe in probes:
        tokens[probe:probe + 4] = [PROBE, OPEN_QUOTE, int(rng.integers(FIRST_WORD, ORACLE_VOCAB)), CLOSE_QUOTE]
    reserved = {probe + k for probe in probes for k in range(4)}
    narration = [p for p in range(length) if p not in reserved]
    count = int(rng.integers(2, 5))
    return DialSpkExample(id=f"random-{index}", story_id=f"random-{index}", tokens=tokens,
                          candidates=list(range(count)), specified_turns=list(range(turns)),
                          gold=rng.integers(0, count, size=turns).tolist(), probe_positions=probes,
                          mentions=_random_mentions(rng, narration, count))


def _selection_margin(model, example):
    """Smallest gap between the best and second-best character score over all decoder steps."""
    with no_grad():
        _, _, traces = model.dialgen_logits(example)
    gaps = [float(np.diff(np.sort(trace.scores))[-1]) for trace in traces if trace.scores.size > 1]
    return min(gaps, default=np.inf)


def _worst_gradient_error(model, loss_fn):
    """Largest elementwise error over every parameter, with the parameter it occurred in."""
    backward(loss_fn())
    worst, where = 0.0, None
    for name, param in model.named_parameters().items():
        # Parameters off the gradient path (the selection projection) must have a zero slope
        analytic = param.grad if param.grad is not None else np.zeros_like(param.data)
        error = relative_error(analytic, numerical_gradient(loss_fn, param, step=ORACLE_STEP))
        if error > worst:
            worst, where = error, name
    return worst, where


# =============================================================================
# Gradients
# =============================================================================

def test_dialgen_gradients_match_finite_differences():
    with precision(64):
        model = DialogueModel(_tiny_config(), task="dialgen", seed=1)
        example = _dialgen_example()
        _check_parameter_gradients(model, lambda: dialgen_loss(example, model), [
            "output.weight", "fusion_norm.gain", "decoder.0.cross_attention.value.weight",
            "character_encoder.0.feed_forward.expand.weight", "encoder.0.attention.query.weight",
        ])


def test_dialspk_gradients_match_finite_differences():
    with precision(64):
        model = DialogueModel(_tiny_config(layers_decoder=0), task="dialspk", seed=2)
        example = _dialspk_example()
        _check_parameter_gradients(model, lambda: dialspk_loss(example, model), [
            "encoder.0.feed_forward.project.weight", "encoder.0.feed_forward_norm.bias",
            "character_encoder.0.attention.key.weight",
        ])


def test_baseline_gradients_match_finite_differences():
    with precision(64):
        model = DialogueModel(_tiny_config(layers_decoder=0), task="dialspk", baseline=True, seed=3)
        example = _dialspk_example()
        _check_parameter_gradients(model, lambda: dialspk_loss(example, model), ["speaker.weight", "speaker.bias"])


def test_selection_projection_receives_no_gradient():
    model = DialogueModel(_tiny_config(), task="dialgen", seed=0)
    backward(dialgen_loss(_dialgen_example(), model))
    params = model.named_parameters()
    assert params["select.weight"].grad is None
    assert params["select.bias"].grad is None
    assert params["output.weight"].grad is not None


@pytest.mark.slow
def test_dialgen_loss_gradients_on_random_instances():
    rng = np.random.default_rng(100)
    checked = 0
    with precision(64):
        for index in range(5 * ORACLE_INSTANCES):
            example = _random_dialgen_example(rng, index)
            model = DialogueModel(_oracle_config(), task="dialgen", seed=index)
            # A step that flips the argmax measures a jump, not a slope
            if _selection_margin(model, example) < SELECTION_MARGIN:
                continue
            error, name = _worst_gradient_error(model, lambda: dialgen_loss(example, model))
            assert error <= ORACLE_TOLERANCE, f"instance {index}: {name} off by {error:.2e}"
            checked += 1
            if checked == ORACLE_INSTANCES:
                break
    assert checked == ORACLE_INSTANCES


@pytest.mark.slow
def test_dialspk_loss_gradients_on_random_instances():
    rng = np.random.default_rng(200)
    with precision(64):
        for index in range(ORACLE_INSTANCES):
            example = _random_dialspk_example(rng, index)
            model = DialogueModel(_oracle_config(layers_decoder=0), task="dialspk", seed=index)
            error, name = _worst_gradient_error(model, lambda: dialspk_loss(example, model))
            assert error <= ORACLE_TOLERANCE, f"instance {index}: {name} off by {error:.2e}"


# =============================================================================
# Characters and selection
# =============================================================================

def test_selection_ties_go_to_lowest_index():
    model = DialogueModel(_tiny_config(), task="dialgen", seed=0)
    bank = CharacterBank(reps=tensor(np.ones((3, 8))), mention_index=[[0], [1], [2]])
    with no_grad():
        _, traces = model._predict(tensor(np.random.default_rng(0).normal(size=(4, 8))), bank)
    assert [t.selected for t in traces] == [0, 0, 0, 0]


def test_selection_follows_projected_scores():
    model = DialogueModel(_tiny_config(), task="dialgen", seed=0)
    example = _dialgen_example()
    with no_grad():
        logits, _, traces = model.dialgen_logits(example)
    assert logits.shape == (len(example.gold_output) + 1, VOCAB_SIZE)
    assert len(traces) == logits.shape[0]
    for trace in traces:
        assert trace.scores.shape == (3,)
        assert trace.selected == int(np.argmax(trace.scores))


def test_single_character_is_always_selected():
    model = DialogueModel(_tiny_config(), task="dialgen", seed=0)
    rng = np.random.default_rng(4)
    bank = CharacterBank(reps=tensor(rng.normal(size=(1, 8))), mention_index=[[0]])
    with no_grad():
        _, traces = model._predict(tensor(rng.normal(size=(6, 8))), bank)
    assert [t.selected for t in traces] == [0] * 6


def test_selection_ignores_positive_scaling_and_shifts_of_scores():
    model = DialogueModel(_tiny_config(), task="dialgen", seed=0)
    rng = np.random.default_rng(5)
    reps = rng.normal(size=(4, 8))
    states = tensor(rng.normal(size=(10, 8)))
    # Scaling every representation scales the scores; adding one vector to all of them
    # adds the same amount to every score in a row
    variants = [reps, 3.5 * reps, 0.25 * reps, reps + rng.normal(size=(1, 8))]
    with no_grad():
        choices = [[t.selected for t in model._predict(states, CharacterBank(tensor(r), [[0]] * 4))[1]]
                   for r in variants]
    assert all(choice == choices[0] for choice in choices)


def test_identical_characters_give_uniform_speaker_rows():
    model = DialogueModel(_tiny_config(layers_decoder=0), task="dialspk", seed=0)
    example = replace(_dialspk_example(), mentions=[(cid, 0, 1) for cid in range(3)])
    with no_grad():
        rows = softmax(model.speaker_logits(example), axis=-1).data
    assert_allclose(rows, np.full((2, 3), 1.0 / 3.0), rtol=1e-6)
    with no_grad():
        assert dialspk_loss(example, model).item() == pytest.approx(2 * np.log(3.0), rel=1e-5)


def test_zero_layer_character_encoder_is_mean_of_mentions():
    model = DialogueModel(_tiny_config(character_encoder_layers=0), task="dialgen", seed=0)
    with no_grad():
        hidden = model.encode(_dialgen_example().input_tokens)
        bank = model.character_representations(hidden, [[0, 13], [1], [8]])
    assert_allclose(bank.reps.data[0], hidden.data[[0, 13]].mean(axis=0), rtol=1e-5, atol=1e-6)
    assert_allclose(bank.reps.data[1], hidden.data[1], rtol=1e-5, atol=1e-6)
    assert bank.size == 3


def test_character_without_mentions_is_rejected():
    model = DialogueModel(_tiny_config(), task="dialgen", seed=0)
    with no_grad():
        hidden = model.encode(_dialgen_example().input_tokens)
        with pytest.raises(DataError, match="character 1"):
            model.character_representations(hidden, [[0], []])
        with pytest.raises(DataError):
            model.character_representations(hidden, [[0], [99]])


def test_baseline_drops_character_parameters():
    full = DialogueModel(_tiny_config(), task="dialgen", seed=0)
    baseline = DialogueModel(_tiny_config(), task="dialgen", baseline=True, seed=0)
    assert not any(name.startswith(("character_encoder", "select", "fusion_norm"))
                   for name in baseline.named_parameters())
    assert baseline.parameter_count() < full.parameter_count()
    with no_grad():
        logits, _, traces = baseline.dialgen_logits(_dialgen_example())
    assert traces == [] and logits.shape[1] == VOCAB_SIZE


def test_dialgen_needs_a_decoder():
    with pytest.raises(ShapeError):
        DialogueModel(_tiny_config(layers_decoder=0), task="dialgen")


# =============================================================================
# Speaker identification
# =============================================================================

def test_speaker_logits_and_predictions():
    for baseline in (False, True):
        model = DialogueModel(_tiny_config(layers_decoder=0), task="dialspk", baseline=baseline, seed=0)
        example = _dialspk_example()
        with no_grad():
            scores = model.speaker_logits(example)
        assert scores.shape == (2, 3)
        predictions = model.predict_speakers(example)
        assert predictions == [int(i) for i in np.argmax(scores.data, axis=1)]
        assert all(0 <= p < 3 for p in predictions)


def test_speaker_logits_reject_misplaced_probes():
    model = DialogueModel(_tiny_config(layers_decoder=0), task="dialspk", seed=0)
    example = _dialspk_example()
    example.probe_positions = [3]
    with pytest.raises(ShapeError):
        model.speaker_logits(example)
    example.probe_positions = [3, 8]
    with pytest.raises(ShapeError):
        model.speaker_logits(example)


def test_dialspk_loss_rejects_bad_gold_index():
    model = DialogueModel(_tiny_config(layers_decoder=0), task="dialspk", seed=0)
    example = _dialspk_example()
    example.gold = [0, 5]
    with pytest.raises(DataError, match="gold index 5"):
        dialspk_loss(example, model)


# =============================================================================
# Generation
# =============================================================================

def test_decode_step_returns_distribution_and_trace():
    model = DialogueModel(_tiny_config(), task="dialgen", seed=4)
    model.eval()
    with no_grad():
        hidden, bank = model.encode_story(_dialgen_example())
    probs, trace = model.decode_step([START, 24], hidden, bank)
    assert probs.shape == (VOCAB_SIZE,)
    assert np.all(probs > 0)
    assert_allclose(probs.sum(), 1.0, rtol=1e-5)
    assert trace.scores.shape == (3,)
    assert trace.selected == int(np.argmax(trace.scores))

    baseline = DialogueModel(_tiny_config(), task="dialgen", baseline=True, seed=4)
    baseline.eval()
    with no_grad():
        hidden, bank = baseline.encode_story(_dialgen_example())
    probs, trace = baseline.decode_step([START], hidden, bank)
    assert bank is None and trace is None
    assert_allclose(probs.sum(), 1.0, rtol=1e-5)


def test_generation_yields_one_turn_per_placeholder():
    model = DialogueModel(_tiny_config(), task="dialgen", seed=4)
    example = _dialgen_example()
    decoding = DecodingConfig(max_tokens=12)
    first = model.generate(example, decoding)
    second = model.generate(example, decoding)
    assert len(first.turns) == 2
    assert first.tokens == second.tokens
    assert END not in first.tokens
    assert all(SEP not in turn for turn in first.turns)
    assert len(first.traces) == len(first.tokens) + (0 if first.truncated else 1)
    filled = example.filled(first.turns)
    assert len(filled) == len(example.input_tokens) - 2 + sum(len(turn) for turn in first.turns)


def test_top_k_sampling_is_seeded():
    model = DialogueModel(_tiny_config(), task="dialgen", seed=4)
    example = _dialgen_example()
    decoding = DecodingConfig(strategy="top_k", top_k=3, max_tokens=12)
    a = model.generate(example, decoding, rng=np.random.default_rng(9))
    b = model.generate(example, decoding, rng=np.random.default_rng(9))
    assert a.tokens == b.tokens


def test_split_generation_records_faults():
    exact = split_generation([24, SEP, 25], 2)
    assert exact.turns == [[24], [25]] and exact.faults == []
    extra = split_generation([24, SEP, 25, SEP, 26], 2)
    assert extra.turns == [[24], [25]] and len(extra.faults) == 1
    missing = split_generation([24], 3, truncated=True)
    assert missing.turns == [[24], [], []]
    assert len(missing.faults) == 2 and missing.truncated


def test_over_length_input_is_rejected():
    model = DialogueModel(_tiny_config(max_sequence_length=10), task="dialgen", seed=0)
    with pytest.raises(DataError, match="max_sequence_length"):
        model.encode(_dialgen_example().input_tokens)
    with pytest.raises(DataError):
        model.encode([])
    with pytest.raises(DataError, match="outside vocabulary"):
        DialogueModel(_tiny_config(), task="dialgen").encode([VOCAB_SIZE + 1])


# =============================================================================
# Checkpoints
# =============================================================================

def test_checkpoint_round_trip_reproduces_outputs(tmp_path):
    model = DialogueModel(_tiny_config(), task="dialgen", seed=5)
    example = _dialgen_example()
    path = tmp_path / "model.npz"
    model.save(path, {"tag": "test"})
    restored, header = DialogueModel.from_checkpoint(path)
    assert header["task"] == "dialgen" and header["tag"] == "test" and header["baseline"] is False
    with no_grad():
        expected = model.dialgen_logits(example)[0].data
        actual = restored.dialgen_logits(example)[0].data
    assert_array_equal(expected, actual)

    again = tmp_path / "again.npz"
    restored.save(again, {"tag": "test"})
    assert path.read_bytes() == again.read_bytes()


def test_loading_mismatched_parameters_fails(tmp_path):
    small = DialogueModel(_tiny_config(), task="dialgen", seed=0)
    wide = DialogueModel(_tiny_config(model_dim=12, attention_heads=2), task="dialgen", seed=0)
    with pytest.raises(ShapeError):
        wide.load_arrays(small.store.arrays())
    spk = DialogueModel(_tiny_config(layers_decoder=0), task="dialspk", seed=0)
    with pytest.raises(DataError, match="do not match"):
        spk.load_arrays(small.store.arrays())


def main():
    return run_module_tests(globals())


if __name__ == "__main__":
    sys.exit(main())
