#!/usr/bin/env python3
"""
Tests for synthetic corpus generation, annotation, statistics and corpus I/O.
Run with pytest, or directly for a summary: python test_corpus.py
"""

import sys
from pathlib import Path

import numpy as np
import pytest

sys.path.insert(0, str(Path(__file__).parent))

from dialstory.config import GeneratorConfig, from_mapping, load_generator_config
from dialstory.corpus import (
    UNKNOWN_SPEAKER, CharacterLexicon, Story, StoryGenerator, annotate_corpus, annotate_story,
    annotation_quality, attribute_speakers, build_lexicon, compute_stats, detect_mentions,
    extract_dialogue_turns, generate_synthetic_corpus, generator_vocabulary, load_corpus, load_name_list,
    read_text_corpus, save_corpus,
)
from dialstory.errors import ConfigError, CorpusError, DataError
from dialstory.testing import run_module_tests, small_generator_config
from dialstory.vocab import CLOSE_QUOTE, MASK, OPEN_QUOTE, PROBE, Vocabulary, tokenize


def _story_from_text(text, names):
    lexicon = CharacterLexicon(entries={name: cid for cid, name in enumerate(names)})
    tokens = tokenize(text)
    vocab = Vocabulary.build([tokens] + [tokenize(n) for n in names])
    story = Story(id="hand-made", tokens=vocab.encode(tokens), dialogue_turns=[], mentions=[])
    return annotate_story(story, lexicon, vocab), vocab


# =============================================================================
# Generation
# =============================================================================

def test_generated_stories_respect_configured_bounds():
    config = small_generator_config()
    corpus = generate_synthetic_corpus(config)
    assert len(corpus.stories) == config.story_count
    for story in corpus.stories:
        assert len(story.characters()) >= 5
        assert config.turns_min <= story.turn_count <= config.turns_max
        assert config.ratio_min <= story.dialogue_ratio() <= config.ratio_max
        assert len(story.tokens) <= config.max_story_tokens
        assert set(story.gold_speakers) == set(range(story.turn_count))


def test_gold_spans_sit_between_quotes():
    corpus = generate_synthetic_corpus(small_generator_config(story_count=4))
    for story in corpus.stories:
        assert extract_dialogue_turns(story.tokens) == story.dialogue_turns
        for start, end in story.dialogue_turns:
            assert story.tokens[start - 1] == OPEN_QUOTE
            assert story.tokens[end] == CLOSE_QUOTE
        for cid, start, end in story.mentions:
            assert corpus.vocab.decode(story.tokens[start:end]) == tokenize(corpus.lexicon.names_of(cid)[0])


def test_generation_is_deterministic_and_worker_independent():
    config = small_generator_config(story_count=6)
    first = generate_synthetic_corpus(config, seed=11)
    second = generate_synthetic_corpus(config, seed=11, workers=2)
    assert [s.to_record() for s in first.stories] == [s.to_record() for s in second.stories]
    assert first.vocab.itos == second.vocab.itos
    other = generate_synthetic_corpus(config, seed=12)
    assert [s.tokens for s in other.stories] != [s.tokens for s in first.stories]


def test_story_ids_are_zero_padded_indices():
    corpus = generate_synthetic_corpus(small_generator_config(story_count=3))
    assert [s.id for s in corpus.stories] == ["story-00000", "story-00001", "story-00002"]


def test_style_modes():
    rng = np.random.default_rng(0)
    separable = build_lexicon(small_generator_config(), rng)
    assert separable.styles_disjoint()
    overlapping = build_lexicon(small_generator_config(style_mode="overlapping"), np.random.default_rng(0))
    assert not overlapping.styles_disjoint()


def test_vocabulary_does_not_depend_on_story_count():
    few = generate_synthetic_corpus(small_generator_config(story_count=2))
    many = generate_synthetic_corpus(small_generator_config(story_count=5))
    assert few.vocab.itos == many.vocab.itos
    assert generator_vocabulary(few.lexicon).itos == few.vocab.itos


def test_infeasible_settings_name_the_bound():
    config = small_generator_config(max_story_tokens=100)
    lexicon = build_lexicon(config, np.random.default_rng(0))
    with pytest.raises(CorpusError, match="max_story_tokens"):
        StoryGenerator(config, lexicon).generate("story-00000", np.random.default_rng(0))


def test_config_validation():
    with pytest.raises(ConfigError, match="characters_min"):
        from_mapping(GeneratorConfig, "corpus", {"characters_min": 4})
    with pytest.raises(ConfigError, match="unknown field"):
        from_mapping(GeneratorConfig, "corpus", {"stories": 10})
    with pytest.raises(ConfigError, match="story_count"):
        from_mapping(GeneratorConfig, "corpus", {"story_count": "many"})
    with pytest.raises(ConfigError, match="ratio_min"):
        from_mapping(GeneratorConfig, "corpus", {"ratio_min": 0.6, "ratio_max": 0.5})


def test_packaged_generator_config_loads():
    config = load_generator_config()
    assert config.ratio_min == pytest.approx(0.30)
    assert config.ratio_max == pytest.approx(0.50)
    assert config.characters_min == 5 and config.turns_min == 10


# =============================================================================
# Annotation
# =============================================================================

def test_extract_dialogue_turns_errors_carry_position():
    with pytest.raises(CorpusError, match="token index 2"):
        extract_dialogue_turns([20, OPEN_QUOTE, OPEN_QUOTE, CLOSE_QUOTE])
    with pytest.raises(CorpusError, match="token index 1"):
        extract_dialogue_turns([20, CLOSE_QUOTE])
    with pytest.raises(CorpusError, match="unclosed"):
        extract_dialogue_turns([OPEN_QUOTE, 20, 21])
    assert extract_dialogue_turns([20, OPEN_QUOTE, 21, 22, CLOSE_QUOTE]) == [(2, 4)]
    assert extract_dialogue_turns([OPEN_QUOTE, CLOSE_QUOTE]) == [(1, 1)]


def test_detect_mentions_prefers_longest_name_and_separates_quotes():
    names = ["Anna", "Anna Marie", "Bo"]
    lexicon = CharacterLexicon(entries={name: cid for cid, name in enumerate(names)})
    tokens = tokenize("Anna Marie said : “ hi Anna , hi Bo . ” Bo nodded .")
    vocab = Vocabulary.build([tokens])
    scan = detect_mentions(vocab.encode(tokens), lexicon, vocab)
    assert scan.narration == [(1, 0, 2), (2, 12, 13)]
    assert [m[0] for m in scan.quoted] == [0, 2]
    with pytest.raises(DataError):
        detect_mentions(vocab.encode(tokens), CharacterLexicon(entries={}), vocab)


def test_attribution_uses_lead_in_then_following_fragment():
    text = "Bo walked in . Anna said : “ hello . ” “ fine . ” replied Bo . “ ok . ” there was a pause ."
    story, _ = _story_from_text(text, ["Anna", "Bo"])
    assert story.turn_count == 3
    assert attribute_speakers(story) == {0: 0, 1: 1, 2: UNKNOWN_SPEAKER}


def test_attribution_picks_mention_nearest_the_quote():
    story, _ = _story_from_text("Anna glanced at Bo and said : “ hello . ”", ["Anna", "Bo"])
    assert story.attributed_speakers == {0: 1}


def test_annotation_recovers_ground_truth_without_distractors():
    corpus = generate_synthetic_corpus(small_generator_config(distractor_rate=0.0))
    annotated = annotate_corpus(corpus)
    quality = annotation_quality(corpus.stories, annotated.stories)
    assert quality.speaker_accuracy == pytest.approx(100.0)
    assert quality.mention_precision == pytest.approx(100.0)
    assert quality.mention_recall == pytest.approx(100.0)
    assert quality.span_agreement == pytest.approx(100.0)
    for story in annotated.stories:
        for turn, speaker in story.attributed_speakers.items():
            if speaker == UNKNOWN_SPEAKER:
                # Only continuations go unattributed, and they repeat the previous speaker
                assert turn > 0 and story.gold_speakers[turn] == story.gold_speakers[turn - 1]


def test_default_corpus_attribution_accuracy():
    corpus = generate_synthetic_corpus(GeneratorConfig())
    quality = annotation_quality(corpus.stories, annotate_corpus(corpus).stories)
    # Scored over turns the heuristics attribute; UNKNOWN turns are excluded
    assert quality.speaker_accuracy >= 95.0


def test_distractors_cause_attribution_errors():
    corpus = generate_synthetic_corpus(small_generator_config(distractor_rate=1.0, story_count=6))
    quality = annotation_quality(corpus.stories, annotate_corpus(corpus).stories)
    assert 0.0 < quality.speaker_accuracy < 100.0
    assert quality.label_dac < 100.0


def test_annotate_corpus_skips_broken_stories(tmp_path):
    text = tmp_path / "stories.txt"
    text.write_text('Anna said : "hello there ." Bo nodded .\nBo said : "unfinished\n', encoding="utf-8")
    names = tmp_path / "names.yaml"
    names.write_text("- Anna\n- Bo\n", encoding="utf-8")
    corpus = read_text_corpus(text, names)
    assert len(corpus.stories) == 2
    annotated = annotate_corpus(corpus)
    assert [s.id for s in annotated.stories] == ["text-00000"]
    assert annotated.stories[0].attributed_speakers == {0: 0}

    text.write_text('"never closed\n', encoding="utf-8")
    with pytest.raises(DataError, match="every story"):
        annotate_corpus(read_text_corpus(text, names))


def test_tag_text_never_maps_to_reserved_ids():
    tokens = tokenize('Anna typed <mask> and "<probe> here ."')
    assert tokens[2:5] == ["<", "mask", ">"]
    assert "<mask>" not in tokens and "<probe>" not in tokens
    ids = Vocabulary.build([tokens]).encode(tokens)
    assert MASK not in ids and PROBE not in ids


def test_load_name_list_formats(tmp_path):
    path = tmp_path / "names.yaml"
    path.write_text("characters:\n  - Anna\n  - Bo\n", encoding="utf-8")
    assert load_name_list(path).entries == {"Anna": 0, "Bo": 1}
    path.write_text("Anna: 0\nAnnie: 0\nBo: 1\n", encoding="utf-8")
    assert load_name_list(path).names_of(0) == ["Anna", "Annie"]
    path.write_text("42\n", encoding="utf-8")
    with pytest.raises(DataError):
        load_name_list(path)


# =============================================================================
# Statistics and persistence
# =============================================================================

def test_compute_stats():
    corpus = generate_synthetic_corpus(small_generator_config(story_count=5))
    stats = compute_stats(corpus.stories)
    assert stats.story_count == 5
    assert 0.30 <= stats.avg_dialogue_ratio <= 0.50
    assert stats.avg_characters >= 5
    table = stats.to_table()
    assert "Avg. #Dialogue Turn" in table and "#Story" in table
    with pytest.raises(DataError):
        compute_stats([])


def test_corpus_round_trip(tmp_path):
    corpus = generate_synthetic_corpus(small_generator_config(story_count=3))
    save_corpus(corpus, tmp_path)
    loaded = load_corpus(tmp_path)
    assert [s.to_record() for s in loaded.stories] == [s.to_record() for s in corpus.stories]
    assert loaded.lexicon == corpus.lexicon
    assert loaded.vocab.itos == corpus.vocab.itos


def test_malformed_story_record():
    with pytest.raises(DataError, match="malformed"):
        Story.from_record({"id": "x", "tokens": [1, 2]})


def main():
    return run_module_tests(globals())


if __name__ == "__main__":
    sys.exit(main())
