"""
DialGen and DialSpk dataset construction.

DialGen: a share of each story's dialogue turns is replaced by one <mask> placeholder
each (the quote marks stay); the model regenerates the masked turns in document order,
joined by <sep>. Turns touching the first 50 or last 30 tokens are never masked.

DialSpk: a <probe> token is inserted before the opening quote of each specified turn; the
target is the speaker's index among the story's candidates (distinct mentioned characters
in order of first mention).

Datasets are stored as one directory per build: train/valid/test JSON-lines files plus the
vocabulary and lexicon they index into.
"""

# =============================================================================
# GLOBAL CONFIGURATION VARIABLES
# =============================================================================

DEFAULT_MASK_RATIO = 0.30                 # Share of dialogue turns masked per story
DEFAULT_PROBE_RATIO = 0.40                # Share of attributable turns specified per story
PROTECTED_HEAD = 50                       # Leading tokens no placeholder may fall in
PROTECTED_TAIL = 30                       # Trailing tokens no placeholder may fall in
DEFAULT_SPLIT = (0.9, 0.05, 0.05)         # train / valid / test
SPLIT_NAMES = ("train", "valid", "test")
MIN_CANDIDATES = 2

# =============================================================================

import logging
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np
import pandas as pd

from dialstory.artifacts import read_json, read_jsonl, write_json, write_jsonl
from dialstory.corpus import MIN_STORY_CHARACTERS, UNKNOWN_SPEAKER, CharacterLexicon
from dialstory.errors import DataError, UsageError
from dialstory.vocab import CLOSE_QUOTE, MASK, OPEN_QUOTE, PROBE, SEP, TERMINATOR_IDS, Vocabulary

log = logging.getLogger(__name__)


def round_half_up(value):
    return int(np.floor(value + 0.5 + 1e-9))


def mask_count(turn_count, ratio=DEFAULT_MASK_RATIO):
    """Placeholders for a story with turn_count turns: round-half-up of ratio x turns, at least 1."""
    return max(1, round_half_up(ratio * turn_count))


def maskable_turns(story):
    """Indices of turns whose quotes lie clear of the protected head and tail."""
    length = len(story.tokens)
    return [t for t, (start, end) in enumerate(story.dialogue_turns)
            if start - 1 >= PROTECTED_HEAD and end < length - PROTECTED_TAIL]


def _shift(position, removals):
    """Map an original position through (at, delta) edits sorted by position."""
    return position + sum(delta for at, delta in removals if at <= position)


@dataclass
class DialGenExample:
    """
    Masked story plus the turns to regenerate.
    Attributes:
        input_tokens (list[int]): Story with each masked turn's content replaced by <mask>
        masked_turn_indices (list[int]): Turn indices in document order
        gold_turns (list[list[int]]): Content of each masked turn
        characters (list[int]): Character ids in order of first mention
        mentions (list[tuple]): (character_id, start, end) in input coordinates
    """
    id: str
    story_id: str
    input_tokens: list
    masked_turn_indices: list
    gold_turns: list
    characters: list
    mentions: list

    @property
    def gold_output(self):
        """Masked turns joined by <sep>."""
        out = []
        for i, turn in enumerate(self.gold_turns):
            if i:
                out.append(SEP)
            out.extend(turn)
        return out

    @property
    def mask_positions(self):
        return [i for i, token in enumerate(self.input_tokens) if token == MASK]

    def mention_index(self):
        """Per character (in `characters` order), the input positions of its mentions."""
        positions = {cid: [] for cid in self.characters}
        for cid, start, end in sorted(self.mentions, key=lambda m: m[1]):
            if cid in positions:
                positions[cid].extend(range(start, end))
        return [positions[cid] for cid in self.characters]

    def filled(self, turns):
        """Input with each placeholder replaced by the corresponding turn's tokens."""
        out, k = [], 0
        for token in self.input_tokens:
            if token == MASK and k < len(turns):
                out.extend(turns[k])
                k += 1
            else:
                out.append(token)
        return out

    def to_record(self):
        return {"id": self.id, "story_id": self.story_id, "input_tokens": list(self.input_tokens),
                "masked_turn_indices": list(self.masked_turn_indices),
                "gold_turns": [list(t) for t in self.gold_turns], "gold_output": self.gold_output,
                "characters": list(self.characters), "mentions": [list(m) for m in self.mentions]}

    @classmethod
    def from_record(cls, record):
        return cls(id=record["id"], story_id=record["story_id"], input_tokens=list(record["input_tokens"]),
                   masked_turn_indices=list(record["masked_turn_indices"]),
                   gold_turns=[list(t) for t in record["gold_turns"]], characters=list(record["characters"]),
                   mentions=[tuple(m) for m in record["mentions"]])


@dataclass
class DialSpkExample:
    """
    Story with probes before the specified turns.
    Attributes:
        tokens (list[int]): Story tokens with one <probe> before each specified turn
        candidates (list[int]): Character ids in order of first mention
        specified_turns (list[int]): Turn indices in document order
        gold (list[int]): Index into candidates per specified turn
        probe_positions (list[int]): Position of each probe in tokens
        mentions (list[tuple]): (character_id, start, end) in probed coordinates
    """
    id: str
    story_id: str
    tokens: list
    candidates: list
    specified_turns: list
    gold: list
    probe_positions: list
    mentions: list = field(default_factory=list)

    def mention_index(self):
        positions = {cid: [] for cid in self.candidates}
        for cid, start, end in sorted(self.mentions, key=lambda m: m[1]):
            if cid in positions:
                positions[cid].extend(range(start, end))
        return [positions[cid] for cid in self.candidates]

    def first_mentions(self):
        """Position of the first mention token of each candidate."""
        return [positions[0] for positions in self.mention_index()]

    def to_record(self):
        return {"id": self.id, "story_id": self.story_id, "tokens": list(self.tokens),
                "candidates": list(self.candidates), "specified_turns": list(self.specified_turns),
                "gold": list(self.gold), "probe_positions": list(self.probe_positions),
                "mentions": [list(m) for m in self.mentions]}

    @classmethod
    def from_record(cls, record):
        return cls(id=record["id"], story_id=record["story_id"], tokens=list(record["tokens"]),
                   candidates=list(record["candidates"]), specified_turns=list(record["specified_turns"]),
                   gold=list(record["gold"]), probe_positions=list(record["probe_positions"]),
                   mentions=[tuple(m) for m in record["mentions"]])


EXAMPLE_TYPES = {"dialgen": DialGenExample, "dialspk": DialSpkExample}


def _story_rngs(count, seed):
    return [np.random.default_rng(s) for s in np.random.SeedSequence(seed).spawn(count)]


def build_dialgen_example(story, rng, mask_ratio=DEFAULT_MASK_RATIO):
    """
    Mask one story.
    Returns:
        tuple: (DialGenExample or None, skip reason or None)
    """
    characters = story.characters()
    if len(characters) < MIN_STORY_CHARACTERS:
        return None, f"mentions {len(characters)} characters, need {MIN_STORY_CHARACTERS}"
    if not story.dialogue_turns:
        return None, "has no dialogue turns"
    needed = mask_count(story.turn_count, mask_ratio)
    candidates = maskable_turns(story)
    if not candidates:
        return None, "no maskable turn outside the protected zones"
    if len(candidates) < needed:
        return None, f"only {len(candidates)} maskable turns, {needed} required"

    chosen = sorted(int(t) for t in rng.choice(candidates, size=needed, replace=False))
    spans = [story.dialogue_turns[t] for t in chosen]
    tokens, cursor = [], 0
    removals = []
    for start, end in spans:
        tokens.extend(story.tokens[cursor:start])
        tokens.append(MASK)
        cursor = end
        removals.append((end, 1 - (end - start)))
    tokens.extend(story.tokens[cursor:])
    mentions = [(cid, _shift(s, removals), _shift(e, removals)) for cid, s, e in story.mentions]
    example = DialGenExample(id=story.id, story_id=story.id, input_tokens=tokens, masked_turn_indices=chosen,
                             gold_turns=[list(story.tokens[s:e]) for s, e in spans],
                             characters=characters, mentions=mentions)
    return example, None


def build_dialgen_dataset(stories, mask_ratio=DEFAULT_MASK_RATIO, seed=0):
    """
    Build DialGen examples; stories that cannot satisfy the constraints are logged and skipped.
    """
    examples = []
    for story, rng in zip(stories, _story_rngs(len(stories), seed)):
        example, reason = build_dialgen_example(story, rng, mask_ratio)
        if example is None:
            log.warning("Skipping story %s for DialGen: %s", story.id, reason)
            continue
        examples.append(example)
    log.info("Built %d DialGen examples from %d stories (mask ratio %.2f)", len(examples), len(stories), mask_ratio)
    return examples


def build_dialspk_example(story, rng, probe_ratio=DEFAULT_PROBE_RATIO, speakers="gold"):
    """
    Insert probes into one story.
    Returns:
        tuple: (DialSpkExample or None, skip reason or None)
    Raises:
        DataError: when a known speaker is not among the story's mentioned characters
    """
    candidates = story.characters()
    if len(candidates) < MIN_CANDIDATES:
        return None, f"only {len(candidates)} candidate characters"
    speaker_map = story.speakers(speakers)
    eligible = [t for t in range(story.turn_count) if speaker_map.get(t, UNKNOWN_SPEAKER) != UNKNOWN_SPEAKER]
    for t in eligible:
        if speaker_map[t] not in candidates:
            raise DataError(f"story {story.id}: speaker {speaker_map[t]} of turn {t} is never mentioned")
    if not eligible:
        return None, "no turn has a known speaker"

    count = min(len(eligible), max(1, round_half_up(probe_ratio * len(eligible))))
    chosen = sorted(int(t) for t in rng.choice(eligible, size=count, replace=False))
    tokens, cursor, probes, insertions = [], 0, [], []
    for t in chosen:
        open_quote = story.dialogue_turns[t][0] - 1
        tokens.extend(story.tokens[cursor:open_quote])
        probes.append(len(tokens))
        tokens.append(PROBE)
        cursor = open_quote
        insertions.append((open_quote, 1))
    tokens.extend(story.tokens[cursor:])
    mentions = [(cid, _shift(s, insertions), _shift(e - 1, insertions) + 1) for cid, s, e in story.mentions]
    example = DialSpkExample(id=story.id, story_id=story.id, tokens=tokens, candidates=candidates,
                             specified_turns=chosen, gold=[candidates.index(speaker_map[t]) for t in chosen],
                             probe_positions=probes, mentions=mentions)
    return example, None


def build_dialspk_dataset(stories, probe_ratio=DEFAULT_PROBE_RATIO, seed=0, speakers="gold"):
    """
    Build DialSpk examples from gold or attributed speakers. Turns with unknown speakers are
    never specified; stories with fewer than two candidates are skipped.
    """
    examples = []
    for story, rng in zip(stories, _story_rngs(len(stories), seed)):
        example, reason = build_dialspk_example(story, rng, probe_ratio, speakers)
        if example is None:
            log.warning("Skipping story %s for DialSpk: %s", story.id, reason)
            continue
        examples.append(example)
    log.info("Built %d DialSpk examples from %d stories (probe ratio %.2f, %s speakers)",
             len(examples), len(stories), probe_ratio, speakers)
    return examples


def split_examples(examples, ratios=DEFAULT_SPLIT, seed=0):
    """
    Shuffle-split into train / valid / test; each split keeps corpus order.
    Raises:
        UsageError: when ratios are negative or do not sum to 1
    """
    ratios = tuple(float(r) for r in ratios)
    if len(ratios) != 3 or any(r < 0 for r in ratios) or abs(sum(ratios) - 1.0) > 1e-6:
        raise UsageError(f"split ratios must be three nonnegative numbers summing to 1, got {ratios}")
    order = np.random.default_rng(seed).permutation(len(examples))
    cut_train = int(np.floor(ratios[0] * len(examples) + 1e-9))
    cut_valid = cut_train + int(np.floor(ratios[1] * len(examples) + 1e-9))
    parts = (order[:cut_train], order[cut_train:cut_valid], order[cut_valid:])
    return {name: [examples[i] for i in sorted(part)] for name, part in zip(SPLIT_NAMES, parts)}


@dataclass
class Dataset:
    """A built dataset directory in memory."""
    task: str
    splits: dict
    vocab: Vocabulary
    lexicon: CharacterLexicon
    meta: dict = field(default_factory=dict)

    def split(self, name):
        if name not in self.splits:
            raise DataError(f"dataset has no '{name}' split")
        return self.splits[name]


DATASET_FILE = "dataset.json"


def save_dataset(directory, dataset):
    directory = Path(directory)
    for name, examples in dataset.splits.items():
        write_jsonl(directory / f"{name}.jsonl", [e.to_record() for e in examples])
    dataset.vocab.save(directory / "vocab.json")
    write_json(directory / "lexicon.json", dataset.lexicon.to_record())
    write_json(directory / DATASET_FILE, {"task": dataset.task, "splits": sorted(dataset.splits), **dataset.meta})


def load_dataset(directory):
    """Read a dataset directory written by save_dataset."""
    directory = Path(directory)
    if not (directory / DATASET_FILE).exists():
        raise DataError(f"{directory} is not a dataset directory (no {DATASET_FILE})")
    meta = read_json(directory / DATASET_FILE)
    task = meta.pop("task", None)
    if task not in EXAMPLE_TYPES:
        raise DataError(f"{directory}: unknown dataset task {task!r}")
    example_type = EXAMPLE_TYPES[task]
    splits = {name: [example_type.from_record(r) for r in read_jsonl(directory / f"{name}.jsonl")]
              for name in meta.pop("splits", SPLIT_NAMES)}
    return Dataset(task=task, splits=splits, vocab=Vocabulary.load(directory / "vocab.json"),
                   lexicon=CharacterLexicon.from_record(read_json(directory / "lexicon.json")), meta=meta)


def _input_tokens(example):
    return example.input_tokens if isinstance(example, DialGenExample) else example.tokens


def compute_dataset_stats(splits):
    """
    Per-split averages with the usual dataset-table row names.
    Args:
        splits (dict[str, list]): Split name -> examples of one task
    Returns:
        pd.DataFrame: rows are statistics, columns are splits
    """
    columns = {}
    for name, examples in splits.items():
        if not examples:
            continue
        rows = []
        for ex in examples:
            tokens = _input_tokens(ex)
            row = {"Avg. #Token (Input)": len(tokens),
                   "Avg. #Sentence (Input)": sum(1 for t in tokens if t in TERMINATOR_IDS),
                   "Avg. #Dialogue Turns (Input)": sum(1 for t in tokens if t == OPEN_QUOTE)}
            if isinstance(ex, DialGenExample):
                row["Avg. #Dialogue Turns (Input)"] -= len(ex.gold_turns)
                row["Avg. #Token (Output)"] = len(ex.gold_output)
                row["Avg. #Dialogue Turns (Output)"] = len(ex.gold_turns)
            else:
                row["Avg. #Specified Dialogue Turn"] = len(ex.specified_turns)
                row["Avg. #Candidate Character"] = len(ex.candidates)
            rows.append(row)
        column = pd.DataFrame(rows).mean()
        column["#Example"] = len(examples)
        columns[name] = column
    if not columns:
        raise DataError("cannot compute statistics of an empty dataset")
    frame = pd.DataFrame(columns)
    return frame.loc[["#Example"] + [r for r in frame.index if r != "#Example"]]


def validate_dialgen_example(example, original_length):
    """Raise DataError if an example breaks the placeholder invariants."""
    positions = example.mask_positions
    if len(positions) != len(example.gold_turns):
        raise DataError(f"{example.id}: {len(positions)} placeholders for {len(example.gold_turns)} gold turns")
    removed = 0
    for position, turn in zip(positions, example.gold_turns):
        original = position + removed
        if original - 1 < PROTECTED_HEAD or original + len(turn) >= original_length - PROTECTED_TAIL:
            raise DataError(f"{example.id}: placeholder at input position {position} lies in a protected zone")
        if example.input_tokens[position - 1] != OPEN_QUOTE or example.input_tokens[position + 1] != CLOSE_QUOTE:
            raise DataError(f"{example.id}: placeholder at {position} is not a whole quoted turn")
        removed += len(turn) - 1
