"""
Story corpus: synthetic generation with known ground truth, plus the annotation pipeline
that works on any story.

This module provides:
- Story / CharacterLexicon / Corpus types and their JSON records
- A seeded generator of stories with interleaved narration and attributed dialogue
- extract_dialogue_turns: quote-delimited dialogue spans
- detect_mentions: longest-match lexicon lookup of character names
- attribute_speakers: nearest mention in the lead-in, then the following fragment
- Corpus statistics and annotation quality against generator ground truth
- Plain-text ingestion (one story per line plus a YAML name list)

Span convention: every span is [start, end) over token ids. A dialogue turn's span covers
its content only; the opening quote sits at start - 1 and the closing quote at end.
"""

# =============================================================================
# GLOBAL CONFIGURATION VARIABLES
# =============================================================================

UNKNOWN_SPEAKER = -1                      # Attribution result when no mention qualifies
MIN_STORY_CHARACTERS = 5                  # Distinct characters a usable story mentions
RATIO_MARGIN = 0.02                       # Keeps the drawn ratio target off the bounds
MAX_GENERATION_ATTEMPTS = 50              # Redraws per story before giving up
NARRATION_LENGTH = (4, 9)                 # Words per narration sentence, [low, high)
TERMINATOR_WEIGHTS = {".": 0.6, "?": 0.2, "!": 0.2}

# Word pools for synthetic text
NAME_ONSETS = ["Al", "Bri", "Cal", "Da", "El", "Fen", "Gar", "Hal", "Ira", "Jo", "Ka", "Lo",
               "Mar", "Ne", "Or", "Pe", "Ro", "Sa", "Tam", "Vi", "Wen", "Yo"]
NAME_ENDINGS = ["ra", "dan", "mir", "wyn", "sa", "tor", "lin", "bek", "na", "rick", "del", "vo"]
WORD_ONSETS = ["b", "d", "f", "g", "k", "l", "m", "n", "p", "r", "s", "t", "v", "z", "sh", "gr"]
WORD_NUCLEI = ["a", "e", "i", "o", "u", "oo"]
WORD_CODAS = ["", "n", "k", "sh", "rt", "m"]

NARRATION_WORDS = ["the", "wind", "moved", "across", "hill", "old", "house", "was", "quiet",
                   "rain", "fell", "on", "roof", "lamp", "burned", "low", "road", "turned",
                   "toward", "river", "evening", "came", "slowly", "door", "stood", "open",
                   "smoke", "rose", "from", "chimney", "dogs", "barked", "far", "away",
                   "market", "emptied", "light", "faded", "over", "fields"]
SPEECH_VERBS = ["said", "replied", "answered", "asked", "whispered", "added"]
FILLER_SENTENCES = [["there", "was", "a", "short", "pause", "."],
                    ["nobody", "moved", "for", "a", "while", "."],
                    ["the", "fire", "cracked", "in", "the", "grate", "."],
                    ["a", "clock", "ticked", "somewhere", "."]]
DISTRACTOR_WORDS = ("glanced", "at", "and")
CONNECTIVE = "with"

ATTRIBUTION_PATTERNS = ("pre", "post", "implicit")

# =============================================================================

import logging
from dataclasses import dataclass, field
from itertools import product

import numpy as np
import pandas as pd
import yaml

from dialstory.artifacts import read_json, read_jsonl, write_json, write_jsonl
from dialstory.errors import ConfigError, CorpusError, DataError
from dialstory.vocab import CLOSE_QUOTE, OPEN_QUOTE, TERMINATOR_IDS, UNK, Vocabulary, tokenize
from dialstory.workers import parallel_map

log = logging.getLogger(__name__)


def _speakers_to_list(speakers, count):
    if speakers is None:
        return None
    return [int(speakers.get(i, UNKNOWN_SPEAKER)) for i in range(count)]


def _speakers_from_list(values):
    if values is None:
        return None
    return {i: int(cid) for i, cid in enumerate(values)}


@dataclass
class Story:
    """
    One story as token ids with its annotations.
    Attributes:
        id (str): Stable identifier
        tokens (list[int]): Token ids
        dialogue_turns (list[tuple]): Ordered (start, end) content spans
        mentions (list[tuple]): (character_id, start, end) narration mentions
        gold_speakers (dict | None): turn index -> character id, synthetic stories only
        attributed_speakers (dict | None): turn index -> character id or UNKNOWN_SPEAKER
        quoted_mentions (list[tuple]): Name matches inside dialogue, kept apart from mentions
    """
    id: str
    tokens: list
    dialogue_turns: list
    mentions: list
    gold_speakers: dict | None = None
    attributed_speakers: dict | None = None
    quoted_mentions: list = field(default_factory=list)

    @property
    def turn_count(self):
        return len(self.dialogue_turns)

    def characters(self):
        """Distinct mentioned characters in order of first mention."""
        seen = []
        for cid, _, _ in sorted(self.mentions, key=lambda m: (m[1], m[2])):
            if cid not in seen:
                seen.append(cid)
        return seen

    def dialogue_token_count(self):
        return sum(end - start for start, end in self.dialogue_turns)

    def dialogue_ratio(self):
        return self.dialogue_token_count() / len(self.tokens) if self.tokens else 0.0

    def sentence_count(self):
        return sum(1 for token in self.tokens if token in TERMINATOR_IDS)

    def speakers(self, source="gold"):
        """Speaker map from 'gold' or 'attributed' annotations."""
        speakers = self.gold_speakers if source == "gold" else self.attributed_speakers
        if speakers is None:
            raise DataError(f"story {self.id} has no {source} speakers")
        return speakers

    def to_record(self):
        return {
            "id": self.id,
            "tokens": list(self.tokens),
            "dialogue_turns": [[s, e] for s, e in self.dialogue_turns],
            "mentions": [[c, s, e] for c, s, e in self.mentions],
            "quoted_mentions": [[c, s, e] for c, s, e in self.quoted_mentions],
            "gold_speakers": _speakers_to_list(self.gold_speakers, self.turn_count),
            "attributed_speakers": _speakers_to_list(self.attributed_speakers, self.turn_count),
        }

    @classmethod
    def from_record(cls, record):
        try:
            return cls(
                id=str(record["id"]),
                tokens=[int(t) for t in record["tokens"]],
                dialogue_turns=[(int(s), int(e)) for s, e in record["dialogue_turns"]],
                mentions=[(int(c), int(s), int(e)) for c, s, e in record["mentions"]],
                gold_speakers=_speakers_from_list(record.get("gold_speakers")),
                attributed_speakers=_speakers_from_list(record.get("attributed_speakers")),
                quoted_mentions=[(int(c), int(s), int(e)) for c, s, e in record.get("quoted_mentions", [])],
            )
        except (KeyError, TypeError, ValueError) as exc:
            raise DataError(f"malformed story record {record.get('id', '?')}: {exc}") from exc


@dataclass
class CharacterLexicon:
    """
    Character names and, for synthetic corpora, each character's speaking style.
    Attributes:
        entries (dict[str, int]): Name (space-separated tokens) -> character id
        styles (dict[int, list[str]]): Character id -> preferred dialogue words
        shared (list[str]): Dialogue words every character uses
    """
    entries: dict
    styles: dict = field(default_factory=dict)
    shared: list = field(default_factory=list)

    def names_of(self, cid):
        return [name for name, value in self.entries.items() if value == cid]

    def styles_disjoint(self):
        seen = set()
        for words in self.styles.values():
            if seen & set(words):
                return False
            seen.update(words)
        return True

    def to_record(self):
        return {"entries": dict(self.entries),
                "styles": {str(cid): list(words) for cid, words in sorted(self.styles.items())},
                "shared": list(self.shared)}

    @classmethod
    def from_record(cls, record):
        return cls(entries={str(k): int(v) for k, v in record["entries"].items()},
                   styles={int(k): list(v) for k, v in record.get("styles", {}).items()},
                   shared=list(record.get("shared", [])))


@dataclass
class Corpus:
    """Stories plus the lexicon and vocabulary their token ids refer to."""
    stories: list
    lexicon: CharacterLexicon
    vocab: Vocabulary


# =============================================================================
# Synthetic generation
# =============================================================================

def _pseudo_words(rng, count, taken):
    """Draw `count` unique two-syllable nonsense words not already in `taken`."""
    words = []
    taken = set(taken)
    while len(words) < count:
        word = (rng.choice(WORD_ONSETS) + rng.choice(WORD_NUCLEI) + rng.choice(WORD_ONSETS)
                + rng.choice(WORD_NUCLEI) + rng.choice(WORD_CODAS))
        if word not in taken:
            taken.add(word)
            words.append(str(word))
    return words


def build_lexicon(config, rng):
    """
    Draw character names and style vocabularies.
    In 'separable' mode every character gets its own disjoint style words; in
    'overlapping' mode style words come from one pool a third the separable size.
    """
    all_names = [a + b for a, b in product(NAME_ONSETS, NAME_ENDINGS)]
    if config.lexicon_size > len(all_names):
        raise ConfigError(f"corpus.lexicon_size: at most {len(all_names)} names available")
    picks = rng.choice(len(all_names), size=config.lexicon_size, replace=False)
    names = [all_names[i] for i in picks]

    taken = set(NARRATION_WORDS) | set(SPEECH_VERBS) | set(DISTRACTOR_WORDS) | {CONNECTIVE}
    taken.update(word for sentence in FILLER_SENTENCES for word in sentence)
    shared = _pseudo_words(rng, config.shared_vocab_size, taken)
    taken.update(shared)

    styles = {}
    if config.style_mode == "separable":
        for cid in range(config.lexicon_size):
            styles[cid] = _pseudo_words(rng, config.style_vocab_size, taken)
            taken.update(styles[cid])
    else:
        pool_size = max(config.style_vocab_size, config.lexicon_size * config.style_vocab_size // 3)
        pool = _pseudo_words(rng, pool_size, taken)
        for cid in range(config.lexicon_size):
            styles[cid] = [pool[i] for i in rng.choice(pool_size, size=config.style_vocab_size, replace=False)]
    return CharacterLexicon(entries={name: cid for cid, name in enumerate(names)}, styles=styles, shared=shared)


def generator_vocabulary(lexicon):
    """Every token the generator can emit, so ids do not depend on which stories were drawn."""
    words = list(NARRATION_WORDS) + list(SPEECH_VERBS) + list(DISTRACTOR_WORDS) + [CONNECTIVE, ":", ","]
    words += [word for sentence in FILLER_SENTENCES for word in sentence]
    words += list(lexicon.shared)
    for style in lexicon.styles.values():
        words += style
    for name in lexicon.entries:
        words += tokenize(name)
    return Vocabulary.build([words])


@dataclass
class _Piece:
    """A run of story tokens with offsets of the names and turn content it holds."""
    tokens: list
    names: list = field(default_factory=list)          # (cid, offset, length)
    quoted_names: list = field(default_factory=list)   # (cid, offset, length)
    content: tuple | None = None                       # (offset, length)
    speaker: int | None = None

    def add_name(self, cid, name_tokens, quoted=False):
        (self.quoted_names if quoted else self.names).append((cid, len(self.tokens), len(name_tokens)))
        self.tokens.extend(name_tokens)


class StoryGenerator:
    """
    Draws one story at a time. Each story is built from pieces (intro sentences, turn
    blocks, outro sentences); narration is then inserted in front of explicitly
    attributed turns until the dialogue-token ratio reaches a target drawn inside the
    configured bounds.
    """

    def __init__(self, config, lexicon):
        self.config = config
        self.lexicon = lexicon
        self.names = {cid: tokenize(name) for name, cid in lexicon.entries.items()}
        weights = np.array([config.pre_attribution_weight, config.post_attribution_weight,
                            config.implicit_weight], dtype=np.float64)
        self.pattern_weights = weights / weights.sum()

    # Sentences -----------------------------------------------------------------

    def _narration(self, rng, cids=()):
        piece = _Piece(tokens=[])
        if cids:
            piece.add_name(cids[0], self.names[cids[0]])
        piece.tokens.extend(str(w) for w in rng.choice(NARRATION_WORDS, size=rng.integers(*NARRATION_LENGTH)))
        if len(cids) > 1:
            piece.tokens.append(CONNECTIVE)
            piece.add_name(cids[1], self.names[cids[1]])
        piece.tokens.append(".")
        return piece

    def _mentioning_narration(self, rng, cast):
        count = int(rng.integers(0, 3))
        cids = [int(c) for c in rng.choice(cast, size=count, replace=False)] if count else []
        return self._narration(rng, cids)

    def _content(self, rng, piece, speaker, cast):
        """Append the quoted utterance of `speaker` to piece."""
        cfg = self.config
        piece.tokens.append("“")
        start = len(piece.tokens)
        if cfg.vocative_rate > 0 and rng.random() < cfg.vocative_rate:
            others = [c for c in cast if c != speaker]
            addressee = int(rng.choice(others))
            piece.add_name(addressee, self.names[addressee], quoted=True)
            piece.tokens.append(",")
        length = int(rng.integers(cfg.turn_length_min, cfg.turn_length_max + 1))
        style = self.lexicon.styles[speaker]
        for _ in range(length):
            pool = style if rng.random() < cfg.style_strength else self.lexicon.shared
            piece.tokens.append(str(rng.choice(pool)))
        piece.tokens.append(str(rng.choice(list(TERMINATOR_WEIGHTS), p=list(TERMINATOR_WEIGHTS.values()))))
        piece.content = (start, len(piece.tokens) - start)
        piece.tokens.append("”")
        piece.speaker = speaker

    def _turn_block(self, rng, pattern, speaker, cast):
        piece = _Piece(tokens=[])
        verb = str(rng.choice(SPEECH_VERBS))
        if pattern == "pre":
            piece.add_name(speaker, self.names[speaker])
            if rng.random() < self.config.distractor_rate:
                other = int(rng.choice([c for c in cast if c != speaker]))
                piece.tokens.extend(DISTRACTOR_WORDS[:2])
                piece.add_name(other, self.names[other])
                piece.tokens.append(DISTRACTOR_WORDS[2])
            piece.tokens.extend([verb, ":"])
            self._content(rng, piece, speaker, cast)
        elif pattern == "post":
            self._content(rng, piece, speaker, cast)
            piece.tokens.append(verb)
            piece.add_name(speaker, self.names[speaker])
            piece.tokens.append(".")
        else:
            # Continuation by the previous speaker; a mention-free sentence closes it.
            self._content(rng, piece, speaker, cast)
            piece.tokens.extend(FILLER_SENTENCES[int(rng.integers(len(FILLER_SENTENCES)))])
        return piece

    def _draft(self, rng, cast):
        """Intro, turn blocks and outro, plus the piece indices narration may precede."""
        cfg = self.config
        pieces = []
        order = list(cast)
        while order:
            take = min(len(order), int(rng.integers(1, 3)))
            pieces.append(self._narration(rng, order[:take]))
            order = order[take:]
        while sum(len(p.tokens) for p in pieces) < cfg.intro_tokens:
            pieces.append(self._narration(rng))

        slots = []
        turn_count = int(rng.integers(cfg.turns_min, cfg.turns_max + 1))
        previous = None
        for t in range(turn_count):
            weights = self.pattern_weights if t > 0 else self.pattern_weights[:2] / self.pattern_weights[:2].sum()
            pattern = ATTRIBUTION_PATTERNS[int(rng.choice(len(weights), p=weights))]
            speaker = previous if pattern == "implicit" else int(rng.choice(cast))
            if pattern != "implicit":
                slots.append(len(pieces))
            pieces.append(self._turn_block(rng, pattern, speaker, cast))
            previous = speaker

        slots.append(len(pieces))
        outro = []
        while sum(len(p.tokens) for p in outro) < cfg.outro_tokens:
            outro.append(self._narration(rng))
        pieces.extend(outro)
        return pieces, slots

    def generate(self, story_id, rng):
        """
        Draw one story.
        Raises:
            CorpusError: when no draw satisfies the ratio / length bounds, naming the bound
        """
        cfg = self.config
        reason = ""
        for _ in range(MAX_GENERATION_ATTEMPTS):
            cast_size = int(rng.integers(cfg.characters_min, cfg.characters_max + 1))
            cast = [int(c) for c in rng.choice(len(self.lexicon.entries), size=cast_size, replace=False)]
            pieces, slots = self._draft(rng, cast)
            dialogue = sum(p.content[1] for p in pieces if p.content)
            total = sum(len(p.tokens) for p in pieces)
            upper = min(cfg.ratio_max - RATIO_MARGIN, dialogue / total)
            lower = max(cfg.ratio_min + RATIO_MARGIN, dialogue / cfg.max_story_tokens)
            if dialogue / total < cfg.ratio_min:
                reason = f"ratio_min={cfg.ratio_min}: draft dialogue ratio {dialogue / total:.3f} is already below it"
                continue
            if lower > upper:
                reason = (f"max_story_tokens={cfg.max_story_tokens}: too small to dilute {dialogue} dialogue "
                          f"tokens below ratio_max={cfg.ratio_max}")
                continue
            target = rng.uniform(lower, upper) if upper > lower else upper
            inserted = {}
            while dialogue / total > target:
                sentence = self._mentioning_narration(rng, cast)
                if dialogue / (total + len(sentence.tokens)) < cfg.ratio_min:
                    break
                inserted.setdefault(int(rng.choice(slots)), []).append(sentence)
                total += len(sentence.tokens)
            ratio = dialogue / total
            if not cfg.ratio_min <= ratio <= cfg.ratio_max:
                reason = f"ratio_max={cfg.ratio_max}: could not bring dialogue ratio {ratio:.3f} into bounds"
                continue
            if total > cfg.max_story_tokens:
                reason = f"max_story_tokens={cfg.max_story_tokens}: story needed {total} tokens"
                continue
            ordered = []
            for index, piece in enumerate(pieces):
                ordered.extend(inserted.get(index, []))
                ordered.append(piece)
            return _assemble(story_id, ordered)
        raise CorpusError(f"generator settings infeasible for {story_id} after "
                          f"{MAX_GENERATION_ATTEMPTS} attempts: {reason}")


def _assemble(story_id, pieces):
    """Concatenate pieces into a story over string tokens (ids are filled in later)."""
    tokens, mentions, quoted, turns, speakers = [], [], [], [], {}
    for piece in pieces:
        offset = len(tokens)
        tokens.extend(piece.tokens)
        mentions.extend((cid, offset + o, offset + o + n) for cid, o, n in piece.names)
        quoted.extend((cid, offset + o, offset + o + n) for cid, o, n in piece.quoted_names)
        if piece.content is not None:
            speakers[len(turns)] = piece.speaker
            turns.append((offset + piece.content[0], offset + piece.content[0] + piece.content[1]))
    return Story(id=story_id, tokens=tokens, dialogue_turns=turns, mentions=sorted(mentions, key=lambda m: m[1]),
                 gold_speakers=speakers, quoted_mentions=sorted(quoted, key=lambda m: m[1]))


def _generate_one(job):
    index, seed_sequence, config, lexicon, vocab = job
    story = StoryGenerator(config, lexicon).generate(f"story-{index:05d}", np.random.default_rng(seed_sequence))
    story.tokens = vocab.encode(story.tokens)
    return story


def generate_synthetic_corpus(config, seed=None, workers=1):
    """
    Generate a corpus with full ground truth (turn spans, mentions, gold speakers).
    Args:
        config (GeneratorConfig): Counts, ratio bounds, style settings
        seed (int, optional): Overrides config.seed
        workers (int): Worker processes for per-story generation
    Returns:
        Corpus: stories in index order, lexicon and vocabulary
    """
    seed = config.seed if seed is None else seed
    root = np.random.SeedSequence(seed)
    lexicon_seed, *story_seeds = root.spawn(config.story_count + 1)
    lexicon = build_lexicon(config, np.random.default_rng(lexicon_seed))
    vocab = generator_vocabulary(lexicon)
    jobs = [(i, s, config, lexicon, vocab) for i, s in enumerate(story_seeds)]
    stories = parallel_map(_generate_one, jobs, workers)
    log.info("Generated %d stories over %d lexicon characters (%s mode, seed %d)",
             len(stories), len(lexicon.entries), config.style_mode, seed)
    return Corpus(stories=stories, lexicon=lexicon, vocab=vocab)


# =============================================================================
# Annotation
# =============================================================================

def extract_dialogue_turns(raw_tokens):
    """
    Find every quoted span.
    Args:
        raw_tokens (list[int]): Token ids
    Returns:
        list[tuple]: (start, end) content spans in document order, quotes excluded
    Raises:
        CorpusError: nested, stray or unclosed quote, at the offending token index
    """
    spans = []
    open_at = None
    for i, token in enumerate(raw_tokens):
        if token == OPEN_QUOTE:
            if open_at is not None:
                raise CorpusError("nested opening quote", position=i)
            open_at = i
        elif token == CLOSE_QUOTE:
            if open_at is None:
                raise CorpusError("closing quote without an opening quote", position=i)
            spans.append((open_at + 1, i))
            open_at = None
    if open_at is not None:
        raise CorpusError("unclosed quote", position=open_at)
    return spans


@dataclass
class MentionScan:
    """Result of detect_mentions: narration mentions and, separately, in-quote matches."""
    narration: list
    quoted: list


def _name_index(lexicon, vocab):
    """First token id -> [(name ids, cid)] with longer names first."""
    index = {}
    for name, cid in lexicon.entries.items():
        ids = vocab.encode(tokenize(name))
        if not ids or UNK in ids:
            continue
        index.setdefault(ids[0], []).append((ids, cid))
    for candidates in index.values():
        candidates.sort(key=lambda entry: -len(entry[0]))
    return index


def detect_mentions(tokens, lexicon, vocab):
    """
    Leftmost-longest exact matching of lexicon names.
    Args:
        tokens (list[int]): Story token ids
        lexicon (CharacterLexicon): Names to look for
        vocab (Vocabulary): Maps name text to ids
    Returns:
        MentionScan: (cid, start, end) matches in narration and inside quotes
    """
    if not lexicon.entries:
        raise DataError("detect_mentions needs a non-empty lexicon")
    index = _name_index(lexicon, vocab)
    inside = np.zeros(len(tokens), dtype=bool)
    for start, end in extract_dialogue_turns(tokens):
        inside[start:end] = True

    narration, quoted = [], []
    i = 0
    while i < len(tokens):
        match = None
        for ids, cid in index.get(tokens[i], ()):
            if tokens[i:i + len(ids)] == ids:
                match = (cid, i, i + len(ids))
                break
        if match is None:
            i += 1
            continue
        (quoted if inside[i] else narration).append(match)
        i = match[2]
    return MentionScan(narration=narration, quoted=quoted)


def _lead_in(tokens, open_quote):
    """Start of the narration fragment that ends at the opening quote."""
    i = open_quote
    while i > 0 and tokens[i - 1] not in TERMINATOR_IDS and tokens[i - 1] not in (OPEN_QUOTE, CLOSE_QUOTE):
        i -= 1
    return i


def _following(tokens, close_quote):
    """End of the narration fragment that starts after the closing quote."""
    i = close_quote + 1
    while i < len(tokens) and tokens[i] != OPEN_QUOTE:
        if tokens[i] in TERMINATOR_IDS:
            return i + 1
        i += 1
    return i


def attribute_speakers(story):
    """
    Guess each turn's speaker from the surrounding narration.
    The lead-in fragment (same sentence, before the opening quote) takes precedence; the
    mention closest to the quote wins. Failing that the fragment after the closing quote is
    used, again nearest first. Turns with neither get UNKNOWN_SPEAKER.
    Returns:
        dict: turn index -> character id or UNKNOWN_SPEAKER
    """
    tokens = story.tokens
    mentions = sorted(story.mentions, key=lambda m: m[1])
    result = {}
    for t, (start, end) in enumerate(story.dialogue_turns):
        open_quote, close_quote = start - 1, end
        lead_start = _lead_in(tokens, open_quote)
        before = [m for m in mentions if m[1] >= lead_start and m[2] <= open_quote]
        if before:
            result[t] = max(before, key=lambda m: m[2])[0]
            continue
        follow_end = _following(tokens, close_quote)
        after = [m for m in mentions if m[1] > close_quote and m[2] <= follow_end]
        result[t] = min(after, key=lambda m: m[1])[0] if after else UNKNOWN_SPEAKER
    return result


def annotate_story(story, lexicon, vocab):
    """Re-derive turns, mentions and attributed speakers from the tokens alone."""
    scan = detect_mentions(story.tokens, lexicon, vocab)
    annotated = Story(id=story.id, tokens=list(story.tokens), dialogue_turns=extract_dialogue_turns(story.tokens),
                      mentions=scan.narration, gold_speakers=story.gold_speakers, quoted_mentions=scan.quoted)
    annotated.attributed_speakers = attribute_speakers(annotated)
    return annotated


def _annotate_job(job):
    story, lexicon, vocab = job
    try:
        return annotate_story(story, lexicon, vocab)
    except CorpusError as exc:
        return exc


def annotate_corpus(corpus, workers=1):
    """
    Annotate every story. Stories that fail (for example unbalanced quotes) are logged
    and dropped; an all-failed corpus raises DataError.
    """
    results = parallel_map(_annotate_job, [(s, corpus.lexicon, corpus.vocab) for s in corpus.stories], workers)
    stories = []
    for story, result in zip(corpus.stories, results):
        if isinstance(result, CorpusError):
            log.warning("Skipping story %s: %s", story.id, result)
        else:
            stories.append(result)
    if corpus.stories and not stories:
        raise DataError("annotation failed for every story")
    log.info("Annotated %d of %d stories", len(stories), len(corpus.stories))
    return Corpus(stories=stories, lexicon=corpus.lexicon, vocab=corpus.vocab)


@dataclass
class AnnotationQuality:
    """How well the annotation heuristics recover generator ground truth."""
    attributed_turns: int
    correct_turns: int
    unknown_turns: int
    total_turns: int
    label_dac: float
    label_sac: float
    mention_precision: float
    mention_recall: float
    span_agreement: float

    @property
    def speaker_accuracy(self):
        return 100.0 * self.correct_turns / self.attributed_turns if self.attributed_turns else 0.0

    def to_frame(self):
        rows = {
            "Speaker accuracy (attributed turns, %)": self.speaker_accuracy,
            "Unknown turns": self.unknown_turns,
            "Total turns": self.total_turns,
            "Auto-label DAC (%)": self.label_dac,
            "Auto-label SAC (%)": self.label_sac,
            "Mention precision (%)": self.mention_precision,
            "Mention recall (%)": self.mention_recall,
            "Turn span agreement (%)": self.span_agreement,
        }
        return pd.DataFrame({"Value": rows})

    def to_dict(self):
        return {"speaker_accuracy": self.speaker_accuracy, "attributed_turns": self.attributed_turns,
                "correct_turns": self.correct_turns, "unknown_turns": self.unknown_turns,
                "total_turns": self.total_turns, "label_dac": self.label_dac, "label_sac": self.label_sac,
                "mention_precision": self.mention_precision, "mention_recall": self.mention_recall,
                "span_agreement": self.span_agreement}


def annotation_quality(reference, annotated):
    """
    Compare annotated stories with the generator's ground truth, matched by story id.
    Unknown attributions count as wrong for the auto-label DAC / SAC.
    """
    from dialstory.evaluation import dac_sac

    by_id = {story.id: story for story in reference}
    attributed = correct = unknown = total = 0
    predictions, golds = {}, {}
    true_mentions = found_mentions = hit_mentions = 0
    span_hits = 0
    for story in annotated:
        gold_story = by_id.get(story.id)
        if gold_story is None or gold_story.gold_speakers is None:
            continue
        gold = gold_story.gold_speakers
        auto = story.attributed_speakers or {}
        order = sorted(gold)
        predictions[story.id] = [auto.get(t, UNKNOWN_SPEAKER) for t in order]
        golds[story.id] = [gold[t] for t in order]
        for t in order:
            total += 1
            guess = auto.get(t, UNKNOWN_SPEAKER)
            if guess == UNKNOWN_SPEAKER:
                unknown += 1
                continue
            attributed += 1
            correct += int(guess == gold[t])
        expected, detected = set(gold_story.mentions), set(story.mentions)
        true_mentions += len(expected)
        found_mentions += len(detected)
        hit_mentions += len(expected & detected)
        span_hits += int(list(story.dialogue_turns) == list(gold_story.dialogue_turns))
    if not predictions:
        raise DataError("no annotated story has ground-truth speakers to compare against")
    report = dac_sac(predictions, golds)
    return AnnotationQuality(
        attributed_turns=attributed, correct_turns=correct, unknown_turns=unknown, total_turns=total,
        label_dac=report.dac, label_sac=report.sac,
        mention_precision=100.0 * hit_mentions / found_mentions if found_mentions else 0.0,
        mention_recall=100.0 * hit_mentions / true_mentions if true_mentions else 0.0,
        span_agreement=100.0 * span_hits / len(predictions),
    )


# =============================================================================
# Statistics
# =============================================================================

@dataclass
class CorpusStats:
    """Per-story averages, reported with the usual corpus-table row names."""
    story_count: int
    avg_tokens: float
    avg_dialogue_tokens: float
    avg_sentences: float
    avg_dialogue_turns: float
    avg_characters: float
    avg_dialogue_ratio: float

    def to_frame(self):
        rows = {
            "#Story": self.story_count,
            "Avg. #Token": self.avg_tokens,
            "Avg. #Dialogue Token": self.avg_dialogue_tokens,
            "Avg. #Sentence": self.avg_sentences,
            "Avg. #Dialogue Turn": self.avg_dialogue_turns,
            "Avg. #Character": self.avg_characters,
            "Avg. Dialogue Ratio": self.avg_dialogue_ratio,
        }
        return pd.DataFrame({"Value": rows})

    def to_table(self):
        return self.to_frame().to_string(float_format=lambda v: f"{v:.2f}")


def compute_stats(stories):
    """
    Average corpus statistics. Dialogue tokens are averaged per turn within a story, then
    across stories; sentences are counted by sentence-final punctuation.
    Raises:
        DataError: for an empty corpus
    """
    if not stories:
        raise DataError("cannot compute statistics of an empty corpus")
    frame = pd.DataFrame([{
        "tokens": len(s.tokens),
        "turn_tokens": s.dialogue_token_count() / s.turn_count if s.turn_count else 0.0,
        "sentences": s.sentence_count(),
        "turns": s.turn_count,
        "characters": len(s.characters()),
        "ratio": s.dialogue_ratio(),
    } for s in stories])
    means = frame.mean()
    return CorpusStats(story_count=len(stories), avg_tokens=float(means["tokens"]),
                       avg_dialogue_tokens=float(means["turn_tokens"]), avg_sentences=float(means["sentences"]),
                       avg_dialogue_turns=float(means["turns"]), avg_characters=float(means["characters"]),
                       avg_dialogue_ratio=float(means["ratio"]))


# =============================================================================
# Persistence and plain-text ingestion
# =============================================================================

STORIES_FILE = "stories.jsonl"
LEXICON_FILE = "lexicon.json"
VOCAB_FILE = "vocab.json"


def save_corpus(corpus, directory):
    write_jsonl(directory / STORIES_FILE, [story.to_record() for story in corpus.stories])
    write_json(directory / LEXICON_FILE, corpus.lexicon.to_record())
    corpus.vocab.save(directory / VOCAB_FILE)


def load_corpus(directory):
    """Read a corpus directory written by save_corpus."""
    stories = [Story.from_record(r) for r in read_jsonl(directory / STORIES_FILE)]
    lexicon = CharacterLexicon.from_record(read_json(directory / LEXICON_FILE))
    vocab = Vocabulary.load(directory / VOCAB_FILE)
    return Corpus(stories=stories, lexicon=lexicon, vocab=vocab)


def load_name_list(path):
    """
    Read character names from YAML: either a list (one character per name) or a
    mapping name -> id (aliases share an id).
    """
    try:
        with open(path, "r", encoding="utf-8") as handle:
            payload = yaml.safe_load(handle)
    except FileNotFoundError as exc:
        raise DataError(f"name list not found: {path}") from exc
    except yaml.YAMLError as exc:
        raise DataError(f"{path}: YAML parse error: {exc}") from exc
    if isinstance(payload, dict) and "characters" in payload:
        payload = payload["characters"]
    if isinstance(payload, list):
        return CharacterLexicon(entries={str(name): cid for cid, name in enumerate(payload)})
    if isinstance(payload, dict):
        return CharacterLexicon(entries={str(name): int(cid) for name, cid in payload.items()})
    raise DataError(f"{path}: expected a list of names or a name -> id mapping")


def read_text_corpus(text_path, names_path):
    """
    Ingest plain UTF-8 text, one story per non-empty line. Quotes may be straight or
    curly. Turns and mentions are left empty; run annotate_corpus next.
    """
    lexicon = load_name_list(names_path)
    try:
        with open(text_path, "r", encoding="utf-8") as handle:
            lines = [line.strip() for line in handle if line.strip()]
    except FileNotFoundError as exc:
        raise DataError(f"text file not found: {text_path}") from exc
    token_lists = [tokenize(line) for line in lines]
    vocab = Vocabulary.build(token_lists + [tokenize(name) for name in lexicon.entries])
    stories = [Story(id=f"text-{i:05d}", tokens=vocab.encode(tokens), dialogue_turns=[], mentions=[])
               for i, tokens in enumerate(token_lists)]
    log.info("Read %d stories from %s", len(stories), text_path)
    return Corpus(stories=stories, lexicon=lexicon, vocab=vocab)
