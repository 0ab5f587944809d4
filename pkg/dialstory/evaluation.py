"""
Automatic metrics for generated dialogue and speaker predictions.

- bleu_n: cumulative BLEU-n of one generated turn against its gold turn (clipped n-gram
  precisions of orders 1..n, geometric mean, brevity penalty). A precision with zero
  matches is smoothed to 1 / (total + 1); an empty candidate scores 0.
- distinct_n: distinct n-grams over total n-grams, pooled across all generated turns.
- dac_sac: turn-level and story-level speaker accuracy.
- MetricReport: the figures above as percentages, with the counts behind each.
"""

import logging
import math
from collections import Counter
from dataclasses import asdict, dataclass, field

import pandas as pd
from nltk.translate.bleu_score import brevity_penalty
from nltk.util import ngrams

from dialstory.errors import DataError

log = logging.getLogger(__name__)

BLEU_ORDERS = (1, 2)
DISTINCT_ORDERS = (2, 3, 4)


def modified_precision(candidate, reference, n):
    """Clipped n-gram matches and candidate n-gram total for one order."""
    candidate_counts = Counter(ngrams(candidate, n))
    reference_counts = Counter(ngrams(reference, n))
    matches = sum(min(count, reference_counts[gram]) for gram, count in candidate_counts.items())
    return matches, sum(candidate_counts.values())


def bleu_n(candidate, reference, n):
    """
    Sentence-level cumulative BLEU-n.
    Args:
        candidate (list): Generated tokens
        reference (list): Gold tokens
        n (int): Highest n-gram order
    Returns:
        float: score in [0, 1]
    Raises:
        DataError: for an empty reference or n < 1
    """
    if n < 1:
        raise DataError(f"BLEU order must be >= 1, got {n}")
    if not reference:
        raise DataError("BLEU needs a non-empty reference")
    candidate, reference = list(candidate), list(reference)
    if not candidate:
        return 0.0
    log_total = 0.0
    for order in range(1, n + 1):
        matches, total = modified_precision(candidate, reference, order)
        precision = matches / total if matches else 1.0 / (total + 1)
        log_total += math.log(precision)
    return brevity_penalty(len(reference), len(candidate)) * math.exp(log_total / n)


def distinct_n(turns, n):
    """
    Pooled Distinct-n over all turns.
    Returns:
        tuple: (score in [0, 1], distinct count, total count); score is 0 when total is 0
    """
    pooled = Counter()
    for turn in turns:
        pooled.update(ngrams(list(turn), n))
    total = sum(pooled.values())
    if total == 0:
        log.warning("Distinct-%d: no %d-grams in %d turns, reporting 0", n, n, len(turns))
        return 0.0, 0, 0
    return len(pooled) / total, len(pooled), total


@dataclass
class SpeakerAccuracy:
    """DAC / SAC as percentages with their numerators and denominators."""
    dac: float
    sac: float
    correct_turns: int
    total_turns: int
    correct_stories: int
    total_stories: int


def dac_sac(predictions, golds):
    """
    Speaker accuracy over stories.
    Args:
        predictions (dict[str, list[int]]): Story id -> predicted candidate index per turn
        golds (dict[str, list[int]]): Story id -> gold candidate index per turn
    Raises:
        DataError: for no stories, a story missing from either side or a length mismatch
    """
    if not golds:
        raise DataError("DAC/SAC needs at least one story")
    if set(predictions) != set(golds):
        missing = sorted(set(predictions) ^ set(golds))
        raise DataError(f"predictions and golds cover different stories: {missing[:5]}")
    correct_turns = total_turns = correct_stories = 0
    for story_id, gold in golds.items():
        predicted = predictions[story_id]
        if len(predicted) != len(gold):
            raise DataError(f"story {story_id}: {len(predicted)} predictions for {len(gold)} specified turns")
        hits = sum(int(p == g) for p, g in zip(predicted, gold))
        correct_turns += hits
        total_turns += len(gold)
        correct_stories += int(hits == len(gold))
    return SpeakerAccuracy(dac=100.0 * correct_turns / total_turns if total_turns else 0.0,
                           sac=100.0 * correct_stories / len(golds), correct_turns=correct_turns,
                           total_turns=total_turns, correct_stories=correct_stories, total_stories=len(golds))


@dataclass
class MetricReport:
    """
    Evaluation figures in percent. Entries not computed for a task stay None.
    counts holds the numerators / denominators behind every figure.
    """
    bleu1: float | None = None
    bleu2: float | None = None
    distinct2: float | None = None
    distinct3: float | None = None
    distinct4: float | None = None
    coherence_ratio: float | None = None
    dac: float | None = None
    sac: float | None = None
    param_count: int | None = None
    counts: dict = field(default_factory=dict)

    def validate(self):
        for name in ("bleu1", "bleu2", "distinct2", "distinct3", "distinct4", "coherence_ratio", "dac", "sac"):
            value = getattr(self, name)
            if value is not None and not 0.0 <= value <= 100.0 + 1e-9:
                raise DataError(f"metric {name}={value} outside [0, 100]")
        return self

    def to_dict(self):
        return asdict(self)

    def to_frame(self, model_name="model"):
        """One-row table using the usual column headings."""
        columns = {"#Param": self.param_count, "BLEU1": self.bleu1, "BLEU2": self.bleu2, "DIST2": self.distinct2,
                   "DIST3": self.distinct3, "DIST4": self.distinct4, "Coherence(%)": self.coherence_ratio,
                   "DAC(%)": self.dac, "SAC(%)": self.sac}
        columns = {k: v for k, v in columns.items() if v is not None}
        return pd.DataFrame([columns], index=pd.Index([model_name], name="Models"))


def generation_report(pairs, param_count=None):
    """
    BLEU-1/2 (macro-averaged over turns) and pooled Distinct-2/3/4.
    Args:
        pairs (list[tuple]): (generated turn, gold turn) token lists
    Raises:
        DataError: when there is nothing to score
    """
    if not pairs:
        raise DataError("no generated turns to score")
    counts = {"turns": len(pairs)}
    report = MetricReport(param_count=param_count)
    for n in BLEU_ORDERS:
        scores = [bleu_n(candidate, reference, n) for candidate, reference in pairs]
        setattr(report, f"bleu{n}", 100.0 * sum(scores) / len(scores))
        counts[f"bleu{n}_sum"] = sum(scores)
        matches = totals = 0
        for candidate, reference in pairs:
            m, t = modified_precision(list(candidate), list(reference), n)
            matches, totals = matches + m, totals + t
        counts[f"bleu{n}_micro_matches"] = matches
        counts[f"bleu{n}_micro_total"] = totals
    generated = [candidate for candidate, _ in pairs]
    for n in DISTINCT_ORDERS:
        score, distinct, total = distinct_n(generated, n)
        setattr(report, f"distinct{n}", 100.0 * score)
        counts[f"distinct{n}_distinct"] = distinct
        counts[f"distinct{n}_total"] = total
    report.counts = counts
    return report.validate()


def speaker_report(accuracy, param_count=None):
    report = MetricReport(dac=accuracy.dac, sac=accuracy.sac, param_count=param_count,
                          counts={"correct_turns": accuracy.correct_turns, "total_turns": accuracy.total_turns,
                                  "correct_stories": accuracy.correct_stories,
                                  "total_stories": accuracy.total_stories})
    return report.validate()
