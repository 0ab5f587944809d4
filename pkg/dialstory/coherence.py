"""
Coherence classifier: tells original stories (label 1) from copies whose dialogue turns
were reordered in place (label 0). Narration is left untouched; only the turn contents
trade places. A generated story counts as coherent when P(coherent) is strictly greater
than the threshold (0.5).
"""

# =============================================================================
# GLOBAL CONFIGURATION VARIABLES
# =============================================================================

DERANGEMENT_ATTEMPTS = 100                # Permutation redraws before falling back to a rotation
POSITIVE, NEGATIVE = 1, 0

# =============================================================================

import logging
from dataclasses import dataclass, field

import numpy as np
import pandas as pd
from scipy.special import expit

from dialstory.checkpoint import load_checkpoint
from dialstory.config import ModelConfig, from_mapping
from dialstory.corpus import extract_dialogue_turns
from dialstory.errors import DataError
from dialstory.model import Linear, TransformerBase
from dialstory.numerics import backward, binary_cross_entropy_with_logits, dropout, no_grad
from dialstory.optim import Adam

log = logging.getLogger(__name__)


def derangement(count, rng):
    """A permutation of range(count) with no fixed point (identity for count < 2)."""
    if count < 2:
        return np.arange(count)
    for _ in range(DERANGEMENT_ATTEMPTS):
        perm = rng.permutation(count)
        if not np.any(perm == np.arange(count)):
            return perm
    return np.roll(np.arange(count), 1)


def shuffle_dialogue(tokens, spans, rng):
    """Return tokens with the contents of `spans` permuted among themselves."""
    order = derangement(len(spans), rng)
    out, cursor = [], 0
    for slot, (start, end) in enumerate(spans):
        out.extend(tokens[cursor:start])
        source_start, source_end = spans[order[slot]]
        out.extend(tokens[source_start:source_end])
        cursor = end
    out.extend(tokens[cursor:])
    return out


def make_coherence_pairs(token_lists, rng):
    """
    One positive and one shuffled negative per story with at least two turns.
    Returns:
        list[tuple]: (tokens, label)
    """
    pairs = []
    skipped = 0
    for tokens in token_lists:
        spans = extract_dialogue_turns(tokens)
        if len(spans) < 2:
            skipped += 1
            continue
        pairs.append((list(tokens), POSITIVE))
        pairs.append((shuffle_dialogue(tokens, spans, rng), NEGATIVE))
    if skipped:
        log.warning("Skipped %d stories with fewer than two dialogue turns", skipped)
    return pairs


class CoherenceClassifier(TransformerBase):
    """Encoder, mean pooling over positions, one logit."""

    def __init__(self, config, seed=0, threshold=0.5):
        super().__init__(config, seed)
        self.threshold = threshold
        self.head = Linear(self.store, "classifier", config.model_dim, 1)

    def logit(self, tokens):
        """Only the first max_sequence_length tokens are scored; longer inputs are cut with a warning."""
        tokens = list(tokens)
        limit = self.config.max_sequence_length
        if len(tokens) > limit:
            log.warning("Coherence input of %d tokens truncated to max_sequence_length=%d", len(tokens), limit)
            tokens = tokens[:limit]
        pooled = self.encode(tokens).mean(axis=0, keepdims=True)
        return self.head(dropout(pooled, self.config.dropout, self.dropout_rng, self.training))

    def probability(self, tokens):
        """P(coherent) in eval mode."""
        was_training = self.training
        self.eval()
        try:
            with no_grad():
                return float(expit(self.logit(tokens).data.reshape(-1)[0]))
        finally:
            self.training = was_training

    def is_coherent(self, tokens):
        return self.probability(tokens) > self.threshold

    def header(self):
        header = super().header()
        header["threshold"] = self.threshold
        return header

    @classmethod
    def from_checkpoint(cls, path):
        header, params, _ = load_checkpoint(path)
        if header.get("model_class") != cls.__name__:
            raise DataError(f"{path} holds a {header.get('model_class')}, not a {cls.__name__}")
        model = cls(from_mapping(ModelConfig, "model", header["model_config"]), seed=int(header.get("seed", 0)),
                    threshold=float(header.get("threshold", 0.5)))
        model.load_arrays(params)
        return model


@dataclass
class ClassifierFit:
    """Outcome of classifier training."""
    classifier: CoherenceClassifier
    held_out_accuracy: float
    pairwise_accuracy: float
    train_pairs: int
    held_out_pairs: int
    history: list = field(default_factory=list)


def classification_accuracy(classifier, pairs):
    if not pairs:
        return 0.0
    hits = sum(int(classifier.is_coherent(tokens) == bool(label)) for tokens, label in pairs)
    return 100.0 * hits / len(pairs)


def pairwise_accuracy(classifier, pairs):
    """Share of (original, shuffled) pairs where the original gets the higher probability."""
    positives = [tokens for tokens, label in pairs if label == POSITIVE]
    negatives = [tokens for tokens, label in pairs if label == NEGATIVE]
    if not positives:
        return 0.0
    wins = sum(int(classifier.probability(p) > classifier.probability(n)) for p, n in zip(positives, negatives))
    return 100.0 * wins / len(positives)


def train_coherence_classifier(token_lists, vocab_size, config, seed=None):
    """
    Build shuffled pairs, hold out a share of the stories and train with binary
    cross-entropy; the parameters with the best held-out accuracy are kept.
    Args:
        token_lists (list[list[int]]): Original stories as token ids
        vocab_size (int): Vocabulary size of the ids
        config (CoherenceConfig): Classifier settings
        seed (int, optional): Overrides config.seed
    Returns:
        ClassifierFit
    """
    seed = config.seed if seed is None else seed
    pair_seed, split_seed, model_seed, shuffle_seed = np.random.SeedSequence(seed).spawn(4)
    pairs = make_coherence_pairs(token_lists, np.random.default_rng(pair_seed))
    if len(pairs) < 4:
        raise DataError("need at least two stories with two or more dialogue turns to train the classifier")

    story_count = len(pairs) // 2
    held_out = max(1, int(round(config.valid_fraction * story_count)))
    order = np.random.default_rng(split_seed).permutation(story_count)
    held_ids, train_ids = set(order[:held_out].tolist()), order[held_out:]
    train_pairs = [pairs[2 * i + k] for i in sorted(train_ids.tolist()) for k in (0, 1)]
    held_pairs = [pairs[2 * i + k] for i in sorted(held_ids) for k in (0, 1)]

    classifier = CoherenceClassifier(config.model_config(vocab_size), seed=int(model_seed.generate_state(1)[0]),
                                     threshold=config.threshold)
    optimizer = Adam(classifier.named_parameters(), config.learning_rate)
    rng = np.random.default_rng(shuffle_seed)
    best_accuracy, best_arrays, history = -1.0, None, []
    for epoch in range(config.epochs):
        classifier.train()
        losses = []
        batch_order = rng.permutation(len(train_pairs))
        for begin in range(0, len(batch_order), config.batch_size):
            batch = [train_pairs[i] for i in batch_order[begin:begin + config.batch_size]]
            total = None
            for tokens, label in batch:
                loss = binary_cross_entropy_with_logits(classifier.logit(tokens), np.array([[label]]))
                total = loss if total is None else total + loss
            total = total * (1.0 / len(batch))
            backward(total)
            optimizer.step()
            losses.append(total.item())
        accuracy = classification_accuracy(classifier, held_pairs)
        history.append({"epoch": epoch, "loss": float(np.mean(losses)), "held_out_accuracy": accuracy})
        log.info("Coherence classifier epoch %d: loss %.4f, held-out accuracy %.2f%%", epoch, np.mean(losses), accuracy)
        if accuracy > best_accuracy:
            best_accuracy = accuracy
            best_arrays = {name: array.copy() for name, array in classifier.store.arrays().items()}
    classifier.load_arrays(best_arrays)
    classifier.eval()
    return ClassifierFit(classifier=classifier, held_out_accuracy=best_accuracy,
                         pairwise_accuracy=pairwise_accuracy(classifier, held_pairs),
                         train_pairs=len(train_pairs), held_out_pairs=len(held_pairs), history=history)


@dataclass
class CoherenceResult:
    """Coherence score in percent with the per-story probabilities behind it."""
    ratio: float
    coherent: int
    total: int
    probabilities: list


def coherence_score(filled_stories, classifier):
    """
    Percentage of filled stories (generated turns placed into the input) classified as
    coherent, i.e. with P(coherent) strictly above the threshold.
    """
    probabilities = [classifier.probability(tokens) for tokens in filled_stories]
    coherent = sum(int(p > classifier.threshold) for p in probabilities)
    ratio = 100.0 * coherent / len(probabilities) if probabilities else 0.0
    return CoherenceResult(ratio=ratio, coherent=coherent, total=len(probabilities), probabilities=probabilities)


def coherence_by_mask_count(mask_counts, result, threshold=0.5):
    """
    Coherence ratio grouped by the number of masked turns per example.
    Returns:
        pd.DataFrame: index = masked turns, columns = examples, coherence (%)
    """
    frame = pd.DataFrame({"masked_turns": list(mask_counts), "probability": result.probabilities})
    frame["coherent"] = frame["probability"] > threshold
    grouped = frame.groupby("masked_turns").agg(examples=("coherent", "size"), coherent=("coherent", "sum"))
    grouped["coherence (%)"] = 100.0 * grouped["coherent"] / grouped["examples"]
    return grouped
