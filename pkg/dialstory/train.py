"""
Training loops for DialGen and DialSpk.

One step = one shuffled mini-batch: per-example losses are summed, divided by the batch
size and differentiated once, then Adam updates every parameter. Each example is run at its
own length, so there are no pad positions to mask.

Run directory (when out_dir is given):
    metrics.jsonl                per-step {step, epoch, loss, lr}, per-window coverage rows,
                                 per-epoch validation rows
    checkpoints/epoch-NNN.npz    every checkpoint_every epochs
    best.npz                     lowest validation loss so far
    final.npz                    last step, with optimizer state
"""

import dataclasses
import logging
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from dialstory.artifacts import JsonlLog
from dialstory.config import RunConfig
from dialstory.errors import DataError, NumericalError
from dialstory.model import DialogueModel
from dialstory.numerics import backward, cross_entropy, no_grad
from dialstory.optim import Adam

log = logging.getLogger(__name__)

CHECKPOINT_DIR = "checkpoints"
METRICS_FILE = "metrics.jsonl"


def dialgen_forward(example, model):
    """Teacher-forced summed NLL over gold tokens (separators and </s> included) plus traces."""
    logits, targets, traces = model.dialgen_logits(example)
    return cross_entropy(logits, targets), traces


def dialgen_loss(example, model):
    """L = -sum_n log P(d_n | d_<n)."""
    return dialgen_forward(example, model)[0]


def dialspk_loss(example, model):
    """
    Sum over specified turns of the cross-entropy between the softmaxed candidate scores and
    the gold candidate.
    Raises:
        DataError: when a gold index is outside the candidate list
    """
    if not example.gold:
        raise DataError(f"{example.id}: no specified turns")
    bad = [g for g in example.gold if not 0 <= g < len(example.candidates)]
    if bad:
        raise DataError(f"{example.id}: gold index {bad[0]} outside {len(example.candidates)} candidates")
    return cross_entropy(model.speaker_logits(example), np.asarray(example.gold, dtype=np.int64))


LOSSES = {"dialgen": dialgen_loss, "dialspk": dialspk_loss}


@dataclass
class CoverageReport:
    """Share of each story's characters the decoder selected at least once in a window."""
    window: int
    first_step: int
    last_step: int
    per_story: dict

    @property
    def mean(self):
        return float(np.mean(list(self.per_story.values()))) if self.per_story else 0.0

    def to_record(self):
        return {"coverage": self.mean, "window": self.window, "first_step": self.first_step,
                "last_step": self.last_step, "stories": len(self.per_story)}


class CoverageTracker:
    """Accumulates per-story selection sets and closes a report every `window` steps."""

    def __init__(self, window):
        self.window = window
        self.selected = {}
        self.sizes = {}
        self.reports = []

    def add(self, story_id, character_count, traces):
        self.sizes[story_id] = character_count
        self.selected.setdefault(story_id, set()).update(t.selected for t in traces)

    def step(self, step):
        """Call after every optimizer step; returns the report when a window closes."""
        if step % self.window:
            return None
        report = CoverageReport(
            window=len(self.reports), first_step=step - self.window + 1, last_step=step,
            per_story={sid: len(chosen) / self.sizes[sid] for sid, chosen in sorted(self.selected.items())})
        self.reports.append(report)
        self.selected, self.sizes = {}, {}
        return report


@dataclass
class TrainResult:
    model: DialogueModel
    steps: int
    history: list = field(default_factory=list)
    coverage: list = field(default_factory=list)
    best_epoch: int | None = None
    best_valid_loss: float | None = None


def evaluate_loss(model, examples, task):
    """Mean per-example loss in eval mode without recording the tape."""
    if not examples:
        return None
    loss_fn = LOSSES[task]
    was_training = model.training
    model.eval()
    try:
        with no_grad():
            total = sum(loss_fn(example, model).item() for example in examples)
    finally:
        model.training = was_training
    return total / len(examples)


def _resolve_model_config(run_config, vocab_size):
    model_config = run_config.model
    if model_config.vocab_size == 0:
        model_config = dataclasses.replace(model_config, vocab_size=vocab_size)
    elif model_config.vocab_size != vocab_size:
        raise DataError(f"model.vocab_size={model_config.vocab_size} but the dataset vocabulary "
                        f"has {vocab_size} tokens")
    return model_config


def train_task(dataset, run_config: RunConfig, out_dir=None, baseline=False):
    """
    Train one model on dataset.splits['train'].
    Args:
        dataset (Dataset): Built dataset (task, splits, vocabulary)
        run_config (RunConfig): Model, training and decoding settings
        out_dir (Path, optional): Run directory; nothing is written when None
        baseline (bool): Train the ablated model
    Returns:
        TrainResult
    Raises:
        NumericalError: on a non-finite loss, naming the step and the batch's example ids
    """
    cfg = run_config.train
    if cfg.task != dataset.task:
        raise DataError(f"train.task={cfg.task} but the dataset was built for {dataset.task}")
    train_examples = dataset.split("train")
    if not train_examples:
        raise DataError("training split is empty")
    valid_examples = dataset.splits.get("valid", [])
    model_config = _resolve_model_config(run_config, len(dataset.vocab))

    model_seed, shuffle_seed = np.random.SeedSequence(cfg.seed).generate_state(2)
    model = DialogueModel(model_config, task=cfg.task, baseline=baseline, seed=int(model_seed))
    snapshot = DialogueModel(model_config, task=cfg.task, baseline=baseline, seed=int(model_seed))
    shuffle_rng = np.random.default_rng(int(shuffle_seed))
    optimizer = Adam(model.named_parameters(), cfg.learning_rate, clip_norm=cfg.clip_norm)
    loss_fn = LOSSES[cfg.task]
    track_coverage = cfg.task == "dialgen" and not baseline
    tracker = CoverageTracker(cfg.coverage_window)
    log.info("Training %s%s: %d parameters, %d train / %d valid examples",
             cfg.task, " baseline" if baseline else "", model.parameter_count(), len(train_examples),
             len(valid_examples))

    out_dir = Path(out_dir) if out_dir is not None else None
    metrics = JsonlLog(out_dir / METRICS_FILE) if out_dir is not None else None
    extra = {"train_config": dataclasses.asdict(cfg), "decoding": dataclasses.asdict(run_config.decoding)}
    result = TrainResult(model=model, steps=0)
    step = 0
    try:
        for epoch in range(cfg.epochs):
            model.train()
            order = shuffle_rng.permutation(len(train_examples))
            epoch_losses = []
            for begin in range(0, len(order), cfg.batch_size):
                batch = [train_examples[i] for i in order[begin:begin + cfg.batch_size]]
                where = f"step {step + 1} (epoch {epoch}); batch examples: {', '.join(e.id for e in batch)}"
                total = None
                try:
                    for example in batch:
                        if track_coverage:
                            loss, traces = dialgen_forward(example, model)
                            tracker.add(example.story_id, len(example.characters), traces)
                        else:
                            loss = loss_fn(example, model)
                        total = loss if total is None else total + loss
                except NumericalError as exc:
                    raise NumericalError(f"{exc} at {where}") from exc
                total = total * (1.0 / len(batch))
                value = total.item()
                if not np.isfinite(value):
                    raise NumericalError(f"non-finite loss {value} at {where}")
                backward(total)
                optimizer.step()
                step += 1
                epoch_losses.append(value)
                log.debug("step %d loss %.4f", step, value)
                if metrics:
                    metrics.write({"step": step, "epoch": epoch, "loss": value, "lr": cfg.learning_rate})
                if track_coverage:
                    report = tracker.step(step)
                    if report is not None:
                        log.info("Coverage window %d (steps %d-%d): %.2f%% over %d stories", report.window,
                                 report.first_step, report.last_step, 100 * report.mean, len(report.per_story))
                        if metrics:
                            metrics.write(report.to_record())
                if cfg.max_steps is not None and step >= cfg.max_steps:
                    break

            snapshot.load_arrays({name: array.copy() for name, array in model.store.arrays().items()})
            train_loss = float(np.mean(epoch_losses)) if epoch_losses else None
            valid_loss = evaluate_loss(snapshot, valid_examples, cfg.task)
            score = valid_loss if valid_loss is not None else train_loss
            row = {"epoch": epoch, "step": step, "train_loss": train_loss, "valid_loss": valid_loss}
            result.history.append(row)
            log.info("Epoch %d: train loss %.4f, valid loss %s", epoch, train_loss,
                     "n/a" if valid_loss is None else f"{valid_loss:.4f}")
            if metrics:
                metrics.write(row)
            improved = result.best_valid_loss is None or score < result.best_valid_loss
            if improved:
                result.best_epoch, result.best_valid_loss = epoch, score
            if out_dir is not None:
                tag = {**extra, "epoch": epoch, "step": step}
                if (epoch + 1) % cfg.checkpoint_every == 0:
                    snapshot.save(out_dir / CHECKPOINT_DIR / f"epoch-{epoch:03d}.npz", {**tag, "tag": "epoch"})
                if improved:
                    snapshot.save(out_dir / "best.npz", {**tag, "tag": "best", "valid_loss": score})
            if cfg.max_steps is not None and step >= cfg.max_steps:
                break
        if out_dir is not None:
            model.save(out_dir / "final.npz", {**extra, "epoch": epoch, "step": step, "tag": "final"}, optimizer)
    finally:
        if metrics:
            metrics.close()
    result.steps = step
    result.coverage = tracker.reports
    log.info("Finished %d steps; best epoch %s", step, result.best_epoch)
    return result


def train_baseline(dataset, run_config: RunConfig, out_dir=None):
    """train_task with the character machinery removed; every other setting is shared."""
    return train_task(dataset, run_config, out_dir, baseline=True)
