"""
Encoder-decoder transformer with explicit character representations.

Building blocks (embeddings, multi-head attention, feed-forward, post-norm encoder and
decoder blocks) register their tensors in a shared ParameterStore under dotted names, so
a whole model saves to and loads from one flat name -> array mapping.

DialogueModel runs one of two tasks:
- dialgen: the decoder picks a character per step (argmax of the projected decoder state
  against every character representation, ties to the lowest index), fuses the chosen
  representation with its own state, and predicts the next token
- dialspk: the encoder state at each probe token is scored against every candidate's
  representation
With baseline=True the character machinery is removed: the decoder predicts from its own
state and probe states are scored against candidates' first-mention states through a
linear head.
"""

# =============================================================================
# GLOBAL CONFIGURATION VARIABLES
# =============================================================================

ATTENTION_MASK_VALUE = -1e9               # Added to disallowed attention logits
TASKS = ("dialgen", "dialspk")

# =============================================================================

import dataclasses
import logging
from dataclasses import dataclass, field

import numpy as np

from dialstory.checkpoint import load_checkpoint, save_checkpoint
from dialstory.config import DecodingConfig, ModelConfig, from_mapping
from dialstory.errors import DataError, ShapeError
from dialstory.numerics import (
    concat, dropout, get_dtype, layer_norm, no_grad, ones_parameter, parameter, relu, silu,
    softmax, take, zeros_parameter,
)
from dialstory.vocab import END, MASK, PROBE, SEP, START

log = logging.getLogger(__name__)


class ParameterStore:
    """Ordered name -> Tensor registry shared by every block of a model."""

    def __init__(self, rng):
        self.rng = rng
        self.tensors = {}

    def weight(self, name, shape, fan_in=None):
        return self._register(name, parameter(self.rng, shape, fan_in=fan_in, name=name))

    def zeros(self, name, shape):
        return self._register(name, zeros_parameter(shape, name=name))

    def ones(self, name, shape):
        return self._register(name, ones_parameter(shape, name=name))

    def _register(self, name, tensor):
        if name in self.tensors:
            raise ValueError(f"parameter {name} registered twice")
        self.tensors[name] = tensor
        return tensor

    def arrays(self):
        return {name: t.data for name, t in self.tensors.items()}

    def load_arrays(self, arrays):
        """Copy arrays in by name; names and shapes must match exactly."""
        missing = sorted(set(self.tensors) - set(arrays))
        extra = sorted(set(arrays) - set(self.tensors))
        if missing or extra:
            raise DataError(f"checkpoint parameters do not match the model (missing {missing}, unexpected {extra})")
        for name, tensor in self.tensors.items():
            if arrays[name].shape != tensor.shape:
                raise ShapeError(f"parameter {name}: checkpoint shape {arrays[name].shape}, model {tensor.shape}")
            tensor.data = np.asarray(arrays[name], dtype=get_dtype()).copy()
            tensor.grad = None


class Linear:
    def __init__(self, store, name, in_dim, out_dim, bias=True):
        self.weight = store.weight(f"{name}.weight", (in_dim, out_dim), fan_in=in_dim)
        self.bias = store.zeros(f"{name}.bias", (out_dim,)) if bias else None

    def __call__(self, x):
        out = x @ self.weight
        return out + self.bias if self.bias is not None else out


class LayerNorm:
    def __init__(self, store, name, width):
        self.gain = store.ones(f"{name}.gain", (width,))
        self.bias = store.zeros(f"{name}.bias", (width,))

    def __call__(self, x):
        return layer_norm(x, self.gain, self.bias)


class MultiHeadAttention:
    """Scaled dot-product attention over (T, d) inputs, heads split along the feature axis."""

    def __init__(self, store, name, dim, heads):
        self.heads = heads
        self.head_dim = dim // heads
        self.query = Linear(store, f"{name}.query", dim, dim)
        self.key = Linear(store, f"{name}.key", dim, dim)
        self.value = Linear(store, f"{name}.value", dim, dim)
        self.output = Linear(store, f"{name}.output", dim, dim)

    def _split(self, x):
        return x.reshape(x.shape[0], self.heads, self.head_dim).transpose(1, 0, 2)

    def __call__(self, query, memory, mask=None, rate=0.0, rng=None, training=False):
        q, k, v = self._split(self.query(query)), self._split(self.key(memory)), self._split(self.value(memory))
        scores = (q @ k.swapaxes(-1, -2)) * (1.0 / np.sqrt(self.head_dim))
        if mask is not None:
            scores = scores + mask
        weights = dropout(softmax(scores, axis=-1), rate, rng, training)
        out = (weights @ v).transpose(1, 0, 2).reshape(query.shape[0], self.heads * self.head_dim)
        return self.output(out)


ACTIVATION_FUNCTIONS = {"relu": relu, "silu": silu}


class FeedForward:
    def __init__(self, store, name, dim, hidden, activation="relu"):
        self.expand = Linear(store, f"{name}.expand", dim, hidden)
        self.project = Linear(store, f"{name}.project", hidden, dim)
        self.activation = ACTIVATION_FUNCTIONS[activation]

    def __call__(self, x):
        return self.project(self.activation(self.expand(x)))



class EncoderBlock:
    """Bidirectional self-attention block (post-norm)."""

    def __init__(self, store, name, config):
        self.attention = MultiHeadAttention(store, f"{name}.attention", config.model_dim, config.attention_heads)
        self.attention_norm = LayerNorm(store, f"{name}.attention_norm", config.model_dim)
        self.feed_forward = FeedForward(store, f"{name}.feed_forward", config.model_dim, config.feedforward_dim,
                                        config.activation)
        self.feed_forward_norm = LayerNorm(store, f"{name}.feed_forward_norm", config.model_dim)
        self.rate = config.dropout

    def __call__(self, x, rng, training):
        attended = self.attention(x, x, None, self.rate, rng, training)
        x = self.attention_norm(x + dropout(attended, self.rate, rng, training))
        return self.feed_forward_norm(x + dropout(self.feed_forward(x), self.rate, rng, training))


class DecoderBlock:
    """Causal self-attention, cross-attention to the encoder, feed-forward (post-norm)."""

    def __init__(self, store, name, config):
        dim, heads = config.model_dim, config.attention_heads
        self.self_attention = MultiHeadAttention(store, f"{name}.self_attention", dim, heads)
        self.self_norm = LayerNorm(store, f"{name}.self_norm", dim)
        self.cross_attention = MultiHeadAttention(store, f"{name}.cross_attention", dim, heads)
        self.cross_norm = LayerNorm(store, f"{name}.cross_norm", dim)
        self.feed_forward = FeedForward(store, f"{name}.feed_forward", dim, config.feedforward_dim, config.activation)
        self.feed_forward_norm = LayerNorm(store, f"{name}.feed_forward_norm", dim)
        self.rate = config.dropout

    def __call__(self, y, memory, causal_mask, rng, training):
        r = self.rate
        y = self.self_norm(y + dropout(self.self_attention(y, y, causal_mask, r, rng, training), r, rng, training))
        y = self.cross_norm(y + dropout(self.cross_attention(y, memory, None, r, rng, training), r, rng, training))
        return self.feed_forward_norm(y + dropout(self.feed_forward(y), r, rng, training))


def causal_mask(length):
    """(length, length) additive mask hiding future positions."""
    return np.triu(np.full((length, length), ATTENTION_MASK_VALUE), k=1)


class TransformerBase:
    """
    Token + learned position embeddings and an encoder stack.
    Subclasses add their heads to self.store in __init__.
    """

    def __init__(self, config: ModelConfig, seed: int = 0):
        if config.vocab_size <= 0:
            raise ShapeError("model config needs a positive vocab_size")
        init_seed, dropout_seed = np.random.SeedSequence(seed).spawn(2)
        self.config = config
        self.seed = seed
        self.store = ParameterStore(np.random.default_rng(init_seed))
        self.dropout_rng = np.random.default_rng(dropout_seed)
        self.training = False
        dim = config.model_dim
        self.token_embedding = self.store.weight("embed.token", (config.vocab_size, dim), fan_in=dim)
        self.position_embedding = self.store.weight("embed.position", (config.max_sequence_length, dim), fan_in=dim)
        self.encoder = [EncoderBlock(self.store, f"encoder.{i}", config) for i in range(config.layers_encoder)]

    def train(self):
        self.training = True
        return self

    def eval(self):
        self.training = False
        return self

    def named_parameters(self):
        return self.store.tensors

    def parameter_count(self):
        return int(sum(t.size for t in self.store.tensors.values()))

    def _check_length(self, length, what="input"):
        if length > self.config.max_sequence_length:
            raise DataError(f"{what} of length {length} exceeds max_sequence_length={self.config.max_sequence_length}")
        if length == 0:
            raise DataError(f"{what} is empty")

    def _embed(self, tokens):
        tokens = np.asarray(tokens, dtype=np.int64)
        if tokens.size and (tokens.min() < 0 or tokens.max() >= self.config.vocab_size):
            raise DataError(f"token id {int(tokens.max())} outside vocabulary of size {self.config.vocab_size}")
        x = take(self.token_embedding, tokens) + take(self.position_embedding, np.arange(len(tokens)))
        return dropout(x, self.config.dropout, self.dropout_rng, self.training)

    def encode(self, input_tokens):
        """
        Encoder hidden states for one input.
        Returns:
            Tensor: (T, model_dim)
        Raises:
            DataError: for empty or over-length input
        """
        self._check_length(len(input_tokens))
        x = self._embed(input_tokens)
        for block in self.encoder:
            x = block(x, self.dropout_rng, self.training)
        return x

    # Checkpoints ---------------------------------------------------------------

    def header(self):
        return {"model_config": dataclasses.asdict(self.config), "dtype": np.dtype(get_dtype()).name,
                "model_class": type(self).__name__, "seed": self.seed}

    def save(self, path, extra=None, optimizer=None):
        header = self.header()
        header.update(extra or {})
        optim = None
        if optimizer is not None:
            header["optimizer"] = optimizer.state_header()
            optim = optimizer.state_arrays()
        save_checkpoint(path, header, self.store.arrays(), optim)

    def load_arrays(self, arrays):
        self.store.load_arrays(arrays)


@dataclass
class CharacterBank:
    """
    One representation per character.
    Attributes:
        reps (Tensor): (K, model_dim)
        mention_index (list[list[int]]): Encoder positions of each character's mentions
    """
    reps: object
    mention_index: list

    @property
    def size(self):
        return len(self.mention_index)


@dataclass
class DecoderStepTrace:
    """Which character the decoder selected at one step, and the scores it chose from."""
    selected: int
    scores: np.ndarray


@dataclass
class Generation:
    """Decoded output for one DialGen input."""
    tokens: list
    turns: list
    traces: list = field(default_factory=list)
    faults: list = field(default_factory=list)
    truncated: bool = False


class DialogueModel(TransformerBase):
    """
    Character-aware encoder-decoder for one task.
    Args:
        config (ModelConfig): Dimensions
        task (str): 'dialgen' or 'dialspk'
        baseline (bool): Drop the character machinery
        seed (int): Initialisation and dropout seed
    """

    def __init__(self, config, task="dialgen", baseline=False, seed=0):
        if task not in TASKS:
            raise ValueError(f"unknown task {task!r}")
        super().__init__(config, seed)
        self.task = task
        self.baseline = baseline
        dim, store = config.model_dim, self.store
        if not baseline:
            self.character_encoder = [EncoderBlock(store, f"character_encoder.{i}", config)
                                      for i in range(config.character_encoder_layers)]
        if task == "dialgen":
            if config.layers_decoder < 1:
                raise ShapeError("dialgen needs at least one decoder layer")
            self.decoder = [DecoderBlock(store, f"decoder.{i}", config) for i in range(config.layers_decoder)]
            if baseline:
                self.output = Linear(store, "output", dim, config.vocab_size)
            else:
                self.select = Linear(store, "select", dim, dim)
                self.fusion_norm = LayerNorm(store, "fusion_norm", 2 * dim)
                self.output = Linear(store, "output", 2 * dim, config.vocab_size)
        elif baseline:
            self.speaker = Linear(store, "speaker", dim, dim)

    def header(self):
        header = super().header()
        header.update({"task": self.task, "baseline": self.baseline})
        return header

    @classmethod
    def from_checkpoint(cls, path):
        """Rebuild a model (config, task, baseline flag) and its parameters from a checkpoint."""
        header, params, _ = load_checkpoint(path)
        if header.get("model_class") != cls.__name__:
            raise DataError(f"{path} holds a {header.get('model_class')}, not a {cls.__name__}")
        config = from_mapping(ModelConfig, "model", header["model_config"])
        model = cls(config, task=header["task"], baseline=bool(header["baseline"]), seed=int(header.get("seed", 0)))
        model.load_arrays(params)
        return model, header

    # Characters ----------------------------------------------------------------

    def character_representations(self, hidden, mention_index):
        """
        Pool each character's mention states: gather them in document order, run the
        character encoder over the gathered sequence, then mean-pool.
        Raises:
            DataError: when a character has no mention or a position is out of range
        """
        reps = []
        for k, positions in enumerate(mention_index):
            if not positions:
                raise DataError(f"character {k} has no mention positions")
            if min(positions) < 0 or max(positions) >= hidden.shape[0]:
                raise DataError(f"character {k} mention position outside the encoded input")
            x = take(hidden, np.asarray(positions, dtype=np.int64))
            for block in self.character_encoder:
                x = block(x, self.dropout_rng, self.training)
            reps.append(x.mean(axis=0, keepdims=True))
        if not reps:
            raise ShapeError("character bank is empty")
        return CharacterBank(reps=concat(reps, axis=0), mention_index=[list(p) for p in mention_index])

    # DialGen -------------------------------------------------------------------

    def _decoder_states(self, prefix, memory):
        self._check_length(len(prefix), "decoder prefix")
        y = self._embed(prefix)
        mask = causal_mask(len(prefix))
        for block in self.decoder:
            y = block(y, memory, mask, self.dropout_rng, self.training)
        return y

    def _predict(self, states, bank):
        """Vocabulary logits for decoder states (N, d), with one trace per row."""
        if self.baseline:
            return self.output(states), []
        if bank is None or bank.size == 0:
            raise ShapeError("character bank is empty")
        projected = states.data @ self.select.weight.data + self.select.bias.data
        scores = projected @ bank.reps.data.T
        selected = np.argmax(scores, axis=1)
        traces = [DecoderStepTrace(selected=int(i), scores=row.copy()) for i, row in zip(selected, scores)]
        chosen = take(bank.reps, selected)
        fused = self.fusion_norm(silu(concat([states, chosen], axis=1)))
        return self.output(fused), traces

    def encode_story(self, example):
        """Encoder states and character bank for a DialGen input."""
        hidden = self.encode(example.input_tokens)
        bank = None if self.baseline else self.character_representations(hidden, example.mention_index())
        return hidden, bank

    def dialgen_logits(self, example):
        """
        Teacher-forced logits: decoder input <s> + gold, one row per target of gold + </s>.
        Returns:
            tuple: (logits Tensor (N, V), targets np.ndarray (N,), traces)
        """
        gold = example.gold_output
        if not gold:
            raise DataError(f"{example.id}: empty gold output")
        hidden, bank = self.encode_story(example)
        states = self._decoder_states([START] + gold, hidden)
        logits, traces = self._predict(states, bank)
        return logits, np.asarray(gold + [END], dtype=np.int64), traces

    def decode_step(self, prefix, memory, bank):
        """
        Next-token distribution after prefix.
        Returns:
            tuple: (probabilities np.ndarray (V,), DecoderStepTrace or None for the baseline)
        """
        with no_grad():
            states = self._decoder_states(prefix, memory)
            last = take(states, slice(states.shape[0] - 1, states.shape[0]))
            logits, traces = self._predict(last, bank)
            probs = softmax(logits, axis=-1).data[0]
        return probs, (traces[0] if traces else None)

    def generate(self, example, decoding=None, rng=None):
        """
        Decode the masked turns of one input greedily or by top-k sampling, then split the
        output on <sep> into one turn per placeholder. Extra turns are dropped and missing
        ones padded with empty turns; both are recorded as faults, as is hitting the cap.
        """
        decoding = decoding or DecodingConfig()
        if decoding.strategy == "top_k" and rng is None:
            rng = np.random.default_rng(decoding.seed)
        placeholders = sum(1 for t in example.input_tokens if t == MASK)
        if placeholders == 0:
            raise DataError(f"{example.id}: input has no placeholder")
        cap = min(decoding.max_tokens, self.config.max_sequence_length - 1)
        was_training = self.training
        self.eval()
        try:
            with no_grad():
                hidden, bank = self.encode_story(example)
            prefix, traces, finished = [START], [], False
            for _ in range(cap):
                probs, trace = self.decode_step(prefix, hidden, bank)
                if trace is not None:
                    traces.append(trace)
                if decoding.strategy == "greedy":
                    token = int(np.argmax(probs))
                else:
                    top = np.argsort(-probs, kind="stable")[:decoding.top_k]
                    weights = probs[top].astype(np.float64)
                    token = int(top[rng.choice(len(top), p=weights / weights.sum())])
                if token == END:
                    finished = True
                    break
                prefix.append(token)
        finally:
            self.training = was_training
        return split_generation(prefix[1:], placeholders, traces, truncated=not finished)

    # DialSpk -------------------------------------------------------------------

    def speaker_logits(self, example):
        """
        Score every candidate for every specified turn.
        Returns:
            Tensor: (M, K) dot products of probe states with candidate representations
        Raises:
            ShapeError: when probes and specified turns disagree
        """
        probes = list(example.probe_positions)
        if len(probes) != len(example.specified_turns) or not probes:
            raise ShapeError(f"{example.id}: {len(probes)} probes for {len(example.specified_turns)} specified turns")
        if any(example.tokens[p] != PROBE for p in probes):
            raise ShapeError(f"{example.id}: probe position does not hold a probe token")
        hidden = self.encode(example.tokens)
        probe_states = take(hidden, np.asarray(probes, dtype=np.int64))
        if self.baseline:
            first = take(hidden, np.asarray(example.first_mentions(), dtype=np.int64))
            return self.speaker(probe_states) @ first.transpose()
        bank = self.character_representations(hidden, example.mention_index())
        return probe_states @ bank.reps.transpose()

    def predict_speakers(self, example):
        """Candidate index per specified turn (row argmax, ties to the lowest index)."""
        was_training = self.training
        self.eval()
        try:
            with no_grad():
                scores = self.speaker_logits(example).data
        finally:
            self.training = was_training
        return [int(i) for i in np.argmax(scores, axis=1)]


def split_generation(tokens, placeholders, traces=(), truncated=False):
    """Split decoded tokens on <sep> into exactly `placeholders` turns, recording faults."""
    turns, current = [], []
    for token in tokens:
        if token == SEP:
            turns.append(current)
            current = []
        else:
            current.append(token)
    turns.append(current)
    faults = []
    if truncated:
        faults.append("length cap reached before </s>")
    if len(turns) > placeholders:
        faults.append(f"{len(turns)} turns for {placeholders} placeholders, extra turns dropped")
        turns = turns[:placeholders]
    elif len(turns) < placeholders:
        faults.append(f"{len(turns)} turns for {placeholders} placeholders, padded with empty turns")
        turns = turns + [[] for _ in range(placeholders - len(turns))]
    return Generation(tokens=list(tokens), turns=turns, traces=list(traces), faults=faults, truncated=truncated)
