"""
Tokenizer and corpus-built vocabulary.
Text is split on whitespace and punctuation. Special tokens and sentence-final punctuation
occupy fixed ids at the front of every vocabulary, so span and sentence logic never needs
to look a token up.
"""

import re

from dialstory.artifacts import read_json, write_json
from dialstory.errors import DataError

PAD, START, END, UNK, MASK, PROBE, SEP, OPEN_QUOTE, CLOSE_QUOTE = range(9)
PERIOD, EXCLAMATION, QUESTION = 9, 10, 11

RESERVED_TOKENS = ["<pad>", "<s>", "</s>", "<unk>", "<mask>", "<probe>", "<sep>", "“", "”", ".", "!", "?"]
TERMINATOR_IDS = frozenset({PERIOD, EXCLAMATION, QUESTION})

# No alternative for <...> tags: special tokens are only ever produced as ids
_TOKEN_PATTERN = re.compile(r"[“”\"]|\w+(?:'\w+)?|[^\w\s]")


def tokenize(text):
    """
    Split raw text into tokens. Straight double quotes alternate between opening and
    closing quote tokens; curly quotes map directly. Literal tag text such as "<mask>"
    is split like any other punctuation and never reaches a reserved id.
    """
    tokens, inside = [], False
    for token in _TOKEN_PATTERN.findall(text):
        if token == '"':
            token = "”" if inside else "“"
        if token == "“":
            inside = True
        elif token == "”":
            inside = False
        tokens.append(token)
    return tokens


class Vocabulary:
    """
    Bidirectional token <-> id map. The first len(RESERVED_TOKENS) ids are fixed.
    """

    def __init__(self, tokens=()):
        self.itos = list(RESERVED_TOKENS)
        self.stoi = {tok: i for i, tok in enumerate(self.itos)}
        for token in tokens:
            self.add(token)

    @classmethod
    def build(cls, token_lists):
        """Build from an iterable of token sequences; ordinary tokens are sorted for stable ids."""
        seen = set()
        for tokens in token_lists:
            seen.update(tokens)
        return cls(sorted(seen - set(RESERVED_TOKENS)))

    def add(self, token):
        if token not in self.stoi:
            self.stoi[token] = len(self.itos)
            self.itos.append(token)
        return self.stoi[token]

    def __len__(self):
        return len(self.itos)

    def __contains__(self, token):
        return token in self.stoi

    def encode(self, tokens):
        return [self.stoi.get(tok, UNK) for tok in tokens]

    def decode(self, ids):
        size = len(self.itos)
        return [self.itos[i] if 0 <= i < size else "<unk>" for i in ids]

    def to_text(self, ids):
        return " ".join(self.decode(ids))

    def save(self, path):
        write_json(path, {"tokens": self.itos})

    @classmethod
    def load(cls, path):
        payload = read_json(path)
        tokens = payload.get("tokens", [])
        if tokens[:len(RESERVED_TOKENS)] != RESERVED_TOKENS:
            raise DataError(f"{path}: vocabulary does not start with the reserved tokens")
        return cls(tokens[len(RESERVED_TOKENS):])
