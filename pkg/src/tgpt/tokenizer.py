"""Word-level tokenizer, vocabulary, and the shared embedding table.

The corpus is synthetic and closed, so a whitespace tokenizer keeps the
vocabulary tiny and makes the vocabulary-space supervision target exact.
Reserved ids are fixed: [PAD]=0, [BOS]=1, [EOS]=2, [UNK]=3.  The embedding
table trained during contrastive pretraining is frozen afterwards; its
transpose projects generated prompts into vocabulary space.
"""

import hashlib

import numpy as np

from tgpt.numerics import ops
from tgpt.numerics.tensor import Tensor

PAD_ID, BOS_ID, EOS_ID, UNK_ID = 0, 1, 2, 3
RESERVED = ("[PAD]", "[BOS]", "[EOS]", "[UNK]")

_PUNCT = str.maketrans({c: " " for c in ".,;:!?"})


def normalize_words(text: str) -> list:
    """Lowercase, strip sentence punctuation, split on whitespace.

    Hyphens survive, so opaque class codes like "G-07" stay single words.
    """
    return text.lower().translate(_PUNCT).split()


class Vocabulary:
    """Bijective token<->id map: reserved tokens first, then corpus words
    in first-occurrence order."""

    def __init__(self, tokens):
        tokens = list(tokens)
        if tuple(tokens[:4]) != RESERVED:
            raise ValueError(f"vocabulary must start with {RESERVED}")
        if len(set(tokens)) != len(tokens):
            raise ValueError("vocabulary contains duplicate tokens")
        self.tokens = tokens
        self._ids = {t: i for i, t in enumerate(tokens)}

    @property
    def d_v(self) -> int:
        return len(self.tokens)

    @classmethod
    def build(cls, corpus) -> "Vocabulary":
        corpus = list(corpus)
        if not corpus:
            raise ValueError("cannot build a vocabulary from an empty corpus")
        tokens = list(RESERVED)
        seen = set(tokens)
        for text in corpus:
            for word in normalize_words(text):
                if word not in seen:
                    seen.add(word)
                    tokens.append(word)
        return cls(tokens)

    def word_id(self, word: str) -> int:
        return self._ids.get(word, UNK_ID)

    def tokenize(self, text: str, max_len: int):
        """Return (ids, mask), both int64 arrays of length max_len.

        ids = [BOS] + word ids + [EOS], truncated so EOS is always the last
        kept position, right-padded with [PAD]; mask marks non-PAD slots.
        """
        if max_len < 2:
            raise ValueError(f"max_len must be >= 2, got {max_len}")
        words = normalize_words(text)[: max_len - 2]
        ids = np.full(max_len, PAD_ID, dtype=np.int64)
        ids[0] = BOS_ID
        for i, w in enumerate(words):
            ids[1 + i] = self.word_id(w)
        ids[1 + len(words)] = EOS_ID
        mask = np.zeros(max_len, dtype=np.int64)
        mask[: 2 + len(words)] = 1
        return ids, mask

    def tokenize_batch(self, texts, max_len: int):
        ids = np.empty((len(texts), max_len), dtype=np.int64)
        mask = np.empty((len(texts), max_len), dtype=np.int64)
        for i, text in enumerate(texts):
            ids[i], mask[i] = self.tokenize(text, max_len)
        return ids, mask

    def detokenize(self, ids) -> str:
        words = [self.tokens[int(i)] for i in np.asarray(ids).reshape(-1)]
        return " ".join(w for w in words if w not in RESERVED)

    def digest(self) -> str:
        """Hash of the token list, for checking that a checkpoint and a
        dataset agree on the id mapping."""
        h = hashlib.sha256("\n".join(self.tokens).encode("utf-8"))
        return h.hexdigest()[:16]

    def save(self, path) -> None:
        with open(path, "w", encoding="utf-8") as fh:
            for token in self.tokens:
                fh.write(token + "\n")

    @classmethod
    def load(cls, path) -> "Vocabulary":
        with open(path, encoding="utf-8") as fh:
            return cls([line.rstrip("\n") for line in fh if line.rstrip("\n")])


class EmbeddingTable:
    """The d_V x d token embedding shared by the text encoder and the
    vocabulary-space loss; frozen after pretraining."""

    def __init__(self, d_v: int, d: int, init_rng):
        if d_v < 5:
            raise ValueError(f"vocabulary size {d_v} too small (minimum 5)")
        self.w = Tensor(init_rng.normal(0.0, 0.02, (d_v, d)), requires_grad=True)

    @property
    def frozen(self) -> bool:
        return not self.w.requires_grad

    def freeze(self) -> None:
        self.w.requires_grad = False

    def lookup(self, ids) -> Tensor:
        return ops.embedding(self.w, ids)

    def params(self) -> dict:
        return {"vocab.w": self.w}
