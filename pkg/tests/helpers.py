"""Shared test utilities: synthetic corpora and small model factories."""

from __future__ import annotations

import numpy as np

from tinyqat.model import ModelConfig, Transformer

_SYLLABLES = ["ba", "ce", "di", "fo", "gu", "ha", "ki", "lo", "mu", "na",
              "pe", "ri", "so", "ta", "ve", "wi", "xo", "yu", "za", "thi",
              "ran", "del", "mor", "sun", "pla", "gre", "ith", "ost"]


def _word_list(rng: np.random.Generator, count: int) -> list[str]:
    words = []
    while len(words) < count:
        n = rng.integers(2, 4)
        w = "".join(rng.choice(_SYLLABLES) for _ in range(n))
        if w not in words:
            words.append(w)
    return words


def _zipf_probs(n: int) -> np.ndarray:
    p = 1.0 / np.arange(1, n + 1)
    return p / p.sum()


def _prose_doc(rng: np.random.Generator, words: list[str], probs: np.ndarray,
               target: int) -> str:
    out = []
    size = 0
    while size < target:
        k = int(rng.integers(4, 10))
        picks = [words[i] for i in rng.choice(len(words), size=k, p=probs)]
        sent = " ".join(picks).capitalize() + "."
        out.append(sent)
        size += len(sent) + 1
    return " ".join(out)


def _table_doc(rng: np.random.Generator, target: int) -> str:
    out = []
    size = 0
    while size < target:
        row = (f"id={int(rng.integers(0, 1000)):03d} "
               f"val={rng.integers(0, 100)}.{rng.integers(0, 100):02d} "
               f"flag={'Y' if rng.integers(0, 2) else 'N'};")
        out.append(row)
        size += len(row) + 1
    return " ".join(out)


def make_corpus(n_chars: int, seed: int, style: str = "mixed",
                doc_chars: int = 380, vocab_seed: int = 1234) -> str:
    """Deterministic synthetic text: prose and/or table documents.

    ``style``: "mixed" alternates the two domains randomly, "prose" / "table"
    emit a single narrow domain. Documents are blank-line separated so the
    tokenizer inserts an EOS after each. The word list depends only on
    ``vocab_seed`` so held-out corpora share the training distribution.
    """
    words = _word_list(np.random.Generator(np.random.PCG64(vocab_seed)), 120)
    probs = _zipf_probs(len(words))
    rng = np.random.Generator(np.random.PCG64(seed))
    docs = []
    total = 0
    while total < n_chars:
        if style == "mixed":
            pick = "prose" if rng.random() < 0.5 else "table"
        else:
            pick = style
        doc = (_prose_doc(rng, words, probs, doc_chars) if pick == "prose"
               else _table_doc(rng, doc_chars))
        docs.append(doc)
        total += len(doc) + 2
    return "\n\n".join(docs)


def tiny_config(**overrides) -> ModelConfig:
    base = dict(vocab_size=32, dim=16, n_layers=2, n_heads=2,
                ffn_hidden=24, max_seq_len=16)
    base.update(overrides)
    return ModelConfig(**base)


def tiny_model(seed: int = 0, **overrides) -> Transformer:
    return Transformer(tiny_config(**overrides), seed=seed)
