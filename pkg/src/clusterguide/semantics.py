"""Toy semantic space: token embeddings, prompts, pooling, base-word offsets.

The empty condition is the all-zero embedding, which makes the empty prompt
pool to the zero vector and semantic interpolation toward it exact scaling.
"""

from __future__ import annotations

import json
from dataclasses import dataclass, replace

import numpy as np

from . import rng as rngmod

EMPTY_TOKEN = "<empty>"

# Built-in tuning templates: context-like tokens never used for world data,
# combined with a base word into two-token prompts during projector tuning.
TUNING_TEMPLATES = (
    "studio", "meadow", "harbor", "desert",
    "market", "aurora", "workshop", "canyon",
)


@dataclass(frozen=True)
class Vocabulary:
    embed_dim: int
    table: dict[str, np.ndarray]

    def __post_init__(self):
        for tok, vec in self.table.items():
            if vec.shape != (self.embed_dim,):
                raise ValueError(f"embedding for {tok!r} has shape {vec.shape}, "
                                 f"expected ({self.embed_dim},)")
        if EMPTY_TOKEN not in self.table or np.any(self.table[EMPTY_TOKEN] != 0.0):
            raise ValueError(f"{EMPTY_TOKEN!r} must map to the zero vector")

    def embedding(self, token: str) -> np.ndarray:
        try:
            return self.table[token]
        except KeyError:
            raise ValueError(f"unknown token {token!r}") from None

    @property
    def tokens(self):
        return list(self.table)


@dataclass(frozen=True)
class Prompt:
    tokens: tuple[str, ...]
    base_indices: tuple[int, ...]

    def __post_init__(self):
        object.__setattr__(self, "tokens", tuple(self.tokens))
        object.__setattr__(self, "base_indices", tuple(self.base_indices))
        for i in self.base_indices:
            if not 0 <= i < len(self.tokens):
                raise ValueError(f"base index {i} out of range for {len(self.tokens)} tokens")


@dataclass(frozen=True)
class PromptEmbedding:
    vectors: np.ndarray  # (L, m)
    base_indices: tuple[int, ...]

    def __post_init__(self):
        object.__setattr__(self, "vectors", np.asarray(self.vectors, dtype=np.float64))
        object.__setattr__(self, "base_indices", tuple(self.base_indices))


def split_subject_token(token: str) -> list[str]:
    """A '+'-joined subject token names one base word per part."""
    return token.split("+")


def subject_prompt(subject_token: str, context_token: str) -> Prompt:
    """[base word(s)..., context], with every subject word a base index."""
    words = split_subject_token(subject_token)
    return Prompt(tokens=(*words, context_token),
                  base_indices=tuple(range(len(words))))


def empty_prompt() -> Prompt:
    return Prompt(tokens=(EMPTY_TOKEN,), base_indices=())


def make_vocab(world, templates=TUNING_TEMPLATES, seed: int = 0) -> Vocabulary:
    """One embedding per subject word, context and template, Normal(0, I/m)."""
    m = 8
    names: list[str] = []
    for s in world.subjects:
        names.extend(split_subject_token(s.token))
    names.extend(c.token for c in world.contexts)
    names.extend(templates)
    seen = set()
    for n in names:
        if n in seen or n == EMPTY_TOKEN:
            raise ValueError(f"duplicate token name {n!r}")
        seen.add(n)
    g = rngmod.stream(seed, rngmod.VOCAB)
    table = {EMPTY_TOKEN: np.zeros(m)}
    for n in names:
        table[n] = g.normal(0.0, np.sqrt(1.0 / m), size=m)
    return Vocabulary(embed_dim=m, table=table)


def embed_prompt(vocab: Vocabulary, prompt: Prompt) -> PromptEmbedding:
    vectors = np.stack([vocab.embedding(tok) for tok in prompt.tokens])
    return PromptEmbedding(vectors=vectors, base_indices=prompt.base_indices)


def offset_base(emb: PromptEmbedding, c_delta, v: float = 1.0) -> PromptEmbedding:
    """c'_b = c_b + v * c_delta at every base index; other positions untouched.

    c_delta is a single (m,) vector applied at each base index, or an
    (n_base, m) array with one offset per base index. An entry of None in a
    per-index list leaves that base word unmodified (used by ablations).
    """
    if not emb.base_indices:
        raise ValueError("prompt has no base indices to offset")
    if isinstance(c_delta, (list, tuple)):
        rows = list(c_delta)
    else:
        c_delta = np.asarray(c_delta, dtype=np.float64)
        if c_delta.ndim == 1:
            rows = [c_delta] * len(emb.base_indices)
        else:
            rows = list(c_delta)
    if len(rows) != len(emb.base_indices):
        raise ValueError(f"{len(rows)} offsets for {len(emb.base_indices)} base indices")
    vectors = emb.vectors.copy()
    for idx, row in zip(emb.base_indices, rows):
        if row is None:
            continue
        row = np.asarray(row, dtype=np.float64)
        if row.shape != (emb.vectors.shape[1],):
            raise ValueError(f"offset shape {row.shape} != embedding dim "
                             f"({emb.vectors.shape[1]},)")
        vectors[idx] = vectors[idx] + v * row
    return PromptEmbedding(vectors=vectors, base_indices=emb.base_indices)


def pool_condition(emb: PromptEmbedding) -> np.ndarray:
    """Arithmetic mean of the token embeddings."""
    if emb.vectors.shape[0] < 1:
        raise ValueError("cannot pool an empty prompt embedding")
    return emb.vectors.mean(axis=0)


def semantic_interpolate_empty(emb: PromptEmbedding, g: float) -> PromptEmbedding:
    """c' = c_empty + g * (c - c_empty); with the zero empty condition, scaling by g."""
    return PromptEmbedding(vectors=g * emb.vectors, base_indices=emb.base_indices)


# --- serialization -----------------------------------------------------------

def vocab_to_json(vocab: Vocabulary) -> dict:
    return {"embed_dim": vocab.embed_dim,
            "tokens": {tok: vec.tolist() for tok, vec in vocab.table.items()}}


def vocab_from_json(obj: dict) -> Vocabulary:
    table = {tok: np.asarray(vec, dtype=np.float64)
             for tok, vec in obj["tokens"].items()}
    return Vocabulary(embed_dim=int(obj["embed_dim"]), table=table)


def save_vocab(path, vocab: Vocabulary):
    with open(path, "w") as f:
        json.dump(vocab_to_json(vocab), f)
        f.write("\n")


def load_vocab(path) -> Vocabulary:
    with open(path) as f:
        return vocab_from_json(json.load(f))
