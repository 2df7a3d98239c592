"""Denoising corruption for continual pre-training.

The corruption applies sentence permutation, then Poisson span masking over
the concatenated tokens. The model learns to reconstruct the original text
from the corrupted input:

* encoder input: ``mask(permute(sentences)) + [LID]``
* decoder input: ``[LID] + original``
* labels:        ``original + [EOS]``
"""

from __future__ import annotations

from dataclasses import dataclass
from typing import Iterable, Sequence

import numpy as np

from .subword import TokenSeq, Vocab


@dataclass(frozen=True)
class NoiseConfig:
    mask_ratio: float = 0.30
    random_token_prob: float = 0.1
    poisson_lambda: float = 3.5
    permute_sentences: bool = True
    seed: int = 0

    def __post_init__(self):
        if not 0 <= self.mask_ratio <= 1:
            raise ValueError(f"mask_ratio must be in [0, 1], got {self.mask_ratio}")
        if not 0 <= self.random_token_prob <= 1:
            raise ValueError(f"random_token_prob must be in [0, 1], got {self.random_token_prob}")
        if not self.poisson_lambda > 0:
            raise ValueError(f"poisson_lambda must be positive, got {self.poisson_lambda}")


@dataclass(frozen=True)
class MaskResult:
    tokens: tuple[int, ...]
    #: (start, length) of every sampled span in draw order; length 0 marks an insertion
    spans: tuple[tuple[int, int], ...] = ()
    covered: int = 0


@dataclass(frozen=True)
class NoisedExample:
    encoder_input: TokenSeq
    decoder_input: TokenSeq
    labels: TokenSeq
    lang: str = ""


def instance_rng(seed: int, index: int, epoch: int = 0) -> np.random.Generator:
    """Independent stream for the ``index``-th instance of an epoch under ``seed``."""
    return np.random.default_rng(np.random.SeedSequence([seed, epoch, index]))


def span_mask(
    tokens: Sequence[int],
    cfg: NoiseConfig,
    rng: np.random.Generator,
    mask_id: int,
    random_ids: tuple[int, int] | None = None,
) -> MaskResult:
    """Replace Poisson-length spans with a single mask token each.

    Spans are drawn (length, then start) until at least
    ``ceil(mask_ratio * len(tokens))`` tokens are covered. Overlapping or
    touching spans merge into one masked run. A zero-length draw inserts a
    mask before a random position without covering anything. Each emitted
    mask becomes a uniform draw from ``range(*random_ids)`` with
    probability ``random_token_prob``.
    """
    tokens = list(tokens)
    n = len(tokens)
    if n == 0:
        raise ValueError("span_mask needs at least one token")
    target = int(np.ceil(cfg.mask_ratio * n - 1e-9))
    covered = np.zeros(n, dtype=bool)
    inserts = np.zeros(n + 1, dtype=bool)
    spans = []
    n_covered = 0
    while n_covered < target:
        length = int(rng.poisson(cfg.poisson_lambda))
        if length == 0:
            pos = int(rng.integers(0, n + 1))
            inserts[pos] = True
            spans.append((pos, 0))
            continue
        length = min(length, n)
        start = int(rng.integers(0, n - length + 1))
        covered[start : start + length] = True
        spans.append((start, length))
        n_covered = int(covered.sum())

    out: list[int] = []
    mask_slots: list[int] = []
    for i in range(n + 1):
        if inserts[i]:
            mask_slots.append(len(out))
            out.append(mask_id)
        if i == n:
            break
        if covered[i]:
            if i == 0 or not covered[i - 1]:
                mask_slots.append(len(out))
                out.append(mask_id)
        else:
            out.append(tokens[i])

    if cfg.random_token_prob > 0 and mask_slots:
        if random_ids is None:
            raise ValueError("random_ids range is required when random_token_prob > 0")
        lo, hi = random_ids
        flips = rng.random(len(mask_slots)) < cfg.random_token_prob
        draws = rng.integers(lo, hi, size=len(mask_slots))
        for slot, flip, tok in zip(mask_slots, flips, draws):
            if flip:
                out[slot] = int(tok)
    return MaskResult(tuple(out), tuple(spans), n_covered)


def permute_sentences(sentences: Sequence, rng: np.random.Generator) -> list:
    if len(sentences) == 0:
        raise ValueError("need at least one sentence")
    order = rng.permutation(len(sentences))
    return [sentences[i] for i in order]


def make_denoising_example(
    instance: Sequence[str],
    lang: str,
    vocab: Vocab,
    cfg: NoiseConfig,
    rng: np.random.Generator,
) -> NoisedExample:
    encoded = [vocab.encode(s).ids for s in instance]
    original = [t for ids in encoded for t in ids]
    if not original:
        raise ValueError("instance encodes to no tokens")
    lid = vocab.lid(lang)
    shuffled = permute_sentences(encoded, rng) if cfg.permute_sentences else list(encoded)
    flat = [t for ids in shuffled for t in ids]
    masked = span_mask(flat, cfg, rng, vocab.mask_id, (vocab.n_specials, len(vocab)))
    labels = tuple(original) + (vocab.eos_id,)
    return NoisedExample(
        encoder_input=TokenSeq(masked.tokens + (lid,)),
        decoder_input=TokenSeq((lid,) + labels[:-1]),
        labels=TokenSeq(labels),
        lang=lang,
    )


def pack_instances(sentences: Iterable[str], vocab: Vocab, max_tokens: int = 128) -> list[list[str]]:
    """Group consecutive sentences into instances of at most ``max_tokens`` tokens.

    A sentence longer than the budget forms an instance of its own.
    """
    instances: list[list[str]] = []
    current: list[str] = []
    used = 0
    for s in sentences:
        n = len(vocab.encode(s))
        if n == 0:
            continue
        if current and used + n > max_tokens:
            instances.append(current)
            current, used = [], 0
        current.append(s)
        used += n
    if current:
        instances.append(current)
    return instances


def denoising_examples(
    instances: Sequence[tuple[str, Sequence[str]]],
    vocab: Vocab,
    cfg: NoiseConfig,
    epoch: int = 0,
) -> list[NoisedExample]:
    """Build one example per ``(lang, sentences)`` instance with per-instance streams."""
    return [
        make_denoising_example(sents, lang, vocab, cfg, instance_rng(cfg.seed, i, epoch))
        for i, (lang, sents) in enumerate(instances)
    ]
