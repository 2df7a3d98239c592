"""Toy languages for smoke runs and demos.

Three languages share one meaning space. ``xa`` is the source; ``xb`` is a
word-for-word lexicon substitution of it (the copy-grammar control) and
``xc`` substitutes with its own lexicon and reverses the word order. The
in-domain register prefers a small subset of the vocabulary, the
out-domain register draws uniformly, which gives the recipes a real domain
shift to work with.
"""

from __future__ import annotations

from dataclasses import dataclass
from pathlib import Path

import numpy as np
import yaml

from .corpus import write_lines

SOURCE = "xa"
COPY = "xb"
REVERSE = "xc"
LANGUAGES = (SOURCE, COPY, REVERSE)

_LETTERS = {
    SOURCE: ("ptkbdg", "aiu"),
    COPY: ("mnlrsv", "eoy"),
    REVERSE: ("fhjwzq", "aeiou"),
}


@dataclass(frozen=True)
class ToyConfig:
    seed: int = 0
    lexicon_size: int = 24
    domain_words: int = 10  # size of the in-domain preferred subset
    domain_bias: float = 0.8  # chance an in-domain word comes from that subset
    min_words: int = 3
    max_words: int = 6
    n_train: int = 1500
    n_valid: int = 100
    n_test: int = 100
    n_out_train: int = 3000
    n_mono_in: int = 600
    n_mono_out: int = 1200


def _lexicon(lang: str, size: int, rng: np.random.Generator) -> list[str]:
    cons, vows = _LETTERS[lang]
    words: list[str] = []
    seen = set()
    while len(words) < size:
        n_syl = int(rng.integers(1, 3))
        w = "".join(cons[rng.integers(len(cons))] + vows[rng.integers(len(vows))] for _ in range(n_syl))
        if w not in seen:
            seen.add(w)
            words.append(w)
    return words


class ToyWorld:
    def __init__(self, cfg: ToyConfig = ToyConfig()):
        self.cfg = cfg
        rng = np.random.default_rng(cfg.seed)
        self.lexicons = {lang: _lexicon(lang, cfg.lexicon_size, rng) for lang in LANGUAGES}
        self.domain_ids = np.sort(rng.choice(cfg.lexicon_size, cfg.domain_words, replace=False))

    def meanings(self, n: int, domain: str, rng: np.random.Generator) -> list[list[int]]:
        """``n`` sentences as word-index lists."""
        cfg = self.cfg
        out = []
        for _ in range(n):
            length = int(rng.integers(cfg.min_words, cfg.max_words + 1))
            if domain == "in":
                pick = rng.random(length) < cfg.domain_bias
                words = np.where(
                    pick,
                    self.domain_ids[rng.integers(len(self.domain_ids), size=length)],
                    rng.integers(cfg.lexicon_size, size=length),
                )
            else:
                words = rng.integers(cfg.lexicon_size, size=length)
            out.append([int(w) for w in words])
        return out

    def render(self, meaning: list[int], lang: str) -> str:
        words = [self.lexicons[lang][i] for i in meaning]
        if lang == REVERSE:
            words = words[::-1]
        return " ".join(words)


def write_toy_corpus(root: str | Path, cfg: ToyConfig = ToyConfig()) -> Path:
    """Write the toy corpora plus ``manifest.yaml`` under ``root``; returns the manifest path."""
    root = Path(root)
    world = ToyWorld(cfg)
    rng = np.random.default_rng(np.random.SeedSequence([cfg.seed, 1]))
    doc: dict = {"languages": list(LANGUAGES), "mono": [], "parallel": [], "needs_zwj_repair": []}

    for lang in LANGUAGES:
        for dom, n in (("in", cfg.n_mono_in), ("out", cfg.n_mono_out)):
            rel = f"mono/{lang}.{dom}.txt"
            write_lines(root / rel, [world.render(m, lang) for m in world.meanings(n, dom, rng)])
            doc["mono"].append({"lang": lang, "domain": dom, "path": rel})

    splits = (("in", "train", cfg.n_train), ("in", "valid", cfg.n_valid), ("in", "test", cfg.n_test), ("out", "train", cfg.n_out_train))
    for tgt in (COPY, REVERSE):
        for dom, split, n in splits:
            prefix = f"parallel/{SOURCE}-{tgt}.{dom}.{split}"
            meanings = world.meanings(n, dom, rng)
            write_lines(root / f"{prefix}.{SOURCE}", [world.render(m, SOURCE) for m in meanings])
            write_lines(root / f"{prefix}.{tgt}", [world.render(m, tgt) for m in meanings])
            doc["parallel"].append({"prefix": prefix, "src_lang": SOURCE, "tgt_lang": tgt, "domain": dom, "split": split})

    path = root / "manifest.yaml"
    path.write_text(yaml.safe_dump(doc, sort_keys=False), encoding="utf-8")
    return path
