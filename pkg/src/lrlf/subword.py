"""BPE subword vocabulary with byte fallback, special symbols and ZWJ repair.

Text is split into chunks where a run of whitespace attaches to the
following word (``" the"``), merges are learned inside chunks, and any
character outside the learned alphabet is spelled as its UTF-8 bytes
(``<0xE2>`` ...). Decoding concatenates token strings, so encode/decode is
lossless for every string. ZWJ (U+200D) is an ordinary character here.

Vocab file layout::

    LRLF-VOCAB v1
    byte_fallback<TAB>true
    [tokens]
    <id><TAB><json-quoted token>      one line per id, ids dense from 0
    [merges]
    <json left><TAB><json right>      in rank order
    [specials]
    <role><TAB><id>
"""

from __future__ import annotations

import collections
import json
import re
from dataclasses import dataclass
from pathlib import Path
from typing import Iterable, Sequence

import numpy as np

VOCAB_MAGIC = "LRLF-VOCAB v1"

PAD, BOS, EOS, MASK = "<pad>", "<s>", "</s>", "<mask>"
CORE_SPECIALS = (PAD, BOS, EOS, MASK)
PAD_ID, BOS_ID, EOS_ID, MASK_ID = range(4)

_CHUNK_RE = re.compile(r"\s?\S+|\s+")
_BYTE_TOKENS = tuple(f"<0x{b:02X}>" for b in range(256))

ZWJ = "\u200d"
_VIRAMA = "\u0dca"
_ZWJ_RULES = (
    # rakaransaya: al-lakuna + ra
    (_VIRAMA + " \u0dbb", _VIRAMA + ZWJ + "\u0dbb"),
    # yansaya: al-lakuna + ya
    (_VIRAMA + " \u0dba", _VIRAMA + ZWJ + "\u0dba"),
)


class VocabError(ValueError):
    pass


class EncodeError(VocabError):
    def __init__(self, offset: int, char: str):
        super().__init__(f"character U+{ord(char):04X} at offset {offset} is not covered and byte fallback is off")
        self.offset = offset


class DecodeError(VocabError):
    pass


def lid_token(lang: str) -> str:
    return f"<lid:{lang}>"


def zwj_repair(text: str) -> str:
    """Restore ZWJ in Sinhala yansaya/rakaransaya conjuncts split by a space."""
    for old, new in _ZWJ_RULES:
        text = text.replace(old, new)
    return text


def split_chunks(text: str) -> list[str]:
    return _CHUNK_RE.findall(text)


@dataclass(frozen=True)
class TokenSeq:
    ids: tuple[int, ...]

    def __len__(self):
        return len(self.ids)

    def __iter__(self):
        return iter(self.ids)


class Vocab:
    """Immutable token inventory: specials, byte tokens, characters, merges."""

    def __init__(
        self,
        tokens: Sequence[str],
        merges: Sequence[tuple[str, str]],
        specials: dict[str, int],
        byte_fallback: bool = True,
    ):
        self.tokens = tuple(tokens)
        self.merges = tuple(tuple(m) for m in merges)
        self.specials = dict(specials)
        self.byte_fallback = byte_fallback
        self._index = {t: i for i, t in enumerate(self.tokens)}
        if len(self._index) != len(self.tokens):
            raise VocabError("duplicate tokens in vocabulary")
        for role, i in self.specials.items():
            if not 0 <= i < len(self.tokens) or self.tokens[i] != _special_text(role):
                raise VocabError(f"special {role!r} does not point at its token")
        self.special_ids = frozenset(self.specials.values())
        self._ranks = {m: r for r, m in enumerate(self.merges)}
        self._byte_ids = {b: self._index[_BYTE_TOKENS[b]] for b in range(256)} if byte_fallback else {}
        self._byte_of = {i: b for b, i in self._byte_ids.items()}
        self._cache: dict[str, tuple[int, ...]] = {}

    # -- specials -----------------------------------------------------------
    @property
    def languages(self) -> list[str]:
        return [r[4:] for r in self.specials if r.startswith("lid:")]

    def lid(self, lang: str) -> int:
        try:
            return self.specials[f"lid:{lang}"]
        except KeyError:
            raise VocabError(f"no language id symbol for {lang!r}") from None

    @property
    def pad_id(self) -> int:
        return self.specials["pad"]

    @property
    def eos_id(self) -> int:
        return self.specials["eos"]

    @property
    def mask_id(self) -> int:
        return self.specials["mask"]

    @property
    def n_specials(self) -> int:
        return len(self.specials)

    def __len__(self) -> int:
        return len(self.tokens)

    def id_of(self, token: str) -> int:
        return self._index[token]

    # -- encode/decode ------------------------------------------------------
    def _encode_chunk(self, chunk: str, offset: int) -> tuple[int, ...]:
        cached = self._cache.get(chunk)
        if cached is not None:
            return cached
        symbols: list[str] = []
        fallback: list[list[int]] = []
        for j, ch in enumerate(chunk):
            if ch in self._index and self._index[ch] not in self.special_ids:
                symbols.append(ch)
                fallback.append([])
            elif self.byte_fallback:
                symbols.append("")  # placeholder, never merged
                fallback.append([self._byte_ids[b] for b in ch.encode("utf-8", "surrogatepass")])
            else:
                raise EncodeError(offset + j, ch)
        # repeatedly apply the lowest-rank merge present
        while len(symbols) > 1:
            best, best_rank = -1, None
            for k in range(len(symbols) - 1):
                if not symbols[k] or not symbols[k + 1]:
                    continue
                r = self._ranks.get((symbols[k], symbols[k + 1]))
                if r is not None and (best_rank is None or r < best_rank):
                    best, best_rank = k, r
            if best < 0:
                break
            symbols[best : best + 2] = [symbols[best] + symbols[best + 1]]
            fallback[best : best + 2] = [[]]
        ids: list[int] = []
        for sym, fb in zip(symbols, fallback):
            ids.extend(fb if not sym else (self._index[sym],))
        out = tuple(ids)
        if len(self._cache) < 200_000:
            self._cache[chunk] = out
        return out

    def encode(self, text: str) -> TokenSeq:
        ids: list[int] = []
        offset = 0
        for chunk in split_chunks(text):
            ids.extend(self._encode_chunk(chunk, offset))
            offset += len(chunk)
        return TokenSeq(tuple(ids))

    def decode(self, seq: TokenSeq | Iterable[int], errors: str = "strict") -> str:
        """Inverse of :meth:`encode`. Specials in the payload are an error.

        ``errors`` is passed to the UTF-8 decoder for byte-fallback runs;
        model output may contain byte tokens that do not form valid UTF-8.
        """
        ids = seq.ids if isinstance(seq, TokenSeq) else tuple(seq)
        parts: list[str] = []
        pending = bytearray()
        for i in ids:
            if not 0 <= i < len(self.tokens):
                raise DecodeError(f"id {i} out of range for vocab of size {len(self.tokens)}")
            if i in self.special_ids:
                raise DecodeError(f"special in payload: {self.tokens[i]} (id {i})")
            b = self._byte_of.get(i)
            if b is not None:
                pending.append(b)
                continue
            if pending:
                parts.append(_decode_bytes(pending, errors))
                pending = bytearray()
            parts.append(self.tokens[i])
        if pending:
            parts.append(_decode_bytes(pending, errors))
        return "".join(parts)

    def strip_specials(self, ids: Iterable[int]) -> list[int]:
        return [i for i in ids if i not in self.special_ids]

    # -- serialization --------------------------------------------------------
    def dumps(self) -> str:
        lines = [VOCAB_MAGIC, f"byte_fallback\t{'true' if self.byte_fallback else 'false'}", "[tokens]"]
        lines += [f"{i}\t{json.dumps(t, ensure_ascii=True)}" for i, t in enumerate(self.tokens)]
        lines.append("[merges]")
        lines += [f"{json.dumps(a, ensure_ascii=True)}\t{json.dumps(b, ensure_ascii=True)}" for a, b in self.merges]
        lines.append("[specials]")
        lines += [f"{role}\t{i}" for role, i in self.specials.items()]
        return "\n".join(lines) + "\n"

    def save(self, path: str | Path) -> None:
        Path(path).write_text(self.dumps(), encoding="ascii")

    @classmethod
    def loads(cls, text: str) -> "Vocab":
        lines = text.split("\n")
        if not lines or lines[0] != VOCAB_MAGIC:
            raise VocabError(f"not a vocab file (expected header {VOCAB_MAGIC!r})")
        try:
            key, value = lines[1].split("\t")
            if key != "byte_fallback" or value not in ("true", "false"):
                raise ValueError
            byte_fallback = value == "true"
            section = None
            tokens: list[str] = []
            merges: list[tuple[str, str]] = []
            specials: dict[str, int] = {}
            for line in lines[2:]:
                if not line:
                    continue
                if line in ("[tokens]", "[merges]", "[specials]"):
                    section = line
                elif section == "[tokens]":
                    i, tok = line.split("\t", 1)
                    if int(i) != len(tokens):
                        raise VocabError(f"token ids not dense at {i}")
                    tokens.append(json.loads(tok))
                elif section == "[merges]":
                    a, b = line.split("\t")
                    merges.append((json.loads(a), json.loads(b)))
                elif section == "[specials]":
                    role, i = line.split("\t")
                    specials[role] = int(i)
                else:
                    raise ValueError(line)
        except (ValueError, IndexError) as exc:
            raise VocabError(f"malformed vocab file: {exc}") from None
        return cls(tokens, merges, specials, byte_fallback)

    @classmethod
    def load(cls, path: str | Path) -> "Vocab":
        return cls.loads(Path(path).read_text(encoding="ascii"))


def _decode_bytes(buf: bytearray, errors: str) -> str:
    try:
        return bytes(buf).decode("utf-8", errors)
    except UnicodeDecodeError as exc:
        raise DecodeError(f"byte-fallback tokens do not form valid UTF-8: {exc.reason}") from None


def _special_text(role: str) -> str:
    core = {"pad": PAD, "bos": BOS, "eos": EOS, "mask": MASK}
    if role in core:
        return core[role]
    if role.startswith("lid:"):
        return lid_token(role[4:])
    raise VocabError(f"unknown special role {role!r}")


def train_vocab(
    corpora: Iterable[Iterable[str]],
    target_size: int,
    languages: Sequence[str],
    seed: int = 0,
    byte_fallback: bool = True,
    max_sentences: int | None = None,
) -> Vocab:
    """Learn BPE merges until the vocabulary reaches ``target_size``.

    Pair-count ties go to the lexicographically smallest pair, so the result
    is a pure function of the input. ``seed`` only matters when
    ``max_sentences`` subsamples the corpus.
    """
    sentences = [s for corpus in corpora for s in (corpus.lines if hasattr(corpus, "lines") else corpus)]
    if max_sentences is not None and len(sentences) > max_sentences:
        keep = np.sort(np.random.default_rng(seed).choice(len(sentences), max_sentences, replace=False))
        sentences = [sentences[i] for i in keep]

    specials = {"pad": 0, "bos": 1, "eos": 2, "mask": 3}
    tokens = list(CORE_SPECIALS)
    for lang in languages:
        specials[f"lid:{lang}"] = len(tokens)
        tokens.append(lid_token(lang))
    if byte_fallback:
        tokens.extend(_BYTE_TOKENS)

    words = collections.Counter(c for s in sentences for c in split_chunks(s))
    alphabet = sorted({ch for w in words for ch in w})
    reserved = set(tokens)
    alphabet = [ch for ch in alphabet if ch not in reserved]
    base = len(tokens) + len(alphabet)
    if target_size < base:
        raise VocabError(
            f"target_size {target_size} cannot cover the base alphabet: "
            f"{len(specials)} specials + {256 if byte_fallback else 0} byte tokens + {len(alphabet)} characters"
        )
    tokens.extend(alphabet)

    # word -> list of symbols; merge on pair counts weighted by word frequency
    split = {w: list(w) for w in words}
    merges: list[tuple[str, str]] = []
    known = set(tokens)
    while len(tokens) < target_size:
        pairs: collections.Counter = collections.Counter()
        for w, n in words.items():
            syms = split[w]
            for a, b in zip(syms, syms[1:]):
                pairs[(a, b)] += n
        candidates = [(n, p) for p, n in pairs.items() if n >= 2 and p[0] + p[1] not in known]
        if not candidates:
            break
        top = max(n for n, _ in candidates)
        pair = min(p for n, p in candidates if n == top)
        merged = pair[0] + pair[1]
        merges.append(pair)
        tokens.append(merged)
        known.add(merged)
        for w, syms in split.items():
            if len(syms) < 2:
                continue
            i, out = 0, []
            while i < len(syms):
                if i + 1 < len(syms) and syms[i] == pair[0] and syms[i + 1] == pair[1]:
                    out.append(merged)
                    i += 2
                else:
                    out.append(syms[i])
                    i += 1
            split[w] = out
    return Vocab(tokens, merges, specials, byte_fallback)
