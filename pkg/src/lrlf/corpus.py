"""Corpus ingestion: manifests, cleaning, domain mixing and temperature sampling.

Corpus files are plain UTF-8 text, one sentence per line. A parallel corpus
``<name>`` in languages ``src``/``tgt`` is the pair of aligned files
``<name>.<src>`` and ``<name>.<tgt>``.
"""

from __future__ import annotations

import enum
import logging
import re
import unicodedata
from dataclasses import dataclass, field
from pathlib import Path
from typing import Iterable, Sequence

import numpy as np
import yaml

logger = logging.getLogger(__name__)

SPLITS = ("train", "valid", "test")
_LANG_RE = re.compile(r"^[a-z][a-z0-9_]*$")


class Domain(str, enum.Enum):
    IN = "in"
    OUT = "out"
    MIXED = "mixed"


class CorpusError(ValueError):
    pass


class CorpusDecodeError(CorpusError):
    def __init__(self, source: str, lineno: int, reason: str):
        super().__init__(f"{source}:{lineno}: invalid UTF-8 ({reason})")
        self.source = source
        self.lineno = lineno


class ManifestError(CorpusError):
    """Base class; ``field`` holds the dotted path of the offending entry."""

    def __init__(self, field: str, message: str):
        super().__init__(f"{field}: {message}")
        self.field = field


class ManifestNotFoundError(ManifestError):
    pass


class ManifestSchemaError(ManifestError):
    pass


class DanglingLanguageError(ManifestError):
    pass


def check_lang(code: str) -> str:
    if not isinstance(code, str) or not _LANG_RE.match(code):
        raise CorpusError(f"bad language code {code!r}: must be non-empty lowercase ASCII")
    return code


# ---------------------------------------------------------------------------
# cleaning

_MONTHS = (
    "jan(?:uary)?|feb(?:ruary)?|mar(?:ch)?|apr(?:il)?|may|june?|july?|aug(?:ust)?"
    "|sep(?:t(?:ember)?)?|oct(?:ober)?|nov(?:ember)?|dec(?:ember)?"
)

#: Lines matching any of these are dropped by :func:`clean`.
DEFAULT_DROP_PATTERNS: tuple[str, ...] = (
    # blank
    r"^\s*$",
    # no letters at all: digits, numeric dates, punctuation and symbols only
    r"^[\W\d_]+$",
    # dates spelled with a month name: "12 March 2020", "March 12, 2020", "Mar. 2020"
    rf"(?i)^\W*(?:\d{{1,2}}(?:st|nd|rd|th)?\W+)?(?:{_MONTHS})\.?\W*(?:\d{{1,2}}(?:st|nd|rd|th)?\W+)?\d{{2,4}}\W*$",
)


@dataclass(frozen=True)
class CleanRules:
    drop_patterns: tuple[str, ...] = DEFAULT_DROP_PATTERNS

    def compiled(self) -> list[re.Pattern]:
        return [re.compile(p) for p in self.drop_patterns]


def _is_symbolic(line: str) -> bool:
    # \W treats combining marks as non-word; a line of marks only has no base letter
    return not any(unicodedata.category(ch).startswith("L") for ch in line)


def clean(lines: Iterable[str | bytes], rules: CleanRules | None = None) -> list[str]:
    """Drop blank lines and lines made only of digits, dates or punctuation.

    Surviving lines are returned unchanged and in order. ``bytes`` items are
    decoded as strict UTF-8; a bad item raises :class:`CorpusDecodeError`
    naming its 1-based line number.
    """
    rules = rules or CleanRules()
    patterns = rules.compiled()
    default = rules.drop_patterns == DEFAULT_DROP_PATTERNS
    out = []
    for lineno, line in enumerate(lines, start=1):
        if isinstance(line, bytes):
            try:
                line = line.decode("utf-8")
            except UnicodeDecodeError as exc:
                raise CorpusDecodeError("<input>", lineno, exc.reason) from None
        if any(p.search(line) for p in patterns):
            continue
        if default and _is_symbolic(line):
            continue
        out.append(line)
    return out


def read_lines(path: str | Path) -> list[str]:
    """Read a corpus file; line terminators are the only bytes removed."""
    path = Path(path)
    raw = path.read_bytes()
    if not raw:
        return []
    chunks = raw.split(b"\n")
    if chunks[-1] == b"":
        chunks.pop()
    lines = []
    for lineno, chunk in enumerate(chunks, start=1):
        if chunk.endswith(b"\r"):
            chunk = chunk[:-1]
        try:
            lines.append(chunk.decode("utf-8"))
        except UnicodeDecodeError as exc:
            raise CorpusDecodeError(str(path), lineno, exc.reason) from None
    return lines


def write_lines(path: str | Path, lines: Iterable[str]) -> None:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    with open(path, "w", encoding="utf-8", newline="\n") as fh:
        for line in lines:
            fh.write(line)
            fh.write("\n")


# ---------------------------------------------------------------------------
# datasets


@dataclass(frozen=True)
class MonoDataset:
    lang: str
    domain: Domain
    lines: tuple[str, ...]
    name: str = ""

    def __len__(self) -> int:
        return len(self.lines)


@dataclass(frozen=True)
class ParallelDataset:
    src_lang: str
    tgt_lang: str
    domain: Domain
    pairs: tuple[tuple[str, str], ...]
    name: str = ""

    def __post_init__(self):
        if self.src_lang == self.tgt_lang:
            raise CorpusError(f"parallel dataset {self.name!r}: src_lang == tgt_lang == {self.src_lang!r}")

    def __len__(self) -> int:
        return len(self.pairs)

    def reversed(self) -> "ParallelDataset":
        return ParallelDataset(self.tgt_lang, self.src_lang, self.domain, tuple((t, s) for s, t in self.pairs), self.name)

    def side(self, lang: str) -> tuple[str, ...]:
        if lang == self.src_lang:
            return tuple(s for s, _ in self.pairs)
        if lang == self.tgt_lang:
            return tuple(t for _, t in self.pairs)
        raise CorpusError(f"{lang!r} is not a side of {self.src_lang}-{self.tgt_lang}")

    def oriented(self, src: str, tgt: str) -> "ParallelDataset":
        if (src, tgt) == (self.src_lang, self.tgt_lang):
            return self
        if (src, tgt) == (self.tgt_lang, self.src_lang):
            return self.reversed()
        raise CorpusError(f"dataset {self.src_lang}-{self.tgt_lang} cannot serve {src}->{tgt}")


@dataclass(frozen=True)
class MonoEntry:
    path: Path
    lang: str
    domain: Domain
    count: int = 0


@dataclass(frozen=True)
class ParallelEntry:
    prefix: Path
    src_lang: str
    tgt_lang: str
    domain: Domain
    split: str
    count: int = 0

    @property
    def pair(self) -> frozenset[str]:
        return frozenset((self.src_lang, self.tgt_lang))

    def paths(self) -> tuple[Path, Path]:
        return (
            self.prefix.with_name(f"{self.prefix.name}.{self.src_lang}"),
            self.prefix.with_name(f"{self.prefix.name}.{self.tgt_lang}"),
        )


@dataclass(frozen=True)
class CorpusManifest:
    languages: tuple[str, ...]
    mono: tuple[MonoEntry, ...] = ()
    parallel: tuple[ParallelEntry, ...] = ()
    needs_zwj_repair: frozenset[str] = frozenset({"si"})
    clean_rules: CleanRules = field(default_factory=CleanRules)
    root: Path = Path(".")

    def parallel_for(self, a: str, b: str, split: str, domain: Domain | None = Domain.IN) -> list[ParallelEntry]:
        return [
            p
            for p in self.parallel
            if p.pair == frozenset((a, b)) and p.split == split and (domain is None or p.domain == domain)
        ]

    def load_mono(self, entry: MonoEntry) -> MonoDataset:
        lines = clean(read_lines(entry.path), self.clean_rules)
        return MonoDataset(entry.lang, entry.domain, tuple(lines), name=entry.path.name)

    def load_parallel(self, entry: ParallelEntry) -> ParallelDataset:
        src_path, tgt_path = entry.paths()
        src, tgt = read_lines(src_path), read_lines(tgt_path)
        if len(src) != len(tgt):
            raise CorpusError(f"{entry.prefix}: {len(src)} source lines vs {len(tgt)} target lines")
        pairs = tuple(clean_pairs(zip(src, tgt), self.clean_rules))
        if not pairs:
            raise CorpusError(f"{entry.prefix}: no pairs survive cleaning")
        return ParallelDataset(entry.src_lang, entry.tgt_lang, entry.domain, pairs, name=entry.prefix.name)

    def pair_dataset(self, src: str, tgt: str, split: str, domain: Domain = Domain.IN) -> ParallelDataset:
        """Concatenate every ``split`` entry for the pair, oriented ``src -> tgt``."""
        entries = self.parallel_for(src, tgt, split, domain)
        if not entries:
            raise CorpusError(f"no {domain.value}-domain {split} data for {src}-{tgt}")
        pairs: list[tuple[str, str]] = []
        for e in entries:
            pairs.extend(self.load_parallel(e).oriented(src, tgt).pairs)
        return ParallelDataset(src, tgt, domain, tuple(pairs), name=f"{split}.{src}-{tgt}")


    def vocab_text(self) -> list[tuple[str, ...]]:
        """Cleaned monolingual text plus both sides of every training split, for vocabulary learning."""
        texts = [self.load_mono(e).lines for e in self.mono]
        for e in self.parallel:
            if e.split == "train":
                ds = self.load_parallel(e)
                texts += [ds.side(e.src_lang), ds.side(e.tgt_lang)]
        return texts


def clean_pairs(pairs: Iterable[tuple[str, str]], rules: CleanRules | None = None) -> list[tuple[str, str]]:
    """Keep a pair only when both sides survive :func:`clean`."""
    out = []
    for s, t in pairs:
        if clean([s], rules) and clean([t], rules):
            out.append((s, t))
    return out


def _count_lines(path: Path) -> int:
    data = path.read_bytes()
    if not data:
        return 0
    return data.count(b"\n") + (0 if data.endswith(b"\n") else 1)


def _require(cond: bool, fld: str, msg: str, exc=ManifestSchemaError):
    if not cond:
        raise exc(fld, msg)


def _domain(value, fld: str) -> Domain:
    try:
        dom = Domain(value)
    except ValueError:
        raise ManifestSchemaError(fld, f"unknown domain {value!r}; expected 'in' or 'out'") from None
    _require(dom is not Domain.MIXED, fld, "'mixed' is produced by the mixer and cannot be declared")
    return dom


def load_manifest(path: str | Path) -> CorpusManifest:
    """Parse and validate a YAML corpus manifest.

    Paths inside the manifest resolve relative to the manifest's directory.
    Line counts are recorded from the raw files (before cleaning).
    """
    path = Path(path)
    if not path.is_file():
        raise ManifestNotFoundError("<file>", f"manifest {path} does not exist")
    root = path.parent
    try:
        doc = yaml.safe_load(path.read_text(encoding="utf-8"))
    except yaml.YAMLError as exc:
        raise ManifestSchemaError("<file>", f"not valid YAML: {exc}") from None
    _require(isinstance(doc, dict), "<root>", "manifest must be a mapping")
    unknown = set(doc) - {"languages", "mono", "parallel", "needs_zwj_repair", "clean"}
    _require(not unknown, "<root>", f"unknown sections {sorted(unknown)}")

    langs = doc.get("languages")
    _require(isinstance(langs, list) and langs, "languages", "must be a non-empty list")
    for i, code in enumerate(langs):
        _require(isinstance(code, str) and bool(_LANG_RE.match(code)), f"languages[{i}]", f"bad code {code!r}")
    _require(len(set(langs)) == len(langs), "languages", "duplicate language codes")
    known = set(langs)

    def lang_ref(value, fld):
        _require(isinstance(value, str), fld, "must be a string")
        if value not in known:
            raise DanglingLanguageError(fld, f"language {value!r} is not listed in 'languages'")
        return value

    def resolve(p, fld):
        _require(isinstance(p, str) and p, fld, "must be a non-empty path string")
        return (root / p).resolve()

    mono = []
    for i, item in enumerate(doc.get("mono") or []):
        fld = f"mono[{i}]"
        _require(isinstance(item, dict), fld, "must be a mapping")
        lang = lang_ref(item.get("lang"), f"{fld}.lang")
        dom = _domain(item.get("domain"), f"{fld}.domain")
        p = resolve(item.get("path"), f"{fld}.path")
        if not p.is_file():
            raise ManifestNotFoundError(f"{fld}.path", f"{p} does not exist")
        mono.append(MonoEntry(p, lang, dom, _count_lines(p)))

    parallel = []
    for i, item in enumerate(doc.get("parallel") or []):
        fld = f"parallel[{i}]"
        _require(isinstance(item, dict), fld, "must be a mapping")
        src = lang_ref(item.get("src_lang"), f"{fld}.src_lang")
        tgt = lang_ref(item.get("tgt_lang"), f"{fld}.tgt_lang")
        _require(src != tgt, f"{fld}.tgt_lang", "must differ from src_lang")
        dom = _domain(item.get("domain"), f"{fld}.domain")
        split = item.get("split", "train")
        _require(split in SPLITS, f"{fld}.split", f"must be one of {SPLITS}")
        entry = ParallelEntry(resolve(item.get("prefix"), f"{fld}.prefix"), src, tgt, dom, split)
        counts = []
        for side, p in zip(("src", "tgt"), entry.paths()):
            if not p.is_file():
                raise ManifestNotFoundError(f"{fld}.prefix", f"{p} ({side} side) does not exist")
            counts.append(_count_lines(p))
        _require(counts[0] == counts[1], f"{fld}.prefix", f"unaligned files: {counts[0]} vs {counts[1]} lines")
        _require(counts[0] > 0, f"{fld}.prefix", "empty parallel corpus")
        parallel.append(ParallelEntry(entry.prefix, src, tgt, dom, split, counts[0]))

    # every pair with in-domain training data is an evaluated pair
    evaluated = {p.pair for p in parallel if p.split == "train" and p.domain is Domain.IN}
    for pair in sorted(evaluated, key=sorted):
        for split in ("valid", "test"):
            n = sum(1 for p in parallel if p.pair == pair and p.split == split)
            _require(n == 1, "parallel", f"pair {'-'.join(sorted(pair))} needs exactly one {split} split, found {n}")

    zwj = doc.get("needs_zwj_repair", ["si"] if "si" in known else [])
    _require(isinstance(zwj, list), "needs_zwj_repair", "must be a list")
    for i, code in enumerate(zwj):
        lang_ref(code, f"needs_zwj_repair[{i}]")

    rules = CleanRules()
    if "clean" in doc:
        c = doc["clean"]
        _require(isinstance(c, dict) and isinstance(c.get("drop_patterns"), list), "clean", "expected {drop_patterns: [...]}")
        for i, pat in enumerate(c["drop_patterns"]):
            try:
                re.compile(pat)
            except (re.error, TypeError) as exc:
                raise ManifestSchemaError(f"clean.drop_patterns[{i}]", str(exc)) from None
        rules = CleanRules(tuple(c["drop_patterns"]))

    return CorpusManifest(tuple(langs), tuple(mono), tuple(parallel), frozenset(zwj), rules, root)


# ---------------------------------------------------------------------------
# mixing and sampling


def upsample_mix(in_domain: ParallelDataset, out_domain: ParallelDataset, seed: int) -> ParallelDataset:
    """Up-sample in-domain pairs to the out-domain size and shuffle both together.

    The in-domain part is ``len(out) // len(in)`` full copies plus a
    remainder drawn without replacement, so per-pair occurrence counts differ
    by at most one. The result holds ``2 * len(out_domain)`` pairs.
    """
    if (in_domain.src_lang, in_domain.tgt_lang) != (out_domain.src_lang, out_domain.tgt_lang):
        raise CorpusError(
            f"language pair mismatch: {in_domain.src_lang}-{in_domain.tgt_lang} "
            f"vs {out_domain.src_lang}-{out_domain.tgt_lang}"
        )
    n_in, n_out = len(in_domain), len(out_domain)
    if n_in == 0:
        raise CorpusError("in-domain dataset is empty")
    if n_out < n_in:
        raise CorpusError(f"out-domain ({n_out}) must be at least as large as in-domain ({n_in})")
    rng = np.random.default_rng(seed)
    copies, rem = divmod(n_out, n_in)
    extra = np.sort(rng.choice(n_in, size=rem, replace=False))
    mixed = list(in_domain.pairs) * copies + [in_domain.pairs[i] for i in extra] + list(out_domain.pairs)
    order = rng.permutation(len(mixed))
    return ParallelDataset(
        in_domain.src_lang,
        in_domain.tgt_lang,
        Domain.MIXED,
        tuple(mixed[i] for i in order),
        name=f"mixed.{in_domain.src_lang}-{in_domain.tgt_lang}",
    )


@dataclass(frozen=True)
class SamplingConfig:
    temperature: float = 1.5

    def __post_init__(self):
        if not self.temperature > 0:
            raise ValueError(f"temperature must be positive, got {self.temperature}")


def temperature_weights(sizes: Sequence[int], cfg: SamplingConfig = SamplingConfig()) -> np.ndarray:
    """Sampling weights q_i proportional to (n_i / sum n)^(1/T)."""
    if len(sizes) == 0:
        raise ValueError("sizes must be non-empty")
    sizes = np.asarray(sizes, dtype=np.float64)
    if np.any(sizes <= 0):
        raise ValueError(f"all sizes must be positive, got {sizes.tolist()}")
    p = sizes / sizes.sum()
    if cfg.temperature == 1:
        return p
    q = p ** (1.0 / cfg.temperature)
    return q / q.sum()


def sample_batch_language(weights: Sequence[float], rng: np.random.Generator) -> int:
    weights = np.asarray(weights, dtype=np.float64)
    if abs(weights.sum() - 1.0) > 1e-9:
        raise ValueError(f"weights must sum to 1, got {weights.sum()!r}")
    # inverse-CDF on one uniform draw keeps the stream position independent of len(weights)
    u = rng.random()
    idx = int(np.searchsorted(np.cumsum(weights), u, side="right"))
    return min(idx, len(weights) - 1)
