"""Beam search over single models and output-averaging ensembles.

An ensemble averages the members' next-token distributions. Members are
held in a canonical order (by parameter digest) and the mean is computed as
``p_0 + sum_i (p_i - p_0) / k``, so member order never changes the result and
an ensemble of identical models reproduces the single model bit for bit.
"""

from __future__ import annotations

import dataclasses
import logging
from dataclasses import dataclass, field
from pathlib import Path
from typing import Callable, Sequence

import numpy as np

from .model.checkpoint import ModelCheckpoint
from .model.transformer import encode, next_token_logprobs
from .subword import EOS_ID, Vocab, zwj_repair

logger = logging.getLogger(__name__)

SOURCES = ("single-run", "multi-model")
MAX_MEMBERS = 3


class DecodeError(ValueError):
    pass


@dataclass(frozen=True)
class DecodeConfig:
    beam_size: int = 5
    max_output_len: int = 200
    length_penalty: float = 0.0
    target_lid: int = 1
    eos_id: int = EOS_ID
    banned_ids: frozenset = frozenset()
    log_space: bool = False  # average log-probabilities instead of probabilities

    def __post_init__(self):
        if self.beam_size < 1:
            raise ValueError("beam_size must be >= 1")
        if self.max_output_len < 1:
            raise ValueError("max_output_len must be >= 1")
        if self.length_penalty < 0:
            raise ValueError("length_penalty must be >= 0")
        if self.eos_id in self.banned_ids:
            raise ValueError("EOS cannot be banned")

    @classmethod
    def for_vocab(cls, vocab: Vocab, target_lang: str, **kw) -> "DecodeConfig":
        """Target LID start symbol; every special except EOS is banned from the output."""
        banned = frozenset(i for i in vocab.special_ids if i != vocab.eos_id)
        return cls(target_lid=vocab.lid(target_lang), eos_id=vocab.eos_id, banned_ids=banned, **kw)


@dataclass(frozen=True)
class EnsembleSpec:
    members: tuple[ModelCheckpoint, ...]
    source: str = "single-run"

    def __post_init__(self):
        members = tuple(self.members)
        if not 1 <= len(members) <= MAX_MEMBERS:
            raise DecodeError(f"an ensemble holds 1-{MAX_MEMBERS} members, got {len(members)}")
        if self.source not in SOURCES:
            raise DecodeError(f"unknown ensemble source {self.source!r}")
        cfg = members[0].config
        for m in members[1:]:
            if m.config.vocab_size != cfg.vocab_size:
                raise DecodeError(f"member vocab mismatch: {m.config.vocab_size} vs {cfg.vocab_size}")
            if m.config != cfg:
                raise DecodeError("ensemble members must share one model configuration")
        object.__setattr__(self, "members", tuple(sorted(members, key=lambda m: m.digest())))

    @classmethod
    def single(cls, ckpt: ModelCheckpoint) -> "EnsembleSpec":
        return cls((ckpt,))


@dataclass(frozen=True)
class Hypothesis:
    tokens: tuple[int, ...]  # generated ids, start symbol excluded
    score: float
    finished: bool = False

    def normalized(self, alpha: float) -> float:
        if alpha == 0:
            return self.score
        return self.score / max(len(self.tokens), 1) ** alpha


@dataclass(frozen=True)
class DecodeResult:
    tokens: tuple[int, ...]  # output ids without the trailing EOS
    score: float
    finished: bool  # False when the hypothesis was cut off at max_output_len
    warning: str | None = None


def encoder_states(spec: EnsembleSpec, source: Sequence[int]) -> list[tuple[np.ndarray, np.ndarray]]:
    src = np.asarray([list(source)], dtype=np.int64)
    return [encode(m.params, m.config, src) for m in spec.members]


def ensemble_step(
    spec: EnsembleSpec,
    states: Sequence[tuple[np.ndarray, np.ndarray]],
    prefixes: np.ndarray,
    log_space: bool = False,
) -> np.ndarray:
    """Next-token distribution (float64, rows sum to 1) for each prefix row.

    ``states`` are per-member ``(encoder output, bias)`` for one source
    sentence; they are broadcast over the prefix rows.
    """
    prefixes = np.atleast_2d(np.asarray(prefixes, dtype=np.int64))
    n = prefixes.shape[0]
    outs = []
    for m, (enc, bias) in zip(spec.members, states):
        e = np.broadcast_to(enc, (n,) + enc.shape[1:])
        b = np.broadcast_to(bias, (n,) + bias.shape[1:])
        lp = next_token_logprobs(m.params, m.config, e, b, prefixes)
        outs.append(lp if log_space else np.exp(lp))
    k = len(outs)
    mean = outs[0]
    if k > 1:
        mean = outs[0] + sum(o - outs[0] for o in outs[1:]) / k
    if log_space:
        mean = np.exp(mean - mean.max(-1, keepdims=True))
    return mean / mean.sum(-1, keepdims=True)


def _log(p: np.ndarray) -> np.ndarray:
    with np.errstate(divide="ignore"):
        return np.log(p)


def beam_search(spec: EnsembleSpec, cfg: DecodeConfig, source: Sequence[int]) -> DecodeResult:
    """Beam search in the usual finalize-within-beam form.

    Per step the best ``2 * beam`` candidates are ranked by score, ties going
    to the lexicographically smaller id sequence. An EOS candidate is
    finalized only if it ranks inside the first ``beam`` places; the first
    ``beam`` non-EOS candidates stay active. At the length limit only EOS may
    be emitted; a hypothesis ended that way is reported as unfinished.
    Search stops once ``beam`` hypotheses are final, or (without length
    penalty) once no active hypothesis can beat the best final one.
    """
    states = encoder_states(spec, source)
    beam, alpha, eos = cfg.beam_size, cfg.length_penalty, cfg.eos_id
    banned = np.array(sorted(cfg.banned_ids), dtype=np.int64)
    active: list[Hypothesis] = [Hypothesis((), 0.0)]
    final: list[Hypothesis] = []
    truncated: set[tuple[int, ...]] = set()

    for t in range(cfg.max_output_len):
        prefixes = np.array([(cfg.target_lid,) + h.tokens for h in active], dtype=np.int64)
        logp = _log(ensemble_step(spec, states, prefixes, cfg.log_space))
        if banned.size:
            logp[:, banned] = -np.inf
        last = t == cfg.max_output_len - 1
        if last:
            keep = logp[:, eos].copy()
            logp[:] = -np.inf
            logp[:, eos] = keep
        cand = np.array([h.score for h in active])[:, None] + logp
        flat = cand.ravel()
        finite = np.flatnonzero(np.isfinite(flat))
        if finite.size == 0:
            break
        want = min(2 * beam, finite.size)
        # all candidates scoring at least the want-th best, so ties are ranked exactly
        cut = np.partition(flat[finite], finite.size - want)[finite.size - want]
        pool = finite[flat[finite] >= cut]
        V = logp.shape[1]
        ranked = sorted(
            ((float(flat[i]), active[i // V].tokens + (int(i % V),)) for i in pool),
            key=lambda x: (-x[0], x[1]),
        )[: 2 * beam]
        nxt: list[Hypothesis] = []
        for rank, (score, toks) in enumerate(ranked):
            if toks[-1] == eos:
                if rank < beam:
                    final.append(Hypothesis(toks, score, True))
                    if last:
                        truncated.add(toks)
            elif len(nxt) < beam:
                nxt.append(Hypothesis(toks, score))
        active = nxt
        if len(final) >= beam or not active:
            break
        if alpha == 0 and final and max(h.score for h in final) >= active[0].score:
            break

    if final:
        best = min(final, key=lambda h: (-h.normalized(alpha), h.tokens))
        toks = best.tokens[:-1]
        if best.tokens in truncated:
            return DecodeResult(toks, best.score, False, f"no hypothesis finished within {cfg.max_output_len} tokens")
        return DecodeResult(toks, best.score, True)
    if active:
        best = min(active, key=lambda h: (-h.normalized(alpha), h.tokens))
        return DecodeResult(best.tokens, best.score, False, "search ended without a finished hypothesis")
    return DecodeResult((), float("-inf"), False, "every continuation has zero probability")


def greedy_search(spec: EnsembleSpec, cfg: DecodeConfig, source: Sequence[int]) -> DecodeResult:
    return beam_search(spec, dataclasses.replace(cfg, beam_size=1), source)


# ---------------------------------------------------------------------------
# checkpoint ensembles


def select_ensemble_checkpoints(ckpts: Sequence[ModelCheckpoint], k: int, source: str = "single-run") -> EnsembleSpec:
    """Top ``k`` checkpoints by validation BLEU; ties go to the later update."""
    if k not in (2, 3):
        raise DecodeError(f"k must be 2 or 3, got {k}")
    scored = [c for c in ckpts if c.meta.valid_bleu is not None]
    if len(scored) < k:
        raise DecodeError(f"need {k} scored checkpoints, have {len(scored)}")
    ranked = sorted(scored, key=lambda c: (-c.meta.valid_bleu, -c.meta.updates))
    return EnsembleSpec(tuple(ranked[:k]), source)


def best_ensemble(
    ckpts: Sequence[ModelCheckpoint],
    valid_score: Callable[[EnsembleSpec], float],
) -> tuple[EnsembleSpec, float]:
    """The better of the k=2 and k=3 ensembles by ``valid_score`` (k=3 on ties)."""
    options = []
    for k in (3, 2):
        if sum(c.meta.valid_bleu is not None for c in ckpts) >= k:
            spec = select_ensemble_checkpoints(ckpts, k)
            options.append((valid_score(spec), spec))
    if not options:
        raise DecodeError("need at least 2 scored checkpoints for an ensemble")
    score, spec = max(options, key=lambda x: x[0])
    return spec, score


# ---------------------------------------------------------------------------
# text in, text out


def source_ids(vocab: Vocab, line: str, src_lang: str, max_len: int) -> list[int]:
    ids = list(vocab.encode(line).ids)[: max_len - 1]
    return ids + [vocab.lid(src_lang)]


def render(vocab: Vocab, result: DecodeResult, repair_zwj: bool = False) -> str:
    text = vocab.decode(result.tokens, errors="replace").replace("\n", " ")
    return zwj_repair(text) if repair_zwj else text


@dataclass
class TranslateSummary:
    sentences: int = 0
    warnings: list[tuple[int, str]] = field(default_factory=list)
    errors: list[tuple[int, str]] = field(default_factory=list)

    def __str__(self) -> str:
        return f"translated {self.sentences} lines, {len(self.warnings)} warnings, {len(self.errors)} errors"


def translate_file(
    spec: EnsembleSpec,
    cfg: DecodeConfig,
    src_path: str | Path,
    out_path: str | Path,
    vocab: Vocab,
    src_lang: str,
    repair_zwj: bool = False,
) -> TranslateSummary:
    """Translate line by line. A bad line yields an empty output line and an error entry."""
    summary = TranslateSummary()
    max_len = spec.members[0].config.max_len
    raw = Path(src_path).read_bytes()
    rows = raw.split(b"\n")
    if rows and rows[-1] == b"":
        rows.pop()
    out = []
    for lineno, row in enumerate(rows, 1):
        summary.sentences += 1
        try:
            line = row.rstrip(b"\r").decode("utf-8")
            res = beam_search(spec, cfg, source_ids(vocab, line, src_lang, max_len))
            if res.warning:
                summary.warnings.append((lineno, res.warning))
            out.append(render(vocab, res, repair_zwj))
        except (UnicodeDecodeError, ValueError) as exc:
            summary.errors.append((lineno, f"{type(exc).__name__}: {exc}"))
            logger.warning("line %d: %s", lineno, exc)
            out.append("")
    Path(out_path).write_text("".join(s + "\n" for s in out), encoding="utf-8")
    return summary
