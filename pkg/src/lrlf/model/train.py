from __future__ import annotations

import logging
import math
from dataclasses import dataclass, field
from typing import Callable, Iterator, Sequence

import numpy as np

from ..corpus import sample_batch_language
from .checkpoint import ModelCheckpoint, TrainingMeta
from .config import ModelConfig, TrainConfig, learning_rate
from .transformer import Batch, Params, collate, init_params, loss_and_grads, token_nll

logger = logging.getLogger(__name__)


class TrainingDiverged(RuntimeError):
    def __init__(self, step: int, loss: float, last_good: ModelCheckpoint | None):
        super().__init__(f"loss became {loss} at update {step}; last good checkpoint at update "
                         f"{last_good.meta.updates if last_good else 'none'}")
        self.step = step
        self.last_good = last_good


@dataclass
class StageResult:
    checkpoints: list[ModelCheckpoint]
    losses: list[float] = field(default_factory=list)

    @property
    def last(self) -> ModelCheckpoint:
        return self.checkpoints[-1]


# ---------------------------------------------------------------------------
# batching


def _length(ex) -> int:
    return max(len(ex.encoder_input), len(ex.decoder_input))


def make_batches(examples: Sequence, batch_tokens: int, rng: np.random.Generator) -> list[Batch]:
    """Shuffle, then cut into batches whose padded size stays within ``batch_tokens``."""
    order = rng.permutation(len(examples))
    batches, current, width = [], [], 0
    for i in order:
        ex = examples[i]
        w = max(width, _length(ex))
        if current and w * (len(current) + 1) > batch_tokens:
            batches.append(collate(current))
            current, w = [], _length(ex)
        current.append(ex)
        width = w
    if current:
        batches.append(collate(current))
    return batches


def batch_stream(
    examples_for_epoch: Callable[[int], Sequence] | Sequence,
    batch_tokens: int,
    seed: int,
) -> Iterator[Batch]:
    """Endless epochs of batches. A callable source is re-invoked per epoch (fresh noise)."""
    epoch = 0
    while True:
        examples = examples_for_epoch(epoch) if callable(examples_for_epoch) else examples_for_epoch
        if not examples:
            raise ValueError("empty training set")
        rng = np.random.default_rng(np.random.SeedSequence([seed, epoch]))
        yield from make_batches(examples, batch_tokens, rng)
        epoch += 1


def sampled_stream(streams: Sequence[Iterator[Batch]], weights: Sequence[float], seed: int) -> Iterator[Batch]:
    """Per batch, pick a source stream with probability ``weights[i]``."""
    rng = np.random.default_rng(np.random.SeedSequence([seed, 991]))
    while True:
        yield next(streams[sample_batch_language(weights, rng)])


# ---------------------------------------------------------------------------
# optimisation


class Adam:
    def __init__(self, params: Params, betas=(0.9, 0.999), eps=1e-8):
        self.b1, self.b2 = betas
        self.eps = eps
        self.t = 0
        self.m = {k: np.zeros_like(v) for k, v in params.items()}
        self.v = {k: np.zeros_like(v) for k, v in params.items()}

    def step(self, params: Params, grads: Params, lr: float) -> None:
        self.t += 1
        c1 = 1.0 - self.b1**self.t
        c2 = 1.0 - self.b2**self.t
        for k, g in grads.items():
            m, v = self.m[k], self.v[k]
            m *= self.b1
            m += (1.0 - self.b1) * g
            v *= self.b2
            v += (1.0 - self.b2) * (g * g)
            params[k] -= (lr / c1) * m / (np.sqrt(v / c2) + self.eps)


def _clip(grads: Params, max_norm: float) -> float:
    norm = math.sqrt(sum(float((g.astype(np.float64) ** 2).sum()) for g in grads.values()))
    if max_norm > 0 and norm > max_norm:
        scale = max_norm / (norm + 1e-6)
        for g in grads.values():
            g *= scale
    return norm


def _retain(ckpts: list[ModelCheckpoint], keep_last: int) -> list[ModelCheckpoint]:
    """Last ``keep_last`` checkpoints plus the best by validation NLL."""
    kept = ckpts[-keep_last:]
    scored = [c for c in ckpts if c.meta.valid_nll is not None]
    if scored:
        best = min(scored, key=lambda c: (c.meta.valid_nll, -c.meta.updates))
        if all(best is not c for c in kept):
            kept = [best] + kept
    return kept


def train_stage(
    init: ModelCheckpoint | ModelConfig,
    batches: Iterator[Batch],
    tcfg: TrainConfig,
    evaluate: Callable[[ModelCheckpoint], tuple[float | None, float | None]] | None = None,
    stage: str = "",
    log_every: int = 0,
) -> StageResult:
    """Train from ``init`` (a checkpoint, or a config for fresh weights).

    Every ``save_every`` updates (and at the end) a checkpoint is cut and,
    when ``evaluate`` is given, stamped with its validation NLL and BLEU.
    """
    if isinstance(init, ModelConfig):
        cfg = init
        params = init_params(cfg, seed=tcfg.seed)
    else:
        cfg = init.config
        params = {k: np.array(v, dtype=np.float32, copy=True) for k, v in init.params.items()}
    opt = Adam(params, tcfg.adam_betas, tcfg.adam_eps)
    rng = np.random.default_rng(np.random.SeedSequence([tcfg.seed, 17]))
    ckpts: list[ModelCheckpoint] = []
    losses: list[float] = []
    last_good: ModelCheckpoint | None = None if isinstance(init, ModelConfig) else init

    for step in range(1, tcfg.max_updates + 1):
        batch = next(batches)
        loss, grads = loss_and_grads(params, cfg, batch, tcfg.label_smoothing, tcfg.dropout, rng)
        if not math.isfinite(loss):
            raise TrainingDiverged(step, loss, last_good)
        _clip(grads, tcfg.clip_norm)
        opt.step(params, grads, learning_rate(step, tcfg))
        losses.append(loss)
        if log_every and step % log_every == 0:
            logger.info("%s update %d loss %.4f", stage or "train", step, float(np.mean(losses[-log_every:])))
        if step % tcfg.save_every == 0 or step == tcfg.max_updates:
            ckpt = ModelCheckpoint(cfg, {k: v.copy() for k, v in params.items()}, TrainingMeta(stage, step))
            if evaluate is not None:
                nll, bleu = evaluate(ckpt)
                ckpt = ckpt.with_meta(valid_nll=nll, valid_bleu=bleu)
            ckpts.append(ckpt)
            ckpts = _retain(ckpts, tcfg.keep_last)
            last_good = ckpt
    return StageResult(ckpts, losses)


def validation_nll(ckpt: ModelCheckpoint, batches: Sequence[Batch]) -> float:
    """Mean per-token negative log-likelihood, dropout off, no smoothing."""
    if not batches:
        raise ValueError("empty validation set")
    total, count = 0.0, 0
    for b in batches:
        s, n = token_nll(ckpt.params, ckpt.config, b)
        total += s
        count += n
    if count == 0:
        raise ValueError("validation set has no target tokens")
    return total / count
