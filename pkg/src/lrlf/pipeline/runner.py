"""Execute stage chains: data assembly, training, checkpoint selection, scoring.

Each executed stage owns a directory under ``<out>/stages``. A stage is
identified by a key hashed from its description, its start checkpoint and
its training config, so chains that share a prefix (both directions of a
pair after one biCPT, or the M-FT sweep behind several targets) train it
once, and a rerun skips every stage whose directory is already complete.
"""

from __future__ import annotations

import dataclasses
import hashlib
import json
import logging
import re
from dataclasses import dataclass, field
from pathlib import Path
from typing import Callable, Sequence

import numpy as np

from ..corpus import CorpusManifest, Domain, SamplingConfig, temperature_weights, upsample_mix
from ..decode import DecodeConfig, EnsembleSpec, beam_search, render, source_ids
from ..evaluate import text_bleu
from ..model import (
    ModelCheckpoint,
    ModelConfig,
    TrainConfig,
    batch_stream,
    init_params,
    make_batches,
    sampled_stream,
    train_stage,
    validation_nll,
)
from ..noising import NoiseConfig, denoising_examples, pack_instances
from ..subword import TokenSeq, Vocab
from .recipes import (
    Direction,
    PipelineRecipe,
    RecipeError,
    StageKind,
    StageSpec,
    build_cpt_data,
    expand,
    fmt_direction,
    get_recipe,
)

logger = logging.getLogger(__name__)

RECORD_FILE = "run_record.json"
STAGE_FILE = "stage.json"


class PipelineError(RuntimeError):
    pass


# ---------------------------------------------------------------------------
# settings


@dataclass(frozen=True)
class RunSettings:
    """Everything besides the recipe that decides a run's outcome."""

    seed: int = 1
    model_preset: str = "tiny"
    model_overrides: dict = field(default_factory=dict)
    scale: float = 1.0  # shrinks warmup / update budget / save interval together
    train_overrides: dict = field(default_factory=dict)  # applied after scaling
    temperature: float = 1.5
    noise: dict = field(default_factory=dict)  # NoiseConfig fields except seed
    pack_tokens: int = 128
    beam_size: int = 5
    valid_bleu_max: int = 200
    checkpoint_bleu: bool = False  # stamp every saved checkpoint with validation BLEU

    def to_dict(self) -> dict:
        return dataclasses.asdict(self)

    @classmethod
    def from_dict(cls, d: dict) -> "RunSettings":
        known = {f.name for f in dataclasses.fields(cls)}
        unknown = set(d) - known
        if unknown:
            raise ValueError(f"unknown run settings: {sorted(unknown)}")
        return cls(**d)

    def train_config(self, schedule: str, seed: int) -> TrainConfig:
        base = TrainConfig.multilingual() if schedule == "multilingual" else TrainConfig.bilingual()
        cfg = base.scaled(self.scale) if self.scale != 1.0 else base
        overrides = dict(self.train_overrides)
        if "adam_betas" in overrides:
            overrides["adam_betas"] = tuple(overrides["adam_betas"])
        return dataclasses.replace(cfg, seed=seed, **overrides)

    def model_config(self, vocab_size: int) -> ModelConfig:
        return ModelConfig.preset(self.model_preset, vocab_size, **self.model_overrides)


def derive_seed(seed: int, *parts: str) -> int:
    h = hashlib.sha256(":".join([str(seed), *parts]).encode()).digest()
    return int.from_bytes(h[:4], "little") & 0x7FFFFFFF


# ---------------------------------------------------------------------------
# examples


@dataclass(frozen=True)
class TranslationExample:
    encoder_input: TokenSeq
    decoder_input: TokenSeq
    labels: TokenSeq
    direction: Direction


def translation_example(vocab: Vocab, src_lang: str, tgt_lang: str, src: str, tgt: str, max_len: int) -> TranslationExample:
    """``src + [LID_src]`` -> ``[LID_tgt] + tgt`` with labels ``tgt + [EOS]``."""
    s = vocab.encode(src).ids[: max_len - 1] + (vocab.lid(src_lang),)
    t = vocab.encode(tgt).ids[: max_len - 1]
    return TranslationExample(
        TokenSeq(s), TokenSeq((vocab.lid(tgt_lang),) + t), TokenSeq(t + (vocab.eos_id,)), (src_lang, tgt_lang)
    )


def select_final(checkpoints: Sequence[ModelCheckpoint]) -> ModelCheckpoint:
    """Lowest validation NLL; ties go to the later update."""
    scored = [c for c in checkpoints if c.meta.valid_nll is not None]
    if not scored:
        raise PipelineError("no checkpoint carries a validation likelihood")
    return min(scored, key=lambda c: (c.meta.valid_nll, -c.meta.updates))


def _slug(text: str) -> str:
    return re.sub(r"[^a-z0-9]+", "-", text.lower()).strip("-")[:60]


# ---------------------------------------------------------------------------
# run record


@dataclass
class RunRecord:
    recipe: str
    pivot: str | None
    seed: int
    settings: dict
    stages: list[dict] = field(default_factory=list)
    chains: dict[str, list[str]] = field(default_factory=dict)
    selected: dict[str, dict] = field(default_factory=dict)
    valid_bleu: dict[str, float] = field(default_factory=dict)
    test_bleu: dict[str, float] = field(default_factory=dict)
    status: str = "running"

    def to_dict(self) -> dict:
        return dataclasses.asdict(self)

    def dumps(self) -> str:
        return json.dumps(self.to_dict(), sort_keys=True, indent=1) + "\n"

    def save(self, out_dir: Path) -> None:
        path = Path(out_dir) / RECORD_FILE
        tmp = path.with_suffix(".tmp")
        tmp.write_text(self.dumps(), encoding="utf-8")
        tmp.replace(path)

    @classmethod
    def from_dict(cls, d: dict) -> "RunRecord":
        return cls(**d)

    @classmethod
    def load(cls, path: str | Path) -> "RunRecord":
        path = Path(path)
        if path.is_dir():
            path = path / RECORD_FILE
        return cls.from_dict(json.loads(path.read_text(encoding="utf-8")))


@dataclass
class StageOutcome:
    key: str
    dirname: str
    spec: StageSpec
    selected: ModelCheckpoint
    checkpoints: list[ModelCheckpoint]
    choice: str | None = None  # for a sweep: the chosen alternative's key


# ---------------------------------------------------------------------------
# runner


class PipelineRunner:
    def __init__(
        self,
        manifest: CorpusManifest,
        vocab: Vocab,
        settings: RunSettings,
        out_dir: str | Path,
        base: ModelCheckpoint | None = None,
        on_stage_done: Callable[[StageOutcome], None] | None = None,
    ):
        self.manifest = manifest
        self.vocab = vocab
        self.settings = settings
        self.out = Path(out_dir)
        self.out.mkdir(parents=True, exist_ok=True)
        (self.out / "stages").mkdir(exist_ok=True)
        self.on_stage_done = on_stage_done
        if base is None:
            cfg = settings.model_config(len(vocab))
            base = ModelCheckpoint(cfg, init_params(cfg, seed=settings.seed))
        if base.config.vocab_size != len(vocab):
            raise PipelineError(f"base model vocab {base.config.vocab_size} != vocabulary size {len(vocab)}")
        self.base = base
        self.base_key = "base:" + base.digest()[:16]
        self._done: dict[str, StageOutcome] = {}
        self._order: list[str] = []
        self._scores: dict[tuple, float] = {}
        self._eval_cache: dict[tuple, list] = {}
        self._datasets: dict[tuple, object] = {}

    # -- data ---------------------------------------------------------------
    def _max_len(self) -> int:
        return self.base.config.max_len

    def _pairs(self, d: Direction, split: str, domain: Domain):
        key = (d, split, domain)
        if key not in self._datasets:
            self._datasets[key] = self.manifest.pair_dataset(d[0], d[1], split, domain)
        return self._datasets[key]

    def _ft_dataset(self, d: Direction, domain: Domain, seed: int):
        if domain is Domain.MIXED:
            return upsample_mix(self._pairs(d, "train", Domain.IN), self._pairs(d, "train", Domain.OUT), seed)
        return self._pairs(d, "train", domain)

    def _ft_examples(self, d: Direction, pairs) -> list[TranslationExample]:
        return [translation_example(self.vocab, d[0], d[1], s, t, self._max_len()) for s, t in pairs]

    def _valid_batches(self, spec: StageSpec):
        key = ("valid", spec.kind, spec.languages, spec.directions)
        if key not in self._eval_cache:
            bt = self.settings.train_config("bilingual", 0).batch_tokens
            if spec.kind is StageKind.CPT:
                instances = []
                for e in self.manifest.parallel:
                    if e.split == "valid" and {e.src_lang, e.tgt_lang} <= set(spec.languages):
                        ds = self.manifest.load_parallel(e)
                        for lang in (e.src_lang, e.tgt_lang):
                            instances += [(lang, [s]) for s in ds.side(lang)]
                if not instances:
                    raise PipelineError(f"no validation text for CPT languages {spec.languages}")
                noise = NoiseConfig(**{**self.settings.noise, "seed": derive_seed(self.settings.seed, "cpt-valid")})
                examples = denoising_examples(instances, self.vocab, noise)
            else:
                examples = []
                for d in spec.directions:
                    examples += self._ft_examples(d, self._pairs(d, "valid", Domain.IN).pairs)
            self._eval_cache[key] = make_batches(examples, bt, np.random.default_rng(0))
        return self._eval_cache[key]

    def _train_batches(self, spec: StageSpec, tcfg: TrainConfig):
        seed = tcfg.seed
        if spec.kind is StageKind.CPT:
            sel = build_cpt_data(self.manifest, spec.cpt_case, spec.languages)
            instances = [
                (lang, inst)
                for lang in sel.languages
                for inst in pack_instances(sel.data[lang], self.vocab, self.settings.pack_tokens)
            ]
            noise = NoiseConfig(**{**self.settings.noise, "seed": seed})
            return batch_stream(lambda epoch: denoising_examples(instances, self.vocab, noise, epoch), tcfg.batch_tokens, seed)
        streams, sizes = [], []
        for i, d in enumerate(spec.directions):
            ds = self._ft_dataset(d, spec.domain, derive_seed(seed, "mix", fmt_direction(d)))
            streams.append(batch_stream(self._ft_examples(d, ds.pairs), tcfg.batch_tokens, derive_seed(seed, str(i))))
            sizes.append(len(ds))
        if len(streams) == 1:
            return streams[0]
        weights = temperature_weights(sizes, SamplingConfig(self.settings.temperature))
        return sampled_stream(streams, weights, seed)

    # -- scoring --------------------------------------------------------------
    def translate(self, ckpt: ModelCheckpoint | EnsembleSpec, d: Direction, lines: Sequence[str]) -> list[str]:
        spec = ckpt if isinstance(ckpt, EnsembleSpec) else EnsembleSpec.single(ckpt)
        repair = d[1] in self.manifest.needs_zwj_repair
        out = []
        for line in lines:
            src = source_ids(self.vocab, line, d[0], self._max_len())
            cfg = DecodeConfig.for_vocab(
                self.vocab,
                d[1],
                beam_size=self.settings.beam_size,
                max_output_len=min(self._max_len() - 1, 2 * len(src) + 10),
            )
            out.append(render(self.vocab, beam_search(spec, cfg, src), repair))
        return out

    def bleu(self, ckpt: ModelCheckpoint | EnsembleSpec, d: Direction, split: str) -> float:
        ident = ckpt.digest() if isinstance(ckpt, ModelCheckpoint) else ",".join(m.digest() for m in ckpt.members)
        key = (ident, d, split)
        if key not in self._scores:
            pairs = self._pairs(d, split, Domain.IN).pairs
            if split == "valid":
                pairs = pairs[: self.settings.valid_bleu_max]
            hyps = self.translate(ckpt, d, [s for s, _ in pairs])
            self._scores[key] = text_bleu(hyps, [t for _, t in pairs]).bleu
        return self._scores[key]

    # -- stages ---------------------------------------------------------------
    def stage_key(self, spec: StageSpec, init_key: str, tcfg: TrainConfig) -> str:
        blob = json.dumps(
            {"stage": spec.describe(), "init": init_key, "train": tcfg.to_dict(), "settings": self.settings.to_dict()},
            sort_keys=True,
        )
        return hashlib.sha256(blob.encode()).hexdigest()[:16]

    def run_stage(self, spec: StageSpec, init: ModelCheckpoint, init_key: str) -> StageOutcome:
        if spec.is_sweep:
            return self._run_sweep(spec, init, init_key)
        seed = derive_seed(self.settings.seed, spec.describe(), init_key)
        tcfg = self.settings.train_config(spec.schedule, seed)
        key = self.stage_key(spec, init_key, tcfg)
        if key in self._done:
            return self._done[key]
        dirname = f"{len(self._order) + 1:02d}-{_slug(spec.describe())}"
        sdir = self.out / "stages" / dirname
        outcome = self._load_stage(sdir, key, spec)
        if outcome is None:
            logger.info("stage %s: %s (%d updates)", dirname, spec.describe(), tcfg.max_updates)
            sdir.mkdir(parents=True, exist_ok=True)
            (sdir / "config.json").write_text(
                json.dumps({"stage": spec.describe(), "init": init_key, "train": tcfg.to_dict()}, sort_keys=True, indent=1) + "\n"
            )
            valid = self._valid_batches(spec)

            def evaluate(ck: ModelCheckpoint):
                nll = validation_nll(ck, valid)
                bleu = None
                if self.settings.checkpoint_bleu and spec.kind is StageKind.FT:
                    bleu = float(np.mean([self.bleu(ck, d, "valid") for d in spec.directions]))
                return nll, bleu

            result = train_stage(init, self._train_batches(spec, tcfg), tcfg, evaluate, stage=spec.describe())
            outcome = StageOutcome(key, dirname, spec, select_final(result.checkpoints), result.checkpoints)
            self._save_stage(sdir, outcome, init_key)
        self._done[key] = outcome
        self._order.append(key)
        if self.on_stage_done is not None:
            self.on_stage_done(outcome)
        return outcome

    def _run_sweep(self, spec: StageSpec, init: ModelCheckpoint, init_key: str) -> StageOutcome:
        results = [self.run_stage(alt, init, init_key) for alt in spec.sweep]
        scores = [self.bleu(r.selected, spec.select_on, "valid") for r in results]
        best = int(np.argmax(scores))  # first maximum: mode order O2M, M2O, M2M
        chosen = results[best]
        logger.info(
            "sweep on %s: %s -> %s",
            fmt_direction(spec.select_on),
            ", ".join(f"{r.spec.mode.value}={s:.2f}" for r, s in zip(results, scores)),
            chosen.spec.mode.value,
        )
        return StageOutcome(chosen.key, chosen.dirname, spec, chosen.selected, chosen.checkpoints, choice=chosen.key)

    def _save_stage(self, sdir: Path, outcome: StageOutcome, init_key: str) -> None:
        entries = []
        for ck in outcome.checkpoints:
            name = f"checkpoint_{ck.meta.updates}.lrlf"
            ck.save(sdir / name)
            entries.append({"file": name, "digest": ck.digest(), **ck.meta.to_dict()})
        info = {
            "key": outcome.key,
            "stage": outcome.spec.describe(),
            "init": init_key,
            "checkpoints": entries,
            "selected": f"checkpoint_{outcome.selected.meta.updates}.lrlf",
            "complete": True,
        }
        (sdir / STAGE_FILE).write_text(json.dumps(info, sort_keys=True, indent=1) + "\n")

    def _load_stage(self, sdir: Path, key: str, spec: StageSpec) -> StageOutcome | None:
        path = sdir / STAGE_FILE
        if not path.exists():
            return None
        info = json.loads(path.read_text())
        if info.get("key") != key or not info.get("complete"):
            raise PipelineError(f"{sdir} holds a different or incomplete stage; use a fresh output directory")
        ckpts = [ModelCheckpoint.load(sdir / e["file"]) for e in info["checkpoints"]]
        selected = next(c for c, e in zip(ckpts, info["checkpoints"]) if e["file"] == info["selected"])
        logger.info("stage %s: reusing completed run", sdir.name)
        return StageOutcome(key, sdir.name, spec, selected, ckpts)

    def run_chain(self, stages: Sequence[StageSpec]) -> list[StageOutcome]:
        ckpt, key = self.base, self.base_key
        outcomes = []
        for spec in stages:
            o = self.run_stage(spec, ckpt, key)
            outcomes.append(o)
            ckpt, key = o.selected, o.key
        return outcomes


def stage_entry(o: StageOutcome) -> dict:
    return {
        "key": o.key,
        "dir": o.dirname,
        "stage": o.spec.describe(),
        "checkpoints": [{"digest": c.digest(), **c.meta.to_dict()} for c in o.checkpoints],
        "selected": {"updates": o.selected.meta.updates, "digest": o.selected.digest()},
    }


def default_directions(manifest: CorpusManifest) -> list[Direction]:
    """Both directions of every pair that has in-domain training data."""
    pairs = sorted({tuple(sorted(e.pair)) for e in manifest.parallel if e.split == "train" and e.domain == Domain.IN})
    return [d for a, b in pairs for d in ((a, b), (b, a))]


def run_recipe(
    recipe: PipelineRecipe | str,
    manifest: CorpusManifest,
    vocab: Vocab,
    settings: RunSettings,
    out_dir: str | Path,
    directions: Sequence[Direction] | None = None,
    pivot: str | None = None,
    base: ModelCheckpoint | None = None,
    on_stage_done: Callable[[StageOutcome], None] | None = None,
) -> RunRecord:
    """Run ``recipe`` for each target direction (or once per pivot for recipes
    ending in a multilingual stage) and score the final models."""
    if isinstance(recipe, str):
        recipe = get_recipe(recipe)
    runner = PipelineRunner(manifest, vocab, settings, out_dir, base, on_stage_done=None)
    record = RunRecord(recipe.name, pivot, settings.seed, settings.to_dict())
    langs = manifest.languages

    def stage_done(o: StageOutcome) -> None:
        entry = stage_entry(o)
        if all(e["key"] != o.key for e in record.stages):
            record.stages.append(entry)
        record.save(runner.out)
        if on_stage_done is not None:
            on_stage_done(o)

    runner.on_stage_done = stage_done

    try:
        if recipe.ends_bilingual:
            if directions is None:
                directions = default_directions(manifest)
                if pivot is not None:
                    directions = [d for d in directions if pivot in d]
            for d in directions:
                outcomes = runner.run_chain(expand(recipe, langs, target=tuple(d), pivot=pivot))
                _score(runner, record, tuple(d), outcomes)
        else:
            outcomes = runner.run_chain(expand(recipe, langs, pivot=pivot))
            covered = outcomes[-1].spec.directions
            for d in directions or covered:
                if tuple(d) not in covered:
                    raise RecipeError(f"{recipe.name} (pivot {pivot}) does not cover {fmt_direction(d)}")
                _score(runner, record, tuple(d), outcomes)
    except BaseException as exc:
        record.status = f"failed: {type(exc).__name__}: {exc}"
        record.save(runner.out)
        raise
    record.status = "complete"
    record.save(runner.out)
    return record


def _score(runner: PipelineRunner, record: RunRecord, d: Direction, outcomes: list[StageOutcome]) -> None:
    name = fmt_direction(d)
    final = outcomes[-1].selected
    record.chains[name] = [o.key for o in outcomes]
    record.selected[name] = {"stage": outcomes[-1].key, "updates": final.meta.updates, "digest": final.digest()}
    record.valid_bleu[name] = runner.bleu(final, d, "valid")
    record.test_bleu[name] = runner.bleu(final, d, "test")
    logger.info("%s %s: valid %.2f test %.2f", record.recipe, name, record.valid_bleu[name], record.test_bleu[name])
    record.save(runner.out)


__all__ = [
    "PipelineError",
    "PipelineRunner",
    "RunRecord",
    "RunSettings",
    "StageOutcome",
    "TranslationExample",
    "default_directions",
    "derive_seed",
    "run_recipe",
    "select_final",
    "translation_example",
]
