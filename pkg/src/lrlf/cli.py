"""``lrlf`` command line: one entry point, one subcommand per task.

Failures print a single line ``error: <category>: <message>`` on stderr and
exit 1; usage errors exit 2.
"""

from __future__ import annotations

import argparse
import contextlib
import json
import logging
import os
import sys
from pathlib import Path

import yaml

from . import __version__

logger = logging.getLogger("lrlf")

DEFAULT_SEED = 1


class CliError(Exception):
    def __init__(self, category: str, message: str):
        super().__init__(message)
        self.category = category


def _category(exc: BaseException) -> str:
    from .corpus import CorpusError, ManifestError
    from .decode import DecodeError
    from .evaluate import EvalError
    from .model import CheckpointError, TrainingDiverged
    from .pipeline import PipelineError, RecipeError
    from .subword import VocabError

    table = [
        (ManifestError, "manifest"),
        (CorpusError, "corpus"),
        (VocabError, "vocab"),
        (CheckpointError, "checkpoint"),
        (DecodeError, "decode"),
        (EvalError, "eval"),
        (RecipeError, "recipe"),
        (PipelineError, "pipeline"),
        (TrainingDiverged, "diverged"),
        (OSError, "io"),
        (yaml.YAMLError, "config"),
        (ValueError, "value"),
    ]
    for cls, name in table:
        if isinstance(exc, cls):
            return name
    return "internal"


# ---------------------------------------------------------------------------
# shared helpers


def _seed(args) -> int:
    if args.seed is not None:
        return args.seed
    env = os.environ.get("LRLF_SEED")
    if env is not None:
        try:
            return int(env)
        except ValueError:
            raise CliError("config", f"LRLF_SEED must be an integer, got {env!r}") from None
    return DEFAULT_SEED


def _read_yaml(path: str | Path) -> dict:
    doc = yaml.safe_load(Path(path).read_text(encoding="utf-8")) or {}
    if not isinstance(doc, dict):
        raise CliError("config", f"{path}: expected a mapping at the top level")
    return doc


def _settings(args, seed: int):
    from .pipeline import RunSettings

    d = _read_yaml(args.config) if getattr(args, "config", None) else {}
    d["seed"] = seed
    if getattr(args, "scale", None) is not None:
        d["scale"] = args.scale
    if getattr(args, "beam", None) is not None:
        d["beam_size"] = args.beam
    try:
        return RunSettings.from_dict(d)
    except (TypeError, ValueError) as exc:
        raise CliError("config", str(exc)) from None


def _freeze(out: Path, payload: dict) -> None:
    out.mkdir(parents=True, exist_ok=True)
    (out / "config.json").write_text(json.dumps(payload, sort_keys=True, indent=1) + "\n", encoding="utf-8")


def _langs(text: str) -> list[str]:
    return [x for x in text.split(",") if x]


def _vocab_for(args, manifest, out: Path):
    from .subword import Vocab, train_vocab

    if args.vocab:
        return Vocab.load(args.vocab)
    vocab = train_vocab(manifest.vocab_text(), args.vocab_size, manifest.languages, seed=0)
    vocab.save(out / "vocab.txt")
    return vocab


# ---------------------------------------------------------------------------
# subcommands


def cmd_prepare(args) -> int:
    from .corpus import load_manifest, write_lines

    m = load_manifest(args.manifest)
    out = Path(args.out)
    summary = {"languages": list(m.languages), "mono": [], "parallel": []}
    for e in m.mono:
        ds = m.load_mono(e)
        write_lines(out / "mono" / f"{e.lang}.{e.domain.value}.{e.path.name}", ds.lines)
        summary["mono"].append({"path": str(e.path.name), "lang": e.lang, "domain": e.domain.value, "raw": e.count, "clean": len(ds)})
    for e in m.parallel:
        ds = m.load_parallel(e)
        for lang in (e.src_lang, e.tgt_lang):
            write_lines(out / "parallel" / f"{e.prefix.name}.{lang}", ds.side(lang))
        summary["parallel"].append(
            {"prefix": e.prefix.name, "pair": f"{e.src_lang}-{e.tgt_lang}", "domain": e.domain.value, "split": e.split, "raw": e.count, "clean": len(ds)}
        )
    _freeze(out, {"command": "prepare", "manifest": str(Path(args.manifest).resolve())})
    (out / "summary.json").write_text(json.dumps(summary, indent=1) + "\n", encoding="utf-8")
    print(f"prepared {len(summary['mono'])} mono and {len(summary['parallel'])} parallel corpora into {out}")
    return 0


def cmd_train_vocab(args) -> int:
    from .corpus import load_manifest, read_lines
    from .subword import train_vocab

    seed = _seed(args)
    if args.manifest:
        m = load_manifest(args.manifest)
        texts, langs = m.vocab_text(), list(m.languages)
    else:
        if not args.input or not args.languages:
            raise CliError("usage", "give --manifest, or --input files together with --languages")
        texts, langs = [read_lines(p) for p in args.input], _langs(args.languages)
    vocab = train_vocab(texts, args.size, langs, seed=seed, max_sentences=args.max_sentences)
    Path(args.out).parent.mkdir(parents=True, exist_ok=True)
    vocab.save(args.out)
    print(f"vocabulary of {len(vocab)} tokens ({len(vocab.merges)} merges) written to {args.out}")
    return 0


def _single_stage(args, spec) -> int:
    from .corpus import load_manifest
    from .model import ModelCheckpoint
    from .pipeline import PipelineRunner

    seed = _seed(args)
    settings = _settings(args, seed)
    m = load_manifest(args.manifest)
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    vocab = _vocab_for(args, m, out)
    base = ModelCheckpoint.load(args.init) if args.init else None
    _freeze(out, {"command": args.command, "stage": spec.describe(), "manifest": str(Path(args.manifest).resolve()), "init": args.init, "settings": settings.to_dict()})
    runner = PipelineRunner(m, vocab, settings, out, base)
    outcome = runner.run_stage(spec, runner.base, runner.base_key)
    outcome.selected.save(out / "final.lrlf")
    print(f"{spec.describe()}: selected update {outcome.selected.meta.updates} (valid nll {outcome.selected.meta.valid_nll:.4f}) -> {out / 'final.lrlf'}")
    return 0


def cmd_cpt(args) -> int:
    from .pipeline import CptCase, StageKind, StageSpec

    case = CptCase(args.case)
    if case is CptCase.C2:
        raise CliError("usage", "run C2 as two calls (--case C2-phase1, then C2-phase2 with --init)")
    spec = StageSpec(StageKind.CPT, "cpt", languages=tuple(sorted(_langs(args.langs))), cpt_case=case)
    return _single_stage(args, spec)


def cmd_finetune(args) -> int:
    from .corpus import Domain
    from .pipeline import Mode, StageKind, StageSpec, expand_mft_directions, parse_direction

    mode = Mode(args.mode)
    if mode is Mode.BILINGUAL:
        if not args.direction:
            raise CliError("usage", "Bilingual fine-tuning needs --direction")
        dirs = tuple(parse_direction(d) for d in args.direction)
    else:
        if not args.pivot or not args.langs:
            raise CliError("usage", f"{mode.value} needs --pivot and --langs")
        dirs = tuple(expand_mft_directions(mode, args.pivot, sorted(_langs(args.langs))))
    spec = StageSpec(
        StageKind.FT,
        "bilingual" if mode is Mode.BILINGUAL else "multilingual",
        directions=dirs,
        domain=Domain(args.domain),
        mode=mode,
        pivot=args.pivot if mode is not Mode.BILINGUAL else None,
    )
    return _single_stage(args, spec)


def cmd_pipeline(args) -> int:
    from .corpus import load_manifest
    from .pipeline import describe_plan, expand, get_recipe, load_recipe, parse_direction, run_recipe

    if args.action == "list":
        from .pipeline import RECIPES

        for name in RECIPES:
            print(name)
        return 0

    frozen = _read_yaml(args.from_config) if getattr(args, "from_config", None) else {}
    recipe_arg = args.recipe or frozen.get("recipe")
    if not recipe_arg:
        raise CliError("usage", "name a recipe (or pass --from-config)")
    recipe = load_recipe(recipe_arg) if recipe_arg.endswith((".yaml", ".yml")) else get_recipe(recipe_arg)

    if args.action == "plan":
        langs = _langs(args.languages)
        target = parse_direction(args.direction[0]) if args.direction else None
        for line in describe_plan(expand(recipe, langs, target=target, pivot=args.pivot)):
            print(line)
        return 0

    manifest_path = args.manifest or frozen.get("manifest")
    if not manifest_path or not args.out:
        raise CliError("usage", "pipeline run needs --manifest and --out")
    from .pipeline import RunSettings

    if frozen and not args.config:
        settings = RunSettings.from_dict(frozen["settings"])
    else:
        settings = _settings(args, _seed(args))
    directions = [parse_direction(d) for d in args.direction] if args.direction else None
    if directions is None and frozen.get("directions"):
        directions = [tuple(d) for d in frozen["directions"]]
    pivot = args.pivot or frozen.get("pivot")
    out = Path(args.out)
    m = load_manifest(manifest_path)
    if args.vocab is None and frozen.get("vocab_size"):
        args.vocab_size = frozen["vocab_size"]
    out.mkdir(parents=True, exist_ok=True)
    vocab = _vocab_for(args, m, out)
    base = None
    if args.base:
        from .model import ModelCheckpoint

        base = ModelCheckpoint.load(args.base)
    _freeze(
        out,
        {
            "command": "pipeline run",
            "recipe": recipe_arg,
            "manifest": str(Path(manifest_path).resolve()),
            "directions": [list(d) for d in directions] if directions else None,
            "pivot": pivot,
            "vocab": args.vocab,
            "vocab_size": args.vocab_size,
            "base": args.base,
            "settings": settings.to_dict(),
        },
    )
    record = run_recipe(recipe, m, vocab, settings, out, directions=directions, pivot=pivot, base=base)
    for d, s in record.test_bleu.items():
        print(f"{record.recipe}\t{d}\ttest BLEU {s:.2f}\tvalid BLEU {record.valid_bleu[d]:.2f}")
    return 0


def cmd_translate(args) -> int:
    from .decode import DecodeConfig, EnsembleSpec, translate_file
    from .model import ModelCheckpoint
    from .subword import Vocab

    vocab = Vocab.load(args.vocab)
    paths = [p for p in args.model.split(",") if p]
    members = tuple(ModelCheckpoint.load(p) for p in paths)
    spec = EnsembleSpec(members, "multi-model" if args.multi_model else "single-run")
    cfg = DecodeConfig.for_vocab(
        vocab,
        args.tgt_lang,
        beam_size=args.beam,
        max_output_len=args.max_len or members[0].config.max_len - 1,
        length_penalty=args.length_penalty,
        log_space=args.log_space,
    )
    summary = translate_file(spec, cfg, args.src, args.out, vocab, args.src_lang, args.repair_zwj)
    for lineno, msg in summary.errors:
        print(f"line {lineno}: error: {msg}", file=sys.stderr)
    for lineno, msg in summary.warnings:
        print(f"line {lineno}: warning: {msg}", file=sys.stderr)
    print(summary)
    return 0


def cmd_score(args) -> int:
    from .corpus import read_lines
    from .evaluate import text_bleu

    report = text_bleu(read_lines(args.hyp), read_lines(args.ref), lowercase=args.lc)
    if args.json:
        print(json.dumps(report.to_dict(), sort_keys=True))
    else:
        print(report)
    return 0


def cmd_report(args) -> int:
    from .evaluate import EvalError, emit_table
    from .pipeline import RunRecord

    records = [RunRecord.load(p) for p in sorted(Path(args.runs).rglob("run_record.json"))]
    if not records:
        raise CliError("eval", f"no run records under {args.runs}")
    base = [r for r in records if r.recipe == args.baseline]
    if not base:
        raise EvalError(f"no run of baseline {args.baseline!r} under {args.runs}")
    if len(base) > 1:
        raise EvalError(f"{len(base)} runs of baseline {args.baseline!r}; keep one")
    others = [r for r in records if r is not base[0]]
    table, text = emit_table(others, base[0], top_k=args.top_k)
    print(text, end="")
    if args.json:
        Path(args.json).write_text(json.dumps(table.to_dict(), sort_keys=True, indent=1) + "\n", encoding="utf-8")
    return 0


def cmd_repair_zwj(args) -> int:
    from .subword import zwj_repair

    data = sys.stdin.buffer.read()
    text = data.decode("utf-8", "surrogateescape")
    sys.stdout.buffer.write(zwj_repair(text).encode("utf-8", "surrogateescape"))
    sys.stdout.buffer.flush()
    return 0


def cmd_make_denoise(args) -> int:
    from .corpus import clean, read_lines
    from .noising import NoiseConfig, denoising_examples, pack_instances
    from .subword import Vocab

    if not args.dump and not args.out:
        raise CliError("usage", "give --dump (stdout) or --out <file>")
    vocab = Vocab.load(args.vocab)
    lines = clean(read_lines(args.input))
    cfg = NoiseConfig(mask_ratio=args.mask_ratio, poisson_lambda=args.poisson_lambda, seed=_seed(args))
    instances = [(args.lang, inst) for inst in pack_instances(lines, vocab, args.pack_tokens)]
    rows = []
    for ex in denoising_examples(instances, vocab, cfg, epoch=args.epoch):
        rows.append("\t".join(" ".join(map(str, seq)) for seq in (ex.encoder_input, ex.decoder_input, ex.labels)))
    text = "".join(r + "\n" for r in rows)
    if args.out:
        Path(args.out).write_text(text, encoding="utf-8")
    if args.dump:
        sys.stdout.write(text)
    return 0


# ---------------------------------------------------------------------------
# parser


def build_parser() -> argparse.ArgumentParser:
    common = argparse.ArgumentParser(add_help=False)
    common.add_argument("--seed", type=int, default=None, help="run seed (falls back to $LRLF_SEED, then 1)")
    common.add_argument("--threads", type=int, default=1, help="BLAS thread cap; 1 keeps runs bit-reproducible")
    common.add_argument("--log-level", default="WARNING", choices=["DEBUG", "INFO", "WARNING", "ERROR"])

    p = argparse.ArgumentParser(prog="lrlf", description=__doc__.splitlines()[0])
    p.add_argument("--version", action="version", version=f"lrlf {__version__}")
    sub = p.add_subparsers(dest="command", required=True, metavar="COMMAND")

    s = sub.add_parser("prepare", parents=[common], help="validate a manifest and write cleaned corpora")
    s.add_argument("--manifest", required=True)
    s.add_argument("--out", required=True)
    s.set_defaults(func=cmd_prepare)

    s = sub.add_parser("train-vocab", parents=[common], help="learn a BPE vocabulary")
    s.add_argument("--manifest")
    s.add_argument("--input", nargs="*")
    s.add_argument("--languages", help="comma-separated codes (with --input)")
    s.add_argument("--size", type=int, required=True)
    s.add_argument("--max-sentences", type=int)
    s.add_argument("--out", required=True)
    s.set_defaults(func=cmd_train_vocab)

    def stage_args(s):
        s.add_argument("--manifest", required=True)
        s.add_argument("--out", required=True)
        s.add_argument("--vocab")
        s.add_argument("--vocab-size", type=int, default=4000)
        s.add_argument("--init", help="start checkpoint (default: fresh model)")
        s.add_argument("--config", help="YAML run settings")
        s.add_argument("--scale", type=float)

    s = sub.add_parser("cpt", parents=[common], help="one continual pre-training stage")
    stage_args(s)
    s.add_argument("--case", required=True, choices=["A(i)", "A(ii)", "B", "C1", "C2-phase1", "C2-phase2"])
    s.add_argument("--langs", required=True)
    s.set_defaults(func=cmd_cpt)

    s = sub.add_parser("finetune", parents=[common], help="one fine-tuning stage")
    stage_args(s)
    s.add_argument("--mode", default="Bilingual", choices=["Bilingual", "O2M", "M2O", "M2M"])
    s.add_argument("--direction", action="append", help="e.g. si-en (Bilingual)")
    s.add_argument("--pivot")
    s.add_argument("--langs", help="languages for a pivot mode")
    s.add_argument("--domain", default="in", choices=["in", "out", "mixed"])
    s.set_defaults(func=cmd_finetune)

    s = sub.add_parser("pipeline", parents=[common], help="run or inspect a multistage recipe")
    s.add_argument("action", choices=["run", "plan", "list"])
    s.add_argument("recipe", nargs="?", help="preset name or recipe YAML")
    s.add_argument("--manifest")
    s.add_argument("--out")
    s.add_argument("--vocab")
    s.add_argument("--vocab-size", type=int, default=4000)
    s.add_argument("--base", help="base checkpoint (default: fresh model)")
    s.add_argument("--config", help="YAML run settings")
    s.add_argument("--from-config", help="frozen config.json of an earlier run")
    s.add_argument("--scale", type=float)
    s.add_argument("--direction", action="append")
    s.add_argument("--pivot")
    s.add_argument("--languages", default="", help="for 'plan': comma-separated codes")
    s.set_defaults(func=cmd_pipeline)

    s = sub.add_parser("translate", parents=[common], help="beam-search a file with one model or an ensemble")
    s.add_argument("--model", required=True, help="checkpoint, or up to three comma-separated")
    s.add_argument("--vocab", required=True)
    s.add_argument("--src", required=True)
    s.add_argument("--out", required=True)
    s.add_argument("--src-lang", required=True)
    s.add_argument("--tgt-lang", required=True)
    s.add_argument("--beam", type=int, default=5)
    s.add_argument("--max-len", type=int)
    s.add_argument("--length-penalty", type=float, default=0.0)
    s.add_argument("--log-space", action="store_true", help="average log-probabilities")
    s.add_argument("--multi-model", action="store_true", help="members come from different runs")
    s.add_argument("--repair-zwj", action="store_true")
    s.set_defaults(func=cmd_translate)

    s = sub.add_parser("score", parents=[common], help="corpus BLEU of a hypothesis file")
    s.add_argument("--hyp", required=True)
    s.add_argument("--ref", required=True)
    s.add_argument("--lc", action="store_true", help="lowercase both sides")
    s.add_argument("--json", action="store_true")
    s.set_defaults(func=cmd_score)

    s = sub.add_parser("report", parents=[common], help="result grid with deltas against a baseline run")
    s.add_argument("--runs", required=True)
    s.add_argument("--baseline", required=True)
    s.add_argument("--top-k", type=int, default=3)
    s.add_argument("--json", help="also write the table as JSON here")
    s.set_defaults(func=cmd_report)

    s = sub.add_parser("repair-zwj", parents=[common], help="restore Sinhala ZWJ conjuncts, stdin to stdout")
    s.set_defaults(func=cmd_repair_zwj)

    s = sub.add_parser("make-denoise", parents=[common], help="build denoising examples from a text file")
    s.add_argument("--vocab", required=True)
    s.add_argument("--input", required=True)
    s.add_argument("--lang", required=True)
    s.add_argument("--epoch", type=int, default=0)
    s.add_argument("--mask-ratio", type=float, default=0.30)
    s.add_argument("--poisson-lambda", type=float, default=3.5)
    s.add_argument("--pack-tokens", type=int, default=128)
    s.add_argument("--dump", action="store_true", help="print tab-separated id sequences")
    s.add_argument("--out")
    s.set_defaults(func=cmd_make_denoise)
    return p


def main(argv: list[str] | None = None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    logging.basicConfig(level=getattr(logging, args.log_level), format="%(levelname)s %(name)s: %(message)s")
    try:
        from threadpoolctl import threadpool_limits

        limits = threadpool_limits(limits=args.threads) if args.threads else contextlib.nullcontext()
        with limits:
            return args.func(args)
    except CliError as exc:
        if exc.category == "usage":
            parser.print_usage(sys.stderr)
            print(f"error: usage: {exc}", file=sys.stderr)
            return 2
        print(f"error: {exc.category}: {exc}", file=sys.stderr)
        return 1
    except KeyboardInterrupt:
        print("error: interrupted: stopped by user", file=sys.stderr)
        return 130
    except Exception as exc:  # noqa: BLE001 - the CLI reports every failure as one line
        msg = str(exc).replace("\n", " ")
        print(f"error: {_category(exc)}: {msg}", file=sys.stderr)
        if args.log_level == "DEBUG":
            raise
        return 1


if __name__ == "__main__":
    sys.exit(main())
