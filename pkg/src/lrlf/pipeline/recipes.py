"""Declarative stage plans: CPT data cases, fine-tuning modes and named recipes.

A :class:`PipelineRecipe` is a list of stage templates. :func:`expand`
binds it to a target direction (or a pivot) and a language set, giving the
concrete :class:`StageSpec` chain that :mod:`lrlf.pipeline.runner` executes.
"""

from __future__ import annotations

import enum
from dataclasses import dataclass, field
from pathlib import Path
from typing import Sequence

import yaml

from ..corpus import CorpusError, CorpusManifest, Domain

Direction = tuple[str, str]


class RecipeError(ValueError):
    pass


class StageKind(str, enum.Enum):
    CPT = "CPT"
    FT = "FT"


class Mode(str, enum.Enum):
    BILINGUAL = "Bilingual"
    O2M = "O2M"
    M2O = "M2O"
    M2M = "M2M"


MULTILINGUAL_MODES = (Mode.O2M, Mode.M2O, Mode.M2M)


class CptCase(str, enum.Enum):
    A_I = "A(i)"  # in-domain mono
    A_II = "A(ii)"  # in-domain mono + both sides of in-domain parallel
    B = "B"  # out-domain mono
    C1 = "C1"  # in + out mono, mixed
    C2 = "C2"  # out-domain phase, then in-domain phase
    C2_PHASE1 = "C2-phase1"
    C2_PHASE2 = "C2-phase2"


def fmt_direction(d: Direction) -> str:
    return f"{d[0]}->{d[1]}"


def parse_direction(text: str) -> Direction:
    for sep in ("->", "-", ":"):
        if sep in text:
            a, b = text.split(sep, 1)
            if a and b and a != b:
                return a, b
    raise RecipeError(f"bad direction {text!r}; expected e.g. si->en")


# ---------------------------------------------------------------------------
# data selection


def expand_mft_directions(mode: Mode | str, pivot: str, languages: Sequence[str]) -> list[Direction]:
    """Directed pairs a pivot-centric mode trains on, in a stable order."""
    mode = Mode(mode)
    if pivot not in languages:
        raise RecipeError(f"pivot {pivot!r} is not one of {list(languages)}")
    others = [l for l in languages if l != pivot]
    if mode is Mode.BILINGUAL:
        raise RecipeError("Bilingual is not a pivot mode")
    o2m = [(pivot, l) for l in others]
    m2o = [(l, pivot) for l in others]
    return {Mode.O2M: o2m, Mode.M2O: m2o, Mode.M2M: o2m + m2o}[mode]


@dataclass(frozen=True)
class CptSelection:
    case: CptCase
    languages: tuple[str, ...]
    data: dict[str, tuple[str, ...]] = field(hash=False)

    @property
    def sizes(self) -> dict[str, int]:
        return {l: len(v) for l, v in self.data.items()}

    @property
    def size(self) -> int:
        return sum(self.sizes.values())

    @property
    def domains(self) -> frozenset[Domain]:
        return frozenset(
            {
                CptCase.A_I: {Domain.IN},
                CptCase.A_II: {Domain.IN},
                CptCase.B: {Domain.OUT},
                CptCase.C1: {Domain.IN, Domain.OUT},
                CptCase.C2_PHASE1: {Domain.OUT},
                CptCase.C2_PHASE2: {Domain.IN},
            }[self.case]
        )


def _mono(manifest: CorpusManifest, lang: str, domain: Domain) -> list[str]:
    lines: list[str] = []
    for e in manifest.mono:
        if e.lang == lang and e.domain == domain:
            lines.extend(manifest.load_mono(e).lines)
    return lines


def build_cpt_data(
    manifest: CorpusManifest, case: CptCase | str, languages: Sequence[str]
) -> CptSelection | tuple[CptSelection, CptSelection]:
    """Monolingual text per language for a CPT case. ``C2`` returns both phases."""
    case = CptCase(case)
    languages = tuple(sorted(languages))
    for l in languages:
        if l not in manifest.languages:
            raise RecipeError(f"language {l!r} is not declared in the manifest")
    if case is CptCase.C2:
        return (
            build_cpt_data(manifest, CptCase.C2_PHASE1, languages),
            build_cpt_data(manifest, CptCase.C2_PHASE2, languages),
        )
    domains = {
        CptCase.A_I: (Domain.IN,),
        CptCase.A_II: (Domain.IN,),
        CptCase.B: (Domain.OUT,),
        CptCase.C1: (Domain.IN, Domain.OUT),
        CptCase.C2_PHASE1: (Domain.OUT,),
        CptCase.C2_PHASE2: (Domain.IN,),
    }[case]
    data: dict[str, list[str]] = {l: [] for l in languages}
    for l in languages:
        for dom in domains:
            data[l].extend(_mono(manifest, l, dom))
    if case is CptCase.A_II:
        for e in manifest.parallel:
            if e.domain == Domain.IN and e.split == "train" and {e.src_lang, e.tgt_lang} <= set(languages):
                ds = manifest.load_parallel(e)
                data[e.src_lang].extend(ds.side(e.src_lang))
                data[e.tgt_lang].extend(ds.side(e.tgt_lang))
    empty = [l for l, v in data.items() if not v]
    if empty:
        wanted = "/".join(d.value for d in domains)
        raise CorpusError(f"case {case.value}: no {wanted}-domain data for {empty}")
    return CptSelection(case, languages, {l: tuple(v) for l, v in data.items()})


# ---------------------------------------------------------------------------
# stage specs


@dataclass(frozen=True)
class StageSpec:
    """One concrete training stage.

    ``kind == FT`` with ``mode is None`` and non-empty ``sweep`` is an
    M-FT(best) stage: each alternative is trained from the same start and the
    one with the best validation BLEU on ``select_on`` continues the chain.
    """

    kind: StageKind
    schedule: str  # "cpt" | "bilingual" | "multilingual": which TrainConfig preset applies
    languages: tuple[str, ...] = ()
    cpt_case: CptCase | None = None
    directions: tuple[Direction, ...] = ()
    domain: Domain = Domain.IN
    mode: Mode | None = None
    pivot: str | None = None
    sweep: tuple["StageSpec", ...] = ()
    select_on: Direction | None = None

    def __post_init__(self):
        if self.kind is StageKind.CPT:
            if self.cpt_case is None or self.cpt_case is CptCase.C2:
                raise RecipeError("a CPT stage needs a single-phase case")
            if len(self.languages) < 1:
                raise RecipeError("a CPT stage needs at least one language")
            return
        if self.sweep:
            if self.select_on is None:
                raise RecipeError("a sweep stage needs a selection direction")
            return
        if self.mode is Mode.BILINGUAL:
            if len(self.directions) != 1:
                raise RecipeError("Bilingual fine-tuning takes exactly one direction")
        elif self.mode in MULTILINGUAL_MODES:
            if self.pivot is None:
                raise RecipeError(f"{self.mode.value} needs a pivot language")
            if not self.directions:
                raise RecipeError(f"{self.mode.value} needs at least one direction")
        else:
            raise RecipeError("a fine-tuning stage needs a mode")

    @property
    def is_sweep(self) -> bool:
        return bool(self.sweep)

    def covers(self) -> tuple[Direction, ...]:
        return self.directions

    def describe(self) -> str:
        if self.kind is StageKind.CPT:
            return f"CPT[{self.cpt_case.value}] langs={','.join(self.languages)}"
        if self.sweep:
            modes = ",".join(a.mode.value for a in self.sweep)
            return (
                f"FT[best of {modes} pivot={self.sweep[0].pivot}; select on {fmt_direction(self.select_on)}] "
                f"domain={self.domain.value}"
            )
        head = self.mode.value + (f" pivot={self.pivot}" if self.pivot else "")
        dirs = ",".join(fmt_direction(d) for d in self.directions)
        return f"FT[{head}] {dirs} domain={self.domain.value}"


# ---------------------------------------------------------------------------
# recipes


@dataclass(frozen=True)
class StageTemplate:
    kind: StageKind
    cpt_case: CptCase | None = None
    cpt_langs: str = "pair"  # "pair" (biCPT) or "all" (triCPT)
    mode: Mode | str | None = None  # Mode, or "best" for the M-FT sweep
    domain: Domain = Domain.IN


@dataclass(frozen=True)
class PipelineRecipe:
    name: str
    stages: tuple[StageTemplate, ...]
    baseline: str = "B-FT"

    @property
    def needs_pivot(self) -> bool:
        return any(isinstance(t.mode, Mode) and t.mode in MULTILINGUAL_MODES or t.mode == "best" for t in self.stages)

    @property
    def ends_bilingual(self) -> bool:
        return self.stages[-1].mode is Mode.BILINGUAL


def _cpt(case: CptCase, langs: str = "pair") -> StageTemplate:
    return StageTemplate(StageKind.CPT, cpt_case=case, cpt_langs=langs)


def _ft(mode, domain: Domain = Domain.IN) -> StageTemplate:
    return StageTemplate(StageKind.FT, mode=mode, domain=domain)


_BFT = _ft(Mode.BILINGUAL)
_3BFT = (_ft(Mode.BILINGUAL, Domain.OUT), _ft(Mode.BILINGUAL, Domain.MIXED), _ft(Mode.BILINGUAL, Domain.IN))
_BI = _cpt(CptCase.A_II, "pair")
_TRI = _cpt(CptCase.A_II, "all")

RECIPES: dict[str, PipelineRecipe] = {}


def _add(name: str, *stages: StageTemplate) -> None:
    RECIPES[name] = PipelineRecipe(name, tuple(stages))


_add("B-FT", _BFT)
for _m in MULTILINGUAL_MODES:
    _add(f"{_m.value}-FT", _ft(_m))
    _add(f"triCPT,{_m.value}-FT", _TRI, _ft(_m))
_add("3-B-FT", *_3BFT)
_add("biCPT,B-FT", _BI, _BFT)
_add("biCPT,3-B-FT", _BI, *_3BFT)
_add("M-FT(best),B-FT", _ft("best"), _BFT)
_add("triCPT,M-FT(best),B-FT", _TRI, _ft("best"), _BFT)
_add("CPT-A(i),B-FT", _cpt(CptCase.A_I), _BFT)
_add("CPT-A(ii),B-FT", _cpt(CptCase.A_II), _BFT)
_add("CPT-B,B-FT", _cpt(CptCase.B), _BFT)
_add("CPT-C1,B-FT", _cpt(CptCase.C1), _BFT)
_add("CPT-C2,B-FT", _cpt(CptCase.C2_PHASE1), _cpt(CptCase.C2_PHASE2), _BFT)


def get_recipe(name: str) -> PipelineRecipe:
    try:
        return RECIPES[name]
    except KeyError:
        raise RecipeError(f"unknown recipe {name!r}; known: {', '.join(RECIPES)}") from None


def load_recipe(path) -> PipelineRecipe:
    """Read a recipe from YAML::

        name: my-recipe
        baseline: B-FT
        stages:
          - {kind: CPT, case: A(ii), langs: pair}
          - {kind: FT, mode: Bilingual, domain: out}
          - {kind: FT, mode: best}
    """
    doc = yaml.safe_load(Path(path).read_text(encoding="utf-8"))
    if not isinstance(doc, dict) or not isinstance(doc.get("stages"), list) or not doc["stages"]:
        raise RecipeError(f"{path}: expected a mapping with a non-empty 'stages' list")
    stages = []
    for i, st in enumerate(doc["stages"]):
        where = f"{path}: stages[{i}]"
        try:
            kind = StageKind(st["kind"])
            if kind is StageKind.CPT:
                langs = st.get("langs", "pair")
                if langs not in ("pair", "all"):
                    raise RecipeError(f"{where}.langs must be 'pair' or 'all'")
                stages.append(StageTemplate(kind, cpt_case=CptCase(st["case"]), cpt_langs=langs))
            else:
                mode = st["mode"]
                mode = "best" if mode == "best" else Mode(mode)
                stages.append(StageTemplate(kind, mode=mode, domain=Domain(st.get("domain", "in"))))
        except (KeyError, TypeError, ValueError) as exc:
            raise RecipeError(f"{where}: {exc}") from None
    if stages[-1].kind is StageKind.CPT:
        raise RecipeError(f"{path}: a recipe must end with a fine-tuning stage")
    return PipelineRecipe(str(doc.get("name", Path(path).stem)), tuple(stages), str(doc.get("baseline", "B-FT")))


def expand(
    recipe: PipelineRecipe | str,
    languages: Sequence[str],
    target: Direction | None = None,
    pivot: str | None = None,
) -> list[StageSpec]:
    """Concrete stage chain for one target direction (or, for recipes ending
    in a multilingual stage, for one pivot)."""
    if isinstance(recipe, str):
        recipe = get_recipe(recipe)
    languages = tuple(sorted(languages))
    if recipe.needs_pivot and pivot is None:
        raise RecipeError(f"recipe {recipe.name} needs a pivot language")
    if pivot is not None and pivot not in languages:
        raise RecipeError(f"pivot {pivot!r} is not one of {list(languages)}")
    if recipe.ends_bilingual:
        if target is None:
            raise RecipeError(f"recipe {recipe.name} needs a target direction")
        if target[0] not in languages or target[1] not in languages:
            raise RecipeError(f"direction {fmt_direction(target)} uses an unknown language")
        if pivot is not None and pivot not in target:
            raise RecipeError(f"pivot {pivot} is not part of {fmt_direction(target)}")

    stages: list[StageSpec] = []
    for t in recipe.stages:
        if t.kind is StageKind.CPT:
            langs = languages if t.cpt_langs == "all" else tuple(sorted(target))
            stages.append(StageSpec(StageKind.CPT, "cpt", languages=langs, cpt_case=t.cpt_case))
        elif t.mode == "best":
            # every mode is a candidate, also one that never trains on the target direction
            alts = tuple(
                StageSpec(
                    StageKind.FT,
                    "multilingual",
                    directions=tuple(expand_mft_directions(m, pivot, languages)),
                    domain=t.domain,
                    mode=m,
                    pivot=pivot,
                )
                for m in MULTILINGUAL_MODES
            )
            stages.append(StageSpec(StageKind.FT, "multilingual", domain=t.domain, sweep=alts, select_on=target))
        elif t.mode is Mode.BILINGUAL:
            stages.append(StageSpec(StageKind.FT, "bilingual", directions=(target,), domain=t.domain, mode=Mode.BILINGUAL))
        else:
            dirs = tuple(expand_mft_directions(t.mode, pivot, languages))
            stages.append(StageSpec(StageKind.FT, "multilingual", directions=dirs, domain=t.domain, mode=t.mode, pivot=pivot))
    return stages


def describe_plan(stages: Sequence[StageSpec]) -> list[str]:
    return [f"{i + 1}. {s.describe()}" for i, s in enumerate(stages)]
