"""Stage plans for CPT and fine-tuning recipes, and their execution."""

from .recipes import (
    MULTILINGUAL_MODES,
    RECIPES,
    CptCase,
    CptSelection,
    Mode,
    PipelineRecipe,
    RecipeError,
    StageKind,
    StageSpec,
    StageTemplate,
    build_cpt_data,
    describe_plan,
    expand,
    expand_mft_directions,
    fmt_direction,
    get_recipe,
    load_recipe,
    parse_direction,
)
from .runner import (
    PipelineError,
    PipelineRunner,
    RunRecord,
    RunSettings,
    StageOutcome,
    TranslationExample,
    default_directions,
    derive_seed,
    run_recipe,
    select_final,
    translation_example,
)
