"""Print the stage plan of every named recipe for a three-language setup.

    python3 demos/recipe_plans.py [--languages si,ta,en] [--direction si->ta] [--pivot si]

Recipes ending in a bilingual stage are planned for ``--direction``;
recipes ending in a multilingual stage are planned around ``--pivot``.
Nothing is trained.
"""

import argparse

from lrlf.pipeline import RECIPES, build_cpt_data, describe_plan, expand, parse_direction


def main():
    ap = argparse.ArgumentParser(description=__doc__.splitlines()[0])
    ap.add_argument("--languages", default="si,ta,en")
    ap.add_argument("--direction", default="si->ta")
    ap.add_argument("--pivot", default="si")
    ap.add_argument("--manifest", help="also report continual pre-training data sizes for this corpus")
    args = ap.parse_args()
    langs = args.languages.split(",")
    target = parse_direction(args.direction)

    for name, recipe in RECIPES.items():
        stages = expand(recipe, langs, target if recipe.ends_bilingual else None, args.pivot if recipe.needs_pivot else None)
        print(name)
        for line in describe_plan(stages):
            print(f"  {line}")

    if args.manifest:
        from lrlf.corpus import load_manifest

        manifest = load_manifest(args.manifest)
        print("\ncontinual pre-training data per case")
        for case in ("A(i)", "A(ii)", "B", "C1", "C2"):
            sel = build_cpt_data(manifest, case, list(target))
            phases = sel if isinstance(sel, tuple) else (sel,)
            print(f"  {case:6s}", "  then  ".join(str(p.sizes) for p in phases))


if __name__ == "__main__":
    main()
