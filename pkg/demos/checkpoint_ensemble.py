"""Checkpoint ensembling on the toy copy task.

    python3 demos/checkpoint_ensemble.py [--out runs/demo-ensemble]

One bilingual run saves several checkpoints, each stamped with its
validation BLEU. The best two or three are averaged at every decoding
step, and the ensemble is compared with the single selected model.
"""

import argparse
import logging
from pathlib import Path

from lrlf.corpus import load_manifest
from lrlf.decode import EnsembleSpec, best_ensemble
from lrlf.pipeline import PipelineRunner, RunSettings, expand
from lrlf.subword import train_vocab
from lrlf.synthetic import REVERSE, SOURCE, ToyConfig, write_toy_corpus


def main():
    ap = argparse.ArgumentParser(description=__doc__.splitlines()[0])
    ap.add_argument("--out", default="runs/demo-ensemble")
    ap.add_argument("--scale", type=float, default=0.01)
    args = ap.parse_args()
    logging.basicConfig(level=logging.INFO, format="%(message)s")
    out = Path(args.out)

    manifest = load_manifest(write_toy_corpus(out / "toy", ToyConfig(n_train=600, n_out_train=600)))
    vocab = train_vocab(manifest.vocab_text(), 400, manifest.languages)
    settings = RunSettings(
        model_overrides={"ffn_dim": 128},
        scale=args.scale,
        train_overrides={"max_lr": 1e-3, "dropout": 0.1, "label_smoothing": 0.1, "batch_tokens": 256},
        checkpoint_bleu=True,
    )
    runner = PipelineRunner(manifest, vocab, settings, out / "runs")
    d = (SOURCE, REVERSE)
    stage = runner.run_chain(expand("B-FT", manifest.languages, target=d))[-1]

    for ck in stage.checkpoints:
        print(f"checkpoint {ck.meta.updates:5d}  valid NLL {ck.meta.valid_nll:.3f}  valid BLEU {ck.meta.valid_bleu:.2f}")
    spec, valid = best_ensemble(stage.checkpoints, lambda s: runner.bleu(s, d, "valid"))
    print(f"\nsingle model (lowest NLL): test BLEU {runner.bleu(stage.selected, d, 'test'):.2f}")
    print(f"ensemble of {len(spec.members)} (updates {[m.meta.updates for m in spec.members]}): "
          f"valid {valid:.2f}, test {runner.bleu(spec, d, 'test'):.2f}")

    # averaging identical members changes nothing
    same = EnsembleSpec((stage.selected,) * 3)
    assert runner.bleu(same, d, "test") == runner.bleu(stage.selected, d, "test")


if __name__ == "__main__":
    main()
