"""Train a bilingual model on the toy languages, translate and score it.

    python3 demos/toy_translation.py [--out runs/demo] [--scale 0.01]

``xb`` is a word-for-word relexification of ``xa``, so a few hundred
updates of the tiny model already copy it almost perfectly. ``xc`` also
reverses the word order and takes longer to learn.
"""

import argparse
import logging
from pathlib import Path

from lrlf.corpus import Domain, load_manifest
from lrlf.evaluate import text_bleu
from lrlf.pipeline import PipelineRunner, RunSettings, expand
from lrlf.subword import train_vocab
from lrlf.synthetic import COPY, REVERSE, SOURCE, ToyConfig, write_toy_corpus


def main():
    ap = argparse.ArgumentParser(description=__doc__.splitlines()[0])
    ap.add_argument("--out", default="runs/demo-toy")
    ap.add_argument("--scale", type=float, default=0.01)
    args = ap.parse_args()
    logging.basicConfig(level=logging.INFO, format="%(message)s")
    out = Path(args.out)

    manifest = load_manifest(write_toy_corpus(out / "toy", ToyConfig(n_train=600, n_out_train=600)))
    vocab = train_vocab(manifest.vocab_text(), 400, manifest.languages)
    print(f"languages {manifest.languages}, vocabulary {len(vocab)} pieces")

    settings = RunSettings(
        model_overrides={"ffn_dim": 128},
        scale=args.scale,
        train_overrides={"max_lr": 1e-3, "dropout": 0.1, "label_smoothing": 0.1, "batch_tokens": 256},
    )
    runner = PipelineRunner(manifest, vocab, settings, out / "runs")

    for d in [(SOURCE, COPY), (SOURCE, REVERSE)]:
        # a one-stage recipe: in-domain bilingual fine-tuning from scratch
        final = runner.run_chain(expand("B-FT", manifest.languages, target=d))[-1].selected
        pairs = manifest.pair_dataset(d[0], d[1], "test", Domain.IN).pairs[:5]
        hyps = runner.translate(final, d, [s for s, _ in pairs])
        print(f"\n{d[0]}->{d[1]} after {final.meta.updates} updates (valid NLL {final.meta.valid_nll:.3f})")
        for (src, ref), hyp in zip(pairs, hyps):
            print(f"  {src}\n    ref {ref}\n    hyp {hyp}")
        print(f"  sample BLEU {text_bleu(hyps, [t for _, t in pairs]).bleu:.2f}, test BLEU {runner.bleu(final, d, 'test'):.2f}")


if __name__ == "__main__":
    main()
