"""Desk-scale toolkit for domain-specific low-resource translation.

Subword vocabularies, denoising continual pre-training, a small numpy
encoder-decoder, multistage fine-tuning recipes, ensemble beam search and
BLEU reporting.
"""

__version__ = "0.1.0"
