import numpy as np
import pytest

from lrlf.corpus import load_manifest
from lrlf.model import ModelCheckpoint, ModelConfig, init_params
from lrlf.subword import train_vocab
from lrlf.synthetic import ToyConfig, write_toy_corpus

SMALL_TOY = ToyConfig(n_train=60, n_valid=8, n_test=8, n_out_train=120, n_mono_in=40, n_mono_out=60)


@pytest.fixture(scope="session")
def small_manifest_path(tmp_path_factory):
    return write_toy_corpus(tmp_path_factory.mktemp("toy"), SMALL_TOY)


@pytest.fixture(scope="session")
def small_manifest(small_manifest_path):
    return load_manifest(small_manifest_path)


@pytest.fixture(scope="session")
def small_vocab(small_manifest):
    texts = [small_manifest.load_mono(m).lines for m in small_manifest.mono]
    return train_vocab(texts, 330, small_manifest.languages)


def random_checkpoint(seed, vocab_size=12, dtype=np.float64, std=0.5, **kw):
    cfg = ModelConfig(**{"layers": 1, "d_model": 8, "heads": 2, "ffn_dim": 16, "max_len": 16, "dropout": 0.0, **kw, "vocab_size": vocab_size})
    return ModelCheckpoint(cfg, init_params(cfg, seed, dtype, std=std))


def pytest_terminal_summary(terminalreporter):
    mod = __import__("sys").modules.get("test_acceptance")
    if mod is None or not mod.RESULTS:
        return
    terminalreporter.section("acceptance criteria")
    for n in sorted(mod.RESULTS):
        terminalreporter.write_line(mod.RESULTS[n])
