import math

import mpmath
import numpy as np
import pytest
from hypothesis import given
from hypothesis import strategies as st

from lrlf.corpus import (
    CorpusDecodeError,
    CorpusError,
    DanglingLanguageError,
    Domain,
    ManifestNotFoundError,
    ManifestSchemaError,
    ParallelDataset,
    SamplingConfig,
    clean,
    load_manifest,
    read_lines,
    sample_batch_language,
    temperature_weights,
    upsample_mix,
)


def exact_temperature_weights(sizes, T):
    mpmath.mp.dps = 50
    total = mpmath.fsum(sizes)
    q = [(mpmath.mpf(n) / total) ** (mpmath.mpf(1) / T) for n in sizes]
    z = mpmath.fsum(q)
    return [float(x / z) for x in q]


# frozen from the high-precision oracle above
TEMPERATURE_75_25 = (0.6753335112129679, 0.3246664887870321)


def test_frozen_oracle_value():
    got = exact_temperature_weights([75, 25], mpmath.mpf(3) / 2)
    assert got == pytest.approx(TEMPERATURE_75_25, abs=1e-15)


def test_temperature_weights_match_oracle():
    w = temperature_weights([75, 25], SamplingConfig(1.5))
    assert w == pytest.approx(TEMPERATURE_75_25, abs=1e-12)


@given(st.lists(st.integers(1, 10**6), min_size=1, max_size=6), st.floats(0.2, 5.0))
def test_temperature_weights_property(sizes, T):
    w = temperature_weights(sizes, SamplingConfig(T))
    assert w.sum() == pytest.approx(1.0, abs=1e-12)
    assert np.all(w > 0)
    assert w == pytest.approx(exact_temperature_weights(sizes, T), rel=1e-9, abs=1e-15)


def test_temperature_one_is_proportional():
    assert temperature_weights([3, 1], SamplingConfig(1.0)) == pytest.approx([0.75, 0.25])


def test_temperature_flattens():
    p = temperature_weights([90, 10], SamplingConfig(1.0))
    q = temperature_weights([90, 10], SamplingConfig(5.0))
    assert q[1] > p[1]


@pytest.mark.parametrize("sizes", [[], [3, 0], [-1, 4]])
def test_temperature_rejects_bad_sizes(sizes):
    with pytest.raises(ValueError):
        temperature_weights(sizes)


def test_temperature_rejects_bad_t():
    with pytest.raises(ValueError):
        SamplingConfig(0)


def test_empirical_frequencies_within_three_sigma():
    w = temperature_weights([75, 25])
    rng = np.random.default_rng(7)
    n = 100_000
    hits = sum(sample_batch_language(w, rng) == 0 for _ in range(n))
    sigma = math.sqrt(n * w[0] * (1 - w[0]))
    assert abs(hits - n * w[0]) < 3 * sigma


def test_sample_requires_normalized():
    with pytest.raises(ValueError):
        sample_batch_language([0.5, 0.4], np.random.default_rng(0))


def _pd(n, tag, src="a", tgt="b", dom=Domain.IN):
    return ParallelDataset(src, tgt, dom, tuple((f"{tag}{i}", f"{tag}{i}'") for i in range(n)))


@pytest.mark.parametrize("n_in,n_out", [(3, 10), (5, 5), (1, 7), (4, 8)])
def test_upsample_mix_counts(n_in, n_out):
    mixed = upsample_mix(_pd(n_in, "i"), _pd(n_out, "o", dom=Domain.OUT), seed=3)
    assert len(mixed) == 2 * n_out
    assert mixed.domain is Domain.MIXED
    counts = [sum(p == (f"i{k}", f"i{k}'") for p in mixed.pairs) for k in range(n_in)]
    assert sum(counts) == n_out
    assert max(counts) - min(counts) <= 1
    assert sorted(p for p in mixed.pairs if p[0].startswith("o")) == sorted(_pd(n_out, "o").pairs)


def test_upsample_mix_deterministic():
    a = upsample_mix(_pd(3, "i"), _pd(10, "o"), seed=1)
    b = upsample_mix(_pd(3, "i"), _pd(10, "o"), seed=1)
    assert a == b


def test_upsample_mix_errors():
    with pytest.raises(CorpusError):
        upsample_mix(_pd(5, "i"), _pd(3, "o"), seed=0)
    with pytest.raises(CorpusError):
        upsample_mix(_pd(2, "i"), _pd(3, "o", src="b", tgt="a"), seed=0)


def test_clean_drops_symbolic_lines():
    lines = ["hello there", "", "   ", "12345", "12/03/2019", "March 2019", "---", "!!", "ok 2"]
    assert clean(lines) == ["hello there", "ok 2"]


def test_clean_keeps_order_and_content():
    lines = ["b  spaced ", "a\u200dz", "\u0dc1\u0dca\u200d\u0dbb\u0dd3 \u0dbd\u0d82\u0d9a\u0dcf"]
    assert clean(lines) == lines


def test_clean_reports_bad_bytes():
    with pytest.raises(CorpusDecodeError) as info:
        clean([b"fine", b"\xff\xfe"])
    assert "2" in str(info.value)


def test_read_lines_bad_utf8(tmp_path):
    p = tmp_path / "x.txt"
    p.write_bytes(b"ok\nbad \xc3\x28\n")
    with pytest.raises(CorpusDecodeError):
        read_lines(p)


def test_read_lines_strips_terminators_only(tmp_path):
    p = tmp_path / "x.txt"
    p.write_bytes(b" a \r\nb\n\nc")
    assert read_lines(p) == [" a ", "b", "", "c"]


def test_manifest_loads_toy(small_manifest):
    m = small_manifest
    assert m.languages == ("xa", "xb", "xc")
    assert len(m.mono) == 6
    ds = m.pair_dataset("xb", "xa", "train")
    assert (ds.src_lang, ds.tgt_lang) == ("xb", "xa")
    assert len(ds) == 60


def _write(tmp_path, text):
    p = tmp_path / "manifest.yaml"
    p.write_text(text)
    return p


def test_manifest_missing_file(tmp_path):
    with pytest.raises(ManifestNotFoundError):
        load_manifest(tmp_path / "nope.yaml")


def test_manifest_dangling_language(tmp_path):
    (tmp_path / "m.txt").write_text("hi\n")
    p = _write(tmp_path, "languages: [en]\nmono:\n - {lang: si, domain: in, path: m.txt}\n")
    with pytest.raises(DanglingLanguageError) as info:
        load_manifest(p)
    assert info.value.field == "mono[0].lang"


def test_manifest_missing_corpus_file(tmp_path):
    p = _write(tmp_path, "languages: [en]\nmono:\n - {lang: en, domain: in, path: gone.txt}\n")
    with pytest.raises(ManifestNotFoundError):
        load_manifest(p)


@pytest.mark.parametrize(
    "body",
    [
        "languages: []\n",
        "languages: [en, en]\n",
        "languages: [EN]\n",
        "languages: [en]\nextra: 1\n",
        "languages: [en]\nmono:\n - {lang: en, domain: mixed, path: m.txt}\n",
        "- just a list\n",
    ],
)
def test_manifest_schema_errors(tmp_path, body):
    (tmp_path / "m.txt").write_text("hi\n")
    with pytest.raises(ManifestSchemaError):
        load_manifest(_write(tmp_path, body))


def test_manifest_unaligned_parallel(tmp_path):
    (tmp_path / "p.en").write_text("a\nb\n")
    (tmp_path / "p.si").write_text("a\n")
    p = _write(tmp_path, "languages: [en, si]\nparallel:\n - {prefix: p, src_lang: en, tgt_lang: si, domain: in, split: train}\n")
    with pytest.raises(ManifestSchemaError):
        load_manifest(p)


def test_manifest_requires_valid_and_test_for_trained_pair(tmp_path):
    (tmp_path / "p.en").write_text("a\n")
    (tmp_path / "p.si").write_text("b\n")
    p = _write(tmp_path, "languages: [en, si]\nparallel:\n - {prefix: p, src_lang: en, tgt_lang: si, domain: in, split: train}\n")
    with pytest.raises(ManifestSchemaError):
        load_manifest(p)


def test_manifest_zwj_default(tmp_path):
    (tmp_path / "m.txt").write_text("hi\n")
    p = _write(tmp_path, "languages: [si, en]\nmono:\n - {lang: si, domain: in, path: m.txt}\n")
    assert load_manifest(p).needs_zwj_repair == frozenset({"si"})


# ---------------------------------------------------------------------------
# worked examples


@pytest.mark.parametrize(
    "lines,kept",
    [
        (["12/03/2020", "The act is amended."], ["The act is amended."]),
        ([], []),
        (["...", "\u2014", "Budget 2021 report"], ["Budget 2021 report"]),
    ],
)
def test_clean_examples(lines, kept):
    assert clean(lines) == kept


def test_manifest_reports_full_scale_counts(tmp_path):
    (tmp_path / "train.si").write_text("x\n" * 74_468)
    (tmp_path / "train.en").write_text("y\n" * 74_468)
    for pair in ("si-en", "ta-en", "si-ta"):
        a, b = pair.split("-")
        (tmp_path / f"valid.{pair}.{a}").write_text("v\n" * 1_623)
        (tmp_path / f"valid.{pair}.{b}").write_text("w\n" * 1_623)
    (tmp_path / "test.si").write_text("t\n")
    (tmp_path / "test.en").write_text("u\n")
    body = (
        "languages: [si, ta, en]\nparallel:\n"
        " - {prefix: train, src_lang: si, tgt_lang: en, domain: in, split: train}\n"
        " - {prefix: test, src_lang: si, tgt_lang: en, domain: in, split: test}\n"
    )
    for pair in ("si-en", "ta-en", "si-ta"):
        a, b = pair.split("-")
        body += f" - {{prefix: valid.{pair}, src_lang: {a}, tgt_lang: {b}, domain: in, split: valid}}\n"
    m = load_manifest(_write(tmp_path, body))
    train = [p for p in m.parallel if p.split == "train"]
    assert [p.count for p in train] == [74_468]
    assert [p.count for p in m.parallel if p.split == "valid"] == [1_623] * 3


def test_dangling_parallel_language_names_field(tmp_path):
    (tmp_path / "p.xx").write_text("a\n")
    (tmp_path / "p.en").write_text("b\n")
    p = _write(tmp_path, "languages: [en]\nparallel:\n - {prefix: p, src_lang: xx, tgt_lang: en, domain: in, split: train}\n")
    with pytest.raises(DanglingLanguageError) as info:
        load_manifest(p)
    assert info.value.field == "parallel[0].src_lang"


def test_upsample_three_into_ten():
    mixed = upsample_mix(_pd(3, "i"), _pd(10, "o"), seed=0)
    assert len(mixed) == 20
    assert sum(p[0].startswith("i") for p in mixed.pairs) == 10


def test_upsample_seed_seven_counts():
    mixed = upsample_mix(_pd(4, "i"), _pd(10, "o"), seed=7)
    counts = sorted(sum(p[0] == f"i{k}" for p in mixed.pairs) for k in range(4))
    assert counts == [2, 2, 3, 3]


def test_equal_sizes_are_uniform():
    assert temperature_weights([50, 50]) == pytest.approx([0.5, 0.5])


def test_single_weight_always_zero():
    rng = np.random.default_rng(0)
    assert {sample_batch_language([1.0], rng) for _ in range(100)} == {0}


def test_even_weights_frequency():
    rng = np.random.default_rng(3)
    n = 100_000
    freq = sum(sample_batch_language([0.5, 0.5], rng) for _ in range(n)) / n
    assert 0.49 <= freq <= 0.51
