import numpy as np
import pytest

from fskws.audio import DspConfig, Waveform, log_mel, write_wav
from fskws.sources import (DatasetError, KeywordClass, OracleGenConfig, OracleSource,
                           ViewParams, dir_dataset_open, make_oracle_corpus,
                           oracle_new_class, read_class_manifest, write_class_manifest)


def test_degenerate_class():
    cfg = OracleGenConfig(n_units=1, l_min=1, l_max=1)
    cls = oracle_new_class(cfg, np.random.default_rng(0))
    assert cls.spec == (0,)


def test_length_distribution():
    cfg = OracleGenConfig()
    rng = np.random.default_rng(0)
    lengths = np.array([len(oracle_new_class(cfg, rng).spec) for _ in range(10000)])
    assert set(lengths) == set(range(10, 21))
    assert 14.5 <= lengths.mean() <= 15.5


def test_distinct_ids():
    cfg = OracleGenConfig()
    a = oracle_new_class(cfg, np.random.default_rng(1))
    b = oracle_new_class(cfg, np.random.default_rng(2))
    assert a.class_id != b.class_id


def test_units_in_range():
    cfg = OracleGenConfig(n_units=8)
    rng = np.random.default_rng(3)
    for _ in range(100):
        assert all(0 <= u < 8 for u in oracle_new_class(cfg, rng).spec)


def test_duration_accounting():
    src = OracleSource(OracleGenConfig())
    cls = src.new_class(np.random.default_rng(4))
    w = src.render_view(cls, ViewParams(150.0, 1.0))
    n_i = np.round(src.units.duration_s[list(cls.spec)] * 16000).astype(int)
    assert len(w) == n_i.sum() - (len(n_i) - 1) * 80
    assert len(w) == src.expected_length(cls)


def test_zero_variation_views_identical():
    cfg = OracleGenConfig(formant_jitter=0.0, tempo_range=(1.0, 1.0),
                          pitch_range_hz=(120.0, 120.0))
    src = OracleSource(cfg)
    cls = src.new_class(np.random.default_rng(5))
    a = src.render(cls, np.random.default_rng(6))
    b = src.render(cls, np.random.default_rng(7))
    np.testing.assert_array_equal(a.samples, b.samples)


def test_render_properties():
    src = OracleSource()
    cls = src.new_class(np.random.default_rng(8))
    a = src.render(cls, np.random.default_rng(9))
    b = src.render(cls, np.random.default_rng(9))
    np.testing.assert_array_equal(a.samples, b.samples)
    assert abs(np.max(np.abs(a.samples)) - 0.8) < 1e-12
    c = src.render(cls, np.random.default_rng(10))
    assert len(a) != len(c) or not np.array_equal(a.samples, c.samples)
    assert cls.spec == tuple(cls.spec)  # identity untouched by rendering


def test_views_closer_within_class():
    """Mean log-mel checksum: same-class pairs beat cross-class pairs in >= 95% of triples."""
    src = OracleSource()
    dsp = DspConfig()
    rng = np.random.default_rng(11)
    n_cls, n_view = 40, 4
    sig = np.empty((n_cls, n_view, dsp.n_mels))
    for c in range(n_cls):
        cls = src.new_class(rng)
        for v in range(n_view):
            sig[c, v] = log_mel(src.render(cls, rng), dsp).mean(axis=0)
    wins = 0
    for _ in range(1000):
        a, b = rng.choice(n_cls, 2, replace=False)
        i, j = rng.choice(n_view, 2, replace=False)
        k = rng.integers(n_view)
        wins += np.linalg.norm(sig[a, i] - sig[a, j]) < np.linalg.norm(sig[a, i] - sig[b, k])
    assert wins >= 950


def test_config_validation():
    with pytest.raises(ValueError):
        OracleGenConfig(l_min=5, l_max=3)
    with pytest.raises(ValueError):
        OracleGenConfig(pitch_range_hz=(0, 100))


def test_manifest_roundtrip(tmp_path):
    rng = np.random.default_rng(0)
    classes = [oracle_new_class(OracleGenConfig(), rng) for _ in range(5)]
    write_class_manifest(tmp_path / "m.tsv", classes)
    assert read_class_manifest(tmp_path / "m.tsv") == classes


def test_oracle_corpus():
    corpus = make_oracle_corpus(OracleSource(), 3, 2, 4, np.random.default_rng(0))
    assert len(corpus.keywords) == 3
    assert all(len(corpus.support[k]) == 2 and len(corpus.test[k]) == 4 for k in corpus.keywords)
    assert len(corpus) == 18


def _toy(root, counts):
    rng = np.random.default_rng(0)
    for kw, n in counts.items():
        (root / kw).mkdir(parents=True)
        for i in range(n):
            write_wav(root / kw / f"{i:02d}.wav", Waveform(rng.uniform(-0.1, 0.1, 800)))


def test_mswc_partition(tmp_path):
    _toy(tmp_path, {"a": 3, "b": 3})
    ds = dir_dataset_open(tmp_path, "mswc", test_count=1)
    for kw in ("a", "b"):
        assert ds.partitions[kw]["test"] == [f"{kw}/00.wav"]
        assert len(ds.partitions[kw]["train"]) == 2


def test_mswc_count_filter(tmp_path):
    _toy(tmp_path, {"a": 3, "b": 2, "c": 4, "d": 3})
    ds = dir_dataset_open(tmp_path, "mswc", test_count=1, min_count=2, max_count=4)
    assert ds.keywords == ["a", "d"]


def test_gsc_lists(tmp_path):
    _toy(tmp_path, {"yes": 3, "no": 3})
    (tmp_path / "_background_noise_").mkdir()
    (tmp_path / "testing_list.txt").write_text("yes/01.wav\n")
    (tmp_path / "validation_list.txt").write_text("no/02.wav\n")
    ds = dir_dataset_open(tmp_path, "gsc")
    assert ds.keywords == ["no", "yes"]
    assert ds.partitions["yes"]["test"] == ["yes/01.wav"]
    assert "yes/01.wav" not in ds.partitions["yes"]["train"]
    assert ds.partitions["no"]["val"] == ["no/02.wav"]
    for parts in ds.partitions.values():
        sets = [set(parts[k]) for k in ("train", "val", "test")]
        assert not (sets[0] & sets[1] or sets[0] & sets[2] or sets[1] & sets[2])
    corpus = ds.corpus()
    assert len(corpus.test["yes"]) == 1 and len(corpus.support["yes"]) == 2
    cls = ds.new_class(np.random.default_rng(0))
    assert len(ds.render(cls, np.random.default_rng(0))) == 800


def test_dataset_errors(tmp_path):
    with pytest.raises(DatasetError, match="missing"):
        dir_dataset_open(tmp_path / "nope")
    (tmp_path / "empty").mkdir()
    with pytest.raises(DatasetError, match="empty keyword folder"):
        dir_dataset_open(tmp_path, "mswc")


def test_malformed_list(tmp_path):
    _toy(tmp_path, {"yes": 2})
    (tmp_path / "testing_list.txt").write_text("not-a-path\n")
    (tmp_path / "validation_list.txt").write_text("")
    with pytest.raises(DatasetError, match="malformed"):
        dir_dataset_open(tmp_path, "gsc")
