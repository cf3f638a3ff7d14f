import io
import wave
from fractions import Fraction

import numpy as np
import pytest

from sinckws.data import (CLASSES, SILENCE, UNKNOWN, AudioClip, ClipStore, DatasetError, DatasetManifest,
                          Entry, batch_iterator, build_manifest, class_weights, condition_clip, decode_wav,
                          encode_wav, read_manifest_csv, silence_count, silence_sampler, write_manifest_csv)


def raw_wav(pcm: bytes, channels=1, width=2, rate=16000):
    buf = io.BytesIO()
    with wave.open(buf, "wb") as wf:
        wf.setnchannels(channels)
        wf.setsampwidth(width)
        wf.setframerate(rate)
        wf.writeframes(pcm)
    return buf.getvalue()


class TestWav:
    def test_zero(self):
        assert not decode_wav(raw_wav(bytes(32))).samples.any()

    def test_scaling(self):
        clip = decode_wav(raw_wav(np.array([16384, -32768, 0], dtype="<i2").tobytes()))
        assert clip.samples.tolist() == [0.5, -1.0, 0.0]

    def test_round_trip_quantization(self):
        t = np.arange(1600) / 16000
        tone = 0.7 * np.sin(2 * np.pi * 440 * t)
        back = decode_wav(encode_wav(tone)).samples
        expect = np.round(tone * 32768) / 32768
        np.testing.assert_array_equal(back, expect.astype(np.float32))

    @pytest.mark.parametrize("kw", [dict(channels=2), dict(width=1), dict(rate=8000)])
    def test_wrong_format(self, kw):
        with pytest.raises(DatasetError):
            decode_wav(raw_wav(bytes(64), **kw))

    def test_truncated(self):
        blob = raw_wav(bytes(2000))
        with pytest.raises(DatasetError):
            decode_wav(blob[:-100])
        with pytest.raises(DatasetError):
            decode_wav(b"RIFF\x00\x00")


class TestCondition:
    def test_exact_length(self):
        x = np.arange(16000, dtype=np.float32)
        np.testing.assert_array_equal(condition_clip(AudioClip(x)).samples, x)

    def test_pad(self):
        out = condition_clip(AudioClip(np.ones(8000, dtype=np.float32))).samples
        assert len(out) == 16000
        assert not out[:4000].any() and not out[-4000:].any() and out[4000:12000].all()

    def test_crop(self):
        x = np.arange(16001, dtype=np.float32)
        np.testing.assert_array_equal(condition_clip(AudioClip(x)).samples, x[0:16000])
        x = np.arange(16010, dtype=np.float32)
        np.testing.assert_array_equal(condition_clip(AudioClip(x)).samples, x[5:16005])

    def test_empty(self):
        with pytest.raises(DatasetError):
            condition_clip(AudioClip(np.zeros(0)))


class TestManifest:
    def test_labels_and_splits(self, full_root):
        m = build_manifest(full_root)
        assert m.noise_files == ["_background_noise_/white_noise.wav"]
        testing = set((full_root / "testing_list.txt").read_text().split())
        for e in m.entries:
            if e.path in testing:
                assert e.split == "test"
            expected = CLASSES.index(e.keyword) if e.keyword in CLASSES[:10] else UNKNOWN
            assert e.label == expected
        paths = {s: {e.path for e in m.split(s)} for s in ("train", "val", "test")}
        assert not paths["train"] & paths["val"] and not paths["train"] & paths["test"]
        assert not paths["val"] & paths["test"]
        assert sum(map(len, paths.values())) == len(m.entries) == 12 * 5

    def test_every_wav_labeled(self, full_root):
        m = build_manifest(full_root)
        wavs = {p.relative_to(full_root).as_posix() for p in full_root.glob("*/*.wav")
                if not p.parent.name.startswith("_")}
        assert wavs == {e.path for e in m.entries}

    def test_missing_list(self, tmp_path):
        (tmp_path / "yes").mkdir()
        with pytest.raises(DatasetError, match="list file"):
            build_manifest(tmp_path)

    def test_no_folders(self, tmp_path):
        (tmp_path / "validation_list.txt").write_text("")
        (tmp_path / "testing_list.txt").write_text("")
        with pytest.raises(DatasetError):
            build_manifest(tmp_path)

    def test_missing_target_class(self, micro_root):
        with pytest.raises(DatasetError, match="no training samples"):
            build_manifest(micro_root)
        assert len(build_manifest(micro_root, strict=False).split("train")) == 40

    def test_released_silence_list(self, tmp_path):
        from synth import write_tree
        root = write_tree(tmp_path, n_train=2, n_val=1, n_test=1)
        (root / "_silence_").mkdir()
        (root / "_silence_" / "a.wav").write_bytes(encode_wav(np.zeros(16000)))
        (root / "testing_list.txt").write_text((root / "testing_list.txt").read_text() + "_silence_/a.wav\n")
        m = build_manifest(root, strict=False)
        sil = [e for e in m.entries if e.label == SILENCE]
        assert [(e.path, e.split) for e in sil] == [("_silence_/a.wav", "test")]

    def test_csv_round_trip(self, full_root, tmp_path):
        m = build_manifest(full_root)
        write_manifest_csv(m, tmp_path / "m.csv")
        assert (tmp_path / "m.csv").read_text().splitlines()[0] == "path,label,split"
        back = read_manifest_csv(tmp_path / "m.csv", full_root)
        assert back.entries == m.entries
        np.testing.assert_array_equal(back.class_weights(), m.class_weights())


def manifest_with_counts(counts):
    entries = []
    for label, n in enumerate(counts):
        entries += [Entry(f"x/{label}_{i}.wav", "x", label, "train") for i in range(n)]
    return DatasetManifest(root=None, entries=entries)


class TestClassWeights:
    def test_balanced(self):
        w = class_weights(manifest_with_counts([5] * 11))
        np.testing.assert_array_equal(w, np.ones(12))

    def test_double_unknown(self):
        w = class_weights(manifest_with_counts([4] * 10 + [8]))
        assert w[UNKNOWN] == 0.5 and np.all(w > 0)

    def test_formula_exact(self):
        counts = [3, 5, 7, 11, 13, 2, 9, 4, 6, 8, 131]
        w = class_weights(manifest_with_counts(counts))
        mean = Fraction(sum(counts[:10]), 10)
        assert abs(w[UNKNOWN] * counts[UNKNOWN] - float(mean)) < 1e-12
        np.testing.assert_array_equal(np.delete(w, UNKNOWN), 1.0)

    def test_empty_class(self):
        with pytest.raises(DatasetError):
            class_weights(manifest_with_counts([4] * 9 + [0, 3]))

    def test_full_tree(self, full_root):
        # 3 clips per keyword, 2 unknown words x 3 clips
        assert build_manifest(full_root).class_weights()[UNKNOWN] == 0.5


class TestSilence:
    def test_deterministic_and_length(self, rng):
        noise = [rng.normal(size=40000).astype(np.float32), rng.normal(size=20000).astype(np.float32)]
        a = silence_sampler(noise, np.random.default_rng(11)).samples
        b = silence_sampler(noise, np.random.default_rng(11)).samples
        assert len(a) == 16000
        np.testing.assert_array_equal(a, b)

    def test_crop_contained_in_source(self, rng):
        src = rng.normal(size=17000).astype(np.float32)
        crop = silence_sampler([src], np.random.default_rng(4)).samples.astype(np.float64)
        found = False
        for start in range(len(src) - 16000 + 1):
            window = src[start:start + 16000].astype(np.float64)
            scale = crop[0] / window[0]
            if np.allclose(crop, scale * window, rtol=1e-5, atol=1e-7):
                found = 0 <= scale <= 1
                break
        assert found

    def test_errors(self, rng):
        with pytest.raises(DatasetError):
            silence_sampler([], rng)
        with pytest.raises(DatasetError):
            silence_sampler([np.zeros(100)], rng)


class TestBatches:
    def test_accounting(self, micro_root):
        m = build_manifest(micro_root, strict=False)
        sizes, labels = [], []
        for clips, y in batch_iterator(m, "train", 16, 1 / 12, np.random.default_rng(0)):
            assert clips.shape[1] == 16000 and clips.dtype == np.float32
            assert np.all(np.abs(clips) <= 1.0)
            sizes.append(len(y))
            labels += y.tolist()
        n_sil = silence_count(40, 1 / 12)
        assert sum(sizes) == 40 + n_sil
        assert labels.count(SILENCE) == n_sil

    def test_silence_fraction(self, full_root):
        m = build_manifest(full_root)
        batch = 8
        labels = np.concatenate([y for _, y in batch_iterator(m, "train", batch, 1 / 12, np.random.default_rng(0))])
        assert abs(np.sum(labels == SILENCE) - len(labels) / 12) <= batch

    def test_same_seed_same_order(self, micro_root):
        m = build_manifest(micro_root, strict=False)
        store = ClipStore(m, cache_size=100)
        runs = [[y.tolist() for _, y in batch_iterator(m, "train", 7, 0.2, np.random.default_rng(3), store)]
                for _ in range(2)]
        assert runs[0] == runs[1]

    def test_prefetch_matches(self, micro_root):
        m = build_manifest(micro_root, strict=False)
        plain = list(batch_iterator(m, "val", 3, 0.25, np.random.default_rng(9)))
        fetched = list(batch_iterator(m, "val", 3, 0.25, np.random.default_rng(9), prefetch=2))
        assert len(plain) == len(fetched)
        for (a, ya), (b, yb) in zip(plain, fetched):
            np.testing.assert_array_equal(a, b)
            np.testing.assert_array_equal(ya, yb)

    def test_bad_batch_size(self, micro_root):
        with pytest.raises(ValueError):
            batch_iterator(build_manifest(micro_root, strict=False), "train", 0, 0.1, np.random.default_rng(0))
