import numpy as np
import pytest

from metasfanc.classify import (
    AUGMENTATIONS,
    ClassifierModel,
    MelParams,
    MelSpectrogram,
    TrainConfig,
    accuracy,
    augment,
    band_centers,
    classify,
    expand_corpus,
    extract,
    features,
    holdout_split,
    ingest_esc50,
    label_for,
    mel_filterbank,
    mel_spectrogram,
    pitch_shift,
    read_esc50_manifest,
    time_scale,
    train_classifier,
)
from metasfanc.dsp import CategorySpec, Signal, synth_noise, tone, write_wav
from metasfanc.errors import ConfigError, DataError, InvalidArgumentError


def dominant_hz(sig):
    x = sig.samples
    spec = np.abs(np.fft.rfft(x * np.hanning(x.size)))
    return np.argmax(spec) * sig.sample_rate / x.size


def three_categories():
    return [
        CategorySpec("drone", 200, 800, jitter_hz=20),
        CategorySpec("fan", 1500, 3000, jitter_hz=20),
        CategorySpec("hiss", 4000, 7000, jitter_hz=20),
    ]


@pytest.fixture(scope="module")
def synthetic_suite():
    clips = []
    for ci, cat in enumerate(three_categories()):
        for k in range(40):
            clips.append((synth_noise(cat.subclass(k % 10), 2.5, 1000 * ci + k), cat.label))
    return clips


class TestMel:
    def test_params_validation(self):
        with pytest.raises(InvalidArgumentError):
            MelParams(fft_size=1000)
        with pytest.raises(InvalidArgumentError):
            MelParams(fmin=9000).upper(16000)

    def test_tone_at_band_center_peaks_there(self):
        p = MelParams()
        centers = band_centers(p, 16000)
        for band in (10, 30, 50):
            mel = mel_spectrogram(tone(centers[band], 0.5), p)
            assert np.all(np.argmax(mel.values, axis=0) == band)

    def test_filterbank_peaks(self):
        fb = mel_filterbank(MelParams(), 16000)
        assert fb.shape == (64, 513)
        assert np.all(fb >= 0) and np.all(fb.max(axis=1) <= 1.0)

    def test_silence_at_floor(self):
        mel = mel_spectrogram(Signal(np.zeros(4096), 16000))
        assert np.all(mel.values == -100.0)

    def test_scaling_shifts_by_twenty_db(self):
        sig = Signal(np.random.default_rng(0).normal(0, 0.1, 8000), 16000)
        a = mel_spectrogram(sig).values
        b = mel_spectrogram(Signal(10 * sig.samples, 16000)).values
        live = a > -90
        assert live.all()
        np.testing.assert_allclose(b - a, 20.0, atol=1e-9)

    def test_frames(self):
        mel = mel_spectrogram(Signal(np.ones(1024 + 3 * 256), 16000))
        assert mel.n_frames == 4

    def test_too_short(self):
        with pytest.raises(InvalidArgumentError):
            mel_spectrogram(Signal(np.ones(100), 16000))


class TestFeatures:
    def test_constant_spectrogram(self):
        mel = MelSpectrogram(np.full((64, 7), -30.0), MelParams(), 16000)
        f = features(mel)
        assert f.size == 128
        np.testing.assert_array_equal(f[64:], 0.0)

    def test_frame_order_invariance(self):
        v = np.random.default_rng(0).standard_normal((8, 20))
        a = features(MelSpectrogram(v, MelParams(n_mels=8), 16000))
        b = features(MelSpectrogram(v[:, ::-1].copy(), MelParams(n_mels=8), 16000))
        np.testing.assert_allclose(a, b, atol=1e-12)


class TestAugmentation:
    def test_identity_factor(self):
        sig = tone(440, 0.5)
        assert time_scale(sig, 1.0) == sig

    def test_stretch_length(self):
        out = time_scale(tone(440, 2.5), 1.5)
        assert abs(out.duration - 3.75) * 16000 <= 1

    def test_inverse_factors(self):
        sig = tone(440, 2.5)
        out = time_scale(time_scale(sig, 0.8), 1.25)
        assert abs(len(out) - len(sig)) <= 2

    def test_time_scale_moves_pitch(self):
        out = time_scale(tone(440, 1.0), 2.0)
        assert dominant_hz(out) == pytest.approx(220, rel=0.01)

    def test_invalid_factor(self):
        with pytest.raises(InvalidArgumentError):
            time_scale(tone(440, 0.1), 0.0)

    def test_zero_semitones(self):
        out = pitch_shift(tone(440, 1.0), 0.0)
        assert dominant_hz(out) == pytest.approx(440, rel=0.01)

    def test_octave_up(self):
        sig = tone(440, 1.0)
        out = pitch_shift(sig, 12.0)
        assert len(out) == len(sig)
        assert dominant_hz(out) == pytest.approx(880, rel=0.03)

    def test_up_then_down_restores(self):
        out = pitch_shift(pitch_shift(tone(440, 1.0), 4.5), -4.5)
        assert dominant_hz(out) == pytest.approx(440, rel=0.03)

    @pytest.mark.parametrize("st", [4.5, -4.5])
    def test_shift_ratio(self, st):
        assert dominant_hz(pitch_shift(tone(440, 1.0), st)) == pytest.approx(
            440 * 2 ** (st / 12), rel=0.03
        )

    def test_range(self):
        with pytest.raises(InvalidArgumentError):
            pitch_shift(tone(440, 0.1), 30)

    def test_counts(self):
        clips = [(tone(300 + 10 * k, 0.5), "a") for k in range(5)]
        assert len(expand_corpus(clips, True)) == 5 * (1 + len(AUGMENTATIONS))
        assert len(expand_corpus(clips, False)) == 5
        assert len(augment(clips[0][0])) == 4


class TestClassifier:
    def test_separable_clusters_centroid(self):
        rng = np.random.default_rng(0)
        data = [(rng.normal(0, 0.1, 4), "a") for _ in range(20)] + \
               [(rng.normal(5, 0.1, 4), "b") for _ in range(20)]
        m = train_classifier(data, TrainConfig(kind="centroid"))
        assert accuracy(m, data) == 1.0

    def test_deterministic(self):
        rng = np.random.default_rng(1)
        data = [(rng.normal(c, 1, 6), lab) for c, lab in [(0, "x"), (2, "y")] for _ in range(15)]
        a = train_classifier(data)
        b = train_classifier(list(data))
        np.testing.assert_array_equal(a.weights, b.weights)
        assert a.to_json() == b.to_json()

    def test_single_class_rejected(self):
        with pytest.raises(InvalidArgumentError):
            train_classifier([(np.zeros(3), "a"), (np.ones(3), "a")])

    def test_tie_breaks_to_smallest_label(self):
        m = ClassifierModel(("a", "b"), "centroid", np.zeros(2), np.ones(2),
                            np.array([[1.0, 0.0], [-1.0, 0.0]]), np.zeros(2))
        assert m.predict(np.zeros(2))[0] == "a"
        chk = ClassifierModel(("a", "b"), "centroid", np.zeros(2), np.ones(2),
                              np.array([[-1.0, 0.0], [1.0, 0.0]]), np.zeros(2))
        assert chk.predict(np.zeros(2))[0] == "a"

    def test_held_out_accuracy(self, synthetic_suite):
        clips = synthetic_suite
        tr, te = holdout_split([lab for _, lab in clips], 0.25, 0)
        feats = [(extract(s), lab) for s, lab in clips]
        for kind in ("linear", "centroid"):
            model = train_classifier([feats[i] for i in tr], TrainConfig(kind=kind), frame_samples=40000)
            assert accuracy(model, [feats[i] for i in te]) >= 0.95

    def test_classify_frames(self, synthetic_suite, tmp_path):
        clips = synthetic_suite
        feats = [(extract(s), lab) for s, lab in clips[::2]]
        model = train_classifier(feats, frame_samples=40000)
        for sig, lab in clips[1::8]:
            label, score = classify(model, sig)
            assert label == lab and 0.0 <= score <= 1.0
            assert classify(model, Signal(0.5 * sig.samples, 16000))[0] == lab
        with pytest.raises(InvalidArgumentError):
            classify(model, Signal(clips[0][0].samples[:20000], 16000))
        model.save(tmp_path / "m.json")
        back = ClassifierModel.load(tmp_path / "m.json")
        assert back.to_json() == model.to_json()
        assert classify(back, clips[1][0]) == classify(model, clips[1][0])

    def test_stratified_split(self):
        labels = ["a"] * 8 + ["b"] * 4
        tr, te = holdout_split(labels, 0.25, 3)
        assert sorted(tr + te) == list(range(12))
        assert sum(labels[i] == "a" for i in te) == 2 and sum(labels[i] == "b" for i in te) == 1


MANIFEST = "filename,fold,target,category,esc10,src_file,take\n"


def _write_esc50(root, n, missing=()):
    rows = []
    for i in range(n):
        name = f"1-{i}-A-{i % 3}.wav"
        cat = ("dog", "rain", "laughing")[i % 3]
        target = (0, 10, 26)[i % 3]
        if i not in missing:
            write_wav(tone(200 + 50 * i, 5.0, sample_rate=44100, amplitude=0.3), root / name)
        rows.append(f"{name},1,{target},{cat},False,{i},A")
    (root / "esc50.csv").write_text(MANIFEST + "\n".join(rows) + "\n")
    return root / "esc50.csv"


class TestEsc50:
    def test_ingest_counts(self, tmp_path):
        manifest = _write_esc50(tmp_path, 10)
        index = ingest_esc50(tmp_path, manifest, tmp_path / "out")
        assert len(index["clips"]) == 20 and index["skipped"] == []
        assert index["clips"][0]["path"].endswith("_0.wav")

    def test_missing_file_skipped(self, tmp_path):
        manifest = _write_esc50(tmp_path, 10, missing=(4,))
        index = ingest_esc50(tmp_path, manifest, tmp_path / "out")
        assert len(index["clips"]) == 18 and len(index["skipped"]) == 1

    def test_malformed_row(self, tmp_path):
        p = tmp_path / "m.csv"
        p.write_text(MANIFEST + "a.wav,1,0,dog,False,1,A\nb.wav,x,0,dog,False,2,A\n")
        with pytest.raises(DataError, match="row 3"):
            read_esc50_manifest(p)

    def test_label_maps(self, tmp_path):
        rows = read_esc50_manifest(_write_esc50(tmp_path, 3))
        assert [label_for(r, None) for r in rows] == ["dog", "rain", "laughing"]
        assert [label_for(r, "major") for r in rows] == ["animals", "natural", "human"]
        assert label_for(rows[0], {"dog": "pets"}) == "pets"
        with pytest.raises(ConfigError):
            label_for(rows[1], {"dog": "pets"})
