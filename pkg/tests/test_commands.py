import math

import numpy as np
import pytest

from rotorsense.commands import (
    CommandSample,
    extract_features,
    load_model,
    lowpass_filter,
    predict_command,
    save_model,
    stratified_folds,
    train_command_model,
)
from rotorsense.dynamics import COMMANDS, rpm_to_rad_s
from rotorsense.errors import ConfigError, DataError
from rotorsense.sim import DroneSpec, generate_command_dataset


@pytest.fixture(scope="module")
def dataset():
    drone = DroneSpec(hover_rpm=3000.0, delta_rpm=300.0, rpm_jitter=60.0)
    raw = generate_command_dataset(40, drone, window_samples=100, rate_hz=1000.0, seed=11)
    return [CommandSample(speeds_sq=x, label=lab) for x, lab in raw]


class TestLowpass:
    def test_constant_trace_unchanged(self):
        x = np.full(200, 7.5)
        assert lowpass_filter(x, 20.0, 1000.0) == pytest.approx(x)

    def test_high_frequency_attenuation_matches_pole(self):
        """Two-pass gain of a single pole at f: ((1-a)^2 /
        (1 - 2a cos(2 pi f/fs) + a^2)); a tone far above cutoff drops
        below 0.1 amplitude."""
        fs, fc, f = 1000.0, 20.0, 200.0
        n = 4096
        t = np.arange(n) / fs
        x = np.sin(2 * np.pi * f * t)
        y = lowpass_filter(x, fc, fs)
        measured = np.abs(y[n // 4 : -n // 4]).max()
        a = math.exp(-2 * math.pi * fc / fs)
        expected = (1 - a) ** 2 / (1 - 2 * a * math.cos(2 * math.pi * f / fs) + a**2)
        assert measured < 0.1
        assert measured == pytest.approx(expected, rel=0.05)

    def test_step_response_monotone_no_overshoot(self):
        x = np.concatenate([np.zeros(100), np.ones(100)])
        y = lowpass_filter(x, 30.0, 1000.0)
        assert np.all(np.diff(y) >= -1e-12)
        assert y.max() <= 1.0 + 1e-12

    def test_cutoff_above_nyquist_rejected(self):
        with pytest.raises(ConfigError, match="Nyquist"):
            lowpass_filter(np.ones(10), 600.0, 1000.0)


class TestFeatures:
    def test_constant_trace_features(self):
        sample = np.full((1, 100), 42.0)
        f = extract_features(sample, rate_hz=1000.0)
        mean, std, domfreq, energy, entropy = f
        assert mean == pytest.approx(42.0)
        assert std == pytest.approx(0.0)
        assert domfreq == 0.0 and energy == 0.0 and entropy == 0.0

    def test_sinusoid_dominant_frequency_within_one_bin(self):
        fs, f0, n = 1000.0, 10.0, 1024
        t = np.arange(n) / fs
        sample = (5.0 + np.sin(2 * np.pi * f0 * t))[None, :]
        feats = extract_features(sample, rate_hz=fs)
        bin_hz = fs / n  # ~0.977 Hz
        assert abs(feats[2] - f0) <= bin_hz

    def test_entropy_noise_above_tone(self):
        fs, n = 1000.0, 256
        t = np.arange(n) / fs
        tone = (np.sin(2 * np.pi * 25.0 * t))[None, :] + 2.0
        wins = 0
        for seed in range(50):
            noise = np.abs(np.random.default_rng(seed).normal(2.0, 1.0, n))[None, :]
            e_noise = extract_features(noise, fs)[4]
            e_tone = extract_features(tone, fs)[4]
            wins += e_noise > e_tone
        assert wins == 50

    def test_deterministic_bit_for_bit(self, dataset):
        a = extract_features(dataset[0])
        b = extract_features(dataset[0])
        assert np.array_equal(a, b)

    def test_dimension_is_five_per_channel(self, dataset):
        assert extract_features(dataset[0]).shape == (5 * 4,)


class TestTraining:
    def test_linearly_separable_two_class_perfect_folds(self):
        rng = np.random.default_rng(0)
        samples = []
        for label, base in (("hover", 50.0), ("climb", 200.0)):
            # constant traces at class-distinct levels: separation lives
            # entirely in the mean feature
            for _ in range(20):
                level = base + float(rng.uniform(-1.0, 1.0))
                samples.append(CommandSample(speeds_sq=np.full((4, 64), level), label=label))
        model, accs = train_command_model(
            samples, k_folds=5, seed=3, cutoff_hz=None, classes=("hover", "climb")
        )
        assert accs.mean() == 1.0
        # a training sample from the separable set maps to its own label
        for s in samples[::5]:
            assert predict_command(model, s)[0] == s.label

    def test_generated_dataset_reaches_90_percent(self, dataset):
        model, accs = train_command_model(dataset, k_folds=5, seed=11)
        assert accs.mean() >= 0.90

    def test_missing_class_listed(self, dataset):
        partial = [s for s in dataset if s.label != "yaw"]
        with pytest.raises(DataError, match="yaw"):
            train_command_model(partial, k_folds=5)

    def test_too_few_samples_per_class(self, dataset):
        small = dataset[:1] + [s for s in dataset if s.label != "hover"]
        with pytest.raises(DataError, match="hover"):
            train_command_model(small, k_folds=5)

    def test_determinism_per_seed(self, dataset):
        m1, a1 = train_command_model(dataset, k_folds=5, seed=7)
        m2, a2 = train_command_model(dataset, k_folds=5, seed=7)
        assert np.array_equal(m1.weights, m2.weights)
        assert np.array_equal(m1.biases, m2.biases)
        assert np.array_equal(a1, a2)

    def test_duplicated_dataset_equivalent_decisions(self, dataset):
        """Duplicating every sample (with lambda adjusted for the doubled
        pass length) changes the shuffle but not the learned decision in
        any material way."""
        m1, a1 = train_command_model(dataset, k_folds=5, seed=7, lambda_reg=1e-3)
        m2, a2 = train_command_model(dataset + dataset, k_folds=5, seed=7, lambda_reg=5e-4)
        agree = np.mean([predict_command(m1, s)[0] == predict_command(m2, s)[0] for s in dataset])
        assert agree >= 0.95
        assert abs(a1.mean() - a2.mean()) <= 0.05

    def test_scale_invariance_after_refit(self, dataset):
        """Scaling all raw traces by a constant and refitting the
        standardization leaves every prediction unchanged."""
        scaled = [CommandSample(speeds_sq=s.speeds_sq * 4.0, label=s.label) for s in dataset]
        m1, _ = train_command_model(dataset, k_folds=5, seed=5)
        m2, _ = train_command_model(scaled, k_folds=5, seed=5)
        for s, ss in zip(dataset, scaled):
            assert predict_command(m1, s)[0] == predict_command(m2, ss)[0]


class TestPredict:
    def test_training_samples_mostly_self_labelled(self, dataset):
        model, _ = train_command_model(dataset, k_folds=5, seed=1)
        correct = np.mean([predict_command(model, s)[0] == s.label for s in dataset])
        assert correct >= 0.95

    def test_zero_scores_tie_break_to_hover(self, dataset):
        model, _ = train_command_model(dataset, k_folds=5, seed=2)
        model.weights = np.zeros_like(model.weights)
        model.biases = np.zeros_like(model.biases)
        label, scores = predict_command(model, dataset[-1])
        assert label == "hover"
        assert set(scores) == set(COMMANDS)

    def test_dimension_mismatch(self, dataset):
        model, _ = train_command_model(dataset, k_folds=5, seed=2)
        with pytest.raises(DataError, match="shape"):
            predict_command(model, np.ones((4, 17)))

    def test_climb_offset_on_hover_sample(self, dataset):
        """A hover-pattern window shifted up by delta on every rotor is
        read as climb."""
        model, _ = train_command_model(dataset, k_folds=5, seed=11)
        rng = np.random.default_rng(99)
        for _ in range(10):
            rpm = 3000.0 + rng.normal(0, 60.0, size=(4, 100))
            climb_sq = np.square(rpm_to_rad_s(rpm + 300.0))
            assert predict_command(model, climb_sq)[0] == "climb"


class TestFolds:
    def test_folds_disjoint_cover_stratified(self):
        labels = np.repeat(np.arange(6), 25)
        folds = stratified_folds(labels, 5, np.random.default_rng(0))
        all_idx = np.concatenate(folds)
        assert len(all_idx) == 150
        assert len(np.unique(all_idx)) == 150
        for fold in folds:
            counts = np.bincount(labels[fold], minlength=6)
            assert np.all(counts == 5)


class TestModelFile:
    def test_round_trip(self, dataset, tmp_path):
        model, _ = train_command_model(dataset, k_folds=5, seed=4)
        path = str(tmp_path / "model.txt")
        save_model(model, path)
        back = load_model(path)
        assert np.array_equal(back.weights, model.weights)
        assert np.array_equal(back.biases, model.biases)
        assert np.array_equal(back.feature_mean, model.feature_mean)
        assert np.array_equal(back.feature_std, model.feature_std)
        assert np.array_equal(back.fold_accuracies, model.fold_accuracies)
        assert back.classes == model.classes
        assert (back.n_props, back.window, back.rate_hz, back.cutoff_hz) == (
            model.n_props, model.window, model.rate_hz, model.cutoff_hz,
        )
        for s in dataset[::17]:
            assert predict_command(back, s) == predict_command(model, s)

    def test_bad_header_rejected(self, tmp_path):
        path = tmp_path / "bogus.txt"
        path.write_text("not a model\n")
        with pytest.raises(DataError):
            load_model(str(path))
