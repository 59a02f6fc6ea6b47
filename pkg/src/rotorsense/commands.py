"""Flight-command classification from multi-propeller speed traces.

Squared-speed windows (thrust scales with speed squared) are low-pass
filtered, summarized per channel by five features (mean, standard
deviation, dominant frequency, spectral energy, spectral entropy),
z-scored with training statistics, and classified by one-vs-rest linear
hinge-loss classifiers trained with seeded stochastic subgradient
descent. Stratified k-fold cross-validation scores ship with the model.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field

import numpy as np

from .dynamics import COMMANDS
from .errors import ConfigError, DataError

FEATURES_PER_CHANNEL = 5


@dataclass(frozen=True)
class CommandSample:
    """Squared-speed windows, one row per propeller, plus an optional label."""

    speeds_sq: np.ndarray  # (n_props, window), (rad/s)^2
    label: str | None = None

    def __post_init__(self) -> None:
        arr = np.asarray(self.speeds_sq, dtype=np.float64)
        if arr.ndim != 2:
            raise DataError("sample must be a 2-D (n_props, window) array")
        if np.any(arr < 0):
            raise DataError("squared speeds must be nonnegative")
        object.__setattr__(self, "speeds_sq", arr)
        if self.label is not None and self.label not in COMMANDS:
            raise DataError(f"unknown label {self.label!r}")


def lowpass_filter(trace: np.ndarray, cutoff_hz: float, rate_hz: float) -> np.ndarray:
    """Single-pole smoothing run forward then backward: zero phase lag,
    unit DC gain, monotone step response."""
    if cutoff_hz <= 0:
        raise ConfigError("cutoff must be positive")
    if cutoff_hz > rate_hz / 2.0:
        raise ConfigError(f"cutoff {cutoff_hz} Hz exceeds Nyquist {rate_hz / 2.0} Hz")
    x = np.asarray(trace, dtype=np.float64)
    if x.size == 0:
        return x.copy()
    a = math.exp(-2.0 * math.pi * cutoff_hz / rate_hz)

    def one_pass(sig: np.ndarray) -> np.ndarray:
        out = np.empty_like(sig)
        out[0] = sig[0]
        for i in range(1, sig.size):
            out[i] = a * out[i - 1] + (1.0 - a) * sig[i]
        return out

    return one_pass(one_pass(x)[::-1])[::-1]


def _next_pow2(n: int) -> int:
    return 1 << (n - 1).bit_length()


def _channel_features(signal: np.ndarray, rate_hz: float) -> np.ndarray:
    mean = float(signal.mean())
    std = float(signal.std())
    n_fft = _next_pow2(signal.size)
    padded = np.zeros(n_fft)
    padded[: signal.size] = signal - mean  # keep zero-padding from leaking DC
    spectrum = np.fft.rfft(padded)
    mags_sq = np.abs(spectrum[1:]) ** 2  # DC excluded
    floor = (1e-9 * signal.size * max(1.0, abs(mean) + std)) ** 2
    if mags_sq.size == 0 or float(mags_sq.max()) <= floor:
        return np.array([mean, std, 0.0, 0.0, 0.0])
    energy = float(mags_sq.sum())
    dominant_bin = int(np.argmax(mags_sq)) + 1
    dominant_hz = dominant_bin * rate_hz / n_fft
    p = mags_sq / energy
    nz = p[p > 0]
    entropy = float(-(nz * np.log(nz)).sum())
    return np.array([mean, std, dominant_hz, energy, entropy])


def extract_features(sample: CommandSample | np.ndarray, rate_hz: float = 1000.0) -> np.ndarray:
    """Five features per channel, concatenated channel-major.

    Spectral features use the mean-removed window zero-padded to a power
    of two; a window whose non-DC spectrum stays below the tolerance
    floor reports dominant frequency, energy, and entropy of 0.
    """
    data = sample.speeds_sq if isinstance(sample, CommandSample) else np.asarray(sample, dtype=np.float64)
    if data.ndim != 2:
        raise DataError("expected a (n_props, window) array")
    return np.concatenate([_channel_features(data[ch], rate_hz) for ch in range(data.shape[0])])


@dataclass
class CommandModel:
    """One-vs-rest linear classifier plus its standardization statistics."""

    weights: np.ndarray  # (n_classes, dim)
    biases: np.ndarray  # (n_classes,)
    feature_mean: np.ndarray
    feature_std: np.ndarray
    n_props: int
    window: int
    rate_hz: float
    cutoff_hz: float | None
    classes: tuple[str, ...] = COMMANDS
    fold_accuracies: np.ndarray = field(default_factory=lambda: np.zeros(0))

    def standardize(self, features: np.ndarray) -> np.ndarray:
        std = np.where(self.feature_std > 0, self.feature_std, 1.0)
        return (features - self.feature_mean) / std


def _prepare_features(
    samples: list[CommandSample], rate_hz: float, cutoff_hz: float | None
) -> np.ndarray:
    rows = []
    for s in samples:
        data = s.speeds_sq
        if cutoff_hz is not None:
            data = np.stack([lowpass_filter(ch, cutoff_hz, rate_hz) for ch in data])
        rows.append(extract_features(data, rate_hz))
    return np.stack(rows)


def _fit_standardization(features: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
    return features.mean(axis=0), features.std(axis=0)


def _pegasos_ovr(
    features: np.ndarray,
    labels: np.ndarray,
    n_classes: int,
    lambda_reg: float,
    epochs: int,
    rng: np.random.Generator,
) -> tuple[np.ndarray, np.ndarray]:
    """Hinge-loss one-vs-rest by stochastic subgradient descent with a
    fixed seeded shuffle per epoch.

    The bias rides along as a regularized constant feature, the step
    schedule 1/(lambda*(t+n)) is warm-started to avoid the violent first
    steps, and the returned model averages the iterates of the second
    half of training (the last raw iterate is noisy enough to cost
    several accuracy points on fold evaluations).
    """
    n, dim = features.shape
    augmented = np.hstack([features, np.ones((n, 1))])
    weights = np.zeros((n_classes, dim + 1))
    weights_sum = np.zeros_like(weights)
    n_averaged = 0
    signs = np.full((n, n_classes), -1.0)
    signs[np.arange(n), labels] = 1.0
    t = 0
    for epoch in range(epochs):
        for i in rng.permutation(n):
            t += 1
            eta = 1.0 / (lambda_reg * (t + n))
            x = augmented[i]
            margins = signs[i] * (weights @ x)
            violated = margins < 1.0
            weights *= 1.0 - eta * lambda_reg
            if violated.any():
                weights[violated] += eta * signs[i, violated, None] * x
            if epoch >= epochs // 2:
                weights_sum += weights
                n_averaged += 1
    final = weights_sum / n_averaged if n_averaged else weights
    return final[:, :dim], final[:, dim].copy()


def stratified_folds(labels: np.ndarray, k: int, rng: np.random.Generator) -> list[np.ndarray]:
    """Disjoint folds covering all samples, stratified per class."""
    folds: list[list[int]] = [[] for _ in range(k)]
    for c in np.unique(labels):
        idx = np.flatnonzero(labels == c)
        idx = idx[rng.permutation(idx.size)]
        for pos, sample in enumerate(idx):
            folds[pos % k].append(int(sample))
    return [np.sort(np.array(f, dtype=np.int64)) for f in folds]


def train_command_model(
    samples: list[CommandSample],
    k_folds: int = 5,
    lambda_reg: float = 1e-3,
    epochs: int = 20,
    seed: int = 0,
    *,
    rate_hz: float = 1000.0,
    cutoff_hz: float | None = 50.0,
    classes: tuple[str, ...] = COMMANDS,
) -> tuple[CommandModel, np.ndarray]:
    """Fit the classifier and score it by stratified k-fold validation.

    Deterministic per seed. Raises DataError when an expected class is
    missing from the training set or has fewer than k samples. The
    expected class set defaults to all six commands; reduced synthetic
    problems may pass a subset.
    """
    if not samples:
        raise DataError("no training samples")
    labels_str = [s.label for s in samples]
    if any(lab is None for lab in labels_str):
        raise DataError("all training samples must be labelled")
    missing = [c for c in classes if c not in labels_str]
    if missing:
        raise DataError(f"classes missing from training data: {', '.join(missing)}")
    extra = sorted(set(labels_str) - set(classes))
    if extra:
        raise DataError(f"samples labelled outside the class set: {', '.join(extra)}")
    labels = np.array([classes.index(lab) for lab in labels_str])
    scarce = [classes[c] for c in range(len(classes)) if int((labels == c).sum()) < k_folds]
    if scarce:
        raise DataError(f"need at least {k_folds} samples per class, too few for: {', '.join(scarce)}")
    n_props, window = samples[0].speeds_sq.shape
    if any(s.speeds_sq.shape != (n_props, window) for s in samples):
        raise DataError("all samples must share the same channel count and window length")

    features_raw = _prepare_features(samples, rate_hz, cutoff_hz)
    rng = np.random.default_rng(seed)
    folds = stratified_folds(labels, k_folds, rng)
    accuracies = np.zeros(k_folds)
    for f, val_idx in enumerate(folds):
        train_idx = np.setdiff1d(np.arange(len(samples)), val_idx)
        mean, std = _fit_standardization(features_raw[train_idx])
        std_safe = np.where(std > 0, std, 1.0)
        x_train = (features_raw[train_idx] - mean) / std_safe
        x_val = (features_raw[val_idx] - mean) / std_safe
        w, b = _pegasos_ovr(x_train, labels[train_idx], len(classes), lambda_reg, epochs, np.random.default_rng(seed + 1 + f))
        pred = np.argmax(x_val @ w.T + b, axis=1)
        accuracies[f] = float((pred == labels[val_idx]).mean())

    mean, std = _fit_standardization(features_raw)
    std_safe = np.where(std > 0, std, 1.0)
    x_all = (features_raw - mean) / std_safe
    w, b = _pegasos_ovr(x_all, labels, len(classes), lambda_reg, epochs, np.random.default_rng(seed))
    model = CommandModel(
        weights=w,
        biases=b,
        feature_mean=mean,
        feature_std=std,
        n_props=n_props,
        window=window,
        rate_hz=rate_hz,
        cutoff_hz=cutoff_hz,
        classes=classes,
        fold_accuracies=accuracies,
    )
    return model, accuracies


def predict_command(model: CommandModel, sample: CommandSample | np.ndarray) -> tuple[str, dict[str, float]]:
    """Classify one window; ties break in fixed class order."""
    data = sample.speeds_sq if isinstance(sample, CommandSample) else np.asarray(sample, dtype=np.float64)
    if data.shape != (model.n_props, model.window):
        raise DataError(
            f"sample shape {data.shape} does not match the model's ({model.n_props}, {model.window})"
        )
    if model.cutoff_hz is not None:
        data = np.stack([lowpass_filter(ch, model.cutoff_hz, model.rate_hz) for ch in data])
    z = model.standardize(extract_features(data, model.rate_hz))
    scores = model.weights @ z + model.biases
    best = int(np.argmax(scores))  # first max wins: fixed class order
    return model.classes[best], {c: float(s) for c, s in zip(model.classes, scores)}


# --- Model file format (versioned plain text) ---

_MODEL_HEADER = "rotorsense-command-model v1"


def _fmt_vec(values: np.ndarray) -> str:
    return " ".join(repr(float(v)) for v in values)


def save_model(model: CommandModel, path: str) -> None:
    lines = [
        _MODEL_HEADER,
        f"n_props={model.n_props} window={model.window} rate_hz={float(model.rate_hz)!r} "
        f"cutoff_hz={'none' if model.cutoff_hz is None else repr(float(model.cutoff_hz))}",
        "classes=" + ",".join(model.classes),
        "feature_mean=" + _fmt_vec(model.feature_mean),
        "feature_std=" + _fmt_vec(model.feature_std),
    ]
    for c, name in enumerate(model.classes):
        lines.append(f"class {name} bias={float(model.biases[c])!r} weights={_fmt_vec(model.weights[c])}")
    lines.append("fold_accuracies=" + _fmt_vec(model.fold_accuracies))
    with open(path, "w", newline="\n") as fh:
        fh.write("\n".join(lines) + "\n")


def load_model(path: str) -> CommandModel:
    with open(path, "r") as fh:
        lines = [line.rstrip("\n") for line in fh]
    if not lines or lines[0] != _MODEL_HEADER:
        raise DataError(f"{path}: not a {_MODEL_HEADER!r} file")
    fields = dict(part.split("=", 1) for part in lines[1].split())
    classes = tuple(lines[2].split("=", 1)[1].split(","))
    mean = np.array([float(v) for v in lines[3].split("=", 1)[1].split()])
    std = np.array([float(v) for v in lines[4].split("=", 1)[1].split()])
    weights, biases = [], []
    folds = np.zeros(0)
    for line in lines[5:]:
        if line.startswith("class "):
            _, _name, rest = line.split(" ", 2)
            bias_part, weights_part = rest.split(" weights=", 1)
            biases.append(float(bias_part.split("=", 1)[1]))
            weights.append([float(v) for v in weights_part.split()])
        elif line.startswith("fold_accuracies="):
            body = line.split("=", 1)[1].strip()
            folds = np.array([float(v) for v in body.split()]) if body else np.zeros(0)
    cutoff_raw = fields["cutoff_hz"]
    return CommandModel(
        weights=np.array(weights),
        biases=np.array(biases),
        feature_mean=mean,
        feature_std=std,
        n_props=int(fields["n_props"]),
        window=int(fields["window"]),
        rate_hz=float(fields["rate_hz"]),
        cutoff_hz=None if cutoff_raw == "none" else float(cutoff_raw),
        classes=classes,
        fold_accuracies=folds,
    )


def resample_zero_order_hold(
    times_us: np.ndarray, values: np.ndarray, rate_hz: float, t_start_us: int, t_end_us: int
) -> np.ndarray:
    """Uniform resampling of an irregular trace by zero-order hold."""
    period_us = 1e6 / rate_hz
    grid = np.arange(t_start_us, t_end_us + period_us / 2, period_us)
    idx = np.searchsorted(times_us, grid, side="right") - 1
    idx = np.clip(idx, 0, len(values) - 1)
    return values[idx]
