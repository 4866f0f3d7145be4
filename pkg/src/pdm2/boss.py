"""Bag-of-SFA-Symbols (BOSS) classification and the split/trial protocol.

Each series is cut into sliding windows; every window becomes a short word
of quantized Fourier coefficients (symbolic Fourier approximation, with
per-coefficient equi-depth bins fitted on the training windows).  A series
is the histogram of its words after dropping consecutive repeats, and a
query takes the label of the nearest training histogram under the
asymmetric bag distance.
"""
import csv
import os
import warnings
from dataclasses import dataclass

import numpy as np

from . import kernels
from .errors import (DegenerateBinning, EmptyModel, FormatError, InsufficientData,
                     InvalidParameter, SeriesTooShort)
from .tof import DEFAULT_WINDOWS, OA, US
from .waveform import Waveform

SEGMENTS = ("oa", "us", "both")


@dataclass(frozen=True)
class SfaParams:
    window_len: int
    word_len: int = 8
    alphabet: int = 4
    normalize_windows: bool = True

    def __post_init__(self):
        if self.word_len < 2 or self.word_len % 2:
            raise InvalidParameter("word_len must be even and >= 2")
        if self.word_len > self.window_len:
            raise InvalidParameter("word_len must not exceed window_len")
        if not 2 <= self.alphabet <= 8:
            raise InvalidParameter("alphabet must lie in [2, 8]")
        # coefficients used must exist in a real DFT of the window
        if self.first_coef + self.n_coefs > self.window_len // 2 + 1:
            raise InvalidParameter("window_len too short for word_len coefficients")

    @property
    def n_coefs(self):
        return self.word_len // 2

    @property
    def first_coef(self):
        # the mean of a z-normalized window is zero, so skip the DC term
        return 1 if self.normalize_windows else 0

    @classmethod
    def default(cls, series_len):
        return cls(max(16, series_len // 8))


@dataclass(frozen=True, eq=False)
class BossHistogram:
    """Word codes (sorted) and their counts."""

    codes: np.ndarray
    counts: np.ndarray

    def __post_init__(self):
        c = np.asarray(self.codes, dtype=np.int64)
        n = np.asarray(self.counts, dtype=np.int64)
        if c.shape != n.shape or np.any(n < 1) or np.any(np.diff(c) <= 0):
            raise InvalidParameter("histogram needs sorted unique codes with counts >= 1")
        object.__setattr__(self, "codes", c)
        object.__setattr__(self, "counts", n)

    @classmethod
    def from_dict(cls, d):
        keys = sorted(d)
        return cls(np.array(keys, dtype=np.int64), np.array([d[k] for k in keys], dtype=np.int64))

    def as_dict(self):
        return dict(zip(self.codes.tolist(), self.counts.tolist()))

    def __len__(self):
        return self.codes.size

    def __eq__(self, other):
        return (isinstance(other, BossHistogram) and np.array_equal(self.codes, other.codes)
                and np.array_equal(self.counts, other.counts))


@dataclass(frozen=True, eq=False)
class BossModel:
    params: SfaParams
    binning: np.ndarray  # (word_len, alphabet - 1)
    labels: tuple
    bags: tuple

    def __post_init__(self):
        if not self.bags:
            raise EmptyModel("model has no training bags")
        b = np.asarray(self.binning, dtype=float)
        if b.shape != (self.params.word_len, self.params.alphabet - 1):
            raise InvalidParameter("binning shape does not match params")
        object.__setattr__(self, "binning", b)
        object.__setattr__(self, "labels", tuple(self.labels))
        object.__setattr__(self, "bags", tuple(self.bags))
        indptr = np.zeros(len(self.bags) + 1, dtype=np.int64)
        indptr[1:] = np.cumsum([len(h) for h in self.bags])
        codes = np.concatenate([h.codes for h in self.bags]) if indptr[-1] else np.zeros(0, np.int64)
        counts = np.concatenate([h.counts for h in self.bags]) if indptr[-1] else np.zeros(0, np.int64)
        object.__setattr__(self, "_packed", (indptr, codes, counts))


@dataclass(frozen=True, eq=False)
class ConfusionMatrix:
    """Counts accumulated over trials; rows are true labels, columns predictions."""

    labels: tuple
    counts: np.ndarray
    trial_count: int

    @property
    def accuracy(self):
        total = self.counts.sum()
        return float(np.trace(self.counts) / total) if total else float("nan")

    def normalized(self):
        rows = self.counts.sum(axis=1, keepdims=True)
        return self.counts / np.where(rows == 0, 1, rows)

    def to_csv(self, path):
        with open(path, "w", newline="") as fh:
            out = csv.writer(fh)
            out.writerow(["true\\pred", *self.labels])
            for lab, row in zip(self.labels, self.counts):
                out.writerow([lab, *row.tolist()])
            out.writerow(["mean_accuracy", f"{self.accuracy:.6f}", f"trials={self.trial_count}"])


def read_confusion_csv(path):
    with open(path, newline="") as fh:
        rows = list(csv.reader(fh))
    try:
        labels = tuple(rows[0][1:])
        counts = np.array([[int(x) for x in r[1:]] for r in rows[1:1 + len(labels)]])
        trials = int(rows[1 + len(labels)][2].split("=")[1])
    except (IndexError, ValueError) as exc:
        raise FormatError(f"{path}: malformed confusion matrix ({exc})") from exc
    return ConfusionMatrix(labels, counts, trials)


# -- SFA -------------------------------------------------------------------

def _series(w):
    return w.samples if isinstance(w, Waveform) else np.asarray(w, dtype=float)


def window_coefficients(w, p):
    """SFA features of all windows of one series, shape ``(n_windows, word_len)``."""
    x = _series(w)
    if x.size < p.window_len:
        raise SeriesTooShort(f"series of {x.size} samples is shorter than window {p.window_len}")
    return kernels.window_features(x, p.window_len, p.n_coefs, p.first_coef, p.normalize_windows)


def mcb_boundaries(features, alphabet):
    """Equi-depth boundaries per column (midpoints between order statistics).

    Falls back to equi-width bins over the column range, with a
    :class:`DegenerateBinning` warning, when equal values would collapse
    neighbouring boundaries.
    """
    f = np.sort(np.asarray(features, dtype=float), axis=0)
    n, m = f.shape
    out = np.empty((m, alphabet - 1))
    degenerate = False
    for j in range(m):
        col = f[:, j]
        idx = (np.arange(1, alphabet) * n) // alphabet
        b = 0.5 * (col[idx - 1] + col[idx])
        if np.any(np.diff(b) <= 0) or (alphabet == 2 and col[0] == col[-1]):
            degenerate = True
            lo, hi = col[0], col[-1]
            if not hi - lo > 1e-12 * max(1.0, abs(lo)):
                hi = lo + 1.0
            b = np.linspace(lo, hi, alphabet + 1)[1:-1]
        out[j] = b
    if degenerate:
        warnings.warn("equi-depth bins collapsed; using equi-width bins", DegenerateBinning,
                      stacklevel=2)
    return out


def sfa_fit(train, p):
    """Multiple coefficient binning over all windows of the training series."""
    feats = [window_coefficients(w, p) for w, _ in train]
    if not feats:
        raise EmptyModel("no training series")
    return mcb_boundaries(np.vstack(feats), p.alphabet)


def words(features, binning, alphabet):
    """Integer word code per window: symbol ``i`` is digit ``i`` in base ``alphabet``."""
    sym = np.empty(features.shape, dtype=np.int64)
    for j in range(features.shape[1]):
        sym[:, j] = np.searchsorted(binning[j], features[:, j], side="right")
    weights = alphabet ** np.arange(features.shape[1], dtype=np.int64)
    return sym @ weights


def histogram(codes):
    """Bag of words after numerosity reduction (consecutive repeats dropped)."""
    if codes.size == 0:
        return BossHistogram(np.zeros(0, np.int64), np.zeros(0, np.int64))
    keep = np.ones(codes.size, dtype=bool)
    keep[1:] = codes[1:] != codes[:-1]
    u, c = np.unique(codes[keep], return_counts=True)
    return BossHistogram(u, c)


def boss_transform(w, model):
    feats = window_coefficients(w, model.params)
    return histogram(words(feats, model.binning, model.params.alphabet))


def boss_distance(a, b):
    """Sum over words of ``a`` of ``(a[w] - b[w])**2``; not symmetric."""
    indptr = np.array([0, len(b)], dtype=np.int64)
    return int(kernels.bag_distances(a.codes, a.counts, indptr, b.codes, b.counts)[0])


def fit(train, p):
    train = list(train)
    if not train:
        raise EmptyModel("no training series")
    binning = sfa_fit(train, p)
    bags = [histogram(words(window_coefficients(w, p), binning, p.alphabet)) for w, _ in train]
    return BossModel(p, binning, [lab for _, lab in train], bags)


def _nearest(model, bag):
    indptr, codes, counts = model._packed
    d = kernels.bag_distances(bag.codes, bag.counts, indptr, codes, counts)
    return int(np.argmin(d))  # first minimum: earliest training bag wins ties


def classify(model, w):
    if not model.bags:
        raise EmptyModel("model has no training bags")
    return model.labels[_nearest(model, boss_transform(w, model))]


# -- protocol --------------------------------------------------------------

def stratified_split(labels, ratio, rng):
    """Per-class random split; each class keeps at least one test example."""
    labels = np.asarray(labels)
    train, test = [], []
    for lab in sorted(set(labels.tolist()), key=str):
        idx = np.flatnonzero(labels == lab)
        idx = idx[rng.permutation(idx.size)]
        k = min(max(1, int(round(ratio * idx.size))), idx.size - 1)
        train += idx[:k].tolist()
        test += idx[k:].tolist()
    return np.sort(train), np.sort(test)


def evaluate(dataset, p, trials=50, split_ratio=0.75, seed=0, splits=None):
    """Average confusion over random stratified splits.

    Window features do not depend on the split, so they are computed once per
    series; bins, bags and nearest neighbours are redone every trial.  Each
    trial draws its split from its own generator derived from ``seed``.
    ``splits`` (a list of ``(train_idx, test_idx)``) overrides the random draws.
    """
    dataset = list(dataset)
    labels = [lab for _, lab in dataset]
    classes = sorted(set(labels), key=str)
    if len(classes) < 2:
        raise InsufficientData("need at least two classes")
    for c in classes:
        if labels.count(c) < 4:
            raise InsufficientData(f"class {c!r} has fewer than 4 examples")
    feats = [window_coefficients(w, p) for w, _ in dataset]
    pos = {c: i for i, c in enumerate(classes)}
    counts = np.zeros((len(classes), len(classes)), dtype=np.int64)
    if splits is None:
        seeds = np.random.SeedSequence(seed).spawn(trials)
        splits = [stratified_split(labels, split_ratio, np.random.default_rng(s)) for s in seeds]
    for tr, te in splits:
        binning = mcb_boundaries(np.vstack([feats[i] for i in tr]), p.alphabet)
        bags = {i: histogram(words(feats[i], binning, p.alphabet)) for i in (*tr, *te)}
        model = BossModel(p, binning, [labels[i] for i in tr], [bags[i] for i in tr])
        for i in te:
            pred = model.labels[_nearest(model, bags[i])]
            counts[pos[labels[i]], pos[pred]] += 1
    return ConfusionMatrix(tuple(classes), counts, len(splits))


def select_segment(w, segment="both", windows=None):
    """Time-domain segment(s) fed to the classifier: OA window, US window or both."""
    windows = windows or DEFAULT_WINDOWS
    if segment not in SEGMENTS:
        raise InvalidParameter(f"segment must be one of {SEGMENTS}")
    parts = []
    if segment in ("oa", "both"):
        parts.append(w.segment(*windows[OA]).samples)
    if segment in ("us", "both"):
        parts.append(w.segment(*windows[US]).samples)
    return Waveform(np.concatenate(parts), w.sample_rate, 0.0)


def read_manifest(path):
    """``path,label`` rows (header optional); paths are relative to the manifest."""
    base = os.path.dirname(os.path.abspath(path))
    try:
        with open(path, newline="") as fh:
            rows = [r for r in csv.reader(fh) if r and not r[0].startswith("#")]
    except OSError as exc:
        raise FormatError(f"cannot read manifest {path}: {exc}") from exc
    if rows and [c.strip() for c in rows[0]] == ["path", "label"]:
        rows = rows[1:]
    out = []
    for r in rows:
        if len(r) != 2:
            raise FormatError(f"{path}: expected 'path,label' rows")
        p = r[0].strip()
        out.append((p if os.path.isabs(p) else os.path.join(base, p), r[1].strip()))
    return out
