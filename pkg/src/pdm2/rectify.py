"""Ranging rectification: a per-modality quadratic map from ToF to distance.

The coefficients come from weighted least squares over (ToF, true distance)
pairs, each weighted by the inverse of its measurement variance.
"""
import json
import warnings
from dataclasses import dataclass, field

import numpy as np

from .errors import DegenerateDesign, FormatError, InvalidParameter, OutOfCalibratedRange
from .tof import MODALITIES

DEFAULT_VARIANCE_MM2 = 1e-4


@dataclass(frozen=True)
class RangeSample:
    tof_s: float
    true_mm: float
    sigma: float = DEFAULT_VARIANCE_MM2  # variance, mm^2

    def __post_init__(self):
        if not self.sigma > 0:
            raise InvalidParameter("sample variance must be > 0")
        if not self.tof_s > 0:
            raise InvalidParameter("ToF must be > 0")


@dataclass(frozen=True)
class RangeModel:
    """``d = beta2 * t**2 + beta1 * t + beta0`` (t in s, d in mm)."""

    modality: str
    beta2: float
    beta1: float
    beta0: float
    valid_tof: tuple = (0.0, float("inf"))
    meta: dict = field(default_factory=dict, compare=False)

    def __post_init__(self):
        lo, hi = self.valid_tof
        if not lo < hi:
            raise InvalidParameter("valid_tof range is degenerate")
        if not all(np.isfinite([self.beta2, self.beta1, self.beta0])):
            raise InvalidParameter("coefficients must be finite")
        object.__setattr__(self, "valid_tof", (float(lo), float(hi)))

    def __call__(self, tof_s):
        t = np.asarray(tof_s, dtype=float)
        return self.beta2 * t * t + self.beta1 * t + self.beta0


@dataclass(frozen=True)
class Rectified:
    distance_mm: float
    in_range: bool


def fit_range_model(samples, modality):
    """Weighted least-squares quadratic fit.

    The design is column-scaled before a QR-backed solve, since raw ToFs
    (~1e-4 s) make ``[t**2, t, 1]`` badly conditioned.
    """
    if modality not in MODALITIES:
        raise InvalidParameter(f"unknown modality {modality!r}")
    samples = list(samples)
    t = np.array([s.tof_s for s in samples], dtype=float)
    d = np.array([s.true_mm for s in samples], dtype=float)
    var = np.array([s.sigma for s in samples], dtype=float)
    if t.size < 3 or np.unique(t).size < 3:
        raise DegenerateDesign("need at least 3 samples with 3 distinct ToFs")

    # centre and scale t so the columns are O(1)
    mid = 0.5 * (t.max() + t.min())
    half = 0.5 * (t.max() - t.min())
    u = (t - mid) / half
    sw = 1.0 / np.sqrt(var)
    a = np.column_stack([u * u, u, np.ones_like(u)]) * sw[:, None]
    b = d * sw
    coef_u, _, rank, sv = np.linalg.lstsq(a, b, rcond=None)
    if rank < 3 or sv[-1] <= 1e-12 * sv[0]:
        raise DegenerateDesign("design matrix is rank deficient")
    c2, c1, c0 = coef_u
    # expand c2*((t-mid)/half)^2 + c1*(t-mid)/half + c0 back into powers of t
    beta2 = c2 / half ** 2
    beta1 = c1 / half - 2.0 * c2 * mid / half ** 2
    beta0 = c0 - c1 * mid / half + c2 * mid ** 2 / half ** 2

    pred = c2 * u * u + c1 * u + c0
    res = pred - d
    meta = {
        "n_samples": int(t.size),
        "residual_max_mm": float(np.max(np.abs(res))),
        "residual_rms_mm": float(np.sqrt(np.mean(res ** 2))),
    }
    return RangeModel(modality, float(beta2), float(beta1), float(beta0),
                      (float(t.min()), float(t.max())), meta)


def rectify(model, tof_s, warn=True):
    """Rectified distance; ToFs outside the fitted range are extrapolated and flagged."""
    lo, hi = model.valid_tof
    inside = bool(lo <= tof_s <= hi)
    if not inside and warn:
        warnings.warn(f"ToF {tof_s:.4g} s outside calibrated range [{lo:.4g}, {hi:.4g}]",
                      OutOfCalibratedRange, stacklevel=2)
    return Rectified(float(model(tof_s)), inside)


def samples_from_repeats(tofs_per_station, true_mm, slope_mm_per_s=None,
                         default_variance=DEFAULT_VARIANCE_MM2):
    """Collapse repeated ToF readings per station into weighted samples.

    The variance of each sample is the sample variance of the repeated ToFs
    mapped into distance with ``slope_mm_per_s`` (a rough scale; estimated by
    an unweighted linear fit when omitted), floored at ``default_variance``.
    """
    means = np.array([np.mean(r) for r in tofs_per_station])
    true_mm = np.asarray(true_mm, dtype=float)
    if slope_mm_per_s is None:
        slope_mm_per_s = np.polyfit(means, true_mm, 1)[0]
    out = []
    for reps, t, d in zip(tofs_per_station, means, true_mm):
        reps = np.asarray(reps, dtype=float)
        var = np.var(reps, ddof=1) * slope_mm_per_s ** 2 if reps.size > 1 else 0.0
        out.append(RangeSample(float(t), float(d), float(max(var, default_variance))))
    return out


def model_to_dict(model):
    return {
        "modality": model.modality,
        "beta2": model.beta2,
        "beta1": model.beta1,
        "beta0": model.beta0,
        "valid_tof_s": list(model.valid_tof),
        "units": {"tof": "s", "distance": "mm"},
        "fit": dict(model.meta),
    }


def model_from_dict(doc):
    try:
        return RangeModel(doc["modality"], float(doc["beta2"]), float(doc["beta1"]),
                          float(doc["beta0"]), tuple(doc["valid_tof_s"]), dict(doc.get("fit", {})))
    except (KeyError, TypeError, ValueError) as exc:
        raise FormatError(f"malformed range model: {exc}") from exc


def write_model(model, path):
    with open(path, "w") as fh:
        json.dump(model_to_dict(model), fh, indent=2)
        fh.write("\n")


def read_model(path):
    try:
        with open(path) as fh:
            return model_from_dict(json.load(fh))
    except (OSError, json.JSONDecodeError) as exc:
        raise FormatError(f"cannot read range model {path}: {exc}") from exc
