"""Synthetic sensor bench.

Stands in for the physical rig: a declared ground-truth scene (beam
direction, turntable axis and centre, objects with material responses)
produces waveforms, calibration sessions and turntable scans whose truth is
known exactly.

Geometry conventions
--------------------
Stage readings ``S`` and depths ``d`` are in mm.  The beam leaves the stage
reading along ``v``; ``S + d v`` is the hit point.  The acoustic path from the
transducer to the beam origin adds a fixed standoff ``standoff_mm`` so that
arrival times for depths of 6 to 18 mm land inside the default ToF windows.
The ranging polynomial absorbs the standoff.

Objects live in the turntable (object) frame.  At turntable angle ``theta``
a world point is ``R(n, theta) (X_obj - X_R) + X_R``.
"""
import json
import zlib
from dataclasses import asdict, dataclass

import numpy as np

from .errors import FormatError, InvalidParameter, PlanInfeasible
from .geometry import Edge, rotation_matrix, unit
from .tof import OA, US
from .waveform import DEFAULT_SAMPLE_RATE, Waveform

TABLE_I_V = (0.0656, 0.9955, -0.0678)
TABLE_I_N = (-0.0007, 0.0022, 0.9999)
TABLE_I_XR = (235.21, 288.17, 0.0)

SOUND_SPEED = 343.0  # m/s, 20 C
BAND_FREQS = (80e3, 532e3, 728e3)
BURST_S = 12e-6
FOCUS_MM = 10.0
FWHM_US_MM = 0.75
FWHM_OA_MM = 0.392


def rng_for(seed, *keys):
    """Generator keyed by the scene seed and any hashable labels (order matters)."""
    words = [int(seed) & 0xFFFFFFFF]
    for k in keys:
        words.append(zlib.crc32(repr(k).encode("utf-8")))
    return np.random.default_rng(np.random.SeedSequence(words))


# -- materials and shapes --------------------------------------------------

@dataclass(frozen=True)
class MaterialSpec:
    oa_strength: float = 1.0
    us_reflectivity: float = 1.0
    band_weights: tuple = (0.4, 0.3, 0.3)
    # optional ringing mode (structure / thickness signature)
    ring_hz: float = 0.0
    ring_weight: float = 0.0
    ring_decay_s: float = 10e-6

    def __post_init__(self):
        w = np.asarray(self.band_weights, dtype=float)
        if w.shape != (3,) or np.any(w < 0) or w.sum() > 1 + 1e-12:
            raise InvalidParameter("band_weights: three nonnegative values summing to <= 1")
        for name in ("oa_strength", "us_reflectivity"):
            if not 0 <= getattr(self, name) <= 1:
                raise InvalidParameter(f"{name} must lie in [0, 1]")
        object.__setattr__(self, "band_weights", tuple(float(x) for x in w))


MATERIALS = {
    "aluminum": MaterialSpec(1.0, 1.0, (0.35, 0.35, 0.3)),
    "steel": MaterialSpec(0.8, 1.0, (0.3, 0.4, 0.3)),
    "graphite": MaterialSpec(1.0, 0.6, (0.5, 0.25, 0.25)),
    "glass": MaterialSpec(0.0, 1.0, (0.3, 0.4, 0.3)),
    "plastic": MaterialSpec(0.0, 0.8, (0.4, 0.3, 0.3)),
    "paper": MaterialSpec(0.0, 0.7, (0.5, 0.3, 0.2)),
    "apple": MaterialSpec(0.0, 0.6, (0.6, 0.2, 0.2)),
    "foam": MaterialSpec(0.9, 0.0, (0.6, 0.2, 0.2)),
}


def _ray_box(o, u, center, half, yaw):
    c, s = np.cos(-yaw), np.sin(-yaw)
    rz = np.array([[c, -s, 0.0], [s, c, 0.0], [0.0, 0.0, 1.0]])
    o2 = rz @ (o - center)
    u2 = rz @ u
    t_near, t_far, face = -np.inf, np.inf, None
    for ax in range(3):
        if abs(u2[ax]) < 1e-15:
            if abs(o2[ax]) > half[ax]:
                return None
            continue
        t1 = (-half[ax] - o2[ax]) / u2[ax]
        t2 = (half[ax] - o2[ax]) / u2[ax]
        lo, hi = min(t1, t2), max(t1, t2)
        if lo > t_near:
            t_near = lo
            face = (ax, -1 if t1 < t2 else 1)
        t_far = min(t_far, hi)
    if t_near > t_far or t_near <= 0:
        return None
    return t_near, face


@dataclass(frozen=True)
class Block:
    extents: tuple
    center: tuple = (0.0, 0.0, 0.0)
    yaw: float = 0.0
    kind: str = "BLOCK"

    def __post_init__(self):
        if min(self.extents) <= 0:
            raise InvalidParameter("block extents must be positive")

    def intersect(self, o, u):
        hit = _ray_box(o, u, np.asarray(self.center, float), 0.5 * np.asarray(self.extents, float),
                       self.yaw)
        return None if hit is None else (hit[0], f"{'xyz'[hit[1][0]]}{'+' if hit[1][1] > 0 else '-'}")

    def bounds(self):
        c, s_ = abs(np.cos(self.yaw)), abs(np.sin(self.yaw))
        ex, ey, ez = 0.5 * np.asarray(self.extents, float)
        half = np.array([c * ex + s_ * ey, s_ * ex + c * ey, ez])
        return np.asarray(self.center, float) - half, np.asarray(self.center, float) + half

    def face_plane(self, face):
        """Outward unit normal and offset (``normal . X = offset``) of a face."""
        ax = "xyz".index(face[0])
        sgn = 1.0 if face[1] == "+" else -1.0
        local = np.zeros(3)
        local[ax] = sgn
        c, s = np.cos(self.yaw), np.sin(self.yaw)
        rz = np.array([[c, -s, 0.0], [s, c, 0.0], [0.0, 0.0, 1.0]])
        nrm = rz @ local
        off = nrm @ np.asarray(self.center, float) + 0.5 * self.extents[ax]
        return nrm, float(off)


@dataclass(frozen=True)
class Cylinder:
    radius: float
    height: float
    base: tuple = (0.0, 0.0, 0.0)
    kind: str = "CYLINDER"

    def __post_init__(self):
        if self.radius <= 0 or self.height <= 0:
            raise InvalidParameter("cylinder radius and height must be positive")

    def bounds(self):
        b = np.asarray(self.base, float)
        r = np.array([self.radius, self.radius, 0.0])
        return b - r, b + r + np.array([0.0, 0.0, self.height])

    def intersect(self, o, u):
        b = np.asarray(self.base, float)
        w = o - b
        hits = []
        a = u[0] ** 2 + u[1] ** 2
        if a > 1e-15:
            bb = 2 * (w[0] * u[0] + w[1] * u[1])
            cc = w[0] ** 2 + w[1] ** 2 - self.radius ** 2
            disc = bb * bb - 4 * a * cc
            if disc >= 0:
                for t in ((-bb - np.sqrt(disc)) / (2 * a), (-bb + np.sqrt(disc)) / (2 * a)):
                    z = w[2] + t * u[2]
                    if t > 0 and 0 <= z <= self.height:
                        hits.append((t, "side"))
        if abs(u[2]) > 1e-15:
            for zc, name in ((0.0, "bottom"), (self.height, "top")):
                t = (zc - w[2]) / u[2]
                p = w + t * u
                if t > 0 and p[0] ** 2 + p[1] ** 2 <= self.radius ** 2:
                    hits.append((t, name))
        return min(hits) if hits else None


@dataclass(frozen=True)
class Filament:
    radius: float
    p0: tuple
    p1: tuple
    kind: str = "FILAMENT"

    def __post_init__(self):
        if self.radius <= 0 or np.allclose(self.p0, self.p1):
            raise InvalidParameter("filament needs a positive radius and distinct endpoints")

    @property
    def axis(self):
        return unit(np.subtract(self.p1, self.p0))

    def bounds(self):
        p = np.array([self.p0, self.p1], float)
        return p.min(axis=0) - self.radius, p.max(axis=0) + self.radius

    def intersect(self, o, u):
        q = self.axis
        p0 = np.asarray(self.p0, float)
        length = np.linalg.norm(np.subtract(self.p1, self.p0))
        w = o - p0
        a_v = u - (u @ q) * q
        b_v = w - (w @ q) * q
        a = a_v @ a_v
        if a < 1e-15:
            return None
        bb = 2 * a_v @ b_v
        cc = b_v @ b_v - self.radius ** 2
        disc = bb * bb - 4 * a * cc
        if disc < 0:
            return None
        t = (-bb - np.sqrt(disc)) / (2 * a)
        s = (w + t * u) @ q
        if t <= 0 or not 0 <= s <= length:
            return None
        return t, "side"


SHAPES = {"BLOCK": Block, "CYLINDER": Cylinder, "FILAMENT": Filament}


@dataclass(frozen=True)
class SceneObject:
    shape: object
    material: MaterialSpec = MaterialSpec()
    name: str = ""


@dataclass(frozen=True)
class NoiseSpec:
    """Noise levels: waveform samples (a.u.), stage (mm), depth (mm), angle (rad).

    ``sigma_d_us`` overrides the depth noise for ultrasound stations; None
    means ``sigma_d``.
    """

    sigma_sample: float = 0.0
    sigma_S: float = 0.0
    sigma_d: float = 0.0
    sigma_theta: float = 0.0
    sigma_d_us: float = None

    def __post_init__(self):
        for k, x in asdict(self).items():
            if x is not None and x < 0:
                raise InvalidParameter(f"{k} must be >= 0")

    def depth_sigma(self, modality):
        if modality == US and self.sigma_d_us is not None:
            return self.sigma_d_us
        return self.sigma_d


@dataclass(frozen=True)
class Scene:
    v_true: tuple = TABLE_I_V
    n_true: tuple = TABLE_I_N
    XR_true: tuple = TABLE_I_XR
    sound_speed: float = SOUND_SPEED
    objects: tuple = ()
    noise: NoiseSpec = NoiseSpec()
    seed: int = 0
    standoff_mm: float = 16.0
    oa_echo_ratio: float = 0.4
    sample_rate: float = DEFAULT_SAMPLE_RATE
    record_s: float = 320e-6
    nonlinearity_mm: float = 0.0
    focus_mm: float = FOCUS_MM

    def __post_init__(self):
        if not self.sound_speed > 0:
            raise InvalidParameter("sound_speed must be > 0")
        for name in ("v_true", "n_true"):
            x = np.asarray(getattr(self, name), float)
            # renormalizing an already unit vector can flip the last bit
            if abs(np.linalg.norm(x) - 1.0) > 1e-12:
                x = unit(x)
            object.__setattr__(self, name, tuple(float(c) for c in x))
        object.__setattr__(self, "objects", tuple(self.objects))
        # conservative: axis-aligned boxes may not overlap (touching is fine)
        boxes = [o.shape.bounds() for o in self.objects]
        for i in range(len(boxes)):
            for j in range(i):
                lo = np.maximum(boxes[i][0], boxes[j][0])
                hi = np.minimum(boxes[i][1], boxes[j][1])
                if np.all(hi - lo > 1e-9):
                    raise InvalidParameter(f"scene objects {j} and {i} overlap")

    @property
    def v(self):
        return np.array(self.v_true)

    @property
    def n(self):
        return np.array(self.n_true)

    @property
    def XR(self):
        """Turntable centre, gauge-fixed to the axis crossing of ``z = 0``."""
        x = np.asarray(self.XR_true, float)
        n = self.n
        return x - (x[2] / n[2]) * n

    def with_(self, **kw):
        d = {f: getattr(self, f) for f in self.__dataclass_fields__}
        d.update(kw)
        return Scene(**d)


# -- scene documents -------------------------------------------------------

def _shape_to_dict(s):
    d = asdict(s)
    return {k: (list(v) if isinstance(v, tuple) else v) for k, v in d.items()}


def scene_to_dict(scene):
    return {
        "format": "pdm2-scene",
        "v_true": list(scene.v_true),
        "n_true": list(scene.n_true),
        "XR_true": list(scene.XR_true),
        "sound_speed": scene.sound_speed,
        "standoff_mm": scene.standoff_mm,
        "oa_echo_ratio": scene.oa_echo_ratio,
        "sample_rate": scene.sample_rate,
        "record_s": scene.record_s,
        "nonlinearity_mm": scene.nonlinearity_mm,
        "focus_mm": scene.focus_mm,
        "seed": scene.seed,
        "noise": asdict(scene.noise),
        "objects": [{"name": o.name, "shape": _shape_to_dict(o.shape),
                     "material": asdict(o.material)} for o in scene.objects],
    }


def scene_from_dict(doc):
    try:
        objs = []
        for o in doc.get("objects", []):
            sh = dict(o["shape"])
            cls = SHAPES[sh.pop("kind")]
            sh = {k: (tuple(v) if isinstance(v, list) else v) for k, v in sh.items()}
            mat = o.get("material", {})
            if isinstance(mat, str):
                mat = MATERIALS[mat]
            else:
                mat = MaterialSpec(**{k: (tuple(v) if isinstance(v, list) else v) for k, v in mat.items()})
            objs.append(SceneObject(cls(**sh), mat, o.get("name", "")))
        keys = ("v_true", "n_true", "XR_true", "sound_speed", "standoff_mm", "oa_echo_ratio",
                "sample_rate", "record_s", "nonlinearity_mm", "focus_mm", "seed")
        kw = {k: (tuple(doc[k]) if isinstance(doc[k], list) else doc[k]) for k in keys if k in doc}
        return Scene(objects=tuple(objs), noise=NoiseSpec(**doc.get("noise", {})), **kw)
    except (KeyError, TypeError, ValueError) as exc:
        raise FormatError(f"malformed scene: {exc}") from exc


def load_scene(path):
    try:
        with open(path) as fh:
            return scene_from_dict(json.load(fh))
    except (OSError, json.JSONDecodeError) as exc:
        raise FormatError(f"cannot read scene {path}: {exc}") from exc


def save_scene(scene, path):
    with open(path, "w") as fh:
        json.dump(scene_to_dict(scene), fh, indent=2)
        fh.write("\n")


# -- frames and ray casting ------------------------------------------------

def to_world(scene, theta, x_obj):
    R = rotation_matrix(scene.n, theta)
    xr = scene.XR
    return (R @ (np.asarray(x_obj, float) - xr).T).T + xr


def to_object(scene, theta, x_world):
    return to_world(scene, -theta, x_world)


def raycast(scene, S, theta=0.0):
    """Nearest object hit along the beam: ``(depth_mm, object, face)`` or None."""
    R = rotation_matrix(scene.n, -theta)
    o = to_object(scene, theta, S)
    u = R @ scene.v
    best = None
    for obj in scene.objects:
        hit = obj.shape.intersect(o, u)
        if hit is not None and (best is None or hit[0] < best[0]):
            best = (float(hit[0]), obj, hit[1])
    return best


# -- waveforms -------------------------------------------------------------

def nonlinearity(scene, d):
    """Smooth range deviation (mm) injected into the acoustic path."""
    return scene.nonlinearity_mm * np.sin(np.pi * (np.asarray(d, float) - 6.0) / 12.0)


def arrival_times(scene, d):
    """True arrival instants (s) of the OA echo, US echo and OA second echo."""
    path = (d + scene.standoff_mm + nonlinearity(scene, d)) * 1e-3
    t = path / scene.sound_speed
    return {OA: t, US: 2 * t, "OA2": 3 * t}


def true_tof(scene, d):
    """One-way ToF (s) the estimator should return for either modality."""
    return arrival_times(scene, d)[OA]


def focus_gain(scene, d):
    """Amplitude falloff away from the focal depth."""
    return 1.0 / np.sqrt(1.0 + ((d - scene.focus_mm) / 3.0) ** 2)


def burst(t, t_arrival, material, amplitude=1.0):
    """Hann-gated multi-tone burst centred on ``t_arrival``."""
    x = t - t_arrival
    inside = np.abs(x) <= BURST_S / 2
    gate = np.where(inside, 0.5 * (1 + np.cos(2 * np.pi * x / BURST_S)), 0.0)
    tone = sum(w * np.cos(2 * np.pi * f * x) for w, f in zip(material.band_weights, BAND_FREQS))
    if material.ring_weight > 0:
        # ringing mode starts with the burst and decays
        ring = np.where(x >= -BURST_S / 2,
                        material.ring_weight * np.sin(2 * np.pi * material.ring_hz * (x + BURST_S / 2))
                        * np.exp(-np.maximum(x + BURST_S / 2, 0) / material.ring_decay_s), 0.0)
        return amplitude * (gate * tone + ring)
    return amplitude * gate * tone


def synth_echoes(scene, d, material, rng=None, snr_db=None, t0=0.0):
    """Waveform for a target at depth ``d`` mm with the given material.

    Noise is ``scene.noise.sigma_sample`` unless ``snr_db`` is given, in which
    case the noise std is the in-focus peak amplitude over ``10**(snr_db/20)``.
    """
    fs = scene.sample_rate
    n = int(round(scene.record_s * fs))
    t = t0 + np.arange(n) / fs
    x = np.zeros(n)
    if d is not None:
        g = focus_gain(scene, d)
        ta = arrival_times(scene, d)
        if material.oa_strength > 0:
            x += burst(t, ta[OA], material, material.oa_strength * g)
            x += burst(t, ta["OA2"], material, scene.oa_echo_ratio * material.oa_strength * g)
        if material.us_reflectivity > 0:
            x += burst(t, ta[US], material, material.us_reflectivity * g)
    sigma = scene.noise.sigma_sample
    if snr_db is not None:
        sigma = max(material.band_weights) / 10 ** (snr_db / 20)
    if sigma > 0:
        if rng is None:
            raise InvalidParameter("noisy synthesis needs a generator")
        x = x + rng.normal(0.0, sigma, n)
    return Waveform(x, fs, t0)


def synth_waveform(scene, sensor_pos, theta=0.0):
    """Waveform seen from stage position ``sensor_pos`` (noise-only when nothing is hit)."""
    S = np.asarray(sensor_pos, float)
    hit = raycast(scene, S, theta)
    rng = rng_for(scene.seed, "wave", tuple(np.round(S, 9)), round(float(theta), 12))
    if hit is None:
        return synth_echoes(scene, None, MaterialSpec(), rng)
    return synth_echoes(scene, hit[0], hit[1].material, rng)


def ranging_stations(scene, distances, material=MATERIALS["aluminum"], repeats=1, snr_db=20.0,
                     key="ranging"):
    """Noisy waveforms at known depths: list of dicts (d_mm, tof_s, waves)."""
    out = []
    for i, d in enumerate(distances):
        rng = rng_for(scene.seed, key, i)
        waves = [synth_echoes(scene, d, material, rng, snr_db) for _ in range(repeats)]
        out.append({"d_mm": float(d), "tof_s": float(true_tof(scene, d)), "waves": waves})
    return out


def reference_record(scene, d=None, material=MATERIALS["aluminum"]):
    """Noise-free record at the focal depth, for cutting reference patterns."""
    d = scene.focus_mm if d is None else d
    return synth_echoes(scene.with_(noise=NoiseSpec()), d, material), arrival_times(scene, d)


# -- calibration sessions --------------------------------------------------

@dataclass(frozen=True)
class CalibrationPlan:
    """Frame layout for a calibration session.

    The filament is given in the object frame by a foot point and direction;
    its top end is the tip.  Edge frames scan ``edge_heights`` (mm above the
    foot, along the filament) with X-direction line rasters.
    """

    tip_depths: tuple = (8.0, 10.0, 12.0, 14.0)
    tip_raws: tuple = (18, 18, 17, 17)
    tip_step: float = 0.08
    frame_angles: tuple = (0.0, np.pi)
    edge_heights: tuple = (1.0, 2.0, 3.0, 4.0, 5.0, 6.0, 7.0)
    edge_raws: tuple = (7, 6, 6, 6, 6, 6, 7, 7, 6, 6, 6, 6, 6, 7)
    edge_step: float = 0.08
    edge_depth: float = 10.0
    filament_foot: tuple = (2.0, 1.5, 2.0)  # relative to X_R
    filament_dir: tuple = (0.03, -0.02, 1.0)
    filament_length: float = 10.0
    filament_radius: float = 0.25
    # raster origin offset from the true contact, as a fraction of the step
    # (uniform in [-jitter/2, jitter/2] per centre); 0 gives symmetric rasters
    raster_jitter: float = 0.0

    def __post_init__(self):
        if len(self.tip_raws) != len(self.tip_depths):
            raise InvalidParameter("tip_raws must match tip_depths")
        if len(self.edge_raws) != len(self.frame_angles) * len(self.edge_heights):
            raise InvalidParameter("edge_raws needs one count per frame and height")
        if len(self.frame_angles) < 2:
            raise InvalidParameter("need at least two edge frames")

    @property
    def n_raws(self):
        return sum(self.tip_raws) + sum(self.edge_raws)


PAPER_PLAN = CalibrationPlan()


def _symmetric_offsets_2d(k, step):
    """``k`` grid offsets closest to the origin, point-symmetric as a set."""
    r = int(np.ceil(np.sqrt(k))) + 1
    g = [(i, j) for i in range(-r, r + 1) for j in range(-r, r + 1) if (i, j) > (0, 0)]
    g.sort(key=lambda p: (p[0] ** 2 + p[1] ** 2, np.arctan2(p[1], p[0])))
    out = [(0, 0)] if k % 2 else []
    for p in g[:k // 2]:
        out += [p, (-p[0], -p[1])]
    return np.array(out, float) * step


def _symmetric_offsets_1d(k, step):
    return (np.arange(k) - (k - 1) / 2.0) * step


def _beam_amp(r, d, fwhm0, radius=0.0, focus=FOCUS_MM):
    # linear widening away from the focus
    fwhm = fwhm0 * (1.0 + 0.15 * abs(d - focus))
    fwhm = np.hypot(fwhm, 2 * radius)
    return np.exp(-4 * np.log(2) * (r / fwhm) ** 2)


def beam_amplitude(scene, r, d, modality=OA, radius=0.0):
    """Lateral beam profile: relative amplitude at ``r`` mm off-axis and depth ``d``."""
    fwhm0 = FWHM_OA_MM if modality == OA else FWHM_US_MM
    return _beam_amp(r, d, fwhm0, radius, scene.focus_mm)


def _closest_on_line(S, v, p, q):
    """Beam parameter and line-to-line distance for beam ``S + t v`` and line ``p + s q``."""
    w = S - p
    b = v @ q
    den = 1.0 - b * b
    t = (b * (w @ q) - (w @ v)) / den
    s = ((w @ q) - b * (w @ v)) / den
    dist = np.linalg.norm(S + t * v - (p + s * q))
    return t, dist


def _noisy_raw(rng, noise, S, d, amp):
    return {"S": S + rng.normal(0.0, noise.sigma_S, 3) if noise.sigma_S > 0 else S.copy(),
            "d": d + (rng.normal(0.0, noise.sigma_d) if noise.sigma_d > 0 else 0.0),
            "amp": max(amp + (rng.normal(0.0, noise.sigma_sample) if noise.sigma_sample > 0 else 0.0),
                       0.0)}


def filament_geometry(scene, plan):
    xr = scene.XR
    foot = xr + np.asarray(plan.filament_foot, float)
    q = unit(plan.filament_dir)
    return foot, q, foot + plan.filament_length * q


def synth_calibration_session(scene, plan=PAPER_PLAN, path=None, truth_path=None):
    """Raw tip and edge scans plus rotation readings for a filament rig.

    Rasters are point-symmetric about the true beam/target contact so centre
    extraction is unbiased without noise.  Depths are measured to the filament
    axis; the filament radius only widens the amplitude profile.

    Returns ``(header, raws, angles, truth)``; writes the session and the
    sidecar truth file when paths are given.
    """
    v = scene.v
    noise = scene.noise
    foot, q, tip = filament_geometry(scene, plan)
    raws = []
    frame = 0
    for ci, (dc, k) in enumerate(zip(plan.tip_depths, plan.tip_raws)):
        rng = rng_for(scene.seed, "tip", ci)
        S0 = tip - dc * v
        if plan.raster_jitter > 0:
            j = rng_for(scene.seed, "tip-jitter", ci).uniform(-0.5, 0.5, 2) * plan.raster_jitter
            S0 = S0 + plan.tip_step * np.array([j[0], 0.0, j[1]])
        for off in _symmetric_offsets_2d(k, plan.tip_step):
            S = S0 + np.array([off[0], 0.0, off[1]])
            d = float((tip - S) @ v)
            r = np.linalg.norm(tip - (S + d * v))
            amp = beam_amplitude(scene, r, d)
            rec = _noisy_raw(rng, noise, S, d, amp)
            raws.append({"frame": frame, "kind": "TIP", "center": 0, "turntable_angle": 0.0, **rec})
        frame += 1
    edge_frames = []
    counts = iter(plan.edge_raws)
    for fi, theta in enumerate(plan.frame_angles):
        fid = frame
        frame += 1
        edge_frames.append((fid, theta))
        R = rotation_matrix(scene.n, theta)
        p_w = R @ (foot - scene.XR) + scene.XR
        q_w = R @ q
        for hi, h in enumerate(plan.edge_heights):
            rng = rng_for(scene.seed, "edge", fi, hi)
            target = p_w + h * q_w
            S_c = target - plan.edge_depth * v
            # X raster: beam-to-axis distance is |a + b u|; centre the raster on its zero
            t_a, _ = _closest_on_line(S_c, v, p_w, q_w)
            ex = np.array([1.0, 0.0, 0.0])
            nrm = np.cross(q_w, v)
            nrm /= np.linalg.norm(nrm)
            b = ex @ nrm
            if abs(b) < 1e-6:
                raise PlanInfeasible("X raster is parallel to the filament")
            u0 = -((S_c - p_w) @ nrm) / b
            if plan.raster_jitter > 0:
                u0 += plan.edge_step * plan.raster_jitter * rng_for(
                    scene.seed, "edge-jitter", fi, hi).uniform(-0.5, 0.5)
            for u in u0 + _symmetric_offsets_1d(next(counts), plan.edge_step):
                S = S_c + u * ex
                d, dist = _closest_on_line(S, v, p_w, q_w)
                if d <= 0:
                    raise PlanInfeasible("filament behind the sensor")
                amp = beam_amplitude(scene, dist, d, radius=plan.filament_radius)
                rec = _noisy_raw(rng, noise, S, float(d), amp)
                raws.append({"frame": fid, "kind": "EDGE", "center": hi,
                             "turntable_angle": float(theta), **rec})
    for fid in {r["frame"] for r in raws}:
        peak = max(r["amp"] for r in raws if r["frame"] == fid)
        if peak < 0.5:
            raise PlanInfeasible(f"raster of frame {fid} misses the filament")
    angles = []
    (f0, th0) = edge_frames[0]
    for fid, th in edge_frames[1:]:
        rng = rng_for(scene.seed, "angle", fid)
        meas = th - th0 + (rng.normal(0.0, noise.sigma_theta) if noise.sigma_theta > 0 else 0.0)
        ang = {"frame_i": f0, "frame_k": fid, "theta": float(meas)}
        if noise.sigma_theta > 0:
            ang["sigma_theta"] = float(noise.sigma_theta ** 2)
        angles.append(ang)
    floor = max(1e-4, noise.sigma_S ** 2, noise.sigma_d ** 2)
    header = {"floor_S_mm2": floor, "floor_d_mm2": floor}
    truth = {"format": "pdm2-truth", "v": list(v), "n": list(scene.n), "X_R_mm": list(scene.XR),
             "filament_foot": list(foot), "filament_dir": list(q), "tip": list(tip),
             "n_raws": len(raws), "seed": scene.seed}
    if path is not None:
        from .calibration import write_session
        write_session(path, raws, angles, header)
    if truth_path is not None:
        with open(truth_path, "w") as fh:
            json.dump(truth, fh, indent=2)
            fh.write("\n")
    return header, raws, angles, truth


# -- object scans ----------------------------------------------------------

@dataclass(frozen=True)
class Station:
    S: np.ndarray
    theta: float
    pass_id: int = 0


def block_scan_path(scene, block, angles=(0.0, np.pi / 2, np.pi, 3 * np.pi / 2), per_face=15,
                    height=None, depth=10.0, margin=0.15):
    """Stations sweeping X across the face that each turntable angle shows the sensor."""
    v = scene.v
    stations = []
    hz = block.center[2] if height is None else height
    for pi, th in enumerate(angles):
        # face whose outward normal points most against the beam
        best = None
        for face in ("x+", "x-", "y+", "y-"):
            nrm, off = block.face_plane(face)
            nw = rotation_matrix(scene.n, th) @ nrm
            if best is None or nw @ v < best[1]:
                best = (face, nw @ v, nrm, off)
        face, _, nrm, off = best
        ax = "xyz".index(face[0])
        other = 1 - ax
        half = 0.5 * block.extents[other] * (1 - 2 * margin)
        c_obj = np.asarray(block.center, float).copy()
        c_obj[ax] += (0.5 if face[1] == "+" else -0.5) * block.extents[ax]
        c_obj[2] = hz
        ex = np.zeros(3)
        ex[other] = 1.0
        for u in np.linspace(-half, half, per_face):
            X_obj = c_obj + u * ex
            X_w = to_world(scene, th, X_obj)
            stations.append(Station(X_w - depth * v, float(th), pi))
    return stations


def _pass_truth_edges(scene, stations, faces):
    """Truth line per pass: face plane meets the plane of the sweep and the beam."""
    out = {}
    v = scene.v
    for pid in sorted({s.pass_id for s in stations}):
        st = [s for s in stations if s.pass_id == pid]
        if pid not in faces or len(st) < 2:
            continue
        obj, face = faces[pid]
        th = st[0].theta
        R = rotation_matrix(scene.n, -th)
        S_obj = to_object(scene, th, np.array([s.S for s in st]))
        sweep = unit(S_obj[-1] - S_obj[0])
        v_obj = R @ v
        pn = unit(np.cross(sweep, v_obj))
        nrm, off = obj.shape.face_plane(face)
        qd = unit(np.cross(nrm, pn))
        # a point on both planes
        A = np.vstack([nrm, pn, qd])
        b = np.array([off, pn @ S_obj[0], 0.0])
        p = np.linalg.solve(A, b)
        out[pid] = Edge.through(p, qd)
    return out


def synth_object_scan(scene, stations, path=None, truth_path=None, waveform_dir=None):
    """Turntable scan: per station the true depths per modality with noise.

    Stage readings and turntable angles get ``sigma_S`` / ``sigma_theta``
    noise; depths get ``sigma_d`` (OA) and ``sigma_d_us`` (US).  With
    ``waveform_dir`` a waveform is also written per station.
    """
    noise = scene.noise
    recs, truth_pts, faces = [], [], {}
    for i, st in enumerate(stations):
        rng = rng_for(scene.seed, "scan", i)
        hit = raycast(scene, st.S, st.theta)
        rec = {"id": i, "pass": int(st.pass_id)}
        S_meas = st.S + (rng.normal(0.0, noise.sigma_S, 3) if noise.sigma_S > 0 else 0.0)
        th_meas = st.theta + (rng.normal(0.0, noise.sigma_theta) if noise.sigma_theta > 0 else 0.0)
        rec["S"] = [float(x) for x in S_meas]
        rec["theta"] = float(th_meas)
        d_true = None
        for mod, strength in ((OA, "oa_strength"), (US, "us_reflectivity")):
            key = "d_oa" if mod == OA else "d_us"
            if hit is None or getattr(hit[1].material, strength) <= 0:
                rec[key] = None
                continue
            d_true = hit[0]
            sig = noise.depth_sigma(mod)
            rec[key] = float(d_true + (rng.normal(0.0, sig) if sig > 0 else 0.0))
        if hit is not None:
            faces.setdefault(st.pass_id, (hit[1], hit[2]))
            X_w = st.S + hit[0] * scene.v
            truth_pts.append({"id": i, "d": hit[0], "X_obj": list(to_object(scene, st.theta, X_w)),
                              "object": hit[1].name, "face": hit[2]})
        if waveform_dir is not None:
            from .waveform import write_waveform_bin
            fn = f"station_{i:04d}.bin"
            write_waveform_bin(synth_waveform(scene, st.S, st.theta), f"{waveform_dir}/{fn}")
            rec["wave"] = fn
        recs.append(rec)
    edges = {}
    try:
        block_faces = {k: v for k, v in faces.items() if isinstance(v[0].shape, Block)}
        edges = _pass_truth_edges(scene, stations, block_faces)
    except np.linalg.LinAlgError:
        edges = {}
    truth = {"format": "pdm2-scan-truth", "points": truth_pts,
             "edges": {str(k): {"q": list(e.q), "m": list(e.m)} for k, e in edges.items()},
             "calibration": {"v": list(scene.v), "n": list(scene.n), "X_R_mm": list(scene.XR)}}
    if path is not None:
        from .reconstruct import write_scan_session
        write_scan_session(path, recs)
    if truth_path is not None:
        with open(truth_path, "w") as fh:
            json.dump(truth, fh, indent=2)
            fh.write("\n")
    return recs, truth


def block_scene(seed=0, noise=NoiseSpec(), material="aluminum", **kw):
    """Aluminium block on the turntable near its axis (validation object)."""
    blk = Block((30.0, 20.0, 15.0), center=tuple(np.add(TABLE_I_XR, (0.0, 0.0, 7.5))), yaw=0.0)
    return Scene(objects=(SceneObject(blk, MATERIALS[material], "block"),), noise=noise, seed=seed,
                 **kw)


def bottle_scene(material="steel", seed=0, noise=NoiseSpec(), **kw):
    cyl = Cylinder(30.0, 120.0, base=TABLE_I_XR)
    return Scene(objects=(SceneObject(cyl, MATERIALS[material], f"{material}-bottle"),), noise=noise,
                 seed=seed, **kw)


def cylinder_scan_path(scene, radius, angles, height, depth=10.0):
    """One station per turntable angle facing the cylinder axis."""
    v = scene.v
    c = np.asarray(TABLE_I_XR, float)
    out = []
    for i, th in enumerate(angles):
        X_w = c + np.array([0.0, 0.0, height]) - radius * v
        out.append(Station(X_w - depth * v, float(th), i))
    return out


# -- classification corpora ------------------------------------------------

DAILY_CLASSES = {
    # bands: (80 kHz, 532 kHz, 728 kHz) weights, ringing mode per material
    "acrylic": MaterialSpec(0.9, 0.9, (0.6, 0.25, 0.15), 260e3, 0.35, 15e-6),
    "aluminum": MaterialSpec(1.0, 1.0, (0.2, 0.5, 0.3), 610e3, 0.30, 25e-6),
    "paper": MaterialSpec(0.9, 0.7, (0.5, 0.1, 0.4), 180e3, 0.30, 8e-6),
    "rubber": MaterialSpec(1.0, 0.5, (0.8, 0.1, 0.1), 120e3, 0.25, 6e-6),
    "steel": MaterialSpec(0.8, 1.0, (0.1, 0.3, 0.6), 880e3, 0.30, 30e-6),
}

OACT_CLASSES = {
    # optically transparent: no OA response
    "glass": MaterialSpec(0.0, 1.0, (0.2, 0.6, 0.2), 680e3, 0.35, 20e-6),
    "acrylic": MaterialSpec(0.0, 0.9, (0.6, 0.2, 0.2), 320e3, 0.35, 15e-6),
    "PET": MaterialSpec(0.0, 0.8, (0.2, 0.2, 0.6), 420e3, 0.30, 10e-6),
    "PDMS": MaterialSpec(0.0, 0.7, (0.4, 0.4, 0.2), 170e3, 0.25, 8e-6),
    # low acoustic reflectivity: no US response
    "fabric": MaterialSpec(0.9, 0.0, (0.3, 0.1, 0.6), 240e3, 0.30, 8e-6),
    "foam": MaterialSpec(1.0, 0.0, (0.8, 0.1, 0.1), 100e3, 0.25, 5e-6),
    "paper": MaterialSpec(0.8, 0.0, (0.1, 0.7, 0.2), 540e3, 0.30, 12e-6),
    "tint film": MaterialSpec(0.7, 0.0, (0.1, 0.2, 0.7), 900e3, 0.30, 20e-6),
}


def _jitter(m, rng, rel=0.1):
    w = np.asarray(m.band_weights) * rng.uniform(1 - rel, 1 + rel, 3)
    w = w / max(w.sum(), 1.0)
    return MaterialSpec(m.oa_strength, m.us_reflectivity, tuple(w),
                        m.ring_hz * rng.uniform(1 - rel / 4, 1 + rel / 4),
                        m.ring_weight * rng.uniform(1 - rel, 1 + rel), m.ring_decay_s)


def synth_class_dataset(classes, per_class, seed, snr_db=20.0, depth_range=(9.0, 11.0),
                        scene=None):
    """Labelled waveforms: per-example random depth, gain and spectral jitter."""
    scene = scene or Scene(seed=seed)
    out = []
    for label, mat in classes.items():
        for k in range(per_class):
            rng = rng_for(seed, "class", label, k)
            m = _jitter(mat, rng)
            d = rng.uniform(*depth_range)
            w = synth_echoes(scene, d, m, rng, snr_db)
            out.append((w.with_samples(w.samples * rng.uniform(0.7, 1.3)), label))
    return out
