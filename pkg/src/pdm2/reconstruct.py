"""Point clouds and contour error from calibrated turntable scans."""
import json
from dataclasses import dataclass, field

import numpy as np

from .errors import EmptySession, FormatError
from .geometry import Edge, Rotation, make_edge, point_edge_distance, rotate_about
from .tof import OA, US

SCAN_FORMAT = "pdm2-scan-session"


@dataclass(frozen=True, eq=False)
class ScanStation:
    S: np.ndarray
    theta: float
    d_us: float = None
    d_oa: float = None
    station_id: int = 0

    def __post_init__(self):
        object.__setattr__(self, "S", np.asarray(self.S, dtype=float).reshape(3))

    @property
    def empty(self):
        return self.d_us is None and self.d_oa is None

    def depths(self):
        """Present modalities in a fixed order (OA first)."""
        return [(m, d) for m, d in ((OA, self.d_oa), (US, self.d_us)) if d is not None]


@dataclass(frozen=True, eq=False)
class PointCloud:
    points: np.ndarray
    modality: tuple
    station_id: tuple

    def __post_init__(self):
        pts = np.asarray(self.points, dtype=float).reshape(-1, 3)
        if not np.all(np.isfinite(pts)):
            raise FormatError("point cloud has non-finite coordinates")
        object.__setattr__(self, "points", pts)
        object.__setattr__(self, "modality", tuple(self.modality))
        object.__setattr__(self, "station_id", tuple(int(i) for i in self.station_id))

    def __len__(self):
        return self.points.shape[0]

    def subset(self, modality):
        m = np.array([x == modality for x in self.modality], dtype=bool)
        return PointCloud(self.points[m], [modality] * int(m.sum()),
                          [i for i, k in zip(self.station_id, m) if k])


@dataclass
class ContourReport:
    edge_ids: list
    errors: np.ndarray
    assignment: np.ndarray
    modality: tuple
    stats: dict = field(default_factory=dict)
    per_edge: dict = field(default_factory=dict)


def station_to_points(st, calib):
    """Object-frame points of a station: beam hit ``S + d v`` turned back by ``-theta``."""
    rot = Rotation(calib.n, -st.theta)
    out = []
    for mod, d in st.depths():
        x_world = st.S + d * calib.v
        out.append((rotate_about(rot, calib.X_R, x_world), mod))
    return out


def reconstruct(stations, calib):
    stations = list(stations)
    if not stations:
        raise EmptySession("scan session has no stations")
    pts, mods, ids = [], [], []
    for st in stations:
        for x, mod in station_to_points(st, calib):
            pts.append(x)
            mods.append(mod)
            ids.append(st.station_id)
    return PointCloud(np.array(pts).reshape(-1, 3), mods, ids)


def contour_error(cloud, truth_edges):
    """Distance of every point to its nearest truth edge, summarized per modality.

    ``truth_edges`` is a mapping of edge id to :class:`Edge` (a list is keyed
    by position).
    """
    if not isinstance(truth_edges, dict):
        truth_edges = dict(enumerate(truth_edges))
    ids = list(truth_edges)
    if len(cloud) == 0 or not ids:
        return ContourReport(ids, np.zeros(0), np.zeros(0, int), (), {}, {})
    D = np.column_stack([point_edge_distance(truth_edges[k], cloud.points) for k in ids])
    assign = np.argmin(D, axis=1)
    err = D[np.arange(len(cloud)), assign]
    stats = {}
    for mod in sorted(set(cloud.modality)):
        m = np.array([x == mod for x in cloud.modality])
        stats[mod] = {"mean": float(err[m].mean()), "std": float(err[m].std()),
                      "max": float(err[m].max()), "count": int(m.sum())}
    per_edge = {}
    for j, k in enumerate(ids):
        for mod in sorted(set(cloud.modality)):
            m = (assign == j) & np.array([x == mod for x in cloud.modality])
            if m.any():
                per_edge.setdefault(str(k), {})[mod] = {
                    "mean": float(err[m].mean()), "std": float(err[m].std()), "count": int(m.sum())}
    return ContourReport(ids, err, assign, cloud.modality, stats, per_edge)


def fit_face_edges(cloud, groups):
    """Independent line fit per face: ``groups`` maps a face id to point indices."""
    return {k: make_edge(cloud.points[list(idx)]) for k, idx in groups.items() if len(idx) >= 2}


def contour_polylines(cloud):
    """Adjacency polylines in station order, one per modality."""
    out = {}
    for mod in (OA, US):
        sub = cloud.subset(mod)
        if len(sub):
            order = np.argsort(sub.station_id, kind="stable")
            out[mod] = sub.points[order]
    return out


# -- files -----------------------------------------------------------------

def write_scan_session(path, records, header=None):
    head = {"record": "HEADER", "format": SCAN_FORMAT, "version": 1,
            "units": {"length": "mm", "angle": "rad"}}
    head.update(header or {})
    with open(path, "w") as fh:
        fh.write(json.dumps(head) + "\n")
        for r in records:
            fh.write(json.dumps({"record": "STATION", **r}) + "\n")


def read_scan_session(path):
    """Return ``(header, records)``; records keep any extra keys (e.g. ``wave``)."""
    try:
        with open(path) as fh:
            recs = [json.loads(ln) for ln in fh if ln.strip()]
    except (OSError, json.JSONDecodeError) as exc:
        raise FormatError(f"cannot read scan session {path}: {exc}") from exc
    if not recs or recs[0].get("format") != SCAN_FORMAT:
        raise FormatError(f"{path}: missing scan-session header")
    return recs[0], [r for r in recs[1:] if r.get("record") == "STATION"]


def stations_from_records(records):
    return [ScanStation(r["S"], float(r["theta"]), r.get("d_us"), r.get("d_oa"), int(r["id"]))
            for r in records]


def write_cloud(cloud, path):
    with open(path, "w") as fh:
        for x, mod, sid in zip(cloud.points, cloud.modality, cloud.station_id):
            fh.write(f"{x[0]:.6f} {x[1]:.6f} {x[2]:.6f} {mod} {sid}\n")


def read_cloud(path):
    pts, mods, ids = [], [], []
    try:
        with open(path) as fh:
            for ln in fh:
                if not ln.strip():
                    continue
                x, y, z, mod, sid = ln.split()
                pts.append((float(x), float(y), float(z)))
                mods.append(mod)
                ids.append(int(sid))
    except (OSError, ValueError) as exc:
        raise FormatError(f"cannot read point cloud {path}: {exc}") from exc
    return PointCloud(np.array(pts).reshape(-1, 3), mods, ids)


def edges_from_truth(doc):
    return {k: Edge(np.array(e["q"]), np.array(e["m"])) for k, e in doc.get("edges", {}).items()}


def report_to_dict(rep):
    return {"format": "pdm2-contour-report", "per_modality": rep.stats, "per_edge": rep.per_edge,
            "n_points": int(rep.errors.size)}
