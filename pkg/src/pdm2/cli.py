"""``pdm2`` command line.

Every subcommand reads and writes files only; failures print one line

    PDM2-ERROR code=<Name> exit=<n> msg=<text>

to stderr and exit with the code of the error class (2 bad arguments,
3 I/O, 4 degenerate data, 5 non-convergence, 6 low confidence).
"""
import argparse
import csv
import json
import os
import sys
import warnings

import numpy as np

from . import bench, boss, calibration, reconstruct, rectify, tof
from .errors import (FormatError, InvalidParameter, LowConfidence, NonConvergence, Pdm2Error)
from .waveform import preprocess, read_waveform, write_waveform_bin

CONFIG_ENV = "PDM2_CONFIG"
US, OA = tof.US, tof.OA

DEFAULTS = {
    "tof": {"threshold": tof.DEFAULT_THRESHOLD,
            "windows_s": {k: list(v) for k, v in tof.DEFAULT_WINDOWS.items()}},
    "extract_ref": {"length_s": 12e-6},
    "calibrate": {"threshold_frac": calibration.DEFAULT_THRESHOLD_FRAC, "max_iter": 200},
    "classify": {"window_len": 50, "word_len": 8, "alphabet": 4, "normalize": True,
                 "trials": 50, "split_ratio": 0.75, "segment": "both"},
    "bench": {"noise": "paper"},
}

PAPER_NOISE = bench.NoiseSpec(sigma_sample=0.02, sigma_S=0.05, sigma_d=0.05,
                              sigma_theta=float(np.deg2rad(0.1)))
SCAN_NOISE = bench.NoiseSpec(sigma_sample=0.02, sigma_S=0.02, sigma_d=0.05, sigma_theta=float(np.deg2rad(0.05)),
                             sigma_d_us=0.15)


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        _fail("BadArguments", 2, message)


def _fail(code, exit_code, msg):
    msg = " ".join(str(msg).split())
    print(f"PDM2-ERROR code={code} exit={exit_code} msg={msg}", file=sys.stderr)
    raise SystemExit(exit_code)


def load_config(path=None):
    """Defaults merged with the JSON config at ``path`` (or ``$PDM2_CONFIG``)."""
    cfg = json.loads(json.dumps(DEFAULTS))
    path = path or os.environ.get(CONFIG_ENV)
    if path:
        try:
            with open(path) as fh:
                user = json.load(fh)
        except (OSError, json.JSONDecodeError) as exc:
            raise FormatError(f"cannot read config {path}: {exc}") from exc
        for sect, vals in user.items():
            if isinstance(vals, dict):
                cfg.setdefault(sect, {}).update(vals)
            else:
                cfg[sect] = vals
    return cfg


def _dump_json(doc, path):
    with open(path, "w") as fh:
        json.dump(doc, fh, indent=2, sort_keys=True)
        fh.write("\n")


def _emit(doc):
    print(json.dumps(doc, indent=2, sort_keys=True))


def _windows(cfg, modality):
    return tuple(cfg["tof"]["windows_s"][modality])


def _estimate(w, pattern, cfg):
    win = tof.SearchWindow.from_times(w, pattern, *_windows(cfg, pattern.modality))
    return tof.estimate_tof(w, pattern, win, cfg["tof"]["threshold"])


def _load_waves(paths):
    return preprocess([read_waveform(p) for p in paths])


# -- subcommands -----------------------------------------------------------

def cmd_bench(a, cfg):
    if a.seed is None:
        raise InvalidParameter("bench commands require --seed")
    os.makedirs(a.out, exist_ok=True)
    noise = PAPER_NOISE if (a.noise or cfg["bench"]["noise"]) == "paper" else bench.NoiseSpec()
    out = os.path.join
    if a.kind == "calibration":
        scene = bench.load_scene(a.scene) if a.scene else bench.Scene(seed=a.seed, noise=noise)
        scene = scene.with_(seed=a.seed)
        plan = bench.CalibrationPlan(raster_jitter=a.raster_jitter)
        _, raws, _, truth = bench.synth_calibration_session(
            scene, plan, out(a.out, "session.jsonl"), out(a.out, "truth.json"))
        bench.save_scene(scene, out(a.out, "scene.json"))
        _emit({"session": out(a.out, "session.jsonl"), "raws": len(raws), "truth": out(a.out, "truth.json")})
    elif a.kind == "scan":
        if a.scene:
            scene = bench.load_scene(a.scene).with_(seed=a.seed)
        else:
            scan_noise = SCAN_NOISE if noise is PAPER_NOISE else bench.NoiseSpec()
            scene = bench.block_scene(seed=a.seed, noise=scan_noise, material=a.material)
        blk = next(o.shape for o in scene.objects if isinstance(o.shape, bench.Block))
        stations = bench.block_scan_path(scene, blk, per_face=a.per_face)
        wdir = None
        if a.waveforms:
            wdir = a.out
        recs, _ = bench.synth_object_scan(scene, stations, out(a.out, "scan.jsonl"),
                                          out(a.out, "scan_truth.json"), wdir)
        bench.save_scene(scene, out(a.out, "scene.json"))
        _emit({"scan": out(a.out, "scan.jsonl"), "stations": len(recs)})
    elif a.kind == "ranging":
        if a.scene:
            scene = bench.load_scene(a.scene).with_(seed=a.seed)
        else:
            scene = bench.Scene(seed=a.seed, nonlinearity_mm=a.nonlinearity)
        dists = np.round(np.arange(a.d_min, a.d_max + 1e-9, a.d_step), 6)
        rows = []
        for i, st in enumerate(bench.ranging_stations(scene, dists, repeats=a.repeats, snr_db=a.snr_db)):
            for k, w in enumerate(st["waves"]):
                fn = f"range_{i:03d}_{k}.bin"
                write_waveform_bin(w, out(a.out, fn))
                rows.append((fn, st["d_mm"], st["tof_s"]))
        with open(out(a.out, "ranging.csv"), "w", newline="") as fh:
            wr = csv.writer(fh)
            wr.writerow(["path", "d_mm", "true_tof_s"])
            for r in rows:
                wr.writerow([r[0], repr(r[1]), repr(r[2])])
        ref, arr = bench.reference_record(scene)
        write_waveform_bin(ref, out(a.out, "reference.bin"))
        _dump_json({"reference": "reference.bin", "arrival_s": {k: float(v) for k, v in arr.items()}},
                   out(a.out, "reference.json"))
        _emit({"manifest": out(a.out, "ranging.csv"), "records": len(rows)})
    elif a.kind == "classes":
        classes = bench.DAILY_CLASSES if a.set == "daily" else bench.OACT_CLASSES
        ds = bench.synth_class_dataset(classes, a.per_class, a.seed)
        with open(out(a.out, "classes.csv"), "w", newline="") as fh:
            wr = csv.writer(fh)
            wr.writerow(["path", "label"])
            for i, (w, lab) in enumerate(ds):
                fn = f"class_{i:04d}.bin"
                write_waveform_bin(w, out(a.out, fn))
                wr.writerow([fn, lab])
        _emit({"manifest": out(a.out, "classes.csv"), "records": len(ds)})
    elif a.kind == "waveform":
        scene = bench.Scene(seed=a.seed)
        rng = bench.rng_for(a.seed, "cli-waveform")
        w = bench.synth_echoes(scene, a.depth, bench.MATERIALS[a.material], rng, a.snr_db)
        write_waveform_bin(w, out(a.out, "waveform.bin"))
        _emit({"waveform": out(a.out, "waveform.bin"),
               "arrival_s": {k: float(v) for k, v in bench.arrival_times(scene, a.depth).items()}})
    return 0


def cmd_extract_ref(a, cfg):
    w = read_waveform(a.wave)
    if not a.raw:
        w = preprocess(w)
    length = a.length or cfg["extract_ref"]["length_s"]
    pat = tof.extract_reference(w, a.arrival, length, a.modality, a.lead, a.source_id or a.wave)
    tof.write_pattern(pat, a.out)
    _emit({"pattern": a.out, "samples": len(pat), "anchor": pat.anchor, "modality": pat.modality})
    return 0


def cmd_tof(a, cfg):
    if a.threshold is not None:
        cfg["tof"]["threshold"] = a.threshold
    w = _load_waves(a.waves)
    result, low = {}, []
    for p in (a.pattern_oa, a.pattern_us):
        if p is None:
            continue
        pat = tof.read_pattern(p)
        try:
            est = _estimate(w, pat, cfg)
            result[pat.modality] = {"tof_s": est.tof_s, "peak_index": est.peak_index,
                                    "peak_corr": est.peak_corr, "peak_ncc": est.peak_ncc}
        except LowConfidence as exc:
            result[pat.modality] = {"absent": True, "peak_ncc": exc.peak_ncc}
            low.append(pat.modality)
    if not result:
        raise InvalidParameter("give --pattern-oa and/or --pattern-us")
    if US in result and OA in result and "tof_s" in result[US] and "tof_s" in result[OA]:
        result["ratio_us_oa"] = 2 * result[US]["tof_s"] / result[OA]["tof_s"]
    if a.out:
        _dump_json(result, a.out)
    _emit(result)
    if len(low) == len([p for p in (a.pattern_oa, a.pattern_us) if p]):
        raise LowConfidence(f"no confident peak for {', '.join(sorted(low))}",
                            peak_ncc=max(result[m]["peak_ncc"] for m in low))
    return 0


def cmd_fit_range(a, cfg):
    """Manifest rows ``path,d_mm[,...]``; rows sharing a distance are repeats."""
    pat = tof.read_pattern(a.pattern)
    base = os.path.dirname(os.path.abspath(a.manifest))
    try:
        with open(a.manifest, newline="") as fh:
            rows = [r for r in csv.DictReader(fh)]
    except OSError as exc:
        raise FormatError(f"cannot read {a.manifest}: {exc}") from exc
    groups = {}
    for r in rows:
        groups.setdefault(float(r["d_mm"]), []).append(os.path.join(base, r["path"]))
    dists = sorted(groups)
    tofs = []
    for d in dists:
        ws = [read_waveform(p) for p in groups[d]]
        tofs.append([_estimate(preprocess(w), pat, cfg).tof_s for w in ws])
    samples = rectify.samples_from_repeats(tofs, dists)
    model = rectify.fit_range_model(samples, pat.modality)
    rectify.write_model(model, a.out)
    t = np.array([s.tof_s for s in samples])
    d = np.array(dists)
    lin = np.polyval(np.polyfit(t, d, 1), t)
    if a.curve:
        with open(a.curve, "w", newline="") as fh:
            wr = csv.writer(fh)
            wr.writerow(["d_true_mm", "tof_s", "d_linear_mm", "dev_linear_mm", "d_rectified_mm",
                         "dev_rectified_mm"])
            for di, ti, li in zip(d, t, lin):
                ri = float(model(ti))
                wr.writerow([f"{di:.6f}", f"{ti:.9e}", f"{li:.6f}", f"{li - di:.6f}", f"{ri:.6f}",
                             f"{ri - di:.6f}"])
    _emit({"model": rectify.model_to_dict(model)})
    return 0


def cmd_calibrate(a, cfg):
    head, raws, angles = calibration.read_session(a.session)
    head.setdefault("threshold_frac", cfg["calibrate"]["threshold_frac"])
    tips, edges, rots = calibration.session_to_frames(head, raws, angles)
    s0 = calibration.initial_state(tips, edges, rots)
    s1 = s0
    if not a.no_refine:
        s1 = calibration.refine_mle(s0, tips, edges, rots, max_iter=cfg["calibrate"]["max_iter"])
    calibration.write_report(a.out, s0, s1, {"session": os.path.basename(a.session)})
    print(calibration.format_table(s1))
    print(f"residual RMS {s1.residual_rms:.4f} mm, iterations {s1.iterations}, "
          f"converged {s1.converged}")
    if not s1.converged:
        raise NonConvergence("LM stopped before convergence; best iterate written")
    return 0


def _sfa_params(a, cfg):
    c = cfg["classify"]
    return boss.SfaParams(a.window_len or c["window_len"], a.word_len or c["word_len"],
                          a.alphabet or c["alphabet"], bool(c["normalize"]))


def cmd_classify(a, cfg):
    c = cfg["classify"]
    seg = a.segment or c["segment"]
    items = boss.read_manifest(a.manifest)
    data = [(boss.select_segment(preprocess(read_waveform(p)), seg), lab) for p, lab in items]
    p = _sfa_params(a, cfg)
    if a.query:
        model = boss.fit(data, p)
        out = {q: boss.classify(model, boss.select_segment(preprocess(read_waveform(q)), seg))
               for q in a.query}
        _emit(out)
        return 0
    cm = boss.evaluate(data, p, a.trials or c["trials"], c["split_ratio"], a.seed or 0)
    if a.out:
        cm.to_csv(a.out)
    _emit({"labels": list(cm.labels), "accuracy": cm.accuracy, "trials": cm.trial_count,
           "counts": cm.counts.tolist()})
    return 0


def cmd_scan(a, cfg):
    """Fill per-station depths from waveforms: preprocess, ToF, rectify."""
    head, recs = reconstruct.read_scan_session(a.session)
    base = os.path.dirname(os.path.abspath(a.session))
    pats = {m: (tof.read_pattern(p), rectify.read_model(mp)) for m, p, mp in
            ((OA, a.pattern_oa, a.model_oa), (US, a.pattern_us, a.model_us)) if p and mp}
    if not pats:
        raise InvalidParameter("give a pattern and range model for at least one modality")
    out = []
    for r in recs:
        r = dict(r)
        if "wave" not in r:
            raise FormatError(f"station {r.get('id')} has no waveform")
        w = preprocess(read_waveform(os.path.join(base, r["wave"])))
        for m, (pat, model) in pats.items():
            key = "d_oa" if m == OA else "d_us"
            try:
                est = _estimate(w, pat, cfg)
                with warnings.catch_warnings():
                    warnings.simplefilter("ignore")
                    r[key] = rectify.rectify(model, est.tof_s).distance_mm
            except LowConfidence:
                r[key] = None
        out.append({k: v for k, v in r.items() if k != "record"})
    reconstruct.write_scan_session(a.out, out, {"source": os.path.basename(a.session)})
    _emit({"scan": a.out, "stations": len(out)})
    return 0


def cmd_reconstruct(a, cfg):
    _, recs = reconstruct.read_scan_session(a.session)
    cal = calibration.read_report(a.calib)
    cloud = reconstruct.reconstruct(reconstruct.stations_from_records(recs), cal)
    reconstruct.write_cloud(cloud, a.out)
    summary = {"points": len(cloud), "cloud": a.out}
    if a.truth:
        try:
            with open(a.truth) as fh:
                truth = json.load(fh)
        except (OSError, json.JSONDecodeError) as exc:
            raise FormatError(f"cannot read truth {a.truth}: {exc}") from exc
        rep = reconstruct.contour_error(cloud, reconstruct.edges_from_truth(truth))
        doc = reconstruct.report_to_dict(rep)
        if a.report:
            _dump_json(doc, a.report)
        summary["contour"] = doc["per_modality"]
    if a.polylines:
        with open(a.polylines, "w", newline="") as fh:
            wr = csv.writer(fh)
            wr.writerow(["modality", "order", "x_mm", "y_mm", "z_mm"])
            for mod, pts in reconstruct.contour_polylines(cloud).items():
                for i, x in enumerate(pts):
                    wr.writerow([mod, i, f"{x[0]:.6f}", f"{x[1]:.6f}", f"{x[2]:.6f}"])
    _emit(summary)
    return 0


def cmd_report(a, cfg):
    """Human-readable summary of pdm2 JSON artifacts."""
    lines = []
    for path in a.artifacts:
        try:
            with open(path) as fh:
                doc = json.load(fh)
        except (OSError, json.JSONDecodeError) as exc:
            raise FormatError(f"cannot read {path}: {exc}") from exc
        fmt = doc.get("format", "")
        lines.append(f"== {os.path.basename(path)}")
        if fmt == "pdm2-calibration-report":
            lines += doc["table"]
            p = doc["parameters"]
            lines.append(f"residual RMS (mm): {p['residual_rms_mm']:.4f}; iterations: {p['iterations']}")
        elif fmt == "pdm2-contour-report":
            for mod, s in sorted(doc["per_modality"].items()):
                lines.append(f"{mod}: e = {s['mean']:.3f} +/- {s['std']:.3f} mm (n={s['count']})")
        elif "beta2" in doc:
            lines.append(f"{doc['modality']}: d = {doc['beta2']:.6g} t^2 + {doc['beta1']:.6g} t "
                         f"+ {doc['beta0']:.6g}; max residual {doc['fit'].get('residual_max_mm', float('nan')):.4f} mm")
        else:
            lines.append(json.dumps(doc, sort_keys=True)[:400])
    text = "\n".join(lines) + "\n"
    if a.out:
        with open(a.out, "w") as fh:
            fh.write(text)
    sys.stdout.write(text)
    return 0


# -- parser ----------------------------------------------------------------

def build_parser():
    ap = _Parser(prog="pdm2", description="Dual-modal pre-touch ranging toolkit")
    ap.add_argument("--config", help=f"JSON config (default: ${CONFIG_ENV})")
    ap.add_argument("--dump-config", action="store_true", help="print the effective config and exit")
    ap.add_argument("-q", "--quiet", action="store_true", help="suppress warnings")
    sub = ap.add_subparsers(dest="command", parser_class=_Parser)

    b = sub.add_parser("bench", help="generate synthetic data")
    b.add_argument("kind", choices=["calibration", "scan", "ranging", "classes", "waveform"])
    b.add_argument("--seed", type=int)
    b.add_argument("--out", required=True)
    b.add_argument("--scene")
    b.add_argument("--noise", choices=["paper", "none"])
    b.add_argument("--raster-jitter", type=float, default=0.0)
    b.add_argument("--material", default="aluminum", choices=sorted(bench.MATERIALS))
    b.add_argument("--per-face", type=int, default=15)
    b.add_argument("--waveforms", action="store_true")
    b.add_argument("--d-min", type=float, default=6.0)
    b.add_argument("--d-max", type=float, default=18.0)
    b.add_argument("--d-step", type=float, default=0.5)
    b.add_argument("--repeats", type=int, default=3)
    b.add_argument("--snr-db", type=float, default=20.0)
    b.add_argument("--nonlinearity", type=float, default=0.6)
    b.add_argument("--set", choices=["daily", "oact"], default="daily")
    b.add_argument("--per-class", type=int, default=20)
    b.add_argument("--depth", type=float, default=10.0)
    b.set_defaults(func=cmd_bench)

    e = sub.add_parser("extract-ref", help="cut a reference pattern")
    e.add_argument("wave")
    e.add_argument("--arrival", type=float, required=True, help="arrival time (s)")
    e.add_argument("--modality", choices=list(tof.MODALITIES), required=True)
    e.add_argument("--length", type=float, help="pattern length (s)")
    e.add_argument("--lead", type=float, help="lead before arrival (s)")
    e.add_argument("--source-id")
    e.add_argument("--raw", action="store_true", help="skip preprocessing")
    e.add_argument("--out", required=True)
    e.set_defaults(func=cmd_extract_ref)

    t = sub.add_parser("tof", help="estimate time of flight")
    t.add_argument("waves", nargs="+", help="repeated records of one station")
    t.add_argument("--pattern-oa")
    t.add_argument("--pattern-us")
    t.add_argument("--threshold", type=float)
    t.add_argument("--out")
    t.set_defaults(func=cmd_tof)

    f = sub.add_parser("fit-range", help="fit the ranging polynomial")
    f.add_argument("manifest")
    f.add_argument("--pattern", required=True)
    f.add_argument("--out", required=True)
    f.add_argument("--curve", help="deviation-vs-distance CSV")
    f.set_defaults(func=cmd_fit_range)

    c = sub.add_parser("calibrate", help="calibrate beam and turntable")
    c.add_argument("session")
    c.add_argument("--out", required=True)
    c.add_argument("--no-refine", action="store_true")
    c.set_defaults(func=cmd_calibrate)

    k = sub.add_parser("classify", help="BOSS evaluation or labelling")
    k.add_argument("manifest")
    k.add_argument("--query", nargs="*")
    k.add_argument("--seed", type=int)
    k.add_argument("--trials", type=int)
    k.add_argument("--window-len", type=int)
    k.add_argument("--word-len", type=int)
    k.add_argument("--alphabet", type=int)
    k.add_argument("--segment", choices=list(boss.SEGMENTS))
    k.add_argument("--out")
    k.set_defaults(func=cmd_classify)

    s = sub.add_parser("scan", help="depths from station waveforms")
    s.add_argument("session")
    s.add_argument("--pattern-oa")
    s.add_argument("--pattern-us")
    s.add_argument("--model-oa")
    s.add_argument("--model-us")
    s.add_argument("--out", required=True)
    s.set_defaults(func=cmd_scan)

    r = sub.add_parser("reconstruct", help="point cloud and contour error")
    r.add_argument("session")
    r.add_argument("--calib", required=True)
    r.add_argument("--out", required=True)
    r.add_argument("--truth")
    r.add_argument("--report")
    r.add_argument("--polylines")
    r.set_defaults(func=cmd_reconstruct)

    p = sub.add_parser("report", help="summarize artifacts")
    p.add_argument("artifacts", nargs="+")
    p.add_argument("--out")
    p.set_defaults(func=cmd_report)
    return ap


def main(argv=None):
    ap = build_parser()
    a = ap.parse_args(argv)
    try:
        cfg = load_config(a.config)
        if a.dump_config:
            _emit(cfg)
            return 0
        if a.command is None:
            raise InvalidParameter("a subcommand is required")
        with warnings.catch_warnings():
            warnings.simplefilter("ignore", RuntimeWarning)
            if a.quiet:
                warnings.simplefilter("ignore")
            return a.func(a, cfg)
    except Pdm2Error as exc:
        _fail(exc.code, exc.exit_code, exc)
    except OSError as exc:
        _fail("IOError", 3, exc)
    except (KeyError, ValueError) as exc:
        _fail("BadInput", 2, exc)


if __name__ == "__main__":
    sys.exit(main())
