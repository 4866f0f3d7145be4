import json

import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from pdm2 import bench, calibration as C
from pdm2.errors import InvalidParameter, PlanInfeasible
from pdm2.geometry import angle_between, rotation_matrix
from pdm2.rectify import RangeSample, fit_range_model, rectify
from pdm2.tof import OA, US, estimate_tof, extract_reference
from pdm2.waveform import envelope, preprocess

FS = 10e6
C_MM_PER_S = 343e3


class TestTypes:
    def test_validation(self):
        with pytest.raises(InvalidParameter):
            bench.Scene(sound_speed=0.0)
        with pytest.raises(InvalidParameter):
            bench.NoiseSpec(sigma_S=-1.0)
        with pytest.raises(InvalidParameter):
            bench.MaterialSpec(band_weights=(0.5, 0.5, 0.5))
        with pytest.raises(InvalidParameter):
            bench.MaterialSpec(oa_strength=1.5)
        with pytest.raises(InvalidParameter):
            bench.Block((1.0, 0.0, 1.0))
        with pytest.raises(InvalidParameter):
            bench.Cylinder(0.0, 1.0)
        with pytest.raises(InvalidParameter):
            bench.Filament(0.25, (0, 0, 0), (0, 0, 0))

    def test_overlapping_objects_rejected(self):
        a = bench.SceneObject(bench.Block((10, 10, 10)))
        b = bench.SceneObject(bench.Block((10, 10, 10), center=(5.0, 0.0, 0.0)))
        with pytest.raises(InvalidParameter):
            bench.Scene(objects=(a, b))
        touching = bench.SceneObject(bench.Block((10, 10, 10), center=(10.0, 0.0, 0.0)))
        assert len(bench.Scene(objects=(a, touching)).objects) == 2

    def test_gauge_fixed_centre(self):
        sc = bench.Scene(XR_true=(235.21, 288.17, 40.0))
        assert sc.XR[2] == pytest.approx(0.0, abs=1e-12)
        # still on the axis through XR_true
        d = sc.XR - np.array(sc.XR_true)
        assert np.linalg.norm(np.cross(d, sc.n)) < 1e-9

    def test_scene_document_round_trip(self, tmp_path):
        sc = bench.block_scene(seed=7, noise=bench.NoiseSpec(0.01, 0.02, 0.03, 0.001, 0.1))
        bench.save_scene(sc, tmp_path / "s.json")
        back = bench.load_scene(tmp_path / "s.json")
        assert bench.scene_to_dict(back) == bench.scene_to_dict(sc)

    def test_rng_keys(self):
        a = bench.rng_for(3, "x", 1).normal(size=4)
        np.testing.assert_array_equal(a, bench.rng_for(3, "x", 1).normal(size=4))
        assert not np.array_equal(a, bench.rng_for(3, "x", 2).normal(size=4))
        assert not np.array_equal(a, bench.rng_for(4, "x", 1).normal(size=4))


class TestIntersections:
    def test_block_face(self):
        sc = bench.block_scene()
        blk = sc.objects[0].shape
        target = np.add(blk.center, (0.0, -10.0, 0.0))  # on the y- face
        d, obj, face = bench.raycast(sc, target - 10.0 * sc.v)
        assert d == pytest.approx(10.0, abs=1e-9)
        assert face == "y-" and obj.name == "block"

    def test_miss(self):
        sc = bench.block_scene()
        assert bench.raycast(sc, np.array([0.0, 0.0, 500.0])) is None

    def test_cylinder_and_filament(self):
        cyl = bench.Cylinder(2.0, 5.0)
        t, face = cyl.intersect(np.array([-10.0, 0.0, 1.0]), np.array([1.0, 0.0, 0.0]))
        assert (t, face) == (pytest.approx(8.0), "side")
        t, face = cyl.intersect(np.array([0.0, 0.0, 9.0]), np.array([0.0, 0.0, -1.0]))
        assert (t, face) == (pytest.approx(4.0), "top")
        fil = bench.Filament(0.25, (0, 0, 0), (0, 0, 10))
        t, _ = fil.intersect(np.array([-5.0, 0.0, 3.0]), np.array([1.0, 0.0, 0.0]))
        assert t == pytest.approx(4.75)
        assert fil.intersect(np.array([-5.0, 0.0, 30.0]), np.array([1.0, 0.0, 0.0])) is None

    @settings(max_examples=100, deadline=None)
    @given(st.floats(-np.pi, np.pi), st.integers(0, 10 ** 6))
    def test_turntable_frames_inverse(self, theta, seed):
        sc = bench.Scene()
        x = np.random.default_rng(seed).uniform(-300, 300, 3)
        np.testing.assert_allclose(bench.to_object(sc, theta, bench.to_world(sc, theta, x)), x,
                                   atol=1e-9)
        # the turntable centre is fixed by every rotation
        np.testing.assert_allclose(bench.to_world(sc, theta, sc.XR), sc.XR, atol=1e-9)

    def test_block_scan_depths_analytic(self):
        sc = bench.block_scene()
        for s in bench.block_scan_path(sc, sc.objects[0].shape):
            d, _, _ = bench.raycast(sc, s.S, s.theta)
            assert d == pytest.approx(10.0, abs=1e-9)


def burst_peaks(w, arrivals, half=60):
    """Envelope argmax near each expected arrival, in seconds."""
    e = envelope(w).samples
    out = []
    for t in arrivals:
        k = int(round(t * FS))
        out.append((k - half + int(np.argmax(e[k - half:k + half]))) / FS)
    return out


class TestWaveforms:
    def test_paper_triple(self):
        sc = bench.Scene()
        d = 77e-6 * C_MM_PER_S - sc.standoff_mm
        w = bench.synth_echoes(sc, d, bench.MATERIALS["aluminum"])
        t = bench.arrival_times(sc, d)
        assert [t[OA], t[US], t["OA2"]] == pytest.approx([77e-6, 154e-6, 231e-6])
        peaks = burst_peaks(w, [77e-6, 154e-6, 231e-6])
        np.testing.assert_allclose(peaks, [77e-6, 154e-6, 231e-6], atol=1.0 / FS)

    @pytest.mark.parametrize("d", [6.0, 9.3, 12.0, 17.7])
    def test_arrival_ratios_within_one_sample(self, d):
        sc = bench.Scene()
        t = bench.arrival_times(sc, d)
        p_oa, p_us, p_oa2 = burst_peaks(bench.synth_echoes(sc, d, bench.MATERIALS["steel"]),
                                        [t[OA], t[US], t["OA2"]])
        assert abs(p_us - 2 * t[OA]) <= 1.0 / FS
        assert abs(p_oa2 - 3 * t[OA]) <= 1.0 / FS
        assert abs(p_oa - t[OA]) <= 1.0 / FS

    def test_single_modality_materials(self):
        sc = bench.Scene()
        d = 10.0
        t = bench.arrival_times(sc, d)
        k = {m: int(round(t[m] * FS)) for m in (OA, US, "OA2")}

        def energy(w, key):
            x = w.samples[k[key] - 60:k[key] + 60]
            return float(x @ x)
        glass = bench.synth_echoes(sc, d, bench.MATERIALS["glass"])
        foam = bench.synth_echoes(sc, d, bench.MATERIALS["foam"])
        assert energy(glass, OA) == 0.0 and energy(glass, "OA2") == 0.0 and energy(glass, US) > 1
        assert energy(foam, US) == 0.0 and energy(foam, OA) > 1

    def test_second_echo_ratio(self):
        sc = bench.Scene(oa_echo_ratio=0.25)
        d = 10.0
        t = bench.arrival_times(sc, d)
        e = envelope(bench.synth_echoes(sc, d, bench.MATERIALS["foam"])).samples
        a1 = e[int(round(t[OA] * FS))]
        a2 = e[int(round(t["OA2"] * FS))]
        assert a2 / a1 == pytest.approx(0.25, rel=0.02)

    def test_noise_only_and_determinism(self):
        sc = bench.Scene(seed=5, noise=bench.NoiseSpec(sigma_sample=0.02))
        S = np.array([0.0, 0.0, 500.0])
        w1 = bench.synth_waveform(sc, S)
        assert w1 == bench.synth_waveform(sc, S)
        assert np.std(w1.samples) == pytest.approx(0.02, rel=0.05)
        assert w1 != bench.synth_waveform(sc, S + 1.0)

    def test_snr_scaling(self):
        sc = bench.Scene()
        m = bench.MATERIALS["aluminum"]
        w = bench.synth_echoes(sc, None, m, np.random.default_rng(0), snr_db=20.0)
        assert np.std(w.samples) == pytest.approx(max(m.band_weights) / 10, rel=0.05)
        with pytest.raises(InvalidParameter):
            bench.synth_echoes(sc.with_(noise=bench.NoiseSpec(sigma_sample=0.1)), 10.0, m)

    def test_beam_profile(self):
        sc = bench.Scene()
        # half maximum at half the focal FWHM
        assert bench.beam_amplitude(sc, bench.FWHM_OA_MM / 2, sc.focus_mm, OA) == pytest.approx(0.5)
        assert bench.beam_amplitude(sc, bench.FWHM_US_MM / 2, sc.focus_mm, US) == pytest.approx(0.5)
        # wider out of focus
        assert bench.beam_amplitude(sc, 0.3, 14.0) > bench.beam_amplitude(sc, 0.3, 10.0)


class TestCalibrationSessions:
    def test_paper_plan_counts(self):
        _, raws, angles, truth = bench.synth_calibration_session(bench.Scene())
        tips = [r for r in raws if r["kind"] == "TIP"]
        edges = [r for r in raws if r["kind"] == "EDGE"]
        assert (len(tips), len(edges), len(raws)) == (70, 88, 158)
        assert len({r["frame"] for r in tips}) == 4
        assert len({r["frame"] for r in edges}) == 2
        assert len({(r["frame"], r["center"]) for r in edges}) == 14
        assert [a["theta"] for a in angles] == [pytest.approx(np.pi)]
        assert truth["n_raws"] == 158

    def test_bit_identical(self, tmp_path):
        sc = bench.Scene(seed=11, noise=bench.NoiseSpec(0.02, 0.05, 0.05, 1e-3))
        for k in ("a", "b"):
            bench.synth_calibration_session(sc, path=tmp_path / f"{k}.jsonl",
                                            truth_path=tmp_path / f"{k}.json")
        assert (tmp_path / "a.jsonl").read_bytes() == (tmp_path / "b.jsonl").read_bytes()
        assert (tmp_path / "a.json").read_bytes() == (tmp_path / "b.json").read_bytes()

    def test_zero_noise_exact_recovery(self, tmp_path):
        sc = bench.Scene(seed=3)
        bench.synth_calibration_session(sc, path=tmp_path / "s.jsonl")
        tips, edges, rots = C.session_to_frames(*C.read_session(tmp_path / "s.jsonl"))
        for st in C.calibrate(tips, edges, rots):
            assert angle_between(st.v, sc.v) < 1e-6
            assert angle_between(st.n, sc.n) < 1e-6
            np.testing.assert_allclose(st.X_R, sc.XR, atol=1e-6)

    def test_infeasible_plans(self):
        with pytest.raises(PlanInfeasible):
            bench.synth_calibration_session(bench.Scene(), bench.CalibrationPlan(tip_step=3.0))
        with pytest.raises(PlanInfeasible):
            bench.synth_calibration_session(bench.Scene(),
                                            bench.CalibrationPlan(filament_dir=(1.0, 0.0, 0.0)))

    def test_truth_sidecar(self, tmp_path):
        sc = bench.Scene(seed=1)
        bench.synth_calibration_session(sc, truth_path=tmp_path / "t.json")
        doc = json.loads((tmp_path / "t.json").read_text())
        np.testing.assert_allclose(doc["v"], sc.v)
        np.testing.assert_allclose(doc["X_R_mm"], sc.XR)


class TestObjectScans:
    def test_block_both_modalities(self):
        sc = bench.block_scene()
        recs, truth = bench.synth_object_scan(sc, bench.block_scan_path(sc, sc.objects[0].shape))
        assert all(r["d_oa"] is not None and r["d_us"] is not None for r in recs)
        assert all(r["d_oa"] == pytest.approx(10.0, abs=1e-9) for r in recs)
        assert len(truth["edges"]) == 4

    def test_glass_bottle_us_only(self):
        sc = bench.bottle_scene("glass")
        path = bench.cylinder_scan_path(sc, 30.0, np.linspace(0, 2 * np.pi, 12, endpoint=False), 60.0)
        recs, _ = bench.synth_object_scan(sc, path)
        assert all(r["d_oa"] is None and r["d_us"] is not None for r in recs)

    def test_steel_bottle_dual(self):
        sc = bench.bottle_scene("steel")
        path = bench.cylinder_scan_path(sc, 30.0, np.linspace(0, 2 * np.pi, 8, endpoint=False), 60.0)
        recs, _ = bench.synth_object_scan(sc, path)
        assert all(r["d_oa"] is not None and r["d_us"] is not None for r in recs)

    def test_single_station_one_ray(self):
        sc = bench.block_scene()
        blk = sc.objects[0].shape
        theta = 0.3
        X_obj = np.add(blk.center, (0.0, -10.0, 2.0))
        # rotate the contact point into the world frame; sensor sits back along v
        X_w = bench.to_world(sc, theta, X_obj)
        S = X_w - 7.5 * sc.v
        recs, truth = bench.synth_object_scan(sc, [bench.Station(S, theta)])
        hit = truth["points"][0]
        d_expect = bench.raycast(sc, S, theta)[0]
        assert recs[0]["d_oa"] == pytest.approx(d_expect, abs=1e-9)
        # ray-plane oracle in the object frame
        R = rotation_matrix(sc.n, -theta)
        o, u = bench.to_object(sc, theta, S), R @ sc.v
        nrm, off = blk.face_plane(hit["face"])
        assert d_expect == pytest.approx((off - nrm @ o) / (nrm @ u), abs=1e-9)

    def test_noisy_scan_deterministic(self, tmp_path):
        sc = bench.block_scene(seed=4, noise=bench.NoiseSpec(0.02, 0.02, 0.05, 1e-3, 0.15))
        path = bench.block_scan_path(sc, sc.objects[0].shape)
        for k in ("a", "b"):
            bench.synth_object_scan(sc, path, path=tmp_path / f"{k}.jsonl")
        assert (tmp_path / "a.jsonl").read_bytes() == (tmp_path / "b.jsonl").read_bytes()


class TestClassCorpus:
    def test_shape(self):
        data = bench.synth_class_dataset(bench.OACT_CLASSES, 3, seed=1)
        assert len(data) == 24
        assert sorted({lab for _, lab in data}) == sorted(bench.OACT_CLASSES)
        assert data[0][0] != data[1][0]
        again = bench.synth_class_dataset(bench.OACT_CLASSES, 3, seed=1)
        assert all(a[0] == b[0] for a, b in zip(data, again))


def test_noise_free_pipeline_distances():
    """ToF -> rectify on the noise-free bench lands within the ToF quantum."""
    sc = bench.Scene()
    ref, arr = bench.reference_record(sc)
    pats = {m: extract_reference(preprocess(ref), arr[m], 12e-6, m) for m in (OA, US)}
    alu = bench.MATERIALS["aluminum"]

    def tof(d, m):
        return estimate_tof(preprocess(bench.synth_echoes(sc, d, alu)), pats[m]).tof_s
    cal = np.linspace(6.5, 16.5, 21)
    test = np.linspace(7.0, 16.0, 37)
    # the US path is a round trip, halving its one-way time step
    bound = {US: C_MM_PER_S / FS / 2, OA: C_MM_PER_S / FS}
    for m in (OA, US):
        model = fit_range_model([RangeSample(tof(d, m), d, 1.0) for d in cal], m)
        err = [rectify(model, tof(d, m)).distance_mm - d for d in test]
        assert np.max(np.abs(err)) < bound[m]
