import itertools

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from gradweave.datakit import (
    DIAG_HEADER,
    PGMError,
    SynthConfig,
    contrast,
    f_measure,
    generate_dataset,
    generate_sample,
    mae,
    max_f_measure,
    quantize,
    read_diagnostics_csv,
    read_manifest,
    read_pgm,
    write_dataset,
    write_diagnostics_csv,
    write_pgm,
)
from gradweave.gradsurgery import StepReport


def _brute_max_f(pred, gt, beta_sq=0.3):
    g = gt.reshape(-1) > 0.5
    best = 0.0
    for i in range(1, 256):
        b = pred.reshape(-1) >= i / 255
        tp = sum(1 for x, y in zip(b, g) if x and y)
        prec = tp / b.sum() if b.sum() else 0.0
        rec = tp / g.sum()
        if beta_sq * prec + rec:
            best = max(best, (1 + beta_sq) * prec * rec / (beta_sq * prec + rec))
    return best


class TestGenerator:
    def test_full_dominance_favours_rgb(self):
        cfg = SynthConfig(dominance=1.0, seed=0)
        rng = np.random.default_rng(0)
        c_r, c_t = [], []
        for _ in range(100):
            s = generate_sample(cfg, rng)
            c_r.append(contrast(s.I_R, s.GT))
            c_t.append(contrast(s.I_T, s.GT))
        assert np.mean(c_r) > np.mean(c_t)
        # per-sample too: the RGB foreground lift is 1.0 against 0.5 for thermal
        assert sum(r > t for r, t in zip(c_r, c_t)) >= 95

    def test_even_dominance_is_symmetric_in_expectation(self):
        rng = np.random.default_rng(1)
        cfg = SynthConfig(dominance=0.5)
        diffs = []
        for _ in range(200):
            s = generate_sample(cfg, rng)
            diffs.append(contrast(s.I_R, s.GT) - contrast(s.I_T, s.GT))
        assert abs(np.mean(diffs)) < 4 * np.std(diffs) / np.sqrt(len(diffs)) + 1e-3

    def test_deterministic(self):
        cfg = SynthConfig(seed=5, background_cue_strength=0.4)
        a, b = generate_dataset(cfg, 3), generate_dataset(cfg, 3)
        for x, y in zip(a, b):
            for f in ("I_R", "I_T", "GT"):
                assert getattr(x, f).tobytes() == getattr(y, f).tobytes()

    def test_splits_differ(self):
        cfg = SynthConfig(seed=5)
        assert not np.array_equal(generate_dataset(cfg, 1, "train")[0].I_R, generate_dataset(cfg, 1, "test")[0].I_R)

    def test_ranges(self):
        for s in generate_dataset(SynthConfig(dominance=0.9, background_cue_strength=1.0), 10):
            assert s.I_R.min() >= 0 and s.I_R.max() <= 1 and s.GT.any()
            assert set(np.unique(s.GT)) <= {0.0, 1.0}

    def test_config_validation(self):
        with pytest.raises(ValueError):
            SynthConfig(dominance=1.5)
        with pytest.raises(ValueError):
            SynthConfig(H=4)


class TestMetrics:
    def test_mae_examples(self):
        gt = np.zeros((4, 4))
        gt[1:3, 1:3] = 1
        assert mae(gt, gt) == 0.0
        assert mae(1 - gt, gt) == 1.0
        assert mae(np.full((4, 4), 0.5), gt) == 0.5
        with pytest.raises(ValueError):
            mae(np.zeros(3), np.zeros(4))

    def test_perfect_and_zero(self):
        gt = np.zeros((8, 8))
        gt[2:4, 2:4] = 1
        assert max_f_measure(gt, gt) == 1.0
        assert max_f_measure(np.zeros((8, 8)), gt) == 0.0

    def test_empty_gt_rejected(self):
        with pytest.raises(ValueError):
            max_f_measure(np.zeros((8, 8)), np.zeros((8, 8)))

    @pytest.mark.parametrize(
        "flip,expected",
        [
            # one positive missed: P = 1, R = 3/4
            ((2, 2), 1.3 * 0.75 / (0.3 + 0.75)),
            # one false positive: P = 4/5, R = 1
            ((6, 6), 1.3 * 0.8 / (0.24 + 1.0)),
        ],
    )
    def test_single_flip(self, flip, expected):
        gt = np.zeros((8, 8))
        gt[2:4, 2:4] = 1
        pred = gt.copy()
        pred[flip] = 1 - pred[flip]
        got = max_f_measure(pred, gt)
        assert got == pytest.approx(expected, abs=1e-12)
        assert got == pytest.approx(_brute_max_f(pred, gt), abs=1e-12)

    @settings(max_examples=25, deadline=None)
    @given(st.integers(0, 10_000))
    def test_matches_brute_force(self, seed):
        rng = np.random.default_rng(seed)
        gt = (rng.random((6, 6)) > 0.6).astype(float)
        gt[0, 0] = 1
        pred = rng.random((6, 6))
        assert max_f_measure(pred, gt) == pytest.approx(_brute_max_f(pred, gt), abs=1e-12)

    @settings(max_examples=40)
    @given(st.integers(0, 10_000), st.floats(0.2, 1.0), st.floats(0.0, 1.0))
    def test_bounds_and_affine_invariance(self, seed, a, frac):
        rng = np.random.default_rng(seed)
        gt = (rng.random((8, 8)) > 0.5).astype(float)
        gt[0, 0] = 1
        # quantized to the threshold grid so a monotone map keeps the same cut points
        pred = np.round(rng.random((8, 8)) * 255) / 255
        b = frac * (1 - a)
        f1, f2 = max_f_measure(pred, gt), max_f_measure(a * pred + b, gt)
        assert 0.0 <= f1 <= 1.0 and 0.0 <= mae(pred, gt) <= 1.0
        # an affine map can only merge or keep the level sets the sweep separates
        levels = np.unique(pred)
        best = 0.0
        for t in levels:
            best = max(best, f_measure(pred >= t, gt))
        assert f1 <= best + 1e-12
        assert f2 <= best + 1e-12

    def test_affine_invariance_on_separable_map(self):
        gt = np.zeros((8, 8))
        gt[1:5, 2:6] = 1
        pred = 0.2 + 0.6 * gt
        for a, b in itertools.product((0.5, 1.0), (0.0, 0.1, 0.3)):
            if a * 0.8 + b <= 1:
                assert max_f_measure(a * pred + b, gt) == 1.0


class TestPGM:
    def test_quantization_bytes(self, tmp_path):
        write_pgm(np.array([[0.0, 1.0], [0.5, 0.25]]), tmp_path / "a.pgm")
        raw = (tmp_path / "a.pgm").read_bytes()
        assert raw.startswith(b"P5\n2 2\n255\n")
        assert list(raw[-4:]) == [0, 255, 128, 64]

    def test_zero_image(self, tmp_path):
        write_pgm(np.zeros((3, 5)), tmp_path / "z.pgm")
        assert (tmp_path / "z.pgm").read_bytes().endswith(bytes(15))

    @settings(max_examples=30)
    @given(st.integers(0, 10_000), st.integers(1, 12), st.integers(1, 12))
    def test_roundtrip_within_one_level(self, tmp_path_factory, seed, h, w):
        img = np.random.default_rng(seed).random((h, w))
        p = tmp_path_factory.mktemp("pgm") / "x.pgm"
        write_pgm(img, p)
        assert np.max(np.abs(read_pgm(p) - img)) <= 1 / 255

    def test_header_comments(self, tmp_path):
        (tmp_path / "c.pgm").write_bytes(b"P5\n# made by hand\n2 1\n# max\n255\n\x00\xff")
        np.testing.assert_array_equal(read_pgm(tmp_path / "c.pgm"), [[0.0, 1.0]])

    @pytest.mark.parametrize(
        "payload",
        [b"P2\n2 2\n255\n0000", b"P5\n2 x\n255\n\x00\x00\x00\x00", b"P5\n2 2\n", b"P5\n2 2\n70000\n\x00\x00\x00\x00"],
    )
    def test_malformed(self, tmp_path, payload):
        (tmp_path / "m.pgm").write_bytes(payload)
        with pytest.raises(PGMError):
            read_pgm(tmp_path / "m.pgm")

    def test_truncated(self, tmp_path):
        (tmp_path / "t.pgm").write_bytes(b"P5\n4 4\n255\n" + bytes(10))
        with pytest.raises(PGMError, match="truncated"):
            read_pgm(tmp_path / "t.pgm")

    def test_out_of_range_values(self):
        with pytest.raises(ValueError):
            quantize(np.array([1.2]))


def _report(rng):
    return StepReport(*rng.normal(size=5), 0.123456789, 0.5, -0.25, int(rng.integers(0, 9)), rng.random(), rng.random())


class TestDiagnosticsCSV:
    def test_one_record_two_lines(self, tmp_path):
        write_diagnostics_csv([_report(np.random.default_rng(0))], tmp_path / "d.csv")
        lines = (tmp_path / "d.csv").read_text().splitlines()
        assert len(lines) == 2
        assert lines[0] == ",".join(DIAG_HEADER)

    def test_roundtrip(self, tmp_path):
        rng = np.random.default_rng(1)
        recs = [_report(rng) for _ in range(20)]
        write_diagnostics_csv(recs, tmp_path / "d.csv")
        back = read_diagnostics_csv(tmp_path / "d.csv")
        assert [r["iter"] for r in back] == list(range(1, 21))
        for rec, row in zip(recs, back):
            for col in DIAG_HEADER[1:]:
                v = float(getattr(rec, col))
                assert abs(row[col] - v) <= 1e-8 * max(1.0, abs(v))

    def test_empty_records_leave_no_file(self, tmp_path):
        with pytest.raises(ValueError):
            write_diagnostics_csv([], tmp_path / "d.csv")
        assert not (tmp_path / "d.csv").exists()


def test_manifest_roundtrip(tmp_path):
    samples = generate_dataset(SynthConfig(H=8, W=8, seed=2), 3)
    manifest = write_dataset(samples, tmp_path / "ds")
    back = read_manifest(manifest)
    assert [i for i, _ in back] == [0, 1, 2]
    for (_, b), a in zip(back, samples):
        np.testing.assert_array_equal(b.GT, a.GT)
        assert np.max(np.abs(b.I_R - a.I_R)) <= 1 / 255


def test_manifest_bad_line(tmp_path):
    (tmp_path / "m.txt").write_text("index,path_R,path_T,path_GT\n0,a.pgm,b.pgm\n")
    with pytest.raises(ValueError, match="m.txt:2"):
        read_manifest(tmp_path / "m.txt")
