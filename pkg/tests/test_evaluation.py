import warnings

import numpy as np
import pytest

from tntrigger.dataio import (COLUMNS, RAW_MAGIC, Dataset, SyntheticConfig, generate_synthetic,
                              load_csv, load_dataset, load_rawbin, save_csv, save_rawbin)
from tntrigger.errors import ConfigError, DataError, FormatError, ParseError
from tntrigger.evaluation import (ResolutionWarning, metrics_from_norms, metrics_from_scores, roc,
                                  tpr_at_fpr, tpr_at_fpr_detail)


def _trapezoid(x, y):
    return sum((x[i + 1] - x[i]) * (y[i + 1] + y[i]) / 2 for i in range(len(x) - 1))


def _pairwise_auc(bkg, sig):
    """Mann-Whitney statistic with ties counted as one half."""
    bkg, sig = np.asarray(bkg), np.asarray(sig)
    gt = (sig[:, None] > bkg[None, :]).sum()
    eq = (sig[:, None] == bkg[None, :]).sum()
    return (gt + 0.5 * eq) / (len(sig) * len(bkg))


class TestRoc:
    def test_separated(self):
        assert roc([0.1, 0.2, 0.3], [0.5, 0.9]).auc == 1.0

    def test_identical_lists_give_half(self):
        s = [0.3, 0.1, 0.1, 0.7, 0.5]
        assert roc(s, s).auc == 0.5

    def test_same_distribution_monte_carlo(self):
        rng = np.random.default_rng(5)
        assert abs(roc(rng.normal(size=10_000), rng.normal(size=10_000)).auc - 0.5) < 0.02

    def test_matches_pairwise_statistic_with_ties(self, rng):
        bkg = rng.integers(0, 8, 60).astype(float)
        sig = rng.integers(2, 10, 45).astype(float)
        assert roc(bkg, sig).auc == pytest.approx(_pairwise_auc(bkg, sig), abs=1e-12)

    def test_auc_is_trapezoid_of_curve(self, rng):
        c = roc(rng.normal(size=200), rng.normal(0.7, size=150))
        assert c.auc == pytest.approx(_trapezoid(c.fpr, c.tpr), abs=1e-12)

    def test_curve_monotone_and_anchored(self, rng):
        c = roc(rng.normal(size=300), rng.normal(1.0, size=100))
        assert np.isinf(c.thresholds[0]) and np.all(np.diff(c.thresholds) < 0)
        assert c.fpr[0] == 0 and c.tpr[0] == 0 and c.fpr[-1] == 1 and c.tpr[-1] == 1
        assert np.all(np.diff(c.fpr) >= 0) and np.all(np.diff(c.tpr) >= 0)

    def test_monotone_transform_invariance(self, rng):
        bkg, sig = rng.normal(size=500), rng.normal(0.5, size=400)
        assert roc(np.exp(bkg), np.exp(sig)).auc == roc(bkg, sig).auc

    def test_permutation_invariance(self, rng):
        bkg, sig = rng.normal(size=500), rng.normal(0.5, size=400)
        assert roc(rng.permutation(bkg), rng.permutation(sig)).auc == roc(bkg, sig).auc

    @pytest.mark.parametrize("bkg,sig", [([], [1.0]), ([1.0], []), ([np.nan], [1.0])])
    def test_bad_input(self, bkg, sig):
        with pytest.raises(ConfigError):
            roc(bkg, sig)


class TestTprAtFpr:
    def test_separated_gives_full_efficiency(self):
        c = roc(np.arange(10.0), np.arange(20.0, 30.0))
        for target in (1e-5, 0.01, 0.5):
            with warnings.catch_warnings():
                warnings.simplefilter("ignore", ResolutionWarning)
                assert tpr_at_fpr(c, target) == 1.0

    def test_staircase(self):
        s = np.arange(1, 100_001) / 100_000
        d = tpr_at_fpr_detail(roc(s, s), 1e-5)
        assert abs(d.tpr - 1e-5) <= 1e-5
        assert d.fpr <= 1e-5 and d.resolved
        assert d.threshold == 1.0

    def test_never_exceeds_budget(self, rng):
        bkg = rng.normal(size=5000)
        c = roc(bkg, rng.normal(1.0, size=2000))
        for target in (2e-4, 1e-3, 0.013, 0.2):
            d = tpr_at_fpr_detail(c, target)
            assert d.fpr <= target
            # one more event of background would break the budget
            assert np.mean(bkg >= d.threshold) <= target
            assert d.tpr <= d.interpolated + 1e-12

    def test_nonincreasing_as_target_shrinks(self, rng):
        c = roc(rng.normal(size=4000), rng.normal(1.0, size=1000))
        targets = np.geomspace(0.5, 3e-4, 40)
        vals = [tpr_at_fpr(c, t) for t in targets]
        assert all(b <= a for a, b in zip(vals, vals[1:]))

    def test_resolution_warning(self):
        c = roc(np.arange(100.0), np.arange(100.0) + 0.5)
        with pytest.warns(ResolutionWarning):
            d = tpr_at_fpr_detail(c, 1e-5)
        assert not d.resolved and d.fpr == 0.0

    @pytest.mark.parametrize("target", [0.0, 1.0, -0.1])
    def test_target_range(self, target):
        with pytest.raises(ConfigError):
            tpr_at_fpr(roc([0.0], [1.0]), target)


class TestReport:
    def test_per_label_against_background(self, rng):
        scores = np.concatenate([rng.normal(size=300), rng.normal(3, size=50), rng.normal(size=50)])
        labels = ["background"] * 300 + ["A4l"] * 50 + ["LQbtau"] * 50
        rep = metrics_from_scores(scores, labels, target_fpr=0.01)
        assert set(rep.signals) == {"A4l", "LQbtau"}
        assert rep.signals["A4l"].auc > 0.95 and abs(rep.signals["LQbtau"].auc - 0.5) < 0.15
        assert rep.counts == {"background": 300, "A4l": 50, "LQbtau": 50}
        d = rep.to_dict()
        assert d["signals"]["A4l"]["count"] == 50 and "auc" in d["pooled"]

    def test_norms_recalibrate_on_background(self, rng):
        norms = np.concatenate([rng.uniform(1, 3, 200), rng.uniform(10, 20, 20)])
        labels = ["background"] * 200 + ["A4l"] * 20
        rep = metrics_from_norms(norms, labels, target_fpr=0.01)
        assert rep.median == pytest.approx(np.median(norms[:200]))
        assert rep.signals["A4l"].auc == 1.0

    def test_requires_background_and_signal(self):
        with pytest.raises(ConfigError):
            metrics_from_scores([1.0, 2.0], ["A4l", "A4l"])
        with pytest.raises(ConfigError):
            metrics_from_scores([1.0, 2.0], ["background", "background"])


def _one_met_event(tmp_path):
    row = ["0"] * len(COLUMNS)
    row[0] = "100"
    p = tmp_path / "one.csv"
    p.write_text(",".join(COLUMNS) + "\n" + ",".join(row) + "\n")
    return p


class TestDatasetFiles:
    def test_single_met_event_csv(self, tmp_path):
        ds = load_dataset(_one_met_event(tmp_path))
        assert len(ds) == 1 and ds.labels is None
        ev = ds.events[0]
        assert tuple(ev.particles[0]) == (100.0, 0.0, 0.0)
        assert np.count_nonzero(ev.particles) == 1

    def test_rawbin_round_trip_bitwise(self, tmp_path, rng):
        pt = rng.exponential(50, (1000, 19)).astype(np.float32)
        eta = rng.uniform(-5, 5, (1000, 19)).astype(np.float32)
        phi = rng.uniform(-3.14, 3.14, (1000, 19)).astype(np.float32)
        x = np.stack([pt, eta, phi], axis=-1).astype(np.float64)
        labels = list(rng.choice(["background", "A4l", "hToTauNu"], 1000))
        save_rawbin(Dataset(x, labels), tmp_path / "d.bin")
        back = load_rawbin(tmp_path / "d.bin")
        assert back.particles.astype(np.float32).tobytes() == x.astype(np.float32).tobytes()
        assert back.labels == labels

    def test_rawbin_layout(self, tmp_path):
        x = np.zeros((2, 19, 3))
        x[1, 0, 0] = 1.5
        save_rawbin(Dataset(x, ["background", "A4l"]), tmp_path / "d.bin")
        raw = (tmp_path / "d.bin").read_bytes()
        assert raw[:4] == RAW_MAGIC and raw[4:8] == (2).to_bytes(4, "little")
        assert len(raw) == 8 + 2 * (57 * 4 + 1)
        assert raw[8 + 57 * 4] == 0 and raw[-1] == 1
        assert np.frombuffer(raw[8 + 229:8 + 233], "<f4")[0] == 1.5

    def test_unlabeled_rawbin(self, tmp_path):
        save_rawbin(Dataset(np.zeros((3, 19, 3))), tmp_path / "d.bin")
        assert load_rawbin(tmp_path / "d.bin").labels is None

    def test_csv_round_trip(self, tmp_path, small_synthetic):
        save_csv(small_synthetic, tmp_path / "d.csv")
        back = load_csv(tmp_path / "d.csv")
        assert back.labels == small_synthetic.labels
        np.testing.assert_allclose(back.particles, small_synthetic.particles, rtol=1e-8, atol=0)

    def test_phi_out_of_range(self, tmp_path):
        row = ["0"] * len(COLUMNS)
        row[2] = "3.5"
        p = tmp_path / "bad.csv"
        p.write_text(",".join(COLUMNS) + "\n" + ",".join(["0"] * 57) + "\n" + ",".join(row) + "\n")
        with pytest.raises(ParseError) as exc:
            load_csv(p)
        assert exc.value.line == 3

    def test_bad_header_and_row(self, tmp_path):
        p = tmp_path / "h.csv"
        p.write_text("a,b,c\n1,2,3\n")
        with pytest.raises(ParseError) as exc:
            load_csv(p)
        assert exc.value.line == 1
        p.write_text(",".join(COLUMNS) + "\n" + ",".join(["x"] * 57) + "\n")
        with pytest.raises(ParseError) as exc:
            load_csv(p)
        assert exc.value.line == 2

    def test_bad_magic(self, tmp_path):
        p = tmp_path / "d.bin"
        p.write_bytes(b"NOPE" + bytes(4))
        with pytest.raises(FormatError):
            load_rawbin(p)

    def test_truncated_payload(self, tmp_path):
        save_rawbin(Dataset(np.zeros((3, 19, 3))), tmp_path / "d.bin")
        raw = (tmp_path / "d.bin").read_bytes()
        (tmp_path / "d.bin").write_bytes(raw[:-5])
        with pytest.raises(FormatError):
            load_rawbin(tmp_path / "d.bin")

    def test_missing_file(self, tmp_path):
        with pytest.raises(DataError):
            load_dataset(tmp_path / "absent.bin")

    def test_label_length_mismatch(self):
        with pytest.raises(DataError):
            Dataset(np.zeros((2, 19, 3)), ["background"])


class TestSynthetic:
    def test_deterministic(self):
        cfg = SyntheticConfig(n_background=200, signals={"A4l": ("four_lepton", 30)})
        a, b = generate_synthetic(cfg, 7), generate_synthetic(cfg, 7)
        assert a.particles.tobytes() == b.particles.tobytes() and a.labels == b.labels
        assert generate_synthetic(cfg, 8).particles.tobytes() != a.particles.tobytes()

    def test_background_only(self):
        ds = generate_synthetic(SyntheticConfig(n_background=150, signals={}), 3)
        assert set(ds.labels) == {"background"} and len(ds) == 150

    def test_lepton_filter(self):
        cfg = SyntheticConfig(n_background=1000, signals={})
        p = generate_synthetic(cfg, 4).particles
        lead = p[:, 1:9, 0].max(axis=1)
        assert np.all(lead >= np.float32(cfg.lepton_threshold))

    def test_four_lepton_shift(self):
        cfg = SyntheticConfig(n_background=500, signals={"A4l": ("four_lepton", 500)})
        ds = generate_synthetic(cfg, 5)
        lab = ds.label_array()
        n_lep = (ds.particles[:, 1:9, 0] > 0).sum(axis=1)
        assert np.all(n_lep[lab == "A4l"] == 4)
        floor = cfg.lepton_threshold + cfg.shift_sigma * cfg.lepton_pt_scale
        assert np.all(ds.particles[lab == "A4l", 1:9, 0].max(axis=1) >= np.float32(floor))

    def test_survives_rawbin(self, tmp_path):
        ds = generate_synthetic(SyntheticConfig(n_background=100, signals={"x": ("high_met", 10)}), 9)
        save_rawbin(Dataset(ds.particles, None), tmp_path / "s.bin")
        assert load_rawbin(tmp_path / "s.bin").particles.tobytes() == ds.particles.tobytes()

    def test_unknown_kind(self):
        with pytest.raises(DataError):
            generate_synthetic(SyntheticConfig(n_background=1, signals={"x": ("nope", 1)}), 0)
