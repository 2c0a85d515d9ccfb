import numpy as np
import pytest

from avssl import augment as A
from avssl.container import ContainerError
from avssl.data import (
    DataConfig,
    DatasetError,
    generate_dataset,
    generate_sample,
    load_dataset,
    sample_batch,
    save_dataset,
    steps_per_epoch,
)

SMALL = DataConfig(n_classes=2, instances_per_class=4, test_fraction=0.25)


@pytest.fixture(scope="module")
def small_ds():
    return generate_dataset(SMALL, seed=7)


def _dft_peak_slope(w, sr, n_fft=1024, hop=128, max_bin=80):
    """Slope (Hz/s) of a line fit to the per-frame spectral peak, via a direct DFT."""
    n = np.arange(n_fft)
    win = 0.5 - 0.5 * np.cos(2 * np.pi * n / n_fft)
    basis = np.exp(-2j * np.pi * np.outer(np.arange(max_bin), n) / n_fft)
    times, freqs = [], []
    for start in range(0, len(w) - n_fft + 1, hop):
        mag = np.abs(basis @ (w[start : start + n_fft] * win))
        k = int(np.argmax(mag[1:-1])) + 1
        a, b, c = np.log(mag[k - 1 : k + 2] + 1e-12)
        times.append((start + n_fft / 2) / sr)
        freqs.append((k + 0.5 * (a - c) / (a - 2 * b + c)) * sr / n_fft)
    return np.polyfit(times, freqs, 1)[0]


class TestGenerate:
    def test_deterministic_bytes(self, tmp_path):
        generate_dataset(SMALL, seed=7, out_dir=tmp_path / "a")
        generate_dataset(SMALL, seed=7, out_dir=tmp_path / "b")
        for name in ("manifest.json", "train.avd", "test.avd"):
            assert (tmp_path / "a" / name).read_bytes() == (tmp_path / "b" / name).read_bytes()

    def test_value_ranges_and_shapes(self, small_ds):
        for s in small_ds.splits["train"]:
            assert s.video.shape == (128, 16, 16, 1)
            assert s.waveform.shape == (16384,)
            assert 0.0 <= s.video.min() and s.video.max() <= 1.0
            assert -1.0 <= s.waveform.min() and s.waveform.max() <= 1.0

    @pytest.mark.parametrize("iid", [0, 5, 9, 15])
    def test_reversed_waveform_negates_chirp_slope(self, iid):
        # the slow chirp on its own; the per-note glide is covered below
        cfg = DataConfig(n_classes=2, instances_per_class=8, glide_octaves=0.0)
        sample, params = generate_sample(cfg, 7, iid)
        w = sample.waveform.astype(np.float64)
        fwd = _dft_peak_slope(w, cfg.sample_rate)
        bwd = _dft_peak_slope(w[::-1].copy(), cfg.sample_rate)
        assert fwd == pytest.approx(params["chirp_slope"], rel=0.05)
        assert bwd == pytest.approx(-params["chirp_slope"], rel=0.05)

    @pytest.mark.parametrize("iid", [0, 9])
    def test_note_glide_rises_forward_and_falls_reversed(self, iid):
        cfg = DataConfig(n_classes=2, instances_per_class=8)
        w = generate_sample(cfg, 7, iid)[0].waveform.astype(np.float64)

        def glide_score(x, n_fft=256, hop=32, max_bin=64):
            n = np.arange(n_fft)
            win = 0.5 - 0.5 * np.cos(2 * np.pi * n / n_fft)
            basis = np.exp(-2j * np.pi * np.outer(np.arange(max_bin), n) / n_fft)
            mags = np.array([np.abs(basis @ (x[i : i + n_fft] * win)) for i in range(0, len(x) - n_fft + 1, hop)])
            peak, energy = mags.argmax(axis=1), mags.max(axis=1)
            loud = np.minimum(energy[1:], energy[:-1]) > np.median(energy)
            return np.sign(np.diff(peak))[loud].sum()

        assert glide_score(w) > 0
        assert glide_score(w[::-1].copy()) < 0

    def test_same_instance_clips_correlate_more(self):
        ds = generate_dataset(DataConfig(), seed=3)
        samples = ds.splits["train"]
        rng = np.random.default_rng(0)

        def clip(s):
            start = rng.integers(0, 128 - 16 + 1)
            return s.video[start : start + 16].astype(np.float64).ravel()

        wins = 0
        for _ in range(50):
            i, j = rng.choice(len(samples), 2, replace=False)
            a1, a2, b = clip(samples[i]), clip(samples[i]), clip(samples[j])
            wins += np.corrcoef(a1, a2)[0, 1] > np.corrcoef(a1, b)[0, 1]
        assert wins / 50 >= 0.95

    def test_invalid_counts(self):
        with pytest.raises(DatasetError):
            generate_dataset(DataConfig(n_classes=1), seed=0)
        with pytest.raises(DatasetError):
            generate_dataset(DataConfig(instances_per_class=1), seed=0)
        with pytest.raises(DatasetError):
            generate_dataset(DataConfig(frames=64), seed=0)

    def test_splits_disjoint_and_cover(self, small_ds):
        train = set(small_ds.manifest["splits"]["train"])
        test = set(small_ds.manifest["splits"]["test"])
        assert not train & test
        assert train | test == set(range(8))


class TestPersistence:
    def test_round_trip(self, small_ds, tmp_path):
        save_dataset(small_ds, tmp_path)
        assert load_dataset(tmp_path) == small_ds

    def test_split_sizes(self, small_ds, tmp_path):
        save_dataset(small_ds, tmp_path)
        loaded = load_dataset(tmp_path)
        for name in ("train", "test"):
            assert len(loaded.splits[name]) == small_ds.manifest["counts"][name]

    def test_truncated_file(self, small_ds, tmp_path):
        save_dataset(small_ds, tmp_path)
        path = tmp_path / "train.avd"
        path.write_bytes(path.read_bytes()[:-100])
        with pytest.raises(ContainerError):
            load_dataset(tmp_path)

    def test_corrupted_payload(self, small_ds, tmp_path):
        save_dataset(small_ds, tmp_path)
        path = tmp_path / "test.avd"
        raw = bytearray(path.read_bytes())
        raw[-5] ^= 0xFF
        path.write_bytes(bytes(raw))
        with pytest.raises(ContainerError, match="checksum"):
            load_dataset(tmp_path)

    def test_version_mismatch(self, small_ds, tmp_path):
        save_dataset(small_ds, tmp_path)
        mf = tmp_path / "manifest.json"
        mf.write_text(mf.read_text().replace('"version": 1', '"version": 99'))
        with pytest.raises(DatasetError, match="version"):
            load_dataset(tmp_path)

    def test_manipulated_dataset_round_trips(self, small_ds, tmp_path):
        aug = A.augment_dataset(small_ds, "t", seed=1)
        save_dataset(aug, tmp_path)
        assert load_dataset(tmp_path) == aug


class TestBatching:
    def test_epoch_covers_split(self):
        ds = generate_dataset(DataConfig(n_classes=2, instances_per_class=8), seed=0)
        n = len(ds.splits["train"])
        ids = []
        for step in range(steps_per_epoch(n, 3)):
            ids += [s.instance_id for s in sample_batch(ds, "train", 3, seed=1, epoch=0, step=step)]
        assert sorted(ids) == ds.manifest["splits"]["train"]

    def test_same_seed_same_sequence(self, small_ds):
        a = [s.instance_id for s in sample_batch(small_ds, "train", 2, seed=4, epoch=3, step=1)]
        b = [s.instance_id for s in sample_batch(small_ds, "train", 2, seed=4, epoch=3, step=1)]
        assert a == b

    def test_no_repeats_within_batch(self, small_ds):
        for epoch in range(5):
            ids = [s.instance_id for s in sample_batch(small_ds, "train", 6, seed=0, epoch=epoch)]
            assert len(set(ids)) == len(ids)

    def test_batch_larger_than_split(self, small_ds):
        with pytest.raises(DatasetError):
            sample_batch(small_ds, "test", 3, seed=0)
