import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from bilevel_aug import datasynth as DS


def small_spec(**kw):
    base = dict(samples_per_class=12, image_size=16, seed=5)
    base.update(kw)
    return DS.SynthSpec(**base)


class TestGenerate:
    def test_same_seed_bit_identical(self):
        a = DS.generate(small_spec())
        b = DS.generate(small_spec())
        assert a.images.tobytes() == b.images.tobytes()
        assert np.array_equal(a.labels, b.labels)
        assert np.array_equal(a.pools, b.pools)

    def test_different_seed_differs(self):
        a = DS.generate(small_spec(seed=1))
        b = DS.generate(small_spec(seed=2))
        assert a.images.tobytes() != b.images.tobytes()

    def test_label_balance_and_ranges(self):
        ds = DS.generate(small_spec())
        counts = np.bincount(ds.labels)
        assert np.all(counts == 12)
        assert ds.images.dtype == np.float32
        assert ds.images.min() >= 0 and ds.images.max() <= 1

    def test_zero_samples_rejected(self):
        with pytest.raises(ValueError):
            DS.SynthSpec(samples_per_class=0)

    def test_metadata_records_shift(self):
        ds = DS.generate(small_spec(shift=0.7))
        assert ds.meta["spec"]["shift"] == 0.7
        assert ds.meta["test_pool"]["rot_max_deg"] == pytest.approx(24.0 * 0.7)

    def test_zero_shift_pools_exchangeable(self):
        # permutation test on the mean-pixel statistic
        spec = small_spec(shift=0.0, samples_per_class=40, seed=3)
        spec.test_pool = spec.train_pool
        ds = DS.generate(spec)
        stat = ds.images.reshape(len(ds), -1).mean(axis=1)
        a, b = stat[ds.pools == 0], stat[ds.pools == 1]
        observed = abs(a.mean() - b.mean())
        rng = np.random.default_rng(0)
        merged = np.concatenate([a, b])
        null = []
        for _ in range(2000):
            rng.shuffle(merged)
            null.append(abs(merged[: len(a)].mean() - merged[len(a) :].mean()))
        p = np.mean(np.asarray(null) >= observed)
        assert p > 0.01, f"pools distinguishable at p={p}"

    def test_full_shift_pools_differ(self):
        ds = DS.generate(small_spec(shift=1.0, samples_per_class=40, seed=3))
        stat = ds.images.reshape(len(ds), -1).mean(axis=1)
        a, b = stat[ds.pools == 0], stat[ds.pools == 1]
        # shifted test pool is visibly darker on average
        assert abs(a.mean() - b.mean()) > 0.02

    def test_no_color_class_leakage(self):
        ds = DS.generate(small_spec(samples_per_class=50, seed=11))
        train = ds.pools == 0
        hues = []
        for c in range(4):
            imgs = ds.images[train & (ds.labels == c)]
            # crude stain hue: circular mean of per-image dominant chroma angle
            r, g, b = imgs[:, 0], imgs[:, 1], imgs[:, 2]
            maxc = imgs.max(axis=1)
            minc = imgs.min(axis=1)
            mask = (maxc - minc) > 0.05
            angles = np.arctan2(
                np.sqrt(3) * (g - b), 2 * r - g - b
            )  # hue angle proxy
            mean_vec = np.array(
                [np.cos(angles[mask]).mean(), np.sin(angles[mask]).mean()]
            )
            hues.append(np.arctan2(mean_vec[1], mean_vec[0]))
        hues = np.unwrap(np.asarray(hues))
        spread = hues.max() - hues.min()
        width = 2 * DS.PoolSpec().hue_jitter
        assert spread < width, f"class hue spread {spread:.3f} exceeds jitter width"


class TestPpmAndFolderIO:
    def test_ppm_round_trip_exact(self, tmp_path):
        rng = np.random.default_rng(0)
        img = rng.uniform(0, 1, (3, 9, 7)).astype(np.float32)
        p = tmp_path / "x.ppm"
        DS.write_ppm(p, img)
        back = DS.read_ppm(p)
        DS.write_ppm(tmp_path / "y.ppm", back)
        assert (tmp_path / "x.ppm").read_bytes() == (tmp_path / "y.ppm").read_bytes()
        assert np.max(np.abs(back - img)) <= 0.5 / 255

    def test_save_load_folder(self, tmp_path):
        ds = DS.generate(small_spec(samples_per_class=3))
        DS.save_folder(ds, tmp_path / "data")
        loaded = DS.load_folder(tmp_path / "data", image_size=16)
        assert len(loaded) == len(ds)
        assert loaded.class_names == ds.class_names
        assert np.array_equal(np.bincount(loaded.labels), np.bincount(ds.labels))
        assert (tmp_path / "data" / "metadata.json").exists()

    def test_two_classes_three_images(self, tmp_path):
        rng = np.random.default_rng(1)
        for cls in ("benign", "malignant"):
            d = tmp_path / "set" / cls
            d.mkdir(parents=True)
            for i in range(3):
                DS.write_ppm(d / f"{i}.ppm", rng.uniform(0, 1, (3, 16, 16)))
        ds = DS.load_folder(tmp_path / "set", image_size=16)
        assert len(ds) == 6
        assert sorted(np.unique(ds.labels)) == [0, 1]
        assert ds.class_names == ["benign", "malignant"]

    def test_corrupted_file_skipped_with_warning(self, tmp_path, caplog):
        rng = np.random.default_rng(2)
        d = tmp_path / "set" / "only"
        d.mkdir(parents=True)
        for i in range(5):
            DS.write_ppm(d / f"{i}.ppm", rng.uniform(0, 1, (3, 8, 8)))
        (d / "broken.png").write_bytes(b"not an image")
        with caplog.at_level("WARNING"):
            ds = DS.load_folder(tmp_path / "set", image_size=8)
        assert len(ds) == 5
        assert any("broken.png" in r.message for r in caplog.records)
        assert ds.meta["skipped"]

    def test_empty_class_rejected(self, tmp_path):
        (tmp_path / "set" / "empty").mkdir(parents=True)
        with pytest.raises(ValueError, match="no readable images"):
            DS.load_folder(tmp_path / "set")

    def test_resize_bilinear(self, tmp_path):
        img = np.zeros((3, 8, 8), dtype=np.float32)
        img[:, 2:6, 2:6] = 1.0
        d = tmp_path / "set" / "a"
        d.mkdir(parents=True)
        DS.write_ppm(d / "0.ppm", img)
        ds = DS.load_folder(tmp_path / "set", image_size=4)
        assert ds.images.shape == (1, 3, 4, 4)
        assert ds.images[0].mean() == pytest.approx(img.mean(), abs=0.05)


class TestFolds:
    def test_bach_fractions(self):
        labels = np.repeat(np.arange(4), 25)
        ds = DS.LabeledImageSet(images=np.zeros((100, 3, 4, 4)), labels=labels)
        plan = DS.make_folds(ds, fractions=(0.4, 0.1, 0.5), seed=0)
        assert len(plan) == 5
        for fold in plan:
            assert len(fold["train"]) == 40
            assert len(fold["val"]) == 10
            assert len(fold["test"]) == 50

    def test_disjoint_and_covering(self):
        labels = np.repeat(np.arange(3), 21)
        ds = DS.LabeledImageSet(images=np.zeros((63, 3, 4, 4)), labels=labels)
        plan = DS.make_folds(ds, fractions=(0.6, 0.2, 0.2), seed=1)
        for fold in plan:
            allidx = np.concatenate([fold["train"], fold["val"], fold["test"]])
            assert len(allidx) == 63
            assert len(np.unique(allidx)) == 63

    def test_stratification_within_one_sample(self):
        labels = np.repeat(np.arange(4), 25)
        ds = DS.LabeledImageSet(images=np.zeros((100, 3, 4, 4)), labels=labels)
        plan = DS.make_folds(ds, fractions=(0.4, 0.1, 0.5), seed=2)
        for fold in plan:
            for role, frac in (("train", 0.4), ("val", 0.1), ("test", 0.5)):
                counts = np.bincount(labels[fold[role]], minlength=4)
                assert np.all(np.abs(counts - frac * 25) <= 1)

    def test_two_seeds_same_sizes_different_perm(self):
        labels = np.repeat(np.arange(4), 25)
        ds = DS.LabeledImageSet(images=np.zeros((100, 3, 4, 4)), labels=labels)
        a = DS.make_folds(ds, seed=3)
        b = DS.make_folds(ds, seed=4)
        assert len(a.folds[0]["train"]) == len(b.folds[0]["train"])
        assert not np.array_equal(a.folds[0]["train"], b.folds[0]["train"])

    def test_deterministic(self):
        labels = np.repeat(np.arange(4), 25)
        ds = DS.LabeledImageSet(images=np.zeros((100, 3, 4, 4)), labels=labels)
        a = DS.make_folds(ds, seed=5)
        b = DS.make_folds(ds, seed=5)
        for fa, fb in zip(a, b):
            for role in ("train", "val", "test"):
                assert np.array_equal(fa[role], fb[role])

    def test_pool_tagged_test_role_is_test_pool(self):
        ds = DS.generate(small_spec(samples_per_class=20))
        plan = DS.make_folds(ds, fractions=(0.4, 0.1, 0.5), seed=6)
        for fold in plan:
            assert np.all(ds.pools[fold["test"]] == 1)
            assert np.all(ds.pools[fold["train"]] == 0)
            assert np.all(ds.pools[fold["val"]] == 0)
            allidx = np.concatenate([fold["train"], fold["val"], fold["test"]])
            assert len(np.unique(allidx)) == len(ds)

    def test_too_few_samples_per_class(self):
        labels = np.array([0, 0, 0, 1, 1, 1, 1, 1])
        ds = DS.LabeledImageSet(images=np.zeros((8, 3, 4, 4)), labels=labels)
        with pytest.raises(ValueError, match="fewer samples than folds"):
            DS.make_folds(ds, n_folds=5)

    def test_fraction_sum_validated(self):
        labels = np.repeat(np.arange(2), 10)
        ds = DS.LabeledImageSet(images=np.zeros((20, 3, 4, 4)), labels=labels)
        with pytest.raises(ValueError, match="sum"):
            DS.make_folds(ds, fractions=(0.6, 0.3, 0.3))

    @settings(max_examples=20, deadline=None)
    @given(
        per_class=st.integers(min_value=6, max_value=40),
        seed=st.integers(min_value=0, max_value=10_000),
    )
    def test_fold_invariants_property(self, per_class, seed):
        labels = np.repeat(np.arange(3), per_class)
        ds = DS.LabeledImageSet(
            images=np.zeros((3 * per_class, 3, 2, 2)), labels=labels
        )
        plan = DS.make_folds(ds, fractions=(0.5, 0.2, 0.3), seed=seed)
        for fold in plan:
            allidx = np.concatenate([fold["train"], fold["val"], fold["test"]])
            assert len(allidx) == 3 * per_class
            assert len(np.unique(allidx)) == 3 * per_class
            for role in ("train", "val", "test"):
                assert len(fold[role]) > 0
