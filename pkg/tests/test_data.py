import struct

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st
from sklearn.linear_model import LogisticRegression
from sklearn.model_selection import StratifiedKFold, cross_val_score

from avit.data import (LIVE, SPOOF, DomainDataset, DomainSpec, artifact_pattern, default_domains, few_shot_split,
                       generate_domain, load_dataset, sample_batch, save_dataset)
from avit.errors import ConfigError, FormatError, UsageError
from avit.rng import stream

CLEAN = dict(noise_std=0.0, blur_radius=0.0, brightness=1.0, color_shift=(0.0, 0.0, 0.0))


@pytest.fixture(scope="module")
def domains():
    return [generate_domain(s, 20, seed=3) for s in default_domains()]


class TestGenerator:
    @pytest.mark.parametrize("artifact", ["moire", "frame", "cast"])
    def test_clean_difference_is_artifact(self, artifact):
        spec = DomainSpec("clean", artifact=artifact, **CLEAN)
        ds = generate_domain(spec, 5, seed=0, dtype=np.float64)
        live, spoof = ds.images[ds.labels == LIVE], ds.images[ds.labels == SPOOF]
        np.testing.assert_allclose(spoof - live, np.broadcast_to(artifact_pattern(spec, 32), live.shape),
                                   rtol=0, atol=1e-15)

    def test_same_seed_bit_identical(self):
        spec = default_domains()[1]
        a, b = generate_domain(spec, 10, seed=5), generate_domain(spec, 10, seed=5)
        assert a.images.tobytes() == b.images.tobytes() and (a.labels == b.labels).all()

    def test_different_seed_differs(self):
        spec = default_domains()[0]
        assert not generate_domain(spec, 4, seed=1).equals(generate_domain(spec, 4, seed=2))

    def test_layout_and_range(self):
        ds = generate_domain(default_domains()[3], 7, seed=0)
        assert ds.images.shape == (14, 3, 32, 32) and ds.images.dtype == np.float32
        assert ds.class_counts == (7, 7)
        assert (ds.labels[:7] == LIVE).all() and (ds.labels[7:] == SPOOF).all()
        assert ds.images.min() >= 0.0 and ds.images.max() <= 1.0

    @pytest.mark.parametrize("spec", default_domains(), ids=lambda s: s.domain_id)
    def test_linear_probe_separates_in_domain(self, spec):
        ds = generate_domain(spec, 200, seed=7)
        x = ds.images.reshape(len(ds), -1).astype(np.float64)
        cv = StratifiedKFold(5, shuffle=True, random_state=0)
        acc = cross_val_score(LogisticRegression(max_iter=3000), x, ds.labels, cv=cv)
        assert acc.mean() > 0.95

    @pytest.mark.parametrize("kw", [dict(artifact="glare"), dict(artifact_strength=0.5), dict(brightness=3.0),
                                    dict(color_shift=(0.6, 0, 0)), dict(noise_std=-1.0),
                                    dict(strength_jitter=1.5), dict(color_shift=(0.1, 0.1))])
    def test_invalid_spec(self, kw):
        with pytest.raises(ConfigError):
            DomainSpec("bad", **kw)


class TestSplit:
    def test_five_shot(self):
        ds = generate_domain(default_domains()[0], 200, seed=1)
        split = few_shot_split(ds, 5, seed=0)
        assert len(split.shots) == 10 and len(split.remainder) == 390
        assert split.shots.class_counts == (5, 5)

    def test_zero_shot(self, domains):
        split = few_shot_split(domains[0], 0, seed=0)
        assert len(split.shots) == 0 and len(split.remainder) == len(domains[0])

    def test_deterministic(self, domains):
        a, b = few_shot_split(domains[1], 3, 9), few_shot_split(domains[1], 3, 9)
        assert (a.shot_indices == b.shot_indices).all()

    @settings(max_examples=30, deadline=None)
    @given(st.integers(0, 20), st.integers(0, 2**31 - 1))
    def test_disjoint_and_complete(self, k, seed):
        ds = generate_domain(DomainSpec("p", **CLEAN), 20, seed=0)
        split = few_shot_split(ds, k, seed)
        assert not set(split.shot_indices) & set(split.remainder_indices)
        assert sorted([*split.shot_indices, *split.remainder_indices]) == list(range(len(ds)))

    def test_too_many_shots(self, domains):
        with pytest.raises(UsageError):
            few_shot_split(domains[0], 21, 0)


class TestBatch:
    def test_layout_with_target(self, domains):
        split = few_shot_split(domains[3], 5, 0)
        batch = sample_batch(domains[:3], split, 8, stream(0, "b"))
        assert batch.images.shape == (32, 3, 32, 32)
        assert batch.blocks == ["alpha", "beta", "gamma", "target:delta"]
        for i, name in enumerate(batch.blocks):
            block = slice(8 * i, 8 * i + 8)
            assert (batch.domain_ids[block] == name).all()
            assert batch.labels[block].tolist() == [1] * 4 + [0] * 4

    def test_one_shot_repeats(self, domains):
        split = few_shot_split(domains[3], 1, 0)
        batch = sample_batch(domains[:3], split, 8, stream(0, "b"), flip=False)
        target = batch.images[24:]
        assert all((t == split.shots.images[0]).all() for t in target[:4])
        assert all((t == split.shots.images[1]).all() for t in target[4:])

    def test_zero_shot_has_sources_only(self, domains):
        batch = sample_batch(domains[:3], few_shot_split(domains[3], 0, 0), 8, stream(0, "b"))
        assert batch.images.shape[0] == 24 and len(batch.blocks) == 3

    def test_no_flip_draws_dataset_images(self, domains):
        batch = sample_batch(domains[:1], None, 4, stream(1, "b"), flip=False)
        pool = {img.tobytes() for img in domains[0].images}
        assert all(img.tobytes() in pool for img in batch.images)

    def test_odd_batch_rejected(self, domains):
        with pytest.raises(ConfigError):
            sample_batch(domains[:1], None, 3, stream(0))


class TestFileFormat:
    def test_roundtrip(self, tmp_path, domains):
        save_dataset(tmp_path / "a.avitdata", domains[0])
        assert load_dataset(tmp_path / "a.avitdata").equals(domains[0])

    def test_header_layout(self, tmp_path, domains):
        save_dataset(tmp_path / "a.avitdata", domains[0])
        buf = (tmp_path / "a.avitdata").read_bytes()
        assert buf[:8] == b"AVITDATA"
        assert struct.unpack_from("<II", buf, 8) == (1, 5) and buf[16:21] == b"alpha"
        assert struct.unpack_from("<BIIII", buf, 21) == (1, 40, 3, 32, 32)

    @pytest.mark.parametrize("cut", [3, 12, 30, -7])
    def test_truncated(self, tmp_path, domains, cut):
        save_dataset(tmp_path / "a.avitdata", domains[0])
        data = (tmp_path / "a.avitdata").read_bytes()
        (tmp_path / "b.avitdata").write_bytes(data[:cut])
        with pytest.raises(FormatError):
            load_dataset(tmp_path / "b.avitdata")

    def test_bad_label_byte(self, tmp_path):
        ds = DomainDataset("x", np.zeros((2, 3, 4, 4), dtype=np.float32), np.array([1, 0]))
        save_dataset(tmp_path / "x.avitdata", ds)
        buf = bytearray((tmp_path / "x.avitdata").read_bytes())
        buf[8 + 8 + 1 + 17] = 7
        (tmp_path / "x.avitdata").write_bytes(bytes(buf))
        with pytest.raises(FormatError):
            load_dataset(tmp_path / "x.avitdata")

    def test_widening_is_exact(self, tmp_path, domains):
        save_dataset(tmp_path / "a.avitdata", domains[2])
        wide = load_dataset(tmp_path / "a.avitdata", dtype=np.float64)
        assert wide.images.dtype == np.float64
        assert (wide.images.astype(np.float32) == domains[2].images).all()
        np.testing.assert_array_equal(wide.images, domains[2].images.astype(np.float64))
