import hashlib

import numpy as np
import pytest

from reconscan.data_pipeline import Label, read_scan_manifest
from reconscan.errors import RegionError, SpecError
from reconscan import phantom as ph


class TestGenerateHealthy:
    def test_seed_determinism(self):
        a = ph.generate_healthy(ph.PhantomSpec(seed=7))
        b = ph.generate_healthy(ph.PhantomSpec(seed=7))
        np.testing.assert_array_equal(a.voxels, b.voxels)
        assert a.label == Label.HEALTHY

    def test_different_seeds_differ(self):
        a = ph.generate_healthy(ph.PhantomSpec(seed=1))
        b = ph.generate_healthy(ph.PhantomSpec(seed=2))
        assert not np.array_equal(a.voxels, b.voxels)

    def test_noiseless_mirror_symmetry(self):
        base = ph.base_field(ph.PhantomSpec(noise_sigma=0.0))
        assert np.abs(base - base[::-1, :, :]).max() <= 1e-6

    def test_small_extent_rejected(self):
        with pytest.raises(SpecError):
            ph.generate_healthy(ph.PhantomSpec(extents=(16, 64, 64)))

    def test_excess_noise_rejected(self):
        with pytest.raises(SpecError):
            ph.generate_healthy(ph.PhantomSpec(noise_sigma=0.5))

    def test_checksum_stability_across_writes(self, tmp_path):
        from reconscan.data_pipeline import save_volume

        for name in ("one.npy", "two.npy"):
            save_volume(ph.generate_healthy(ph.PhantomSpec(seed=11)), tmp_path / name)
        digests = {
            hashlib.sha256((tmp_path / n).read_bytes()).hexdigest()
            for n in ("one.npy", "two.npy")
        }
        assert len(digests) == 1


def default_region():
    return ph.default_anomaly_region((64, 64, 64))


class TestInjectAnomaly:
    @pytest.fixture
    def healthy(self):
        return ph.generate_healthy(ph.PhantomSpec(seed=3))

    @pytest.mark.parametrize("kind", list(ph.AnomalyKind))
    def test_locality(self, healthy, kind):
        region = default_region()
        anomaly = ph.AnomalySpec(kind=kind, magnitude=0.5, region=region)
        modified = ph.inject_anomaly(healthy, anomaly)
        assert modified.label == Label.ANOMALOUS
        mask = np.zeros(healthy.shape, dtype=bool)
        mask[region.slices()] = True
        np.testing.assert_array_equal(
            modified.voxels[~mask], healthy.voxels[~mask]
        )
        assert np.abs(modified.voxels[mask] - healthy.voxels[mask]).mean() > 0

    @pytest.mark.parametrize("kind", list(ph.AnomalyKind))
    def test_magnitude_monotonicity(self, healthy, kind):
        region = default_region()
        deltas = []
        for magnitude in (0.2, 0.6):
            modified = ph.inject_anomaly(
                healthy, ph.AnomalySpec(kind=kind, magnitude=magnitude, region=region)
            )
            deltas.append(
                np.abs(
                    modified.voxels[region.slices()].astype(np.float64)
                    - healthy.voxels[region.slices()].astype(np.float64)
                ).mean()
            )
        assert deltas[0] < deltas[1]

    def test_region_beyond_grid(self, healthy):
        region = ph.Region((40, 40, 40), (80, 80, 80))
        with pytest.raises(RegionError):
            ph.inject_anomaly(
                healthy,
                ph.AnomalySpec(ph.AnomalyKind.CAVITY_ENLARGE, 0.5, region),
            )

    def test_zero_magnitude_rejected(self, healthy):
        with pytest.raises(SpecError):
            ph.inject_anomaly(
                healthy,
                ph.AnomalySpec(ph.AnomalyKind.CAVITY_ENLARGE, 0.0, default_region()),
            )

    def test_anomalous_input_rejected(self, healthy):
        anomaly = ph.AnomalySpec(ph.AnomalyKind.CAVITY_ENLARGE, 0.5, default_region())
        modified = ph.inject_anomaly(healthy, anomaly)
        with pytest.raises(SpecError):
            ph.inject_anomaly(modified, anomaly)


class TestCohort:
    def test_manifest_and_files(self, tmp_path):
        config = ph.CohortConfig(
            extent=32,
            n_train_healthy=2,
            n_test_healthy=1,
            n_test_anomalous=1,
            scans_per_subject=2,
            seed=4,
        )
        manifest = ph.generate_cohort(config, tmp_path)
        entries = read_scan_manifest(manifest)
        assert len(entries) == 8
        labels = {meta.scan_id: meta.label for _, meta in entries}
        assert sum(1 for v in labels.values() if v == Label.ANOMALOUS) == 2
        for path, _ in entries:
            assert path.exists()
        assert (tmp_path / "cohort.json").exists()

    def test_cohort_determinism(self, tmp_path):
        config = ph.CohortConfig(
            extent=32, n_train_healthy=1, n_test_healthy=1, n_test_anomalous=1,
            scans_per_subject=1, seed=9,
        )
        ph.generate_cohort(config, tmp_path / "a")
        ph.generate_cohort(config, tmp_path / "b")
        for name in ("train-h00-t0.npy", "test-a00-t0.npy"):
            assert (tmp_path / "a" / name).read_bytes() == (
                tmp_path / "b" / name
            ).read_bytes()
