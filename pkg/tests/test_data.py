import numpy as np
import pytest
from PIL import Image
from scipy.stats import ks_2samp

from causaldg.data import (
    ImageDataset,
    SyntheticSpec,
    generate_synthetic,
    load_manifest,
    make_batches,
    save_dataset,
    split_train_val,
)
from causaldg.errors import ContractError, IngestionError


def small_spec(**kwargs):
    defaults = dict(n_domains=2, n_classes=3, image_size=32, seed=0)
    defaults.update(kwargs)
    return SyntheticSpec(**defaults)


class TestManifest:
    def test_round_trip_counts_and_labels(self, tmp_path):
        ds = generate_synthetic(small_spec(), 10, "ID")
        manifest = save_dataset(ds, tmp_path)
        loaded = load_manifest(manifest, image_size=32)
        assert len(loaded) == 10
        assert loaded.n_domains == ds.n_domains
        assert loaded.class_names == ds.class_names
        assert np.array_equal(loaded.disease_labels, ds.disease_labels)
        assert np.array_equal(loaded.domain_labels, ds.domain_labels)

    def test_empty_manifest_is_valid(self, tmp_path):
        path = tmp_path / "manifest.csv"
        path.write_text("image_path,no_finding,finding_a,domain\n")
        loaded = load_manifest(path, image_size=16)
        assert len(loaded) == 0
        assert loaded.class_names == ["no_finding", "finding_a"]

    def test_unknown_finding_column_rejected(self, tmp_path):
        path = tmp_path / "manifest.csv"
        path.write_text("image_path,mystery_column,domain\n")
        with pytest.raises(IngestionError, match="mystery_column"):
            load_manifest(path, image_size=16, class_names=["no_finding", "finding_a"])

    def test_missing_image_names_row(self, tmp_path):
        path = tmp_path / "manifest.csv"
        path.write_text("image_path,no_finding,domain\nghost.png,1,site_0\n")
        with pytest.raises(IngestionError, match="row 2"):
            load_manifest(path, image_size=16)

    def test_non_binary_label_names_row(self, tmp_path):
        img = tmp_path / "x.png"
        Image.fromarray(np.zeros((8, 8), dtype=np.uint8)).save(img)
        path = tmp_path / "manifest.csv"
        path.write_text(f"image_path,no_finding,domain\n{img},2,site_0\n")
        with pytest.raises(IngestionError, match="row 2"):
            load_manifest(path, image_size=16)

    def test_empty_supervision_rejected(self, tmp_path):
        img = tmp_path / "x.png"
        Image.fromarray(np.zeros((8, 8), dtype=np.uint8)).save(img)
        path = tmp_path / "manifest.csv"
        path.write_text(f"image_path,no_finding,finding_a,domain\n{img},0,0,site_0\n")
        with pytest.raises(IngestionError, match="row 2"):
            load_manifest(path, image_size=16)

    def test_images_scaled_to_unit_interval(self, tmp_path):
        ds = generate_synthetic(small_spec(), 4, "ID")
        manifest = save_dataset(ds, tmp_path)
        loaded = load_manifest(manifest, image_size=32)
        assert loaded.images.min() >= 0.0
        assert loaded.images.max() <= 1.0
        assert loaded.images.max() == pytest.approx(1.0)  # contrast stretched

    def test_domain_ids_contiguous_sorted(self, tmp_path):
        img = tmp_path / "x.png"
        Image.fromarray(np.full((8, 8), 128, dtype=np.uint8)).save(img)
        path = tmp_path / "manifest.csv"
        path.write_text(
            f"image_path,no_finding,domain\n{img},1,zeta\n{img},1,alpha\n{img},1,zeta\n"
        )
        loaded = load_manifest(path, image_size=16)
        assert loaded.domain_names == ["alpha", "zeta"]
        assert list(loaded.domain_labels) == [1, 0, 1]


class TestSynthetic:
    def test_fixed_seed_bitwise_identical(self):
        a = generate_synthetic(small_spec(), 20, "ID")
        b = generate_synthetic(small_spec(), 20, "ID")
        assert np.array_equal(a.images, b.images)
        assert np.array_equal(a.disease_labels, b.disease_labels)
        assert np.array_equal(a.domain_labels, b.domain_labels)

    def test_roles_differ(self):
        a = generate_synthetic(small_spec(), 20, "ID")
        b = generate_synthetic(small_spec(), 20, "OOD")
        assert not np.array_equal(a.images, b.images)
        assert b.domain_names == ["heldout"]
        assert set(b.domain_labels) == {0}

    def test_labels_have_supervision(self):
        ds = generate_synthetic(small_spec(), 200, "ID")
        assert (ds.disease_labels.sum(axis=1) >= 1).all()
        # no-finding set exactly when no finding fires
        no_finding = ds.disease_labels[:, 0] == 1
        assert np.array_equal(no_finding, ds.disease_labels[:, 1:].sum(axis=1) == 0)

    def test_full_correlation_is_deterministic_token(self):
        ds = generate_synthetic(small_spec(correlation_strength=1.0), 300, "ID")
        first = np.argmax(ds.disease_labels[:, 1:] == 1, axis=1) + 1
        first[ds.disease_labels[:, 1:].sum(axis=1) == 0] = 0
        assert np.array_equal(ds.domain_labels, first % 2)

    def test_zero_correlation_has_no_mutual_information(self):
        ds = generate_synthetic(small_spec(correlation_strength=0.0, seed=3), 4000, "ID")
        first = np.argmax(ds.disease_labels[:, 1:] == 1, axis=1) + 1
        first[ds.disease_labels[:, 1:].sum(axis=1) == 0] = 0
        joint = np.zeros((3, 2))
        for f, d in zip(first, ds.domain_labels):
            joint[f, d] += 1
        joint /= joint.sum()
        px, py = joint.sum(axis=1, keepdims=True), joint.sum(axis=0, keepdims=True)
        with np.errstate(divide="ignore", invalid="ignore"):
            terms = joint * np.log(joint / (px * py))
        mi = np.nansum(terms)
        assert mi < 0.01  # nats; estimation bias is ~(|X|-1)(|Y|-1)/(2N)

    def test_motif_distribution_domain_invariant(self):
        # Pixels at the finding_a anchor (always inside the motif despite
        # jitter) must be identically distributed across domains.
        spec = small_spec(correlation_strength=0.5, seed=4, image_size=64)
        ds = generate_synthetic(spec, 600, "ID")
        cy, cx = int(0.5 * 64), int(0.3 * 64)
        positives = ds.disease_labels[:, 1] == 1
        pix = {
            d: ds.images[positives & (ds.domain_labels == d), 0, cy - 1 : cy + 2, cx - 1 : cx + 2].ravel()
            for d in (0, 1)
        }
        assert min(len(p) for p in pix.values()) > 50
        result = ks_2samp(pix[0], pix[1])
        assert result.pvalue > 0.01

    def test_domain_marker_differs_across_domains(self):
        spec = small_spec(correlation_strength=0.0, seed=5)
        ds = generate_synthetic(spec, 200, "ID")
        # domain 0 marker: top-left corner block; domain 1: top-right
        tl = ds.images[:, 0, :4, :4].mean(axis=(1, 2))
        tr = ds.images[:, 0, :4, -4:].mean(axis=(1, 2))
        d0, d1 = ds.domain_labels == 0, ds.domain_labels == 1
        assert tl[d0].mean() > 0.9 and tr[d1].mean() > 0.9
        assert tl[d1].mean() < 0.8 and tr[d0].mean() < 0.8


class TestSampler:
    def test_small_batch_size_rejected(self):
        ds = generate_synthetic(small_spec(), 10, "ID")
        with pytest.raises(ContractError):
            list(make_batches(ds, 3, seed=0))

    def test_balanced_dataset_exact_domain_split(self):
        images = np.zeros((8, 1, 8, 8), dtype=np.float32)
        labels = np.array([[1, 0], [0, 1]] * 4)
        domains = np.array([0, 0, 0, 0, 1, 1, 1, 1])
        ds = ImageDataset(images, labels, domains, [str(i) for i in range(8)], ["c0", "c1"], ["d0", "d1"])
        for seed in range(5):
            for idx in make_batches(ds, 4, seed=seed):
                counts = np.bincount(ds.domain_labels[idx], minlength=2)
                assert (counts == 2).all()

    def test_smaller_than_batch_size_single_truncated_batch(self):
        ds = generate_synthetic(small_spec(), 5, "ID")
        batches = list(make_batches(ds, 8, seed=0))
        assert len(batches) == 1
        assert len(batches[0]) == 5

    def test_epoch_partitions_dataset(self):
        ds = generate_synthetic(small_spec(), 103, "ID")
        seen = np.zeros(len(ds), dtype=int)
        for idx in make_batches(ds, 10, seed=7):
            seen[idx] += 1
        assert (seen == 1).all()

    def test_fixed_seed_reproduces_batch_order(self):
        ds = generate_synthetic(small_spec(), 60, "ID")
        a = [idx.tolist() for idx in make_batches(ds, 10, seed=3)]
        b = [idx.tolist() for idx in make_batches(ds, 10, seed=3)]
        c = [idx.tolist() for idx in make_batches(ds, 10, seed=4)]
        assert a == b
        assert a != c

    def test_prevalence_audit_over_200_batches(self):
        spec = SyntheticSpec(
            n_domains=2, n_classes=3, label_prevalence=(0.5, 0.45, 0.25),
            correlation_strength=0.5, seed=12,
        )
        ds = generate_synthetic(spec, 800, "ID")
        prev = ds.disease_labels.mean(axis=0)
        n_full = 0
        for epoch in range(10):
            for idx in make_batches(ds, 40, seed=1000 + epoch):
                if len(idx) < 40:
                    continue
                rate = ds.disease_labels[idx].mean(axis=0)
                assert (np.abs(rate - prev) / prev <= 0.20).all()
                n_full += 1
        assert n_full >= 200


class TestSplit:
    def test_exact_counts_and_stratification(self):
        ds = generate_synthetic(small_spec(seed=9), 500, "ID")
        train, val = split_train_val(ds, 0.2, seed=0)
        assert len(val) == 100
        assert len(train) == 400
        for d in range(ds.n_domains):
            total = (ds.domain_labels == d).sum()
            in_val = (val.domain_labels == d).sum()
            assert abs(in_val - 0.2 * total) <= 1

    def test_split_is_a_partition(self):
        ds = generate_synthetic(small_spec(seed=10), 100, "ID")
        train, val = split_train_val(ds, 0.2, seed=1)
        ids = sorted(train.sample_ids + val.sample_ids)
        assert ids == sorted(ds.sample_ids)
