import gzip
import struct

import pytest
import numpy as np

from services.task_service import SequenceDataset, TaskService, task_service
from services.numerics import Rng
from schemas.errors import BadMagicError, CountMismatchError, DatasetFormatError, TruncatedFileError
from schemas.models import TaskConfig


def write_idx(path, magic, dims, body, compress=False):
    data = struct.pack(">I", magic) + struct.pack(">" + "I" * len(dims), *dims) + bytes(body)
    opener = gzip.open if compress else open
    with opener(path, "wb") as f:
        f.write(data)
    return str(path)


def fake_mnist(tmp_path, n=4, rows=28, cols=28, labels=None, compress=False, suffix=""):
    images = (np.arange(n * rows * cols) % 256).astype(np.uint8)
    labels = np.arange(n) % 10 if labels is None else np.asarray(labels)
    ext = ".gz" if compress else ""
    img = write_idx(tmp_path / f"images{suffix}{ext}", 0x803, (n, rows, cols), images.tobytes(), compress)
    lbl = write_idx(tmp_path / f"labels{suffix}{ext}", 0x801, (len(labels),), labels.astype(np.uint8).tobytes(), compress)
    return img, lbl


class TestCopyFirstInput:
    def setup_method(self):
        self.tasks = TaskService()

    def test_layout(self):
        ds = self.tasks.gen_copy_first_input(Rng(0, "data"), 16, 12)
        assert ds.inputs.shape == (16, 12, 2)
        assert ds.targets.shape == (16, 1)
        assert np.all(ds.inputs[:, 0, 1] == 1.0)
        assert np.all(ds.inputs[:, 1:, 1] == 0.0)
        assert np.array_equal(ds.targets[:, 0], ds.inputs[:, 0, 0])
        assert not ds.classification

    def test_deterministic(self):
        a = self.tasks.gen_copy_first_input(Rng(7, "data"), 8, 5)
        b = self.tasks.gen_copy_first_input(Rng(7, "data"), 8, 5)
        assert np.array_equal(a.inputs, b.inputs)

    def test_zero_noise(self):
        ds = self.tasks.gen_copy_first_input(Rng(1, "data"), 4, 6, noise_sigma=0.0)
        assert np.all(ds.inputs[:, 1:, 0] == 0.0)

    def test_zero_predictor_baseline(self):
        ds = self.tasks.gen_copy_first_input(Rng(2, "data"), 20000, 2)
        assert np.mean(ds.targets.astype(np.float64) ** 2) == pytest.approx(1.0, abs=0.05)

    def test_single_step(self):
        ds = self.tasks.gen_copy_first_input(Rng(0, "data"), 3, 1)
        assert ds.length == 1

    def test_invalid_size(self):
        with pytest.raises(ValueError):
            self.tasks.gen_copy_first_input(Rng(0, "data"), 0, 5)


class TestBinaryRetention:
    def setup_method(self):
        self.tasks = TaskService()

    def test_two_distinct_sequences(self):
        ds = self.tasks.gen_binary_retention(Rng(0, "data"), 64, 10)
        assert len(np.unique(ds.inputs.reshape(64, -1), axis=0)) == 2
        assert np.all(ds.inputs[:, 1:, 0] == 0.0)
        assert np.array_equal(ds.targets[:, 0], ds.inputs[:, 0, 0])

    def test_needs_two_steps(self):
        with pytest.raises(ValueError):
            self.tasks.gen_binary_retention(Rng(0, "data"), 4, 1)


class TestMnistIdx:
    def setup_method(self):
        self.tasks = TaskService()

    def test_load(self, tmp_path):
        raw = self.tasks.load_mnist_idx(*fake_mnist(tmp_path))
        assert raw.images.shape == (4, 28, 28)
        assert raw.images.dtype == np.uint8
        assert raw.labels.tolist() == [0, 1, 2, 3]

    def test_load_gzip(self, tmp_path):
        plain = self.tasks.load_mnist_idx(*fake_mnist(tmp_path))
        packed = self.tasks.load_mnist_idx(*fake_mnist(tmp_path, compress=True, suffix="_gz"))
        assert np.array_equal(plain.images, packed.images)

    def test_bad_magic(self, tmp_path):
        img = write_idx(tmp_path / "img", 0x801, (1, 2, 2), bytes(4))
        lbl = write_idx(tmp_path / "lbl", 0x801, (1,), bytes(1))
        with pytest.raises(BadMagicError):
            self.tasks.load_mnist_idx(img, lbl)

    def test_truncated_body(self, tmp_path):
        img = write_idx(tmp_path / "img", 0x803, (2, 2, 2), bytes(5))
        lbl = write_idx(tmp_path / "lbl", 0x801, (2,), bytes(2))
        with pytest.raises(TruncatedFileError):
            self.tasks.load_mnist_idx(img, lbl)

    def test_truncated_header(self, tmp_path):
        path = tmp_path / "img"
        path.write_bytes(struct.pack(">I", 0x803))
        lbl = write_idx(tmp_path / "lbl", 0x801, (1,), bytes(1))
        with pytest.raises(TruncatedFileError):
            self.tasks.load_mnist_idx(str(path), lbl)

    def test_count_mismatch(self, tmp_path):
        with pytest.raises(CountMismatchError):
            self.tasks.load_mnist_idx(*fake_mnist(tmp_path, n=4, labels=[1, 2, 3]))

    def test_label_range(self, tmp_path):
        with pytest.raises(DatasetFormatError):
            self.tasks.load_mnist_idx(*fake_mnist(tmp_path, n=2, labels=[1, 12]))

    def test_missing_file(self, tmp_path):
        with pytest.raises(DatasetFormatError):
            self.tasks.load_mnist_idx(str(tmp_path / "nope"), str(tmp_path / "nada"))

    def test_errors_are_dataset_errors(self):
        assert issubclass(BadMagicError, DatasetFormatError)
        assert issubclass(TruncatedFileError, DatasetFormatError)
        assert issubclass(CountMismatchError, DatasetFormatError)


class TestPermutedMnist:
    def setup_method(self):
        self.tasks = TaskService()

    def test_normalize(self):
        out = self.tasks.normalize_pixels(np.array([0, 255], dtype=np.uint8))
        assert out.tolist() == [-0.5, 0.5]

    def test_padded_length(self, tmp_path):
        raw = self.tasks.load_mnist_idx(*fake_mnist(tmp_path))
        ds = self.tasks.make_permuted_padded(raw, perm_seed=0, pad=1216)
        assert ds.inputs.shape == (4, 2000, 1)
        assert np.all(ds.inputs[:, 784:, 0] == -0.5)
        assert ds.classification

    def test_identity_without_permutation(self, tmp_path):
        raw = self.tasks.load_mnist_idx(*fake_mnist(tmp_path))
        ds = self.tasks.make_permuted_padded(raw, perm_seed=0, pad=0, permute=False)
        expected = self.tasks.normalize_pixels(raw.images.reshape(4, -1))
        assert np.array_equal(ds.inputs[..., 0], expected)

    def test_permutation_is_shared_and_seeded(self, tmp_path):
        raw = self.tasks.load_mnist_idx(*fake_mnist(tmp_path))
        a = self.tasks.make_permuted_padded(raw, perm_seed=3)
        b = self.tasks.make_permuted_padded(raw, perm_seed=3)
        c = self.tasks.make_permuted_padded(raw, perm_seed=4)
        perm = np.asarray(a.meta["permutation"])
        assert sorted(perm.tolist()) == list(range(784))
        assert np.array_equal(a.inputs, b.inputs)
        assert a.meta["permutation"] != c.meta["permutation"]
        flat = self.tasks.normalize_pixels(raw.images.reshape(4, -1))
        assert np.array_equal(a.inputs[..., 0], flat[:, perm])

    def test_sample_view(self, tmp_path):
        raw = self.tasks.load_mnist_idx(*fake_mnist(tmp_path))
        ds = self.tasks.make_permuted_padded(raw, perm_seed=0, pad=16)
        sample = self.tasks.mnist_sample(ds, 2)
        assert sample.pixels.shape == (800,)
        assert sample.label == 2
        assert sample.permutation.shape == (784,)

    def test_negative_pad(self, tmp_path):
        raw = self.tasks.load_mnist_idx(*fake_mnist(tmp_path))
        with pytest.raises(ValueError):
            self.tasks.make_permuted_padded(raw, perm_seed=0, pad=-1)


class TestSplitAndCache:
    def setup_method(self):
        self.tasks = TaskService()

    def test_split_disjoint(self):
        ds = SequenceDataset("x", np.arange(100, dtype=float).reshape(100, 1, 1), np.arange(100))
        train, valid = self.tasks.split_train_valid(ds, 0.1, seed=0)
        assert len(train) == 90 and len(valid) == 10
        ids = set(train.targets.tolist())
        assert ids.isdisjoint(valid.targets.tolist())
        assert ids | set(valid.targets.tolist()) == set(range(100))

    def test_split_seed_stable(self):
        ds = SequenceDataset("x", np.zeros((50, 1, 1)), np.arange(50))
        a = self.tasks.split_train_valid(ds, 0.2, seed=5)[1].targets
        b = self.tasks.split_train_valid(ds, 0.2, seed=5)[1].targets
        assert np.array_equal(a, b)

    def test_misaligned_dataset(self):
        with pytest.raises(DatasetFormatError):
            SequenceDataset("x", np.zeros((3, 2, 1)), np.zeros(4))

    def test_save_and_load(self, tmp_path):
        ds = self.tasks.gen_copy_first_input(Rng(0, "data"), 6, 4)
        self.tasks.save_dataset(ds, str(tmp_path / "cfi"), seed=0)
        back = self.tasks.load_dataset(str(tmp_path / "cfi"))
        assert back.task == "copy_first_input"
        assert np.array_equal(back.inputs, ds.inputs.astype(np.float32).astype(back.inputs.dtype))
        assert back.meta["T"] == 4

    def test_load_truncated_blob(self, tmp_path):
        ds = self.tasks.gen_copy_first_input(Rng(0, "data"), 6, 4)
        path = self.tasks.save_dataset(ds, str(tmp_path / "cfi"), seed=0)
        (path / "inputs.bin").write_bytes(b"\x00" * 8)
        with pytest.raises(TruncatedFileError):
            self.tasks.load_dataset(str(path))

    def test_load_missing_manifest(self, tmp_path):
        with pytest.raises(DatasetFormatError):
            self.tasks.load_dataset(str(tmp_path))

    def test_load_or_generate_uses_cache(self, tmp_path):
        calls = []

        def builder():
            calls.append(1)
            return self.tasks.gen_binary_retention(Rng(0, "data"), 4, 3)

        first = self.tasks.load_or_generate(str(tmp_path / "c"), 0, builder)
        second = self.tasks.load_or_generate(str(tmp_path / "c"), 0, builder)
        assert len(calls) == 1
        assert np.array_equal(first.inputs, second.inputs)


class TestBuildTaskDatasets:
    def setup_method(self):
        self.tasks = TaskService()

    def test_generated_task(self):
        task = TaskConfig(kind="copy_first_input", length=5, n_samples=40, test_samples=10)
        train, valid, test = self.tasks.build_task_datasets(task, seed=1)
        assert (len(train), len(valid), len(test)) == (36, 4, 10)
        assert train.length == 5

    def test_seed_reproducible(self, tmp_path):
        task = TaskConfig(kind="binary_retention", length=4, n_samples=20, test_samples=5)
        a = self.tasks.build_task_datasets(task, seed=2)
        b = self.tasks.build_task_datasets(task, seed=2, cache_dir=str(tmp_path))
        assert np.array_equal(a[0].inputs, b[0].inputs)
        assert (tmp_path / "train" / "manifest.json").exists()

    def test_mnist_task(self, tmp_path):
        img, lbl = fake_mnist(tmp_path, n=20)
        task = TaskConfig(kind="seq_mnist", images_path=img, labels_path=lbl, pad=16, perm_seed=1, valid_ratio=0.25)
        train, valid, test = self.tasks.build_task_datasets(task, seed=0)
        assert (len(train), len(valid)) == (15, 5)
        assert test is None
        assert train.inputs.shape[1:] == (800, 1)

    def test_mnist_missing_paths(self):
        with pytest.raises(ValueError):
            TaskConfig(kind="seq_mnist")

    def test_global_instance(self):
        assert isinstance(task_service, TaskService)
