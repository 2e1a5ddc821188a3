import gzip
import logging
import os
import struct
import traceback
from dataclasses import dataclass, field
from pathlib import Path
from typing import Any, Dict, Optional, Tuple

import numpy as np
from sklearn.model_selection import train_test_split

from config.settings import settings
from schemas.errors import (BadMagicError, CountMismatchError, DatasetFormatError,
                            TruncatedFileError)
from schemas.models import DatasetManifest, TaskConfig
from services.numerics import Rng, numerics

IDX_IMAGES_MAGIC = 0x00000803
IDX_LABELS_MAGIC = 0x00000801


@dataclass
class SequenceDataset:
    """시퀀스 입력 [n, T, F] 와 타깃을 담는 데이터셋입니다.

    회귀 타깃은 [n, 1] 실수, 분류 타깃은 [n] 정수 라벨입니다.
    """

    task: str
    inputs: np.ndarray
    targets: np.ndarray
    meta: Dict[str, Any] = field(default_factory=dict)

    def __post_init__(self):
        if self.inputs.ndim != 3 or len(self.inputs) != len(self.targets):
            raise DatasetFormatError(f"inputs {self.inputs.shape} and targets {self.targets.shape} do not align")

    def __len__(self) -> int:
        return len(self.inputs)

    @property
    def length(self) -> int:
        return self.inputs.shape[1]

    @property
    def classification(self) -> bool:
        return self.targets.ndim == 1

    def subset(self, index: np.ndarray) -> "SequenceDataset":
        return SequenceDataset(self.task, self.inputs[index], self.targets[index], dict(self.meta))


@dataclass
class RawMnist:
    images: np.ndarray  # [n, rows, cols] uint8
    labels: np.ndarray  # [n] uint8


@dataclass
class SeqMnistSample:
    pixels: np.ndarray  # [784 + pad] 정규화된 픽셀
    label: int
    permutation: np.ndarray  # [784]


def _read_bytes(path: str) -> bytes:
    opener = gzip.open if str(path).endswith(".gz") else open
    with opener(path, "rb") as f:
        return f.read()


class TaskService:
    def __init__(self):
        self.logger = logging.getLogger(__name__)
        self.pixels = settings.MNIST_PIXELS

    # ------------------------------------------------------------------
    # 생성 과제
    # ------------------------------------------------------------------

    def gen_copy_first_input(self, rng: Rng, n: int, T: int, noise_sigma: float = 1.0) -> SequenceDataset:
        """첫 시점 값 r_1 을 기억해야 하는 copy-first-input 데이터셋을 생성합니다.

        입력 열 0 은 값(r_1 ~ N(0,1), 이후 N(0, sigma^2)), 열 1 은 첫 시점에만 1 인 플래그입니다.
        """
        if n < 1 or T < 1:
            raise ValueError("n and T must be >= 1")
        values = rng.normal(0.0, 1.0, (n, T))
        if T > 1:
            values[:, 1:] *= noise_sigma
        flags = np.zeros((n, T))
        flags[:, 0] = 1.0
        inputs = np.stack([values, flags], axis=-1).astype(numerics.dtype)
        targets = inputs[:, 0, 0:1].copy()
        return SequenceDataset("copy_first_input", inputs, targets, {"T": T, "noise_sigma": noise_sigma})

    def gen_binary_retention(self, rng: Rng, n: int, T: int) -> SequenceDataset:
        """첫 입력 ±1 뒤로 0 이 이어지는 이진 유지 과제입니다. 타깃은 첫 입력입니다."""
        if T < 2:
            raise ValueError("binary retention needs T >= 2")
        if n < 1:
            raise ValueError("n must be >= 1")
        signs = np.where(rng.integers(0, 2, n) == 0, -1.0, 1.0)
        inputs = np.zeros((n, T, 1), dtype=numerics.dtype)
        inputs[:, 0, 0] = signs
        return SequenceDataset("binary_retention", inputs, signs[:, None].astype(numerics.dtype), {"T": T})

    # ------------------------------------------------------------------
    # MNIST
    # ------------------------------------------------------------------

    def _parse_idx(self, data: bytes, magic: int, ndims: int, path: str) -> Tuple[Tuple[int, ...], bytes]:
        header = 4 + 4 * ndims
        if len(data) < header:
            raise TruncatedFileError(f"{path}: header needs {header} bytes, file has {len(data)}")
        found = struct.unpack(">I", data[:4])[0]
        if found != magic:
            raise BadMagicError(f"{path}: magic 0x{found:08x}, expected 0x{magic:08x}")
        dims = struct.unpack(">" + "I" * ndims, data[4:header])
        body = data[header:]
        expected = int(np.prod(dims))
        if len(body) < expected:
            raise TruncatedFileError(f"{path}: expected {expected} data bytes, found {len(body)}")
        return dims, body[:expected]

    def load_mnist_idx(self, images_path: str, labels_path: str) -> RawMnist:
        """IDX 형식(빅엔디언, gzip 지원) 이미지/라벨 파일을 읽습니다."""
        try:
            dims, body = self._parse_idx(_read_bytes(images_path), IDX_IMAGES_MAGIC, 3, images_path)
            images = np.frombuffer(body, dtype=np.uint8).reshape(dims)
            (count,), lbody = self._parse_idx(_read_bytes(labels_path), IDX_LABELS_MAGIC, 1, labels_path)
            labels = np.frombuffer(lbody, dtype=np.uint8)
        except FileNotFoundError as e:
            raise DatasetFormatError(f"MNIST 파일을 찾을 수 없습니다: {e.filename}") from e

        if count != dims[0]:
            raise CountMismatchError(f"{images_path} has {dims[0]} images but {labels_path} has {count} labels")
        if labels.size and labels.max() > 9:
            raise DatasetFormatError(f"{labels_path}: label {labels.max()} outside 0..9")
        self.logger.info(f"MNIST 로드 완료 - {dims[0]}개, {dims[1]}x{dims[2]}")
        return RawMnist(images=images, labels=labels)

    def normalize_pixels(self, pixels: np.ndarray) -> np.ndarray:
        """바이트 픽셀을 p / 255 - 0.5 로 변환합니다."""
        return (pixels.astype(np.float64) / 255.0 - 0.5).astype(numerics.dtype)

    def make_permuted_padded(self, raw: RawMnist, perm_seed: int, pad: int = 0,
                             permute: bool = True) -> SequenceDataset:
        """고정 순열을 모든 이미지에 적용하고 끝에 검은 픽셀 pad 개를 붙입니다."""
        if pad < 0:
            raise ValueError("pad must be >= 0")
        n = len(raw.images)
        flat = raw.images.reshape(n, -1)
        P = flat.shape[1]
        if P != self.pixels:
            self.logger.warning(f"이미지당 픽셀 수가 {P}개입니다 (MNIST 기본 {self.pixels}개)")
        perm =numerics.rng(perm_seed, "perm").permutation(P) if permute else np.arange(P)
        # 검은 픽셀(raw 0)을 정규화 전에 덧붙임
        seq = np.concatenate([flat[:, perm], np.zeros((n, pad), dtype=flat.dtype)], axis=1)
        inputs = self.normalize_pixels(seq)[..., None]
        meta = {"perm_seed": perm_seed, "pad": pad, "permutation": perm.tolist()}
        return SequenceDataset("seq_mnist", inputs, raw.labels.astype(np.int64), meta)

    def mnist_sample(self, dataset: SequenceDataset, i: int) -> SeqMnistSample:
        return SeqMnistSample(pixels=dataset.inputs[i, :, 0], label=int(dataset.targets[i]),
                              permutation=np.asarray(dataset.meta["permutation"]))

    # ------------------------------------------------------------------
    # 분할 / 캐시
    # ------------------------------------------------------------------

    def split_train_valid(self, dataset: SequenceDataset, valid_ratio: float = settings.VALID_RATIO,
                          seed: int = settings.SEED) -> Tuple[SequenceDataset, SequenceDataset]:
        """시드 고정 90/10 분할입니다. 두 부분은 서로소입니다."""
        index = np.arange(len(dataset))
        train_idx, valid_idx = train_test_split(index, test_size=valid_ratio, random_state=seed, shuffle=True)
        return dataset.subset(np.sort(train_idx)), dataset.subset(np.sort(valid_idx))

    def save_dataset(self, dataset: SequenceDataset, directory: str, seed: int) -> Path:
        """리틀엔디언 32비트 실수 파일 + JSON 매니페스트로 저장합니다."""
        path = Path(directory)
        path.mkdir(parents=True, exist_ok=True)
        dataset.inputs.astype("<f4").tofile(path / "inputs.bin")
        dataset.targets.astype("<f4").tofile(path / "targets.bin")
        manifest = DatasetManifest(
            task=dataset.task,
            seed=seed,
            shapes={"inputs": list(dataset.inputs.shape), "targets": list(dataset.targets.shape)},
            meta=dataset.meta,
        )
        (path / "manifest.json").write_text(manifest.model_dump_json(indent=2), encoding="utf-8")
        return path

    def load_dataset(self, directory: str) -> SequenceDataset:
        path = Path(directory)
        try:
            manifest = DatasetManifest.model_validate_json((path / "manifest.json").read_text(encoding="utf-8"))
        except FileNotFoundError as e:
            raise DatasetFormatError(f"dataset manifest missing in {directory}") from e
        if manifest.version != settings.DATASET_FORMAT_VERSION:
            raise DatasetFormatError(f"dataset version {manifest.version} is not supported")

        arrays = {}
        for name, shape in manifest.shapes.items():
            raw = np.fromfile(path / f"{name}.bin", dtype="<f4")
            if raw.size != int(np.prod(shape)):
                raise TruncatedFileError(f"{name}.bin holds {raw.size} values, manifest says {shape}")
            arrays[name] = raw.reshape(shape)
        targets = arrays["targets"]
        targets = targets.astype(np.int64) if targets.ndim == 1 else targets.astype(numerics.dtype)
        return SequenceDataset(manifest.task, arrays["inputs"].astype(numerics.dtype), targets, manifest.meta)

    def load_or_generate(self, directory: Optional[str], seed: int, builder) -> SequenceDataset:
        """캐시 디렉터리에 데이터셋이 있으면 읽고 없으면 생성 후 저장합니다."""
        if directory and os.path.exists(os.path.join(directory, "manifest.json")):
            self.logger.info(f"캐시된 데이터셋 사용: {directory}")
            return self.load_dataset(directory)
        dataset = builder()
        if directory:
            self.save_dataset(dataset, directory, seed)
        return dataset

    # ------------------------------------------------------------------
    # 실험 단위 데이터 구성
    # ------------------------------------------------------------------

    def build_task_datasets(self, task: TaskConfig, seed: int, cache_dir: Optional[str] = None
                            ) -> Tuple[SequenceDataset, SequenceDataset, Optional[SequenceDataset]]:
        """(train, valid, test) 데이터셋을 만듭니다."""
        try:
            if task.kind == "seq_mnist":
                full = self._mnist(task, task.images_path, task.labels_path, task.subset)
                test = None
                if task.test_images_path and task.test_labels_path:
                    test = self._mnist(task, task.test_images_path, task.test_labels_path, None)
            else:
                rng = numerics.rng(seed, "data")

                def generate(n):
                    if task.kind == "copy_first_input":
                        return self.gen_copy_first_input(rng, n, task.length, task.noise_sigma)
                    return self.gen_binary_retention(rng, n, task.length)

                train_dir = os.path.join(cache_dir, "train") if cache_dir else None
                test_dir = os.path.join(cache_dir, "test") if cache_dir else None
                full = self.load_or_generate(train_dir, seed, lambda: generate(task.n_samples))
                test = self.load_or_generate(test_dir, seed, lambda: generate(task.test_samples))
        except DatasetFormatError:
            self.logger.error(f"데이터셋 구성 실패 - task={task.kind}\n{traceback.format_exc()}")
            raise

        train, valid = self.split_train_valid(full, task.valid_ratio, seed)
        self.logger.info(f"데이터셋 준비 완료 - {task.kind}: train {len(train)}, valid {len(valid)}, "
                         f"test {len(test) if test is not None else 0}")
        return train, valid, test

    def _mnist(self, task: TaskConfig, images_path: str, labels_path: str, subset: Optional[int]) -> SequenceDataset:
        raw = self.load_mnist_idx(images_path, labels_path)
        if subset:
            raw = RawMnist(images=raw.images[:subset], labels=raw.labels[:subset])
        return self.make_permuted_padded(raw, task.perm_seed, task.pad)


# 전역 과제 서비스 인스턴스
task_service = TaskService()
