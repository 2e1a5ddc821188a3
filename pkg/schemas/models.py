from pydantic import BaseModel, ConfigDict, Field, field_validator, model_validator
from typing import Optional, Dict, Any, List, Literal
from datetime import datetime

from config.settings import settings


# ---------------------------------------------------------------------------
# 동역학 실험실
# ---------------------------------------------------------------------------

class ToyCellParams(BaseModel):
    model_config = ConfigDict(extra="forbid")

    beta: float
    c: float = Field(default=settings.CLOCK_RATE, gt=0.0, le=1.0)


class BrcParams(BaseModel):
    model_config = ConfigDict(extra="forbid")

    U_c: float = 0.0
    w_c: float = 0.0
    b_c: float = 0.0
    U_a: float = 0.0
    w_a: float = 0.0
    b_a: float = 0.0
    U_h: float = 1.0
    b_h: float = 0.0


class ClockTrace(BaseModel):
    h0: float
    x: float
    values: List[float]

    @model_validator(mode="after")
    def _check_start(self):
        if not self.values or self.values[0] != self.h0:
            raise ValueError("values[0] must equal h0")
        return self


class EquilibriumPoint(BaseModel):
    x: float
    h: float
    stable: bool
    marginal: bool = False  # |df/dh| ~ 1, 안정/불안정 판정에서 제외


# ---------------------------------------------------------------------------
# 네트워크 / 학습 설정
# ---------------------------------------------------------------------------

class BlockConfig(BaseModel):
    model_config = ConfigDict(extra="forbid")

    cell_kind: Literal["bmru", "lru", "hybrid"]
    model_dim: int = Field(default=settings.MODEL_DIM, ge=1)
    state_dim: int = Field(default=settings.STATE_DIM, ge=1)
    bidirectional: bool = False
    positional_dim: int = Field(default=0, ge=0)
    alpha_surr: float = Field(default=settings.ALPHA_SURR, ge=0.0)
    r_min: float = settings.R_MIN
    r_max: float = settings.R_MAX
    theta_max: float = settings.THETA_MAX

    @field_validator("positional_dim")
    @classmethod
    def _even_positional(cls, v: int) -> int:
        if v % 2 != 0:
            raise ValueError("positional_dim must be even")
        return v

    @model_validator(mode="after")
    def _check_cells(self):
        if self.cell_kind == "hybrid" and (self.state_dim < 2 or self.model_dim < 2):
            raise ValueError("hybrid block needs state_dim >= 2 and model_dim >= 2")
        if not (0.0 <= self.r_min < self.r_max < 1.0):
            raise ValueError("need 0 <= r_min < r_max < 1")
        if self.theta_max <= 0:
            raise ValueError("theta_max must be positive")
        return self


class NetworkConfig(BaseModel):
    model_config = ConfigDict(extra="forbid")

    blocks: List[BlockConfig] = Field(min_length=1)
    head_layers: int = Field(default=settings.HEAD_LAYERS, ge=1)
    pooling: Literal["last_timestep", "mean"] = "last_timestep"
    input_dim: int = Field(ge=1)
    output_dim: int = Field(ge=1)

    @model_validator(mode="after")
    def _same_model_dim(self):
        dims = {b.model_dim for b in self.blocks}
        if len(dims) != 1:
            raise ValueError("all blocks must share model_dim (skip connections)")
        return self

    @property
    def model_dim(self) -> int:
        return self.blocks[0].model_dim


class TrainConfig(BaseModel):
    model_config = ConfigDict(extra="forbid")

    epochs: int = Field(default=settings.EPOCHS, ge=1)
    batch_size: int = Field(default=settings.BATCH_SIZE, ge=1)
    lr_warmup_epochs: int = Field(default=settings.LR_WARMUP_EPOCHS, ge=0)
    lr_start: float = Field(default=settings.LR_START, gt=0.0)
    lr_peak: float = Field(default=settings.LR_PEAK, gt=0.0)
    lr_end: float = Field(default=settings.LR_END, gt=0.0)
    wd_bmru: float = Field(default=settings.WD_BMRU, ge=0.0)
    wd_other: float = Field(default=settings.WD_OTHER, ge=0.0)
    seed: int = Field(default=settings.SEED, ge=0, lt=2**64)
    loss: Literal["mse", "cross_entropy"] = "mse"
    grad_clip: Optional[float] = Field(default=None, gt=0.0)  # 기본 비활성
    scan_chunk: int = Field(default=settings.SCAN_CHUNK, ge=1)

    @model_validator(mode="after")
    def _warmup_fits(self):
        if self.lr_warmup_epochs > self.epochs:
            raise ValueError("lr_warmup_epochs must not exceed epochs")
        return self


class TaskConfig(BaseModel):
    model_config = ConfigDict(extra="forbid")

    kind: Literal["copy_first_input", "binary_retention", "seq_mnist"]
    length: int = Field(default=settings.CFI_LENGTH, ge=1)
    n_samples: int = Field(default=settings.CFI_SAMPLES, ge=1)
    test_samples: int = Field(default=settings.CFI_SAMPLES, ge=1)
    noise_sigma: float = Field(default=1.0, ge=0.0)
    valid_ratio: float = Field(default=settings.VALID_RATIO, gt=0.0, lt=1.0)
    images_path: Optional[str] = None
    labels_path: Optional[str] = None
    test_images_path: Optional[str] = None
    test_labels_path: Optional[str] = None
    subset: Optional[int] = Field(default=None, ge=1)
    pad: int = Field(default=0, ge=0)
    perm_seed: int = 0

    @model_validator(mode="after")
    def _mnist_paths(self):
        if self.kind == "seq_mnist" and not (self.images_path and self.labels_path):
            raise ValueError("seq_mnist needs images_path and labels_path")
        return self


class ExperimentConfig(BaseModel):
    model_config = ConfigDict(extra="forbid")

    task: TaskConfig
    network: NetworkConfig
    train: TrainConfig = TrainConfig()
    seeds: List[int] = Field(default_factory=lambda: list(settings.SEEDS), min_length=1)
    output_dir: str = settings.OUTPUT_DIR


# ---------------------------------------------------------------------------
# 실행 기록 / 매니페스트
# ---------------------------------------------------------------------------

class EpochMetrics(BaseModel):
    epoch: int
    split: Literal["train", "valid", "test"]
    loss: float
    accuracy: Optional[float] = None
    lr: float
    wall_time: float


class RunRecord(BaseModel):
    seed: int
    metrics: List[EpochMetrics] = []
    best_epoch: Optional[int] = None
    best_score: Optional[float] = None
    checkpoint_dir: Optional[str] = None
    diverged: bool = False
    diagnostic: Optional[str] = None


class TensorInfo(BaseModel):
    shape: List[int]
    dtype: str = "<f4"
    file: str


class CheckpointManifest(BaseModel):
    format_version: int = settings.CHECKPOINT_FORMAT_VERSION
    config: Dict[str, Any]
    epoch: int
    metrics: Dict[str, float] = {}
    tensors: Dict[str, TensorInfo]
    grad_clip: Optional[float] = None
    optimizer_step: int = 0


class DatasetManifest(BaseModel):
    task: str
    seed: int
    version: int = settings.DATASET_FORMAT_VERSION
    shapes: Dict[str, List[int]]
    meta: Dict[str, Any] = {}


class RunManifest(BaseModel):
    command: str
    config: Dict[str, Any]
    seeds: List[int] = []
    version: str = settings.VERSION
    timestamp: datetime = Field(default_factory=datetime.now)


class ScanStats(BaseModel):
    combine_calls: int = 0
    chunks: int = 0


class SweepRow(BaseModel):
    length: int
    mse_mean: float
    mse_std: float


class RetentionRow(BaseModel):
    cell: Literal["bmru", "lru"]
    length: int
    mse: float
