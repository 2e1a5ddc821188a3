import os
import math
from typing import List
from dotenv import load_dotenv

# 환경변수 로드
load_dotenv()


class Settings:
    # 실행 환경 설정
    THREADS: int = int(os.getenv("MRULAB_THREADS", os.cpu_count() or 1))
    DTYPE: str = os.getenv("MRULAB_DTYPE", "float32")  # float64 = 디버그 빌드
    OUTPUT_DIR: str = os.getenv("MRULAB_OUTPUT_DIR", "runs")
    LOG_LEVEL: str = os.getenv("MRULAB_LOG_LEVEL", "INFO")
    VERSION: str = "0.1.0"

    # 난수 설정
    SEED: int = 0
    SEEDS: List[int] = [0, 1, 2, 3, 4]  # 5회 평균

    # 스캔 설정
    SCAN_CHUNK: int = 64

    # 동역학 실험실 설정
    H_GRID_MIN: float = -2.0
    H_GRID_MAX: float = 2.0
    H_GRID_POINTS: int = 2001
    ROOT_TOL: float = 1e-12
    MARGINAL_TOL: float = 1e-9
    CLOCK_RATE: float = 0.01

    # BMRU 설정
    ALPHA_SURR: float = 1.0
    BETA_BIAS_INIT: float = 0.5
    ALPHA_INIT: float = 1.0

    # LRU 설정
    R_MIN: float = 0.0
    R_MAX: float = 0.99
    THETA_MAX: float = 2 * math.pi

    # 모델 설정
    MODEL_DIM: int = 256
    STATE_DIM: int = 256
    HEAD_LAYERS: int = 2
    BN_EPS: float = 1e-5
    BN_MOMENTUM: float = 0.1

    # 학습 설정
    EPOCHS: int = 100
    BATCH_SIZE: int = 64
    LR_WARMUP_EPOCHS: int = 10
    LR_START: float = 1e-4
    LR_PEAK: float = 1e-3
    LR_END: float = 1e-5
    WD_BMRU: float = 1e-4
    WD_OTHER: float = 0.05
    ADAM_BETA1: float = 0.9
    ADAM_BETA2: float = 0.999
    ADAM_EPS: float = 1e-8
    VALID_RATIO: float = 0.1

    # 데이터셋 설정
    CFI_SAMPLES: int = 60000
    CFI_LENGTH: int = 100
    SWEEP_SAMPLES: int = 6000
    SWEEP_LENGTHS: List[int] = [100, 1000, 10000, 100000]
    MNIST_PIXELS: int = 784
    DATASET_FORMAT_VERSION: int = 1
    CHECKPOINT_FORMAT_VERSION: int = 1

    # 평가 설정
    EVAL_STEP_BUDGET: int = 1 << 20  # 배치당 B*T 상한
    RETENTION_LENGTHS: List[int] = [10, 1000, 100000]
    RETENTION_SAMPLES: int = 8


settings = Settings()
