import csv
import json
import logging
import math
import time
import traceback
from dataclasses import dataclass, field
from pathlib import Path
from typing import Any, Dict, List, Optional, Sequence, Tuple

import numpy as np
from sklearn.metrics import accuracy_score, mean_squared_error
from tqdm import tqdm

from config.settings import settings
from schemas.errors import CheckpointMismatchError, DivergenceError, ShapeMismatchError
from schemas.models import (CheckpointManifest, EpochMetrics, ExperimentConfig, NetworkConfig,
                            RetentionRow, RunRecord, SweepRow, TensorInfo, TrainConfig)
from services.bmru_service import bmru_service
from services.lru_service import lru_service
from services.model_service import Params, is_bmru_param, model_service
from services.numerics import numerics
from services.task_service import SequenceDataset, task_service

METRIC_FIELDS = ["epoch", "split", "loss", "accuracy", "lr", "wall_time"]
TENSOR_GROUPS = ("param", "state", "adam_m", "adam_v")


@dataclass
class AdamWState:
    m: Params
    v: Params
    step: int = 0
    skipped: int = 0
    last_skipped: bool = False
    last_decay: Dict[str, float] = field(default_factory=dict)  # 파라미터별 적용 wd
    decay_total: Dict[str, float] = field(default_factory=dict)  # 그룹별 감쇠량 합


@dataclass
class EvalResult:
    loss: float
    mse: Optional[float] = None
    accuracy: Optional[float] = None
    per_sample: Optional[np.ndarray] = None  # 샘플별 제곱 오차


@dataclass
class TrainResult:
    record: RunRecord
    params: Params
    state: Params
    best_params: Params
    best_state: Params
    optimizer: AdamWState


@dataclass
class Checkpoint:
    manifest: CheckpointManifest
    params: Params
    state: Params
    optimizer: Optional[AdamWState] = None


class TrainService:
    def __init__(self):
        self.logger = logging.getLogger(__name__)
        self.beta1 = settings.ADAM_BETA1
        self.beta2 = settings.ADAM_BETA2
        self.eps = settings.ADAM_EPS
        self.step_budget = settings.EVAL_STEP_BUDGET

    # ------------------------------------------------------------------
    # 스케줄 / 옵티마이저
    # ------------------------------------------------------------------

    def lr_schedule(self, epoch: int, cfg: TrainConfig) -> float:
        """워밍업 구간 코사인 상승 후 남은 구간 코사인 감소입니다."""
        if not 0 <= epoch < cfg.epochs:
            raise ValueError(f"epoch {epoch} outside [0, {cfg.epochs})")
        warmup = cfg.lr_warmup_epochs
        if epoch < warmup:
            progress = epoch / warmup
            return cfg.lr_start + (cfg.lr_peak - cfg.lr_start) * (1.0 - math.cos(math.pi * progress)) / 2.0
        remaining = cfg.epochs - warmup
        progress = 1.0 if remaining <= 1 else (epoch - warmup) / (remaining - 1)
        return cfg.lr_end + (cfg.lr_peak - cfg.lr_end) * (1.0 + math.cos(math.pi * progress)) / 2.0

    def init_adamw(self, params: Params) -> AdamWState:
        return AdamWState(m={k: np.zeros_like(v) for k, v in params.items()},
                          v={k: np.zeros_like(v) for k, v in params.items()})

    def adamw_step(self, params: Params, grads: Params, state: AdamWState, lr: float,
                   wd_bmru: float, wd_other: float) -> Tuple[Params, AdamWState]:
        """분리형 가중치 감쇠 Adam 한 스텝입니다. 비유한 기울기면 스텝을 건너뜁니다."""
        for name, p in params.items():
            if name not in grads or grads[name].shape != p.shape:
                raise ShapeMismatchError(f"gradient for {name} missing or misshaped")
        if not all(np.all(np.isfinite(g)) for g in grads.values()):
            self.logger.warning(f"비유한 기울기 - step {state.step} 건너뜀")
            return params, AdamWState(m=state.m, v=state.v, step=state.step, skipped=state.skipped + 1,
                                      last_skipped=True, last_decay={}, decay_total={})

        step = state.step + 1
        bc1 = 1.0 - self.beta1 ** step
        bc2 = 1.0 - self.beta2 ** step
        new_params, m_new, v_new = {}, {}, {}
        last_decay = {}
        decay_total = {"bmru": 0.0, "other": 0.0}
        for name, p in params.items():
            g = grads[name].astype(np.float64)
            m = self.beta1 * state.m[name] + (1.0 - self.beta1) * g
            v = self.beta2 * state.v[name] + (1.0 - self.beta2) * g * g
            m_new[name] = m.astype(p.dtype)
            v_new[name] = v.astype(p.dtype)
            group = "bmru" if is_bmru_param(name) else "other"
            wd = wd_bmru if group == "bmru" else wd_other
            last_decay[name] = wd
            decay_total[group] += float(lr * wd * np.sum(np.abs(p)))
            update = (m_new[name] / bc1) / (np.sqrt(v_new[name] / bc2) + self.eps)
            new_params[name] = (p * (1.0 - lr * wd) - lr * update).astype(p.dtype)
        return new_params, AdamWState(m=m_new, v=v_new, step=step, skipped=state.skipped,
                                      last_skipped=False, last_decay=last_decay, decay_total=decay_total)

    def clip_gradients(self, grads: Params, max_norm: float) -> Params:
        norm = math.sqrt(sum(float(np.sum(g.astype(np.float64) ** 2)) for g in grads.values()))
        if norm <= max_norm or norm == 0.0:
            return grads
        scale = max_norm / norm
        return {k: (g * scale).astype(g.dtype) for k, g in grads.items()}

    # ------------------------------------------------------------------
    # 손실
    # ------------------------------------------------------------------

    def mse_loss(self, pred: np.ndarray, target: np.ndarray) -> Tuple[float, np.ndarray]:
        diff = pred.astype(np.float64) - np.asarray(target, dtype=np.float64).reshape(pred.shape)
        return float(np.mean(diff ** 2)), 2.0 * diff / diff.size

    def cross_entropy_loss(self, logits: np.ndarray, labels: np.ndarray) -> Tuple[float, np.ndarray]:
        z = logits.astype(np.float64)
        z = z - z.max(axis=1, keepdims=True)
        log_prob = z - np.log(np.exp(z).sum(axis=1, keepdims=True))
        B = len(labels)
        labels = np.asarray(labels, dtype=np.int64)
        loss = -float(np.mean(log_prob[np.arange(B), labels]))
        grad = np.exp(log_prob)
        grad[np.arange(B), labels] -= 1.0
        return loss, grad / B

    def loss_fn(self, kind: str, pred: np.ndarray, target: np.ndarray) -> Tuple[float, np.ndarray]:
        if kind == "mse":
            return self.mse_loss(pred, target)
        return self.cross_entropy_loss(pred, target)

    # ------------------------------------------------------------------
    # 평가
    # ------------------------------------------------------------------

    def eval_batch_size(self, batch_size: int, T: int) -> int:
        return max(1, min(batch_size, self.step_budget // max(T, 1)))

    def predict(self, net_cfg: NetworkConfig, params: Params, state: Params, inputs: np.ndarray,
                batch_size: int = settings.BATCH_SIZE, chunk: Optional[int] = None) -> np.ndarray:
        bs = self.eval_batch_size(batch_size, inputs.shape[1])
        outs = []
        for s in range(0, len(inputs), bs):
            pred, _, _ = model_service.network_forward(net_cfg, params, state, inputs[s:s + bs], "eval", chunk)
            outs.append(pred)
        return np.concatenate(outs, axis=0)

    def evaluate(self, net_cfg: NetworkConfig, params: Params, state: Params, dataset: SequenceDataset,
                 batch_size: int = settings.BATCH_SIZE, chunk: Optional[int] = None) -> EvalResult:
        """평가 모드 순전파로 손실, MSE 또는 정확도를 집계합니다."""
        pred = self.predict(net_cfg, params, state, dataset.inputs, batch_size, chunk)
        if dataset.classification:
            value, _ = self.cross_entropy_loss(pred, dataset.targets)
            acc = accuracy_score(dataset.targets, pred.argmax(axis=1))
            return EvalResult(loss=value, accuracy=float(acc))
        target = dataset.targets.reshape(pred.shape).astype(np.float64)
        per_sample = np.mean((pred.astype(np.float64) - target) ** 2, axis=1)
        mse = float(mean_squared_error(target, pred.astype(np.float64)))
        return EvalResult(loss=mse, mse=mse, per_sample=per_sample)

    def length_sweep(self, net_cfg: NetworkConfig, params: Params, state: Params, lengths: Sequence[int],
                     noise_sigma: float = 1.0, samples: int = settings.SWEEP_SAMPLES, seed: int = settings.SEED,
                     batch_size: int = settings.BATCH_SIZE, chunk: Optional[int] = None) -> List[SweepRow]:
        """길이별 새 copy-first-input 샘플로 (length, mse_mean, mse_std) 를 계산합니다."""
        rows = []
        for length in lengths:
            rng = numerics.rng(seed, "eval")
            bs = self.eval_batch_size(batch_size, length)
            errors = []
            for s in range(0, samples, bs):
                ds = task_service.gen_copy_first_input(rng, min(bs, samples - s), length, noise_sigma)
                pred, _, _ = model_service.network_forward(net_cfg, params, state, ds.inputs, "eval", chunk)
                errors.append(np.mean((pred.astype(np.float64) - ds.targets) ** 2, axis=1))
            err = np.concatenate(errors)
            rows.append(SweepRow(length=length, mse_mean=float(err.mean()), mse_std=float(err.std())))
            self.logger.info(f"길이 {length}: MSE {rows[-1].mse_mean:.6f} ± {rows[-1].mse_std:.6f}")
        return rows

    def retention_sweep(self, lengths: Sequence[int] = tuple(settings.RETENTION_LENGTHS),
                        samples: int = settings.RETENTION_SAMPLES, seed: int = settings.SEED,
                        r: float = settings.R_MAX, chunk: Optional[int] = None) -> List[RetentionRow]:
        """수작업 1-유닛 BMRU 와 1-유닛 LRU 의 이진 유지 MSE 를 길이별로 계산합니다."""
        bmru = bmru_service.hand_built_memory_unit(dtype=np.float64)
        lru = lru_service.hand_built_decay_unit(r, dtype=np.float64)
        rows = []
        for length in lengths:
            ds = task_service.gen_binary_retention(numerics.rng(seed, "eval"), samples, length)
            x = ds.inputs.astype(np.float64)
            target = ds.targets[:, 0].astype(np.float64)
            h = bmru_service.forward(bmru, x, chunk=chunk).h
            rows.append(RetentionRow(cell="bmru", length=length, mse=float(np.mean((h[:, -1, 0] - target) ** 2))))
            _, y, _ = lru_service.forward(lru, x, chunk=chunk)
            rows.append(RetentionRow(cell="lru", length=length, mse=float(np.mean((y[:, -1, 0] - target) ** 2))))
        return rows

    # ------------------------------------------------------------------
    # 학습 루프
    # ------------------------------------------------------------------

    def train_loop(self, net_cfg: NetworkConfig, train_cfg: TrainConfig, train_ds: SequenceDataset,
                   valid_ds: SequenceDataset, seed: Optional[int] = None, run_dir: Optional[str] = None,
                   progress: bool = False, config: Optional[Dict[str, Any]] = None) -> TrainResult:
        """시드 고정 셔플 미니배치 학습입니다. 매 에폭 검증하고 최고 검증 모델을 보관합니다."""
        if len(train_ds) == 0 or len(valid_ds) == 0:
            raise ValueError("train and valid datasets must be nonempty")
        seed = train_cfg.seed if seed is None else seed
        params, state = model_service.init_network(net_cfg, seed)
        opt = self.init_adamw(params)
        shuffle = numerics.rng(seed, "shuffle")
        chunk = train_cfg.scan_chunk
        classification = train_ds.classification
        config = config or {"network": net_cfg.model_dump(), "train": train_cfg.model_dump()}

        record = RunRecord(seed=seed, checkpoint_dir=str(Path(run_dir) / "best") if run_dir else None)
        best_params, best_state = params, state
        T = train_ds.length

        for epoch in tqdm(range(train_cfg.epochs), desc=f"seed {seed}", disable=not progress):
            lr = self.lr_schedule(epoch, train_cfg)
            start = time.perf_counter()
            order = shuffle.permutation(len(train_ds))
            total, correct, seen = 0.0, 0, 0
            for b, s in enumerate(range(0, len(order), train_cfg.batch_size)):
                idx = order[s:s + train_cfg.batch_size]
                if len(idx) * T < 2:
                    continue
                pred, state, cache = model_service.network_forward(
                    net_cfg, params, state, train_ds.inputs[idx], "train", chunk)
                loss, dpred = self.loss_fn(train_cfg.loss, pred, train_ds.targets[idx])
                if not np.isfinite(loss):
                    record.diverged = True
                    record.diagnostic = f"non-finite loss at epoch {epoch}, batch {b} (lr={lr:.3e})"
                    self.logger.error(f"학습 발산 - seed {seed}: {record.diagnostic}")
                    raise DivergenceError(record.diagnostic, record)
                grads, _ = model_service.network_backward(net_cfg, params, cache, dpred, chunk)
                if train_cfg.grad_clip:
                    grads = self.clip_gradients(grads, train_cfg.grad_clip)
                params, opt = self.adamw_step(params, grads, opt, lr, train_cfg.wd_bmru, train_cfg.wd_other)
                total += loss * len(idx)
                seen += len(idx)
                if classification:
                    correct += int(np.sum(pred.argmax(axis=1) == train_ds.targets[idx]))

            elapsed = time.perf_counter() - start
            rows = [EpochMetrics(epoch=epoch, split="train", loss=total / max(seen, 1),
                                 accuracy=correct / max(seen, 1) if classification else None,
                                 lr=lr, wall_time=elapsed)]
            valid = self.evaluate(net_cfg, params, state, valid_ds, train_cfg.batch_size, chunk)
            if not np.isfinite(valid.loss):
                record.metrics.extend(rows)
                record.diverged = True
                record.diagnostic = f"non-finite validation loss at epoch {epoch}"
                raise DivergenceError(record.diagnostic, record)
            rows.append(EpochMetrics(epoch=epoch, split="valid", loss=valid.loss, accuracy=valid.accuracy,
                                     lr=lr, wall_time=time.perf_counter() - start))
            record.metrics.extend(rows)
            if run_dir:
                self.write_metrics(rows, run_dir)

            score = valid.accuracy if classification else valid.loss
            improved = record.best_score is None or (score > record.best_score if classification
                                                     else score < record.best_score)
            if improved:
                record.best_epoch, record.best_score = epoch, float(score)
                best_params, best_state = params, state
                if run_dir:
                    self.save_checkpoint(Path(run_dir) / "best", config, params, state, epoch,
                                         {"valid_loss": valid.loss}, opt, train_cfg.grad_clip)

        self.logger.info(f"학습 완료 - seed {seed}, best epoch {record.best_epoch}, score {record.best_score}")
        return TrainResult(record=record, params=params, state=state, best_params=best_params,
                           best_state=best_state, optimizer=opt)

    def run_experiment(self, exp: ExperimentConfig, run_root: str, progress: bool = True,
                       cache_dir: Optional[str] = None) -> Dict[str, Any]:
        """시드 목록마다 학습/테스트를 수행하고 평균, 표준편차를 집계합니다."""
        root = Path(run_root)
        root.mkdir(parents=True, exist_ok=True)
        config = exp.model_dump()
        results = []
        for seed in exp.seeds:
            seed_dir = root / f"seed_{seed}"
            train_ds, valid_ds, test_ds = task_service.build_task_datasets(
                exp.task, seed, str(Path(cache_dir) / f"seed_{seed}") if cache_dir else None)
            try:
                result = self.train_loop(exp.network, exp.train, train_ds, valid_ds, seed, str(seed_dir),
                                         progress, config)
            except DivergenceError as e:
                if e.record is not None:
                    (root / f"seed_{seed}_diagnostic.json").write_text(e.record.model_dump_json(indent=2),
                                                                       encoding="utf-8")
                raise
            row: Dict[str, Any] = {"seed": seed, "best_epoch": result.record.best_epoch,
                                   "best_valid": result.record.best_score}
            if test_ds is not None:
                test = self.evaluate(exp.network, result.best_params, result.best_state, test_ds,
                                     exp.train.batch_size, exp.train.scan_chunk)
                row.update({"test_loss": test.loss, "test_accuracy": test.accuracy, "test_mse": test.mse})
            (seed_dir / "record.json").write_text(result.record.model_dump_json(indent=2), encoding="utf-8")
            results.append(row)

        summary = {"runs": results, "aggregate": self.aggregate(results)}
        (root / "summary.json").write_text(json.dumps(summary, indent=2), encoding="utf-8")
        return summary

    def aggregate(self, rows: List[Dict[str, Any]]) -> Dict[str, Dict[str, float]]:
        """시드별 수치 지표의 평균과 표준편차를 계산합니다."""
        out = {}
        for key in ("best_valid", "test_loss", "test_accuracy", "test_mse"):
            values = [r[key] for r in rows if r.get(key) is not None]
            if values:
                out[key] = {"mean": float(np.mean(values)), "std": float(np.std(values))}
        return out

    # ------------------------------------------------------------------
    # 지표 / 체크포인트
    # ------------------------------------------------------------------

    def write_metrics(self, rows: List[EpochMetrics], run_dir: str):
        """metrics.csv 와 metrics.jsonl 에 에폭 지표를 덧붙입니다."""
        path = Path(run_dir)
        path.mkdir(parents=True, exist_ok=True)
        csv_path = path / "metrics.csv"
        new_file = not csv_path.exists()
        with open(csv_path, "a", newline="", encoding="utf-8") as f:
            writer = csv.DictWriter(f, fieldnames=METRIC_FIELDS, lineterminator="\n")
            if new_file:
                writer.writeheader()
            for row in rows:
                writer.writerow({k: ("" if v is None else v) for k, v in row.model_dump().items()})
        with open(path / "metrics.jsonl", "a", encoding="utf-8") as f:
            for row in rows:
                f.write(row.model_dump_json() + "\n")

    def save_checkpoint(self, directory, config: Dict[str, Any], params: Params, state: Params, epoch: int,
                        metrics: Optional[Dict[str, float]] = None, optimizer: Optional[AdamWState] = None,
                        grad_clip: Optional[float] = None) -> Path:
        """manifest.json 과 텐서별 리틀엔디언 32비트 .bin 파일로 저장합니다."""
        path = Path(directory)
        path.mkdir(parents=True, exist_ok=True)
        groups = {"param": params, "state": state}
        if optimizer is not None:
            groups.update({"adam_m": optimizer.m, "adam_v": optimizer.v})
        tensors = {}
        for group, arrays in groups.items():
            for name, arr in arrays.items():
                key = f"{group}.{name}"
                fname = f"{key}.bin"
                np.ascontiguousarray(arr).astype("<f4").tofile(path / fname)
                tensors[key] = TensorInfo(shape=list(arr.shape), file=fname)
        manifest = CheckpointManifest(config=config, epoch=epoch, metrics=metrics or {}, tensors=tensors,
                                      grad_clip=grad_clip, optimizer_step=optimizer.step if optimizer else 0)
        (path / "manifest.json").write_text(manifest.model_dump_json(indent=2), encoding="utf-8")
        return path

    def load_checkpoint(self, directory, network: Optional[NetworkConfig] = None, dtype=None) -> Checkpoint:
        """체크포인트를 읽습니다. network 를 주면 이름/형상이 일치하는지 확인합니다."""
        path = Path(directory)
        try:
            manifest = CheckpointManifest.model_validate_json((path / "manifest.json").read_text(encoding="utf-8"))
        except FileNotFoundError as e:
            raise CheckpointMismatchError(f"no checkpoint manifest in {directory}") from e
        if manifest.format_version != settings.CHECKPOINT_FORMAT_VERSION:
            raise CheckpointMismatchError(f"checkpoint format {manifest.format_version} is not supported")

        dtype = np.dtype(dtype or numerics.dtype)
        groups: Dict[str, Params] = {g: {} for g in TENSOR_GROUPS}
        for key, info in manifest.tensors.items():
            group, name = key.split(".", 1)
            if group not in groups:
                raise CheckpointMismatchError(f"unknown tensor group in {key}")
            try:
                raw = np.fromfile(path / info.file, dtype="<f4")
            except FileNotFoundError as e:
                raise CheckpointMismatchError(f"tensor file {info.file} missing") from e
            if raw.size != int(np.prod(info.shape)):
                raise CheckpointMismatchError(f"{info.file} holds {raw.size} values, manifest says {info.shape}")
            groups[group][name] = raw.reshape(info.shape).astype(dtype)

        if network is not None:
            try:
                expected, expected_state = model_service.init_network(network, 0, dtype)
            except Exception:
                self.logger.error(f"체크포인트 검증용 네트워크 생성 실패\n{traceback.format_exc()}")
                raise CheckpointMismatchError("network config cannot be instantiated")
            for want, have, label in ((expected, groups["param"], "parameter"),
                                      (expected_state, groups["state"], "state")):
                if set(want) != set(have):
                    missing = sorted(set(want) ^ set(have))[:5]
                    raise CheckpointMismatchError(f"{label} names differ from the architecture: {missing}")
                for name, arr in want.items():
                    if arr.shape != have[name].shape:
                        raise CheckpointMismatchError(f"{name}: shape {have[name].shape}, architecture wants {arr.shape}")

        optimizer = None
        if groups["adam_m"]:
            optimizer = AdamWState(m=groups["adam_m"], v=groups["adam_v"], step=manifest.optimizer_step)
        return Checkpoint(manifest=manifest, params=groups["param"], state=groups["state"], optimizer=optimizer)

    def network_from_checkpoint(self, checkpoint: Checkpoint) -> NetworkConfig:
        try:
            return NetworkConfig.model_validate(checkpoint.manifest.config["network"])
        except (KeyError, ValueError) as e:
            raise CheckpointMismatchError(f"checkpoint config has no valid network: {e}") from e


# 전역 학습 서비스 인스턴스
train_service = TrainService()
