import csv
import functools
import json
import logging
import time
import traceback
from pathlib import Path
from typing import Any, Dict, Iterable, List, Optional, Sequence

import click
import numpy as np
from pydantic import ValidationError

from config.settings import settings
from schemas.errors import (CheckpointMismatchError, ConfigError, DatasetFormatError, DivergenceError,
                            VerificationError)
from schemas.models import BrcParams, ExperimentConfig, RunManifest, ToyCellParams
from services.dynamics_service import dynamics_service
from services.numerics import numerics
from services.scan_service import RecurrenceTape, ScanService
from services.train_service import train_service

# 로깅 설정
logging.basicConfig(level=getattr(logging, settings.LOG_LEVEL.upper(), logging.INFO))
logger = logging.getLogger(__name__)

EXIT_USAGE = 2
EXIT_DIVERGENCE = 3
EXIT_VERIFICATION = 4


def exit_codes(func):
    """도메인 예외를 종료 코드로 바꿉니다."""

    @functools.wraps(func)
    def wrapper(*args, **kwargs):
        try:
            return func(*args, **kwargs)
        except (ConfigError, ValidationError, CheckpointMismatchError, DatasetFormatError) as e:
            logger.error(f"설정 오류: {e}")
            click.echo(f"error: {e}", err=True)
            raise SystemExit(EXIT_USAGE)
        except DivergenceError as e:
            logger.error(f"학습 발산: {e}")
            click.echo(f"diverged: {e}", err=True)
            raise SystemExit(EXIT_DIVERGENCE)
        except VerificationError as e:
            logger.error(f"검증 실패: {e}\n{traceback.format_exc()}")
            click.echo(f"verification failed: {e}", err=True)
            raise SystemExit(EXIT_VERIFICATION)

    return wrapper


def parse_int_list(value: str) -> List[int]:
    try:
        return [int(float(v)) for v in value.split(",") if v.strip()]
    except ValueError:
        raise click.BadParameter(f"expected comma separated integers, got {value!r}")


def write_csv(path: Path, header: Sequence[str], rows: Iterable[Sequence[Any]]):
    path.parent.mkdir(parents=True, exist_ok=True)
    with open(path, "w", newline="", encoding="utf-8") as f:
        writer = csv.writer(f, lineterminator="\n")
        writer.writerow(header)
        writer.writerows(rows)
    logger.info(f"CSV 저장: {path}")


def write_manifest(out_dir: Path, command: str, config: Dict[str, Any], seeds: Optional[List[int]] = None):
    out_dir.mkdir(parents=True, exist_ok=True)
    manifest = RunManifest(command=command, config=config, seeds=seeds or [])
    (out_dir / "manifest.json").write_text(manifest.model_dump_json(indent=2), encoding="utf-8")


def apply_overrides(document: Dict[str, Any], overrides: Sequence[str]) -> Dict[str, Any]:
    """train.epochs=5 같은 점 경로 덮어쓰기를 검증 전 원본 문서에 적용합니다."""
    for item in overrides:
        if "=" not in item:
            raise ConfigError(f"override must look like a.b=value, got {item!r}")
        path, raw = item.split("=", 1)
        try:
            value = json.loads(raw)
        except json.JSONDecodeError:
            value = raw
        keys = path.split(".")
        node: Any = document
        for key in keys[:-1]:
            node = node[int(key)] if isinstance(node, list) else node.setdefault(key, {})
        last = keys[-1]
        if isinstance(node, list):
            node[int(last)] = value
        else:
            node[last] = value
    return document


def build_system(system: str, beta: Optional[float], c: float, b_a: float):
    if system == "toy":
        if beta is None:
            raise click.UsageError("--beta is required for --system toy")
        return ToyCellParams(beta=beta, c=c)
    return BrcParams(b_a=b_a)


@click.group()
@click.version_option(settings.VERSION)
def cli():
    """메모리 순환 유닛 실험실 명령줄입니다."""


# ---------------------------------------------------------------------------
# dynamics
# ---------------------------------------------------------------------------

@cli.group()
def dynamics():
    """내부 클록 동역학, 분기도, 구간 근사 데이터를 CSV로 출력합니다."""


@dynamics.command("clock")
@click.option("--system", type=click.Choice(["toy", "brc"]), default="toy")
@click.option("--beta", type=float)
@click.option("--c", "c", type=float, default=settings.CLOCK_RATE)
@click.option("--b-a", "b_a", type=float, default=0.0)
@click.option("--x", "x", type=float, default=0.0)
@click.option("--h0", "h0s", type=float, multiple=True, required=True)
@click.option("--steps", type=click.IntRange(min=1), default=2000)
@click.option("--out", "out_dir", type=click.Path(file_okay=False), default=f"{settings.OUTPUT_DIR}/dynamics")
@exit_codes
def dynamics_clock(system, beta, c, b_a, x, h0s, steps, out_dir):
    params = build_system(system, beta, c, b_a)
    traces = [dynamics_service.simulate_internal_clock(params, x, h0, steps) for h0 in h0s]
    out = Path(out_dir)
    header = ["n"] + [f"h0={h0:g}" for h0 in h0s]
    rows = ([n] + [t.values[n] for t in traces] for n in range(steps + 1))
    write_csv(out / "clock.csv", header, rows)
    write_manifest(out, "dynamics clock", {"system": params.model_dump(), "x": x, "h0": list(h0s), "steps": steps})


@dynamics.command("bifurcation")
@click.option("--system", type=click.Choice(["toy", "brc"]), default="toy")
@click.option("--beta", type=float)
@click.option("--c", "c", type=float, default=settings.CLOCK_RATE)
@click.option("--b-a", "b_a", type=float, default=0.0)
@click.option("--x-min", type=float, default=-2.0)
@click.option("--x-max", type=float, default=2.0)
@click.option("--n-x", type=click.IntRange(min=2), default=401)
@click.option("--out", "out_dir", type=click.Path(file_okay=False), default=f"{settings.OUTPUT_DIR}/dynamics")
@exit_codes
def dynamics_bifurcation(system, beta, c, b_a, x_min, x_max, n_x, out_dir):
    if x_min >= x_max:
        raise click.UsageError("--x-min must be smaller than --x-max")
    params = build_system(system, beta, c, b_a)
    points = dynamics_service.sweep_bifurcation(params, (x_min, x_max), n_x)
    out = Path(out_dir)
    write_csv(out / "bifurcation.csv", ["x", "h", "stable", "marginal"],
              ([p.x, p.h, int(p.stable), int(p.marginal)] for p in points))
    write_manifest(out, "dynamics bifurcation",
                   {"system": params.model_dump(), "x_min": x_min, "x_max": x_max, "n_x": n_x})


@dynamics.command("approx")
@click.option("--beta", type=float, required=True)
@click.option("--alpha", type=float, default=1.0)
@click.option("--x-min", type=float, default=-2.0)
@click.option("--x-max", type=float, default=2.0)
@click.option("--n-x", type=click.IntRange(min=2), default=401)
@click.option("--out", "out_dir", type=click.Path(file_okay=False), default=f"{settings.OUTPUT_DIR}/dynamics")
@exit_codes
def dynamics_approx(beta, alpha, x_min, x_max, n_x, out_dir):
    if beta <= 0:
        raise click.UsageError("--beta must be positive for the approximation")
    points = dynamics_service.sweep_approximation((x_min, x_max), n_x, beta, alpha)
    out = Path(out_dir)
    write_csv(out / "approx.csv", ["x", "h", "stable"], ([p.x, p.h, int(p.stable)] for p in points))
    write_manifest(out, "dynamics approx", {"beta": beta, "alpha": alpha, "x_min": x_min, "x_max": x_max,
                                            "n_x": n_x})


# ---------------------------------------------------------------------------
# train / eval
# ---------------------------------------------------------------------------

@cli.command("train")
@click.argument("config_path", type=click.Path(exists=True, dir_okay=False))
@click.option("--set", "overrides", multiple=True, help="점 경로 덮어쓰기, 예: train.epochs=5")
@click.option("--output-dir", type=click.Path(file_okay=False))
@click.option("--cache-dir", type=click.Path(file_okay=False))
@click.option("--progress/--no-progress", default=True)
@exit_codes
def train(config_path, overrides, output_dir, cache_dir, progress):
    """실험 설정(JSON)을 시드별로 학습하고 집계 결과를 저장합니다."""
    try:
        document = json.loads(Path(config_path).read_text(encoding="utf-8"))
    except json.JSONDecodeError as e:
        raise ConfigError(f"{config_path} is not valid JSON: {e}") from e
    document = apply_overrides(document, overrides)
    exp = ExperimentConfig.model_validate(document)
    out = Path(output_dir or exp.output_dir)
    write_manifest(out, "train", exp.model_dump(), exp.seeds)
    summary = train_service.run_experiment(exp, str(out), progress=progress, cache_dir=cache_dir)
    for key, stats in summary["aggregate"].items():
        click.echo(f"{key}: {stats['mean']:.6g} ± {stats['std']:.3g}")


@cli.command("eval")
@click.argument("checkpoint", type=click.Path(exists=True, file_okay=False))
@click.option("--lengths", default=",".join(str(v) for v in settings.SWEEP_LENGTHS))
@click.option("--noise-sigma", type=float, default=1.0)
@click.option("--samples", type=click.IntRange(min=1), default=settings.SWEEP_SAMPLES)
@click.option("--seed", type=int, default=settings.SEED)
@click.option("--out", "out_dir", type=click.Path(file_okay=False))
@exit_codes
def evaluate(checkpoint, lengths, noise_sigma, samples, seed, out_dir):
    """체크포인트를 길이별 copy-first-input 으로 평가합니다."""
    lengths = parse_int_list(lengths)
    network = train_service.network_from_checkpoint(train_service.load_checkpoint(checkpoint))
    ckpt = train_service.load_checkpoint(checkpoint, network)
    if network.input_dim != 2 or network.output_dim != 1:
        raise CheckpointMismatchError(
            f"length sweep needs a copy-first-input network (input 2, output 1), "
            f"checkpoint has input {network.input_dim}, output {network.output_dim}")
    rows = train_service.length_sweep(network, ckpt.params, ckpt.state, lengths, noise_sigma, samples, seed)
    out = Path(out_dir or checkpoint)
    write_csv(out / "length_sweep.csv", ["length", "mse_mean", "mse_std"],
              ([r.length, r.mse_mean, r.mse_std] for r in rows))
    write_manifest(out, "eval", {"checkpoint": str(checkpoint), "lengths": lengths, "noise_sigma": noise_sigma,
                                 "samples": samples}, [seed])


@cli.command("retention")
@click.option("--lengths", default=",".join(str(v) for v in settings.RETENTION_LENGTHS))
@click.option("--samples", type=click.IntRange(min=1), default=settings.RETENTION_SAMPLES)
@click.option("--r", "r", type=click.FloatRange(0.0, 1.0, min_open=True, max_open=True), default=settings.R_MAX)
@click.option("--seed", type=int, default=settings.SEED)
@click.option("--out", "out_dir", type=click.Path(file_okay=False), default=f"{settings.OUTPUT_DIR}/retention")
@exit_codes
def retention(lengths, samples, r, seed, out_dir):
    """수작업 1-유닛 BMRU/LRU 의 이진 유지 MSE 를 길이별로 출력합니다."""
    lengths = parse_int_list(lengths)
    if min(lengths, default=0) < 2:
        raise click.UsageError("--lengths must all be >= 2")
    rows = train_service.retention_sweep(lengths, samples, seed, r)
    out = Path(out_dir)
    write_csv(out / "retention.csv", ["cell", "length", "mse"], ([row.cell, row.length, row.mse] for row in rows))
    write_manifest(out, "retention", {"lengths": lengths, "samples": samples, "r": r}, [seed])


# ---------------------------------------------------------------------------
# scan-bench
# ---------------------------------------------------------------------------

@cli.command("scan-bench")
@click.option("--T", "lengths", default="1024,65536")
@click.option("--chunk", "chunks", default=str(settings.SCAN_CHUNK))
@click.option("--dim", type=click.IntRange(min=1), default=8)
@click.option("--threads", "threads", default=str(settings.THREADS))
@click.option("--seed", type=int, default=settings.SEED)
@click.option("--out", "out_dir", type=click.Path(file_okay=False), default=f"{settings.OUTPUT_DIR}/scan_bench")
@exit_codes
def scan_bench(lengths, chunks, dim, threads, seed, out_dir):
    """순차/병렬 스캔 시간을 측정합니다. 병렬 결과는 먼저 순차 결과와 대조합니다."""
    lengths, chunks, thread_counts = parse_int_list(lengths), parse_int_list(chunks), parse_int_list(threads)
    if min(lengths + chunks + thread_counts, default=0) < 1:
        raise click.UsageError("--T, --chunk and --threads must be positive")
    rng = numerics.rng(seed, "bench")
    rows = []
    for T in lengths:
        tape = RecurrenceTape(a=rng.uniform(-1.0, 1.0, (T, dim)), b=rng.normal(0.0, 1.0, (T, dim)),
                              h0=rng.normal(0.0, 1.0, dim))
        start = time.perf_counter_ns()
        expected = ScanService(threads=1).scan_sequential(tape)
        wall_seq = time.perf_counter_ns() - start
        for chunk in chunks:
            for n_threads in thread_counts:
                scan = ScanService(threads=n_threads, chunk=chunk)
                start = time.perf_counter_ns()
                got = scan.scan_parallel(tape)
                wall_par = time.perf_counter_ns() - start
                if not np.allclose(got, expected, rtol=1e-6, atol=1e-6):
                    err = float(np.max(np.abs(got - expected)))
                    raise VerificationError(f"parallel scan differs from sequential (T={T}, chunk={chunk}, "
                                            f"threads={n_threads}, max error {err:.3e})")
                rows.append([T, chunk, n_threads, wall_seq, wall_par, scan.last_stats.combine_calls])
    out = Path(out_dir)
    write_csv(out / "scan_bench.csv",
              ["T", "chunk", "threads", "wall_ns_sequential", "wall_ns_parallel", "combine_calls"], rows)
    write_manifest(out, "scan-bench", {"T": lengths, "chunk": chunks, "dim": dim, "threads": thread_counts},
                   [seed])


if __name__ == "__main__":
    cli()
