"""
Operator entry point: train -> calibrate -> quantize -> eval -> bench -> report.

Exit codes: 0 success, 2 configuration problems (bad flags or config file,
invalid values, missing calibration stats, unknown policy layers), 3 any
other toolkit or I/O failure. Every command writes into ``--out`` and leaves
a ``manifest.json`` with git-style hashes of what it read and wrote.
"""
import json
import math
import sys
import time
from pathlib import Path
from types import SimpleNamespace
from typing import Callable, Dict, List, Optional, Sequence, Tuple

import numpy as np
from pydantic import ValidationError

from src.bench.base import GraphTarget
from src.bench.latency import BenchConfig, memory_profiles, parallel_throughput, sweep
from src.bench.report import emit_report
from src.config import settings
from src.data.netpbm import load_manifest
from src.data.samples import Sample, SynthConfig, generate_synthetic, split, stack_batch
from src.errors import ConfigError, EmberError, MissingStatsError, PolicyError, UnknownLayerError
from src.log_helper import get_logger
from src.metrics.confusion import fps, ms_per_image
from src.network.builder import ModelConfig, build_model
from src.network.graph import NetworkGraph, Precision, freeze
from src.network.serialize import load_model, save_model
from src.quant.policy import QuantPolicy, load_policy
from src.quant.ptq import Calibration, apply_ptq, calibrate
from src.training.trainer import TrainConfig, evaluate, train

from .flags import build_parser
from .manifest import RunManifest
from .report import build_report
from .runconfig import read_run_config, resolve, write_run_config

_logger = get_logger(__name__)

CONFIG_ERRORS = (ConfigError, ValidationError, MissingStatsError, UnknownLayerError, PolicyError)
RUN_CONFIG_FILE = "run.ini"
EPS_BATCHES = 4


class Run:
    """Output directory plus the manifest being filled for one command."""

    def __init__(self, opts: SimpleNamespace):
        self.opts = opts
        self.out = Path(opts.out) if opts.out else settings.runs_path / opts.command
        self.out.mkdir(parents=True, exist_ok=True)
        config = {k: v for k, v in vars(opts).items() if k != "command"}
        self.manifest = RunManifest(command=opts.command, seed=opts.seed, config=config)
        for key in ("config", "manifest", "model", "policy", "calibration", "quantized"):
            value = getattr(opts, key, None)
            if value:
                self.manifest.add_input(value)

    def output(self, path: Path, deterministic: bool = True) -> Path:
        self.manifest.add_output(path, self.out, deterministic)
        return path

    def close(self) -> Path:
        self.output(write_run_config(self.opts, self.out / RUN_CONFIG_FILE))
        return self.manifest.finish().save(self.out)


# data


def _fractions(opts: SimpleNamespace) -> Tuple[float, float, float]:
    fractions = tuple(float(f) for f in opts.split_fractions)
    if len(fractions) != 3 or any(f < 0 for f in fractions) or abs(sum(fractions) - 1.0) > 1e-6:
        raise ConfigError(f"--split-fractions needs three non-negative values summing to 1, got {fractions}")
    return fractions


def synthetic_total(train_count: int, train_fraction: float) -> int:
    """Samples to generate so the training split holds at least ``train_count``."""
    if train_fraction <= 0:
        raise ConfigError("--synthetic sizes the training split, which needs a positive train fraction")
    return int(math.ceil(train_count / train_fraction - 1e-9))


def load_samples(opts: SimpleNamespace, required: bool = True, size: Optional[int] = None) -> Optional[List[Sample]]:
    """Samples from --manifest or --synthetic at ``size`` (default --size)."""
    size = size or opts.size
    if opts.manifest and opts.synthetic is not None:
        raise ConfigError("give either --synthetic or --manifest, not both")
    if opts.manifest:
        return load_manifest(opts.manifest, (size, size), opts.strict_masks)
    if opts.synthetic is not None:
        if opts.synthetic < 1:
            raise ConfigError("--synthetic must be at least 1")
        total = synthetic_total(opts.synthetic, _fractions(opts)[0])
        return generate_synthetic(SynthConfig(count=total, size=size, seed=opts.seed))
    if required:
        raise ConfigError("no data: give --synthetic N or --manifest PATH")
    return None


def load_splits(opts: SimpleNamespace, required: bool = True, size: Optional[int] = None):
    samples = load_samples(opts, required, size)
    if samples is None:
        return None
    return split(samples, _fractions(opts), opts.seed)


def batches_of(samples: Sequence[Sample], batch_size: int) -> List[np.ndarray]:
    return [stack_batch(samples[i: i + batch_size])[0] for i in range(0, len(samples), batch_size)]


def _load_frozen(path: str) -> NetworkGraph:
    graph = load_model(path)
    return graph if graph.frozen else freeze(graph)


def _require_model(opts: SimpleNamespace) -> str:
    if not opts.model:
        raise ConfigError(f"'{opts.command}' needs --model")
    return opts.model


# commands


def cmd_train(run: Run) -> None:
    opts = run.opts
    fractions = _fractions(opts)
    overrides = dict(
        input_size=(opts.size, opts.size),
        activation=opts.activation,
        seed=opts.seed,
    )
    if opts.full_model:
        model_config = ModelConfig.full(**overrides)
    else:
        model_config = ModelConfig(bottlenecks=opts.bottlenecks, width_multiplier=opts.width, **overrides)
    train_config = TrainConfig(
        epochs=opts.epochs,
        batch_size=opts.batch_size,
        val_every=opts.val_every,
        split=fractions,
        seed=opts.seed,
        activation=opts.activation,
        lr=opts.lr,
        weight_decay=opts.weight_decay,
        amp=opts.amp,
        loss_scale=opts.loss_scale,
        dynamic_loss_scale=opts.dynamic_loss_scale,
        qat=opts.qat,
        augment=not opts.no_augment,
        augment_test=opts.augment_test,
    )
    samples = load_samples(opts)
    graph = build_model(model_config)
    print(f"🚀 training {opts.activation} model on {len(samples)} samples ({len(graph)} nodes)")
    result = train(graph, samples, train_config, run.out)

    run.output(save_model(graph, run.out / "model.emb"))
    run.output(run.out / "history.csv")
    if result.checkpoint is not None:
        for path in sorted(result.checkpoint.iterdir()):
            run.output(path)
    print(
        f"✅ {result.steps} steps ({result.skipped_steps} skipped), "
        f"best val loss {result.best_val_loss:.5f} at step {result.best_step}"
    )
    if result.test is not None:
        print(f"📊 test MPA {result.test.mpa:.4f} MIoU {result.test.miou:.4f} on {result.test.images} images")


def _calibration(run: Run, graph: NetworkGraph, policy: QuantPolicy) -> Calibration:
    splits = load_splits(run.opts, size=graph.input_shape[1])
    train_set = splits[0]
    if not train_set:
        raise ConfigError("calibration needs a non-empty training split")
    batches = batches_of(train_set, run.opts.batch_size)
    print(f"🔬 calibrating on {min(len(batches), run.opts.calib_batches)} batches")
    return calibrate(graph, batches, policy, n_batches=run.opts.calib_batches)


def cmd_calibrate(run: Run) -> None:
    graph = _load_frozen(_require_model(run.opts))
    policy = load_policy(run.opts.policy)
    result = _calibration(run, graph, policy)
    run.output(result.save(run.out / "calibration.json"))
    flagged = result.flagged(policy.auto_flag_sqnr_db)
    print(f"✅ {len(result.scales)} layers calibrated, {len(result.degenerate)} degenerate, {len(flagged)} auto-flagged")


def cmd_quantize(run: Run) -> None:
    opts = run.opts
    graph = _load_frozen(_require_model(opts))
    policy = load_policy(opts.policy)
    splits = load_splits(opts, required=False, size=graph.input_shape[1])
    if opts.calibration:
        cal = Calibration.load(opts.calibration)
    elif splits is not None:
        cal = _calibration(run, graph, policy)
    else:
        cal = Calibration({})
    eval_batches = batches_of(splits[1], opts.batch_size)[:EPS_BATCHES] if splits is not None else []

    quantized, report = apply_ptq(graph, policy, cal, eval_batches)
    run.output(save_model(quantized, run.out / "quantized.emb"))
    run.output(report.save(run.out / "precision_report.json"))
    table = run.out / "precision_report.txt"
    table.write_text(report.table() + "\n", encoding="utf-8")
    run.output(table)
    print(report.table())
    print(f"✅ model bytes {report.bytes_before} -> {report.bytes_after} (ratio {report.size_ratio:.3f})")


def cmd_eval(run: Run) -> None:
    opts = run.opts
    graph = load_model(_require_model(opts))
    train_set, val_set, test_set = load_splits(opts, size=graph.input_shape[1])
    subset = {"train": train_set, "val": val_set, "test": test_set, "all": train_set + val_set + test_set}[opts.split]
    if not subset:
        raise ConfigError(f"the '{opts.split}' split is empty")

    start = time.perf_counter()
    result = evaluate(graph, subset, opts.batch_size)
    elapsed = time.perf_counter() - start
    rate = fps(result.images, elapsed)

    metrics = {
        "model": Path(opts.model).stem,
        "split": opts.split,
        "images": result.images,
        "loss": result.loss,
        "mpa": result.mpa,
        "global_accuracy": result.global_accuracy,
        "miou": result.miou,
        "iou_per_class": [float(v) for v in result.confusion.iou_per_class()],
        "confusion": result.confusion.counts.tolist(),
    }
    timing = {"fps": rate, "ms_per_image": ms_per_image(rate), "wall_seconds": elapsed}
    for name, payload, deterministic in (("eval.json", metrics, True), ("timing.json", timing, False)):
        path = run.out / name
        path.write_text(json.dumps(payload, indent=2, sort_keys=True), encoding="utf-8")
        run.output(path, deterministic)

    print(f"{'split':<8} {'images':>7} {'loss':>10} {'MPA':>8} {'MIoU':>8} {'FPS':>8}")
    print(f"{opts.split:<8} {result.images:>7} {result.loss:>10.5f} {result.mpa:>8.4f} {result.miou:>8.4f} {rate:>8.1f}")


def cmd_bench(run: Run) -> None:
    opts = run.opts
    graph = load_model(_require_model(opts))
    frozen = graph if graph.frozen else freeze(graph)
    if opts.quantized:
        quantized = load_model(opts.quantized)
    else:
        quantized, _ = apply_ptq(frozen, QuantPolicy.uniform(Precision.FP16), {})
    cfg = BenchConfig(
        batch_sizes=opts.batch_sizes,
        warmup=opts.warmup,
        measured=opts.measured,
        input_shape=frozen.input_shape,
        seed=opts.seed,
    )
    targets = [GraphTarget(frozen, "fp32"), GraphTarget(quantized, "quantized")]
    print(f"⏱️  sweeping batches {list(cfg.batch_sizes)} over {[t.name for t in targets]}")
    report = sweep(targets, cfg)
    report.memory = memory_profiles(graph, frozen, cfg)
    if opts.workers > 0:
        rate, timeline = parallel_throughput(frozen, cfg.batch(cfg.batch_sizes[0]), opts.workers)
        report.parallel_workers = opts.workers
        report.parallel_throughput = rate
        print(f"🧵 {opts.workers} workers: {rate:.1f} img/s over {timeline.event_count} allocator events")

    for path in emit_report(report, run.out, opts.formats):
        run.output(path, deterministic=False)
    for v in report.variants:
        best = v.best()
        if best is not None:
            print(f"✅ {v.name}: best {best.throughput:.1f} img/s at batch {best.batch} ({v.model_bytes} bytes)")
    mem = report.memory
    print(f"🧠 allocator events: training {mem['training'].events}, frozen inference {mem['inference'].events}")


def cmd_report(run: Run) -> None:
    if not run.opts.inputs:
        raise ConfigError("'report' needs --inputs")
    combined = build_report(run.opts.inputs)
    for path in combined.save(run.out):
        run.output(path)
    print(combined.markdown())


HANDLERS: Dict[str, Callable[[Run], None]] = {
    "train": cmd_train,
    "calibrate": cmd_calibrate,
    "quantize": cmd_quantize,
    "eval": cmd_eval,
    "bench": cmd_bench,
    "report": cmd_report,
}


def main(argv: Optional[Sequence[str]] = None) -> int:
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except SystemExit as exc:
        return int(exc.code or 0)

    try:
        file_values = read_run_config(args.config) if args.config else {}
        opts = resolve(args.command, args, file_values)
        run = Run(opts)
        HANDLERS[args.command](run)
        path = run.close()
    except CONFIG_ERRORS as exc:
        print(f"❌ {exc}", file=sys.stderr)
        return 2
    except (EmberError, OSError) as exc:
        _logger.error("%s failed: %s", args.command, exc)
        print(f"💥 {exc}", file=sys.stderr)
        return 3
    print(f"📁 outputs and manifest in {path.parent}")
    return 0


if __name__ == "__main__":
    sys.exit(main())
