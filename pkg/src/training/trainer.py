"""
Training loop: Lion updates, optional AMP with loss scaling, optional QAT,
periodic validation and best-validation-loss checkpointing.
"""
import csv
import json
import math
from dataclasses import asdict, dataclass, field
from pathlib import Path
from typing import Dict, List, Optional, Sequence, Tuple, Union

import numpy as np
from pydantic import BaseModel, ConfigDict, Field, field_validator

from src.data.samples import DEFAULT_SPLIT, Sample, split, stack_batch
from src.errors import EmptySplitError, UndefinedMetricError
from src.log_helper import get_logger
from src.metrics.confusion import ConfusionMatrix, argmax_mask
from src.network.functional import ActivationKind
from src.network.graph import NetworkGraph, QuantHooks
from src.network.serialize import load_model, save_model
from src.quant.fake_quant import QatObserver
from src.training.augment import augment
from src.training.lion import LionState, lion_step
from src.training.loss import cross_entropy_loss
from src.training.scaler import LossScaler
from src.training.schedule import cosine_lr

_logger = get_logger(__name__)

HISTORY_COLUMNS = ("step", "epoch", "split", "loss", "mpa", "miou")
MODEL_FILE = "model.emb"
LION_FILE = "lion.npz"
SCALER_FILE = "scaler.json"
META_FILE = "meta.json"


class TrainConfig(BaseModel):
    model_config = ConfigDict(frozen=True)

    epochs: int = Field(default=30, ge=1)
    batch_size: int = Field(default=2, ge=1)
    val_every: int = Field(default=200, ge=1)
    eval_batch_size: int = Field(default=8, ge=1)
    split: Tuple[float, float, float] = DEFAULT_SPLIT
    seed: int = 0
    activation: ActivationKind = ActivationKind.RELU
    lr: float = Field(default=3e-4, gt=0)
    warmup_fraction: float = Field(default=0.05, ge=0, lt=1)
    weight_decay: float = Field(default=0.01, ge=0)
    beta1: float = Field(default=0.9, gt=0, lt=1)
    beta2: float = Field(default=0.99, gt=0, lt=1)
    amp: bool = False
    loss_scale: float = 128.0
    dynamic_loss_scale: bool = False
    qat: bool = False
    qat_start_epoch: int = Field(default=2, ge=0)
    augment: bool = True
    augment_test: bool = False
    jitter: float = Field(default=0.1, ge=0, le=0.5)

    @field_validator("split")
    @classmethod
    def _fractions(cls, value):
        if any(f < 0 for f in value) or abs(sum(value) - 1.0) > 1e-6:
            raise ValueError(f"split fractions must be non-negative and sum to 1, got {value}")
        return value


@dataclass
class HistoryRow:
    step: int
    epoch: int
    split: str
    loss: float
    mpa: float
    miou: float


@dataclass
class EvalResult:
    loss: float
    confusion: ConfusionMatrix
    images: int

    @property
    def mpa(self) -> float:
        return self.confusion.mpa().class_mean

    @property
    def global_accuracy(self) -> float:
        return self.confusion.mpa().global_accuracy

    @property
    def miou(self) -> float:
        try:
            return self.confusion.miou()
        except UndefinedMetricError:
            return float("nan")


@dataclass
class AmpStep:
    loss: float
    grads: Optional[dict]
    logits: np.ndarray
    # running statistics to commit only when the step is taken
    buffers: Dict[str, np.ndarray] = field(default_factory=dict)

    @property
    def skipped(self) -> bool:
        return self.grads is None


@dataclass
class TrainResult:
    history: List[HistoryRow] = field(default_factory=list)
    best_val_loss: float = math.inf
    best_step: int = -1
    steps: int = 0
    optimizer_steps: int = 0
    skipped_steps: int = 0
    checkpoint: Optional[Path] = None
    test: Optional[EvalResult] = None


def amp_forward_backward(
    graph: NetworkGraph,
    images: np.ndarray,
    masks: np.ndarray,
    scaler: LossScaler,
    hooks: Optional[QuantHooks] = None,
) -> AmpStep:
    """
    One mixed-precision step: binary16-cast convolutions, F32 loss and
    gradients, loss scaled before backward and gradients unscaled after.

    Returns ``grads=None`` (a skip) when any gradient is non-finite.
    """
    fp = graph.forward(images, training=True, amp=True, hooks=hooks, update_buffers=False)
    loss, grad = cross_entropy_loss(fp.output, masks)
    scaled = fp.backward(grad * np.float32(scaler.scale))
    return AmpStep(loss, scaler.unscale(scaled.param_grads), fp.output, fp.buffer_updates)


def forward_backward(
    graph: NetworkGraph, images: np.ndarray, masks: np.ndarray, hooks: Optional[QuantHooks] = None
) -> AmpStep:
    fp = graph.forward(images, training=True, hooks=hooks, update_buffers=False)
    loss, grad = cross_entropy_loss(fp.output, masks)
    grads = fp.backward(grad).param_grads
    if any(not np.isfinite(g).all() for g in grads.values()):
        return AmpStep(loss, None, fp.output)
    return AmpStep(loss, grads, fp.output, fp.buffer_updates)


def evaluate(
    graph: NetworkGraph,
    samples: Sequence[Sample],
    batch_size: int = 8,
    hooks: Optional[QuantHooks] = None,
) -> EvalResult:
    """Inference-mode loss and confusion matrix over ``samples``."""
    cm = ConfusionMatrix(2)
    total_loss = 0.0
    pixels = 0
    for start in range(0, len(samples), batch_size):
        images, masks = stack_batch(samples[start: start + batch_size])
        logits = graph.forward(images, hooks=hooks).output
        loss, _ = cross_entropy_loss(logits, masks)
        total_loss += loss * masks.size
        pixels += masks.size
        cm.update(argmax_mask(logits), masks)
    return EvalResult(total_loss / pixels if pixels else float("nan"), cm, len(samples))


def augmented_copies(samples: Sequence[Sample], seed: int, jitter: float = 0.1) -> List[Sample]:
    """One augmented copy per sample, each drawn from its own seeded generator."""
    return [
        augment(s, np.random.default_rng([seed, 0x7E57, i]), jitter, suffix="-aug")
        for i, s in enumerate(samples)
    ]


def save_checkpoint(
    directory: Union[str, Path],
    graph: NetworkGraph,
    lion: LionState,
    scaler: Optional[LossScaler],
    meta: dict,
) -> Path:
    directory = Path(directory)
    directory.mkdir(parents=True, exist_ok=True)
    save_model(graph, directory / MODEL_FILE)
    lion.save(directory / LION_FILE)
    if scaler is not None:
        scaler.save(directory / SCALER_FILE)
    (directory / META_FILE).write_text(json.dumps(meta, indent=2), encoding="utf-8")
    return directory


def load_checkpoint(directory: Union[str, Path]) -> Tuple[NetworkGraph, LionState, Optional[LossScaler], dict]:
    directory = Path(directory)
    scaler_path = directory / SCALER_FILE
    return (
        load_model(directory / MODEL_FILE),
        LionState.load(directory / LION_FILE),
        LossScaler.load(scaler_path) if scaler_path.exists() else None,
        json.loads((directory / META_FILE).read_text(encoding="utf-8")),
    )


def write_history(rows: Sequence[HistoryRow], path: Union[str, Path]) -> Path:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    with path.open("w", newline="", encoding="utf-8") as fh:
        writer = csv.DictWriter(fh, fieldnames=HISTORY_COLUMNS)
        writer.writeheader()
        for row in rows:
            writer.writerow(asdict(row))
    return path


def read_history(path: Union[str, Path]) -> List[HistoryRow]:
    with Path(path).open(newline="", encoding="utf-8") as fh:
        return [
            HistoryRow(int(r["step"]), int(r["epoch"]), r["split"], float(r["loss"]), float(r["mpa"]), float(r["miou"]))
            for r in csv.DictReader(fh)
        ]


def _row(step: int, epoch: int, split_name: str, result: EvalResult) -> HistoryRow:
    return HistoryRow(step, epoch, split_name, result.loss, result.mpa, result.miou)


def fit(
    graph: NetworkGraph,
    train_set: Sequence[Sample],
    val_set: Sequence[Sample],
    config: Optional[TrainConfig] = None,
    out_dir: Optional[Union[str, Path]] = None,
    test_set: Sequence[Sample] = (),
) -> TrainResult:
    """
    Train ``graph`` in place on ``train_set``.

    Validation runs every ``config.val_every`` steps and at the end of each
    epoch. Whenever validation loss improves, a checkpoint is written to
    ``out_dir/checkpoint`` (when ``out_dir`` is given).

    Raises:
        EmptySplitError: the training or validation set is empty.
    """
    config = config or TrainConfig()
    if not train_set:
        raise EmptySplitError("training split is empty")
    if not val_set:
        raise EmptySplitError("validation split is empty")

    keys = graph.trainable_keys()
    params = {k: graph.params[k].data for k in keys}
    lion = LionState.for_params(
        params, beta1=config.beta1, beta2=config.beta2, weight_decay=config.weight_decay, lr=config.lr
    )
    scaler = None
    if config.amp:
        scaler = LossScaler("dynamic" if config.dynamic_loss_scale else "static", config.loss_scale)
    observer = QatObserver() if config.qat else None
    checkpoint_dir = Path(out_dir) / "checkpoint" if out_dir is not None else None

    steps_per_epoch = math.ceil(len(train_set) / config.batch_size)
    total_steps = steps_per_epoch * config.epochs
    result = TrainResult()

    def validate(step: int, epoch: int) -> None:
        hooks = None
        if observer is not None and epoch >= config.qat_start_epoch:
            observer.observing = False
            hooks = observer
        val = evaluate(graph, val_set, config.eval_batch_size, hooks)
        if observer is not None:
            observer.observing = True
        result.history.append(_row(step, epoch, "val", val))
        _logger.info("step %d epoch %d: val loss %.5f MPA %.4f MIoU %.4f", step, epoch, val.loss, val.mpa, val.miou)
        if val.loss < result.best_val_loss:
            result.best_val_loss = val.loss
            result.best_step = step
            if checkpoint_dir is not None:
                meta = {
                    "step": step,
                    "epoch": epoch,
                    "val_loss": val.loss,
                    "val_miou": val.miou,
                    "train_config": config.model_dump(mode="json"),
                    "qat_ranges": observer.state_dict() if observer is not None else {},
                }
                result.checkpoint = save_checkpoint(checkpoint_dir, graph, lion, scaler, meta)
                _logger.info("new best checkpoint at step %d (val loss %.5f)", step, val.loss)

    step = 0
    for epoch in range(config.epochs):
        hooks = observer if observer is not None and epoch >= config.qat_start_epoch else None
        if observer is not None and epoch == config.qat_start_epoch:
            _logger.info("epoch %d: fake quantization enabled", epoch)
        order = np.random.default_rng([config.seed, epoch]).permutation(len(train_set))
        validated_at = -1
        for start in range(0, len(order), config.batch_size):
            batch = []
            for i in order[start: start + config.batch_size]:
                sample = train_set[int(i)]
                if config.augment:
                    sample = augment(sample, np.random.default_rng([config.seed, epoch, int(i)]), config.jitter)
                batch.append(sample)
            images, masks = stack_batch(batch)

            lr = cosine_lr(step, total_steps, config.lr, config.warmup_fraction)
            if scaler is not None:
                outcome = amp_forward_backward(graph, images, masks, scaler, hooks)
            else:
                outcome = forward_backward(graph, images, masks, hooks)
            if outcome.skipped:
                result.skipped_steps += 1
                _logger.debug("step %d skipped: non-finite gradients", step)
            else:
                lion_step(params, outcome.grads, lion, lr)
                graph.apply_buffers(outcome.buffers)
                result.optimizer_steps += 1

            cm = ConfusionMatrix(2).update(argmax_mask(outcome.logits), masks)
            result.history.append(
                _row(step, epoch, "train", EvalResult(outcome.loss, cm, len(batch)))
            )
            step += 1
            if step % config.val_every == 0:
                validate(step, epoch)
                validated_at = step
        if validated_at != step:
            validate(step, epoch)
        _logger.info("epoch %d/%d done after %d steps", epoch + 1, config.epochs, step)

    result.steps = step
    if test_set:
        hooks = observer if observer is not None and config.epochs > config.qat_start_epoch else None
        if hooks is not None:
            observer.observing = False
        result.test = evaluate(graph, test_set, config.eval_batch_size, hooks)
        result.history.append(_row(step, config.epochs - 1, "test", result.test))
    if out_dir is not None:
        write_history(result.history, Path(out_dir) / "history.csv")
    return result


def train(
    graph: NetworkGraph,
    dataset: Sequence[Sample],
    config: Optional[TrainConfig] = None,
    out_dir: Optional[Union[str, Path]] = None,
) -> TrainResult:
    """Split ``dataset`` with the configured fractions and seed, then ``fit``."""
    config = config or TrainConfig()
    train_set, val_set, test_set = split(dataset, config.split, config.seed)
    if config.augment_test:
        test_set = list(test_set) + augmented_copies(test_set, config.seed, config.jitter)
    _logger.info("split %d samples into %d/%d/%d", len(dataset), len(train_set), len(val_set), len(test_set))
    return fit(graph, train_set, val_set, config, out_dir, test_set)
