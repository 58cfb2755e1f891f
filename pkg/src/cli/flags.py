"""
Single flag table for every subcommand.

``build_parser`` is generated from ``FLAGS`` so the help text, the run-config
file keys and the accepted options cannot drift apart. Overridable flags
parse to ``None`` when absent; ``runconfig.resolve`` then falls back to the
config file and finally to ``Flag.default``.
"""
from dataclasses import dataclass
from typing import Any, Callable, Dict, List, Optional, Sequence, Tuple
import argparse

from src.network.functional import ActivationKind

COMMANDS = ("train", "calibrate", "quantize", "eval", "bench", "report")
DATA_COMMANDS = ("train", "calibrate", "quantize", "eval")
MODEL_COMMANDS = ("calibrate", "quantize", "eval", "bench")
ALL = COMMANDS

ACTIVATIONS = tuple(k.value for k in (ActivationKind.RELU, ActivationKind.ELU, ActivationKind.PRELU))
SPLITS = ("train", "val", "test", "all")


def int_list(value: str) -> Tuple[int, ...]:
    try:
        return tuple(int(v) for v in str(value).replace(" ", "").split(",") if v)
    except ValueError:
        raise argparse.ArgumentTypeError(f"expected comma-separated integers, got '{value}'")


def float_list(value: str) -> Tuple[float, ...]:
    try:
        return tuple(float(v) for v in str(value).replace(" ", "").split(",") if v)
    except ValueError:
        raise argparse.ArgumentTypeError(f"expected comma-separated numbers, got '{value}'")


def str_list(value: str) -> Tuple[str, ...]:
    return tuple(v.strip() for v in str(value).split(",") if v.strip())


def boolean(value: Any) -> bool:
    if isinstance(value, bool):
        return value
    text = str(value).strip().lower()
    if text in ("1", "true", "yes", "on"):
        return True
    if text in ("0", "false", "no", "off"):
        return False
    raise argparse.ArgumentTypeError(f"expected a boolean, got '{value}'")


@dataclass(frozen=True)
class Flag:
    name: str
    help: str
    commands: Tuple[str, ...]
    type: Optional[Callable[[str], Any]] = str
    default: Any = None
    choices: Optional[Sequence[str]] = None
    switch: bool = False
    section: str = "run"
    # seed, out and config are handled before the config file is read
    configurable: bool = True

    @property
    def dest(self) -> str:
        return self.name.lstrip("-").replace("-", "_")

    def convert(self, value: Any) -> Any:
        if value is None:
            return None
        if self.switch:
            return boolean(value)
        value = self.type(value) if self.type is not None and isinstance(value, str) else value
        if self.choices is not None and value not in self.choices:
            raise ValueError(f"{self.name} must be one of {', '.join(self.choices)}; got '{value}'")
        return value


def _seed_default() -> int:
    from src.config import settings

    return settings.EMBER_SEED


def _calib_default() -> int:
    from src.config import settings

    return settings.EMBER_CALIB_BATCHES


def _loss_scale_default() -> float:
    from src.config import settings

    return settings.EMBER_LOSS_SCALE


FLAGS: Tuple[Flag, ...] = (
    # shared
    Flag("--out", "run directory for every output (default: RUNS_DIR/<command>)", ALL, configurable=False),
    Flag("--seed", "seed for data, initialisation and shuffling (default: EMBER_SEED)", ALL, int, _seed_default, configurable=False),
    Flag("--config", "run config file (INI 'key = value' with sections)", ALL, configurable=False),
    # data
    Flag("--synthetic", "generate a synthetic set whose training split holds N samples", DATA_COMMANDS, int, section="data"),
    Flag("--manifest", "dataset manifest of 'image<TAB>mask' lines", DATA_COMMANDS, section="data"),
    Flag("--size", "side length samples are generated at or resized to (model commands use the model input size)", DATA_COMMANDS, int, 64, section="data"),
    Flag("--strict-masks", "reject mask values other than 0 and 255", DATA_COMMANDS, switch=True, default=False, section="data"),
    Flag("--split-fractions", "train,val,test fractions summing to 1", DATA_COMMANDS, float_list, (0.7, 0.15, 0.15), section="data"),
    # model
    Flag("--model", "model file (.emb) to load", MODEL_COMMANDS, section="model"),
    Flag("--bottlenecks", "backbone bottleneck count (1..15)", ("train",), int, 3, section="model"),
    Flag("--width", "channel width multiplier", ("train",), float, 0.25, section="model"),
    Flag("--full-model", "build the 15-bottleneck 512x512 configuration", ("train",), switch=True, default=False, section="model"),
    # training
    Flag("--epochs", "training epochs", ("train",), int, 30, section="train"),
    Flag("--batch-size", "samples per step (eval and calibrate: per forward)", DATA_COMMANDS, int, 2, section="train"),
    Flag("--val-every", "validate every N optimizer steps", ("train",), int, 200, section="train"),
    Flag("--activation", "bottleneck activation", ("train",), str, "relu", ACTIVATIONS, section="train"),
    Flag("--lr", "peak learning rate", ("train",), float, 3e-4, section="train"),
    Flag("--weight-decay", "Lion decoupled weight decay", ("train",), float, 0.01, section="train"),
    Flag("--amp", "mixed-precision training with loss scaling", ("train",), switch=True, default=False, section="train"),
    Flag("--loss-scale", "initial AMP loss scale (default: EMBER_LOSS_SCALE)", ("train",), float, _loss_scale_default, section="train"),
    Flag("--dynamic-loss-scale", "halve/grow the loss scale on overflow", ("train",), switch=True, default=False, section="train"),
    Flag("--qat", "fake-quantize weights and activations from the third epoch", ("train",), switch=True, default=False, section="train"),
    Flag("--no-augment", "disable flip and perspective augmentation", ("train",), switch=True, default=False, section="train"),
    Flag("--augment-test", "append one augmented copy per test sample", ("train",), switch=True, default=False, section="train"),
    # quantization
    Flag("--policy", "policy file (INI); default: FP16 with INT8 residual adds", ("calibrate", "quantize"), section="quant"),
    Flag("--calibration", "calibration.json from 'calibrate' (quantize recalibrates when absent)", ("quantize",), section="quant"),
    Flag("--calib-batches", "calibration batches (default: EMBER_CALIB_BATCHES)", ("calibrate", "quantize"), int, _calib_default, section="quant"),
    # eval
    Flag("--split", "which split to evaluate", ("eval",), str, "test", SPLITS, section="eval"),
    # bench
    Flag("--quantized", "quantized model compared against --model", ("bench",), section="bench"),
    Flag("--batch-sizes", "comma-separated sweep batch sizes", ("bench",), int_list, (2, 4, 8, 16, 32), section="bench"),
    Flag("--warmup", "discarded iterations per point", ("bench",), int, 10, section="bench"),
    Flag("--measured", "timed iterations per point (>= 2)", ("bench",), int, 100, section="bench"),
    Flag("--workers", "threads for the multi-worker throughput mode (0 disables)", ("bench",), int, 0, section="bench"),
    Flag("--formats", "report formats: json,csv,svg", ("bench",), str_list, ("json", "csv", "svg"), section="bench"),
    # report
    Flag("--inputs", "run directories or eval.json / bench.json / history.csv files", ("report",), str_list, (), section="report"),
)

DESCRIPTIONS: Dict[str, str] = {
    "train": "Train the segmentation network (Lion, optional AMP and QAT).",
    "calibrate": "Collect activation statistics and per-layer int8 parameters.",
    "quantize": "Convert a model to mixed INT8/FP16/FP32 precision.",
    "eval": "Loss, MPA, MIoU and FPS of a model on a dataset split.",
    "bench": "Latency/throughput batch sweep and allocation timelines.",
    "report": "Combine run outputs into markdown and CSV tables.",
}


def flags_for(command: str) -> List[Flag]:
    return [f for f in FLAGS if command in f.commands]


def flag_by_dest(dest: str) -> Flag:
    for f in FLAGS:
        if f.dest == dest:
            return f
    raise KeyError(dest)


def default_of(flag: Flag) -> Any:
    return flag.default() if callable(flag.default) else flag.default


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="ember", description="Quantized fire-segmentation toolkit.")
    sub = parser.add_subparsers(dest="command", required=True, metavar="command")
    for command in COMMANDS:
        p = sub.add_parser(command, help=DESCRIPTIONS[command], description=DESCRIPTIONS[command])
        for f in flags_for(command):
            kwargs: Dict[str, Any] = {"dest": f.dest, "default": None, "help": f.help}
            if f.switch:
                kwargs["action"] = "store_const"
                kwargs["const"] = True
            else:
                kwargs["type"] = f.type
                kwargs["metavar"] = f.dest.upper()
                if f.choices is not None:
                    kwargs["choices"] = f.choices
                    kwargs["metavar"] = "{" + ",".join(f.choices) + "}"
            p.add_argument(f.name, **kwargs)
    return parser
