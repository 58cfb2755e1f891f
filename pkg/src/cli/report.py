"""
Combined markdown / CSV report over run outputs.

Published reference values are appended as context rows and always carry
the origin tag ``PUBLISHED_TAG`` so they are never read as measurements.
"""
import csv
import io
import json
from dataclasses import asdict, dataclass
from pathlib import Path
from typing import Iterable, List, Optional, Sequence, Union

from src.bench.latency import BenchReport
from src.errors import ConfigError
from src.log_helper import get_logger
from src.training.trainer import read_history

_logger = get_logger(__name__)

PUBLISHED_TAG = "published, not reproduced"
MEASURED_TAG = "measured"
COLUMNS = ("origin", "source", "variant", "split", "loss", "mpa", "miou", "fps")


@dataclass(frozen=True)
class ReportRow:
    origin: str
    source: str
    variant: str
    split: str
    loss: Optional[float] = None
    mpa: Optional[float] = None
    miou: Optional[float] = None
    fps: Optional[float] = None


# activation comparison, percentages and frames per second
ACTIVATION_CONTEXT = (
    ReportRow(PUBLISHED_TAG, "activation study", "relu", "val", 0.000295, 93.4, 86.0, 65.9),
    ReportRow(PUBLISHED_TAG, "activation study", "relu", "test", 0.000289, 93.6, 85.9, 66.7),
    ReportRow(PUBLISHED_TAG, "activation study", "elu", "val", 0.000324, 93.1, 84.8, 62.4),
    ReportRow(PUBLISHED_TAG, "activation study", "elu", "test", 0.000324, 93.1, 84.3, 62.0),
    ReportRow(PUBLISHED_TAG, "activation study", "prelu", "val", 0.000289, 92.9, 86.3, 64.3),
    ReportRow(PUBLISHED_TAG, "activation study", "prelu", "test", 0.000280, 93.0, 86.0, 65.6),
)

BASELINE_CONTEXT = (
    ReportRow(PUBLISHED_TAG, "baselines", "Deeplabv3+", "test", None, 92.09, 86.75, 24.0),
    ReportRow(PUBLISHED_TAG, "baselines", "Xceptiondeeplabv3+", "test", None, 91.40, 86.49, 62.0),
    ReportRow(PUBLISHED_TAG, "baselines", "Fire Segmentation Method", "test", None, 92.46, 86.98, 59.0),
)

CONTEXT_ROWS = ACTIVATION_CONTEXT + BASELINE_CONTEXT


def _percent(value: Optional[float]) -> Optional[float]:
    return None if value is None else 100.0 * float(value)


def _variant_of(run_dir: Path) -> str:
    meta = run_dir / "checkpoint" / "meta.json"
    if meta.exists():
        data = json.loads(meta.read_text(encoding="utf-8"))
        return str(data.get("train_config", {}).get("activation", run_dir.name))
    return run_dir.name


def rows_from_eval(path: Path) -> List[ReportRow]:
    data = json.loads(path.read_text(encoding="utf-8"))
    timing = path.with_name("timing.json")
    fps = json.loads(timing.read_text(encoding="utf-8")).get("fps") if timing.exists() else None
    return [
        ReportRow(
            MEASURED_TAG,
            path.parent.name,
            str(data.get("model", path.parent.name)),
            str(data.get("split", "")),
            data.get("loss"),
            _percent(data.get("mpa")),
            _percent(data.get("miou")),
            fps,
        )
    ]


def rows_from_history(path: Path) -> List[ReportRow]:
    """Last validation row and the test row of a training history."""
    history = read_history(path)
    variant = _variant_of(path.parent)
    rows = []
    for split_name in ("val", "test"):
        matching = [r for r in history if r.split == split_name]
        if matching:
            last = matching[-1]
            rows.append(
                ReportRow(MEASURED_TAG, path.parent.name, variant, split_name, last.loss, _percent(last.mpa), _percent(last.miou))
            )
    return rows


def bench_table(report: BenchReport, source: str) -> List[str]:
    lines = [
        f"### {source}",
        "",
        "| variant | model bytes | batch | mean ms | std ms | p99 ms | images/s |",
        "|---|---:|---:|---:|---:|---:|---:|",
    ]
    for v in report.variants:
        for p in v.points:
            if not p.ok:
                lines.append(f"| {v.name} | {v.model_bytes} | {p.batch} | failed: {p.error} | | | |")
                continue
            lines.append(
                f"| {v.name} | {v.model_bytes} | {p.batch} | {p.mean_ms:.3f} | {p.std_ms:.3f} | {p.p99:.3f} | {p.throughput:.1f} |"
            )
    for name, ratio in report.speedup.items():
        lines.append(f"\nthroughput ratio {name} / {report.variants[0].name}: {ratio:.3f}")
    for mode, mem in report.memory.items():
        lines.append(
            f"\n{mode}: {mem.events} allocator events, {mem.total_bytes} bytes allocated, peak {mem.peak_bytes} B"
        )
    lines.append("")
    return lines


def _expand(inputs: Iterable[Union[str, Path]]) -> List[Path]:
    files = []
    for item in inputs:
        path = Path(item)
        if path.is_dir():
            files += [path / n for n in ("history.csv", "eval.json", "bench.json") if (path / n).exists()]
        elif path.exists():
            files.append(path)
        else:
            raise ConfigError(f"report input '{path}' does not exist")
    return files


def _fmt(value: Optional[float], digits: int = 2) -> str:
    if value is None or value != value:
        return ""
    if abs(value) < 0.01 and value != 0:
        return f"{value:.6f}"
    return f"{value:.{digits}f}"


def build_report(inputs: Sequence[Union[str, Path]]) -> "CombinedReport":
    measured: List[ReportRow] = []
    benches = []
    for path in _expand(inputs):
        if path.name.endswith(".csv"):
            measured += rows_from_history(path)
        elif path.name == "bench.json":
            benches.append((path.parent.name, BenchReport.from_json(path.read_text(encoding="utf-8"))))
        elif path.suffix == ".json":
            measured += rows_from_eval(path)
        else:
            raise ConfigError(f"cannot report on '{path}'")
    _logger.info("report over %d measured rows and %d bench runs", len(measured), len(benches))
    return CombinedReport(measured, list(CONTEXT_ROWS), benches)


@dataclass
class CombinedReport:
    measured: List[ReportRow]
    context: List[ReportRow]
    benches: list

    @property
    def rows(self) -> List[ReportRow]:
        return self.measured + self.context

    def markdown(self) -> str:
        lines = [
            "# Ember run report",
            "",
            "MPA and MIoU in percent. Rows tagged "
            f"'{PUBLISHED_TAG}' are published reference values shown for context only.",
            "",
            "| origin | source | variant | split | loss | MPA | MIoU | FPS |",
            "|---|---|---|---|---:|---:|---:|---:|",
        ]
        for r in self.rows:
            lines.append(
                f"| {r.origin} | {r.source} | {r.variant} | {r.split} | {_fmt(r.loss)} | "
                f"{_fmt(r.mpa)} | {_fmt(r.miou)} | {_fmt(r.fps, 1)} |"
            )
        lines.append("")
        if self.benches:
            lines += ["## Benchmarks", ""]
            for source, bench in self.benches:
                lines += bench_table(bench, source)
        return "\n".join(lines)

    def csv(self) -> str:
        buf = io.StringIO()
        writer = csv.DictWriter(buf, fieldnames=COLUMNS, lineterminator="\n")
        writer.writeheader()
        for r in self.rows:
            writer.writerow({k: ("" if v is None else v) for k, v in asdict(r).items()})
        return buf.getvalue()

    def save(self, out_dir: Union[str, Path]) -> List[Path]:
        out_dir = Path(out_dir)
        out_dir.mkdir(parents=True, exist_ok=True)
        md = out_dir / "report.md"
        table = out_dir / "report.csv"
        md.write_text(self.markdown(), encoding="utf-8")
        table.write_text(self.csv(), encoding="utf-8")
        return [md, table]
