"""Bench report files: ``bench.json``, ``bench.csv`` and SVG line plots."""
import csv
from pathlib import Path
from typing import Dict, Iterable, List, Sequence, Tuple, Union
from xml.sax.saxutils import escape

from src.log_helper import get_logger

from .latency import BenchReport

_logger = get_logger(__name__)

CSV_COLUMNS = ("variant", "model_bytes", "batch", "mean_ms", "std_ms", "p50", "p99", "throughput", "error")
FORMATS = ("json", "csv", "svg")

WIDTH = 800
HEIGHT = 480
MARGIN = 60
PALETTE = ("#d62728", "#1f77b4", "#2ca02c", "#ff7f0e", "#9467bd", "#8c564b")

Series = Tuple[str, Sequence[Tuple[float, float]]]


def write_csv(report: BenchReport, path: Path) -> Path:
    with open(path, "w", newline="", encoding="utf-8") as fh:
        writer = csv.writer(fh)
        writer.writerow(CSV_COLUMNS)
        for variant in report.variants:
            for p in variant.points:
                writer.writerow(
                    [variant.name, variant.model_bytes, p.batch, p.mean_ms, p.std_ms, p.p50, p.p99, p.throughput, p.error or ""]
                )
    return path


def _scale(values: Iterable[float], lo_px: float, hi_px: float):
    values = list(values)
    lo, hi = min(values), max(values)
    span = hi - lo or 1.0
    return lambda v: lo_px + (v - lo) / span * (hi_px - lo_px), lo, hi


def render_svg(title: str, x_label: str, y_label: str, series: Sequence[Series]) -> str:
    """800 x 480 plot with one ``<polyline>`` per series."""
    points = [pt for _, pts in series for pt in pts]
    if not points:
        points = [(0.0, 0.0), (1.0, 1.0)]
    sx, x_lo, x_hi = _scale((p[0] for p in points), MARGIN, WIDTH - MARGIN)
    sy, y_lo, y_hi = _scale((p[1] for p in points), HEIGHT - MARGIN, MARGIN)

    parts = [
        f'<svg xmlns="http://www.w3.org/2000/svg" width="{WIDTH}" height="{HEIGHT}" viewBox="0 0 {WIDTH} {HEIGHT}">',
        f'<rect width="{WIDTH}" height="{HEIGHT}" fill="white"/>',
        f'<text x="{WIDTH / 2}" y="{MARGIN / 2}" text-anchor="middle" font-size="16">{escape(title)}</text>',
        f'<line x1="{MARGIN}" y1="{HEIGHT - MARGIN}" x2="{WIDTH - MARGIN}" y2="{HEIGHT - MARGIN}" stroke="black"/>',
        f'<line x1="{MARGIN}" y1="{MARGIN}" x2="{MARGIN}" y2="{HEIGHT - MARGIN}" stroke="black"/>',
        f'<text x="{WIDTH / 2}" y="{HEIGHT - 15}" text-anchor="middle" font-size="13">{escape(x_label)}</text>',
        f'<text x="15" y="{HEIGHT / 2}" text-anchor="middle" font-size="13" '
        f'transform="rotate(-90 15 {HEIGHT / 2})">{escape(y_label)}</text>',
        f'<text x="{MARGIN}" y="{HEIGHT - MARGIN + 18}" font-size="11">{x_lo:g}</text>',
        f'<text x="{WIDTH - MARGIN}" y="{HEIGHT - MARGIN + 18}" text-anchor="end" font-size="11">{x_hi:g}</text>',
        f'<text x="{MARGIN - 5}" y="{HEIGHT - MARGIN}" text-anchor="end" font-size="11">{y_lo:.4g}</text>',
        f'<text x="{MARGIN - 5}" y="{MARGIN + 4}" text-anchor="end" font-size="11">{y_hi:.4g}</text>',
    ]
    for i, (name, pts) in enumerate(series):
        color = PALETTE[i % len(PALETTE)]
        coords = " ".join(f"{sx(x):.2f},{sy(y):.2f}" for x, y in pts)
        parts.append(f'<polyline fill="none" stroke="{color}" stroke-width="2" points="{coords}"/>')
        parts.append(
            f'<text x="{WIDTH - MARGIN + 5}" y="{MARGIN + 16 * i}" font-size="11" fill="{color}">{escape(name)}</text>'
        )
    parts.append("</svg>")
    return "\n".join(parts)


def _batch_series(report: BenchReport, field: str) -> List[Series]:
    return [
        (v.name, [(float(p.batch), float(getattr(p, field))) for p in v.points if p.ok])
        for v in report.variants
    ]


def plots(report: BenchReport) -> Dict[str, str]:
    out = {
        "latency": render_svg("Mean latency vs batch", "batch size", "latency (ms)", _batch_series(report, "mean_ms")),
        "throughput": render_svg("Throughput vs batch", "batch size", "images / s", _batch_series(report, "throughput")),
    }
    if report.memory:
        series = [(mode, [(float(s), float(b)) for s, b in m.series_downsampled]) for mode, m in report.memory.items()]
        out["memory"] = render_svg("Active memory vs allocation sequence", "sequence", "active bytes", series)
    return out


def emit_report(
    report: BenchReport,
    out_dir: Union[str, Path],
    formats: Sequence[str] = FORMATS,
) -> List[Path]:
    """
    Write the requested formats into ``out_dir``.

    Returns:
        Paths written, in a stable order.

    Raises:
        ValueError: an unknown format name.
        OSError: the directory or a file cannot be written.
    """
    unknown = set(formats) - set(FORMATS)
    if unknown:
        raise ValueError(f"unknown report formats {sorted(unknown)}; expected {FORMATS}")
    out_dir = Path(out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    written = []
    if "json" in formats:
        path = out_dir / "bench.json"
        path.write_text(report.to_json(), encoding="utf-8")
        written.append(path)
    if "csv" in formats:
        written.append(write_csv(report, out_dir / "bench.csv"))
    if "svg" in formats:
        for name, svg in plots(report).items():
            path = out_dir / f"{name}.svg"
            path.write_text(svg, encoding="utf-8")
            written.append(path)
    _logger.info("bench report written to %s (%d files)", out_dir, len(written))
    return written
