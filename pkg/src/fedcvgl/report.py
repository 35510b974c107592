"""Merging per-scenario metrics and rendering comparison tables and charts.

The comparison table reports, per scenario, the maximum recall over rounds
for total-distance, lateral and azimuth thresholds, plus a second table for
the combined (lateral AND azimuth) families. Optional SVG line charts plot
recall against communication round for the 5 m lateral and 5 degree azimuth
metrics.
"""

from __future__ import annotations

import csv
from pathlib import Path

TABLE_COLUMNS = [
    ("distance", 1.0, "Distance 1m"),
    ("distance", 3.0, "Distance 3m"),
    ("distance", 5.0, "Distance 5m"),
    ("lateral", 1.0, "Lateral 1m"),
    ("lateral", 3.0, "Lateral 3m"),
    ("lateral", 5.0, "Lateral 5m"),
    ("azimuth", 1.0, "Angle 1deg"),
    ("azimuth", 3.0, "Angle 3deg"),
    ("azimuth", 5.0, "Angle 5deg"),
]

COMBINED_COLUMNS = [
    (1.0, "Lat 1m & Angle 1deg"),
    (3.0, "Lat 3m & Angle 3deg"),
    (5.0, "Lat 5m & Angle 5deg"),
]


def load_metrics_csv(path) -> list:
    rows = []
    with open(path, newline="") as f:
        reader = csv.DictReader(f)
        for rec in reader:
            rows.append(
                (
                    rec["scenario"],
                    int(rec["round"]),
                    rec["metric_family"],
                    float(rec["threshold"]),
                    float(rec["value_percent"]),
                )
            )
    if not rows:
        raise ValueError(f"{path}: no metric rows")
    return rows


def merge_metrics(in_dirs) -> list:
    rows = []
    for d in in_dirs:
        rows.extend(load_metrics_csv(Path(d) / "metrics.csv"))
    return rows


def scenario_maxima(rows) -> dict:
    """scenario -> (family, threshold) -> max value over rounds."""
    out: dict = {}
    for scenario, _rnd, fam, th, val in rows:
        cur = out.setdefault(scenario, {})
        key = (fam, th)
        cur[key] = max(cur.get(key, 0.0), val)
    return out


def _fmt_table(header, rows) -> str:
    widths = [max(len(str(h)), *(len(str(r[i])) for r in rows)) for i, h in enumerate(header)]
    def fmt(row):
        return "  ".join(str(c).rjust(w) for c, w in zip(row, widths))
    sep = "-" * (sum(widths) + 2 * (len(widths) - 1))
    return "\n".join([fmt(header), sep] + [fmt(r) for r in rows])


def comparison_tables(rows) -> str:
    maxima = scenario_maxima(rows)
    scenarios = sorted(maxima)
    main_rows = []
    for sc in scenarios:
        main_rows.append([sc] + [f"{maxima[sc].get((fam, th), float('nan')):.2f}"
                                 for fam, th, _ in TABLE_COLUMNS])
    comb_rows = []
    for sc in scenarios:
        comb_rows.append([sc] + [f"{maxima[sc].get(('combined', th), float('nan')):.2f}"
                                 for th, _ in COMBINED_COLUMNS])
    lon_rows = []
    for sc in scenarios:
        lon_rows.append([sc] + [f"{maxima[sc].get(('longitudinal', th), float('nan')):.2f}"
                                for th in (1.0, 3.0, 5.0)])
    text = "Maximum recall per scenario (percent)\n\n"
    text += _fmt_table(["Scenario"] + [c[2] for c in TABLE_COLUMNS], main_rows)
    text += "\n\nCombined metrics\n\n"
    text += _fmt_table(["Scenario"] + [c[1] for c in COMBINED_COLUMNS], comb_rows)
    text += "\n\nLongitudinal (not part of the headline table)\n\n"
    text += _fmt_table(["Scenario", "Long 1m", "Long 3m", "Long 5m"], lon_rows)
    return text


def write_comparison_csv(path, rows) -> None:
    maxima = scenario_maxima(rows)
    with open(path, "w", newline="") as f:
        w = csv.writer(f)
        w.writerow(["scenario"] + [c[2] for c in TABLE_COLUMNS]
                   + [c[1] for c in COMBINED_COLUMNS])
        for sc in sorted(maxima):
            w.writerow([sc]
                       + [repr(maxima[sc].get((fam, th), float("nan"))) for fam, th, _ in TABLE_COLUMNS]
                       + [repr(maxima[sc].get(("combined", th), float("nan"))) for th, _ in COMBINED_COLUMNS])


_PALETTE = ("#1f77b4", "#d62728", "#2ca02c", "#9467bd", "#8c564b", "#e377c2")


def line_chart_svg(series: dict, title: str, path) -> None:
    """Recall-vs-round polyline chart, no third-party plotting.

    ``series`` maps a scenario name to [(round, value_percent), ...].
    """
    w, h = 640, 420
    ml, mr, mt, mb = 60, 180, 40, 50
    pw, ph = w - ml - mr, h - mt - mb
    rounds = sorted({r for pts in series.values() for r, _ in pts})
    if not rounds:
        raise ValueError("line_chart_svg: empty series")
    rmin, rmax = min(rounds), max(rounds)
    rspan = max(1, rmax - rmin)

    def x(r):
        return ml + pw * (r - rmin) / rspan

    def y(v):
        return mt + ph * (1.0 - v / 100.0)

    parts = [
        f'<svg xmlns="http://www.w3.org/2000/svg" width="{w}" height="{h}" '
        f'font-family="sans-serif" font-size="12">',
        f'<text x="{ml}" y="{mt - 16}" font-size="15">{title}</text>',
        f'<rect x="{ml}" y="{mt}" width="{pw}" height="{ph}" fill="none" stroke="#333"/>',
    ]
    for frac in (0.0, 0.25, 0.5, 0.75, 1.0):
        yy = mt + ph * (1 - frac)
        parts.append(f'<line x1="{ml}" y1="{yy}" x2="{ml + pw}" y2="{yy}" stroke="#ddd"/>')
        parts.append(f'<text x="{ml - 8}" y="{yy + 4}" text-anchor="end">{frac * 100:.0f}%</text>')
    for r in rounds:
        parts.append(f'<text x="{x(r)}" y="{mt + ph + 18}" text-anchor="middle">{r}</text>')
    parts.append(f'<text x="{ml + pw / 2}" y="{h - 12}" text-anchor="middle">communication round</text>')
    for i, (name, pts) in enumerate(sorted(series.items())):
        color = _PALETTE[i % len(_PALETTE)]
        coords = " ".join(f"{x(r):.1f},{y(v):.1f}" for r, v in sorted(pts))
        parts.append(f'<polyline points="{coords}" fill="none" stroke="{color}" stroke-width="2"/>')
        ly = mt + 16 + 18 * i
        parts.append(f'<line x1="{ml + pw + 10}" y1="{ly - 4}" x2="{ml + pw + 34}" y2="{ly - 4}" '
                     f'stroke="{color}" stroke-width="2"/>')
        parts.append(f'<text x="{ml + pw + 40}" y="{ly}">{name}</text>')
    parts.append("</svg>")
    Path(path).write_text("\n".join(parts))


def generate_report(in_dirs, out_dir, svg: bool = False) -> dict:
    """Merge per-scenario metrics and emit the comparison artifacts."""
    out_dir = Path(out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    rows = merge_metrics(in_dirs)
    text = comparison_tables(rows)
    (out_dir / "comparison.txt").write_text(text + "\n")
    write_comparison_csv(out_dir / "comparison.csv", rows)
    outputs = {"text": out_dir / "comparison.txt", "csv": out_dir / "comparison.csv"}
    if svg:
        for fam, th, fname, title in (
            ("lateral", 5.0, "recall_lateral_5m.svg", "Lateral recall @ 5 m"),
            ("azimuth", 5.0, "recall_azimuth_5deg.svg", "Azimuth recall @ 5 deg"),
        ):
            series: dict = {}
            for scenario, rnd, family, threshold, value in rows:
                if family == fam and threshold == th:
                    series.setdefault(scenario, []).append((rnd, value))
            line_chart_svg(series, title, out_dir / fname)
            outputs[fname] = out_dir / fname
    return {"rows": rows, "text": text, "outputs": outputs}
