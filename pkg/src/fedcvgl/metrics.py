"""Threshold-recall metrics over pose errors.

A sample counts as recalled when its error is strictly below the threshold:
lateral/longitudinal/total-planar distance against 1/3/5 m, azimuth against
1/3/5 degrees, and the combined families pair the i-th distance threshold
with the i-th angle threshold (lat < d AND az < d deg).
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field

FAMILIES = ("distance", "lateral", "longitudinal", "azimuth", "combined")


@dataclass
class MetricsReport:
    thresholds_m: tuple
    thresholds_deg: tuple
    n_samples: int
    recalls: dict = field(default_factory=dict)  # (family, threshold) -> percent

    def value(self, family: str, threshold) -> float:
        return self.recalls[(family, threshold)]

    def rows(self) -> list:
        """(family, threshold, value_percent) rows in a stable order."""
        out = []
        for fam in FAMILIES:
            ths = self.thresholds_deg if fam == "azimuth" else self.thresholds_m
            for th in ths:
                out.append((fam, th, self.recalls[(fam, th)]))
        return out

    def validate(self) -> None:
        """Invariants checked before any report is written."""
        for fam in FAMILIES:
            ths = self.thresholds_deg if fam == "azimuth" else self.thresholds_m
            vals = [self.recalls[(fam, th)] for th in ths]
            for v in vals:
                if not 0.0 <= v <= 100.0:
                    raise ValueError(f"{fam}: recall {v} outside [0, 100]")
            if any(a > b + 1e-12 for a, b in zip(vals, vals[1:])):
                raise ValueError(f"{fam}: recalls not monotone in threshold: {vals}")
        for d, a in zip(self.thresholds_m, self.thresholds_deg):
            comb = self.recalls[("combined", d)]
            if comb > self.recalls[("lateral", d)] + 1e-12:
                raise ValueError(f"combined@{d} exceeds lateral@{d}")
            if comb > self.recalls[("azimuth", a)] + 1e-12:
                raise ValueError(f"combined@{d} exceeds azimuth@{a}")

    def format_table(self) -> str:
        lines = [f"samples: {self.n_samples}"]
        for fam in FAMILIES:
            ths = self.thresholds_deg if fam == "azimuth" else self.thresholds_m
            unit = "deg" if fam == "azimuth" else ("m&deg" if fam == "combined" else "m")
            cells = "  ".join(f"@{th}{unit}: {self.recalls[(fam, th)]:6.2f}%" for th in ths)
            lines.append(f"{fam:>12}  {cells}")
        return "\n".join(lines)


def compute_metrics(errors, thresholds_m=(1.0, 3.0, 5.0), thresholds_deg=(1.0, 3.0, 5.0)) -> MetricsReport:
    """Recall percentages from (lateral, longitudinal, yaw_deg) error triples.

    Strict inequality against each threshold; full precision is retained (any
    2-decimal rounding is display-only).
    """
    if not errors:
        raise ValueError("compute_metrics: empty error list")
    if len(thresholds_m) != len(thresholds_deg):
        raise ValueError("thresholds_m and thresholds_deg must pair up for the combined family")
    n = len(errors)
    report = MetricsReport(tuple(thresholds_m), tuple(thresholds_deg), n)
    for d in thresholds_m:
        lat = sum(1 for e in errors if e[0] < d)
        lon = sum(1 for e in errors if e[1] < d)
        dist = sum(1 for e in errors if math.hypot(e[0], e[1]) < d)
        report.recalls[("lateral", d)] = 100.0 * lat / n
        report.recalls[("longitudinal", d)] = 100.0 * lon / n
        report.recalls[("distance", d)] = 100.0 * dist / n
    for a in thresholds_deg:
        az = sum(1 for e in errors if e[2] < a)
        report.recalls[("azimuth", a)] = 100.0 * az / n
    for d, a in zip(thresholds_m, thresholds_deg):
        comb = sum(1 for e in errors if e[0] < d and e[2] < a)
        report.recalls[("combined", d)] = 100.0 * comb / n
    report.validate()
    return report
