"""Accuracy-log parsing and emission, plus the bundled published run log.

The wire format is comma-separated: a step number followed by one accuracy
field per tracked condition. Empty fields mark conditions with no
evaluation at that step and are preserved verbatim; an optional header row
names the conditions. ``parse_log`` and ``emit_log`` are inverse byte-wise
(floats are emitted with their shortest round-tripping decimal form).

The package ships the raw accuracy log of the published 125k-iteration
injection run as a fixture; ``load_reference_log`` attaches the four known
condition names to it.
"""
from __future__ import annotations

from dataclasses import dataclass, field
from importlib import resources
from pathlib import Path

from .errors import FormatError

REFERENCE_CONDITIONS = (
    "convnet_full",
    "convnet_ld100",
    "capsgan_full",
    "capsgan_ld100",
)

# Figures reported alongside the published run, for side-by-side display.
PUBLISHED_RESULTS = {
    "convnet_full": {"pre_injection": "80.7%", "recovery": "2700", "peak": "<82%"},
    "convnet_ld100": {"pre_injection": "80.7%", "recovery": "2700", "peak": "88.4%"},
    "capsgan_full": {"pre_injection": "81.9%", "recovery": "<100", "peak": "96.3%"},
    "capsgan_ld100": {"pre_injection": "81.9%", "recovery": "<100", "peak": "97.5%"},
}

REFERENCE_INJECTION_STEP = 125009  # last evaluation before the data switch


@dataclass
class MetricsSeries:
    """Per-step accuracies for one or more experimental conditions."""

    conditions: list
    rows: list = field(default_factory=list)  # [(step, [acc-or-None, ...]), ...]
    has_header: bool = False

    def add(self, step, values):
        values = list(values)
        if len(values) != len(self.conditions):
            raise ValueError(
                f"expected {len(self.conditions)} values, got {len(values)}"
            )
        if self.rows and step <= self.rows[-1][0]:
            raise ValueError(f"steps must increase: {step} after {self.rows[-1][0]}")
        for v in values:
            if v is not None and not 0.0 <= v <= 1.0:
                raise ValueError(f"accuracy {v} outside [0, 1]")
        self.rows.append((int(step), values))

    def condition_index(self, condition):
        try:
            return self.conditions.index(condition)
        except ValueError:
            raise KeyError(
                f"unknown condition {condition!r}; have {self.conditions}"
            ) from None

    def series(self, condition):
        """(steps, accuracies) for one condition, gaps skipped."""
        i = self.condition_index(condition)
        pairs = [(s, vals[i]) for s, vals in self.rows if vals[i] is not None]
        return [s for s, _ in pairs], [a for _, a in pairs]

    def rename_conditions(self, names):
        names = list(names)
        if len(names) != len(self.conditions):
            raise ValueError(f"need {len(self.conditions)} names, got {len(names)}")
        self.conditions = names


def parse_log(text):
    """Parse the comma-separated accuracy-log format.

    Raises ``FormatError`` with a line number for non-numeric nonempty
    fields, inconsistent column counts, or non-increasing steps.
    """
    lines = text.splitlines()
    series = None
    for lineno, line in enumerate(lines, start=1):
        stripped = line.strip()
        if not stripped:
            if lineno < len(lines):
                raise FormatError("blank line inside log", line=lineno)
            continue
        fields = stripped.split(",")
        if series is None:
            header = not _is_int(fields[0])
            if header:
                series = MetricsSeries(conditions=fields[1:], has_header=True)
                continue
            series = MetricsSeries(
                conditions=[f"condition_{i}" for i in range(1, len(fields))]
            )
        if not _is_int(fields[0]):
            raise FormatError(f"step field {fields[0]!r} is not an integer", line=lineno)
        if len(fields) != len(series.conditions) + 1:
            raise FormatError(
                f"row has {len(fields) - 1} value fields, expected {len(series.conditions)}",
                line=lineno,
            )
        values = []
        for f in fields[1:]:
            if f == "":
                values.append(None)
                continue
            try:
                values.append(float(f))
            except ValueError:
                raise FormatError(f"non-numeric field {f!r}", line=lineno) from None
        try:
            series.add(int(fields[0]), values)
        except ValueError as exc:
            raise FormatError(str(exc), line=lineno) from None
    if series is None:
        raise FormatError("log is empty", line=1)
    return series


def _is_int(s):
    try:
        int(s)
        return True
    except ValueError:
        return False


def emit_log(series, include_header=None):
    """Render a series back to log text; inverse of ``parse_log``."""
    include_header = series.has_header if include_header is None else include_header
    lines = []
    if include_header:
        lines.append(",".join(["step"] + list(series.conditions)))
    for step, values in series.rows:
        fields = [str(step)] + ["" if v is None else repr(v) for v in values]
        lines.append(",".join(fields))
    return "\n".join(lines) + "\n"


def reference_log_text():
    return (
        resources.files("multicaps").joinpath("data/injection_run_125k.csv").read_text()
    )


def load_reference_log():
    """The bundled published run log with its condition names attached."""
    series = parse_log(reference_log_text())
    series.rename_conditions(REFERENCE_CONDITIONS)
    return series


def save_log(series, path, include_header=None):
    Path(path).write_text(emit_log(series, include_header=include_header))


def load_log(path):
    return parse_log(Path(path).read_text())
