"""Hierarchical wall-clock profiler with a four-column timing report.

Scopes are labeled intervals measured on the monotonic clock.  Each thread
keeps its own scope stack (handles must not cross threads); durations are
merged into shared per-label accumulators when a scope ends.  The report's
"Total Run" row spans from the first scope start to the last scope end, so
a single scope covering the whole run reports exactly 100%.

Percentages are defined strictly as 100 * total / run_total.  If the same
label runs concurrently on several threads its summed total can exceed the
wall-clock run total; the experiment runner only profiles coordinator-side
phases, which never overlap.
"""

from __future__ import annotations

import threading
import time

from .telemetry import ProfileEntry

TOTAL_ROW_LABEL = "Total Run"


class ProfilerError(RuntimeError):
    """Scope misuse: unmatched end, or a report while scopes are open."""


class _Scope:
    """Timed scope handle; timing starts when the profiler hands it out.
    Use as a context manager or call end() exactly once."""

    def __init__(self, profiler: "Profiler", action: str) -> None:
        self._profiler = profiler
        self.action = action
        self._done = False
        profiler._stack().append(self)
        self._start = time.perf_counter()

    def __enter__(self) -> "_Scope":
        return self

    def __exit__(self, *exc_info) -> None:
        self.end()

    def end(self) -> None:
        if self._done:
            raise ProfilerError(f"unmatched end of scope {self.action!r}")
        stop = time.perf_counter()
        stack = self._profiler._stack()
        if not stack or stack[-1] is not self:
            open_action = stack[-1].action if stack else None
            raise ProfilerError(
                f"scope {self.action!r} ended out of order "
                f"(innermost open scope: {open_action!r})"
            )
        stack.pop()
        self._done = True
        self._profiler._record(self.action, self._start, stop)


class Profiler:
    """Accumulates (total seconds, call count) per action label."""

    def __init__(self) -> None:
        self._lock = threading.Lock()
        self._totals: dict[str, float] = {}
        self._calls: dict[str, int] = {}
        self._open = 0
        self._first_start: float | None = None
        self._last_end: float | None = None
        self._local = threading.local()

    def _stack(self) -> list:
        if not hasattr(self._local, "stack"):
            self._local.stack = []
        return self._local.stack

    def scope(self, action: str) -> _Scope:
        if not action:
            raise ProfilerError("scope label must be non-empty")
        with self._lock:
            self._open += 1
        return _Scope(self, action)

    def _record(self, action: str, start: float, stop: float) -> None:
        with self._lock:
            self._open -= 1
            self._totals[action] = self._totals.get(action, 0.0) + (stop - start)
            self._calls[action] = self._calls.get(action, 0) + 1
            if self._first_start is None or start < self._first_start:
                self._first_start = start
            if self._last_end is None or stop > self._last_end:
                self._last_end = stop

    def report(self) -> list[ProfileEntry]:
        """Entries sorted by total descending, preceded by a synthetic
        "Total Run" row spanning first scope start to last scope end."""
        with self._lock:
            if self._open:
                raise ProfilerError(f"{self._open} scope(s) still open")
            totals = dict(self._totals)
            calls = dict(self._calls)
            if self._first_start is None:
                run_total = 0.0
            else:
                run_total = self._last_end - self._first_start
        entries = [
            ProfileEntry(
                action=TOTAL_ROW_LABEL,
                mean_duration_s=run_total,
                num_calls=1,
                total_s=run_total,
                percentage=100.0 if run_total > 0.0 else 0.0,
            )
        ]
        for action in sorted(totals, key=lambda a: totals[a], reverse=True):
            total = totals[action]
            n = calls[action]
            entries.append(
                ProfileEntry(
                    action=action,
                    mean_duration_s=total / n,
                    num_calls=n,
                    total_s=total,
                    percentage=100.0 * total / run_total if run_total > 0.0 else 0.0,
                )
            )
        return entries


def render_report(entries: list[ProfileEntry]) -> str:
    """Fixed-width text table with Mean/Calls/Total/Percent columns."""
    header = ("Action", "Mean Dur.(s)", "Num Calls", "Total(s)", "Percent.")
    rows = [header]
    for e in entries:
        rows.append(
            (
                e.action,
                f"{e.mean_duration_s:.4f}",
                str(e.num_calls),
                f"{e.total_s:.4f}",
                f"{e.percentage:.4f}",
            )
        )
    widths = [max(len(row[i]) for row in rows) for i in range(len(header))]
    lines = []
    for idx, row in enumerate(rows):
        lines.append(
            "  ".join(
                cell.ljust(widths[i]) if i == 0 else cell.rjust(widths[i])
                for i, cell in enumerate(row)
            )
        )
        if idx == 0:
            lines.append("-" * len(lines[0]))
    return "\n".join(lines) + "\n"
