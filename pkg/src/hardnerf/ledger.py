"""Per-iteration accounting of multiply-accumulates and retained floats."""

from __future__ import annotations

from collections import defaultdict

NETWORK_PHASES = ("forward_inference", "forward_training", "backward")
NOMINAL_BACKWARD_MULTIPLIER = 2.0


class CostLedger:
    """MAC counts per phase and floats held for a pending backward.

    ``graph_floats`` counts network tape storage, ``render_floats`` the
    compositing buffers kept for the rendering backward. Peaks are tracked
    per iteration; ``end_iteration`` appends a record to ``history``.
    """

    def __init__(self):
        self.history: list[dict] = []
        self.snapshots: list[dict] = []
        self.totals: dict[str, int] = defaultdict(int)
        self.graph_floats = 0
        self.render_floats = 0
        self._reset_iteration()

    def _reset_iteration(self):
        self.macs: dict[str, int] = defaultdict(int)
        self.peak_graph = self.graph_floats
        self.peak_render = self.render_floats
        self.peak_total = self.graph_floats + self.render_floats

    def add_macs(self, phase: str, count: int) -> None:
        if count < 0:
            raise ValueError("MAC counts are non-negative")
        self.macs[phase] += int(count)
        self.totals[phase] += int(count)

    def retain(self, floats: int, kind: str = "network") -> None:
        if kind == "network":
            self.graph_floats += int(floats)
        else:
            self.render_floats += int(floats)
        self.peak_graph = max(self.peak_graph, self.graph_floats)
        self.peak_render = max(self.peak_render, self.render_floats)
        self.peak_total = max(self.peak_total, self.graph_floats + self.render_floats)

    def release(self, floats: int, kind: str = "network") -> None:
        if kind == "network":
            self.graph_floats -= int(floats)
        else:
            self.render_floats -= int(floats)
        if self.graph_floats < 0 or self.render_floats < 0:
            raise RuntimeError("released more floats than were retained")

    def snapshot(self, label: str) -> dict:
        snap = {
            "label": label,
            "iteration": len(self.history),
            "graph_floats": self.graph_floats,
            "render_floats": self.render_floats,
            "macs": sum(self.macs.values()),
        }
        self.snapshots.append(snap)
        return snap

    def end_iteration(self) -> dict:
        record = {
            "macs": dict(self.macs),
            "macs_total": sum(self.macs.values()),
            "macs_network": sum(self.macs.get(p, 0) for p in NETWORK_PHASES),
            "peak_graph_floats": self.peak_graph,
            "peak_render_floats": self.peak_render,
            "peak_total_floats": self.peak_total,
            "graph_floats_after": self.graph_floats,
        }
        self.history.append(record)
        self._reset_iteration()
        return record

    @property
    def backward_multiplier(self) -> float:
        """Measured backward/forward MAC ratio over graph-building passes."""
        fwd = self.totals.get("forward_training", 0)
        return self.totals.get("backward", 0) / fwd if fwd else float("nan")

    @property
    def total_macs(self) -> int:
        return sum(self.totals.values())
