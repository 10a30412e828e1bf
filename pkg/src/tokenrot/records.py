"""Run records: line-delimited JSON events plus a summary file.

Wall-clock timings live in a separate ``timing.jsonl`` so that two runs of the
same configuration produce byte-identical ``records.jsonl`` and ``summary.json``.
"""
from __future__ import annotations

import json
from dataclasses import dataclass, field
from pathlib import Path
from typing import Any, Dict, List, Optional

from .errors import MissingRecord

RECORDS = "records.jsonl"
SUMMARY = "summary.json"
TIMING = "timing.jsonl"
CONFIG = "config.txt"


def _dumps(obj):
    return json.dumps(obj, sort_keys=True, separators=(",", ":"))


@dataclass
class RunRecord:
    kind: str = "pretrain"
    events: List[Dict[str, Any]] = field(default_factory=list)
    timings: List[float] = field(default_factory=list)
    summary: Dict[str, Any] = field(default_factory=dict)
    checkpoint: Optional[str] = None
    #: final state as name->tensor (in memory only)
    tensors: Optional[dict] = field(default=None, repr=False, compare=False)

    def log_step(self, step, wall_time=None, **values):
        if self.steps and step <= self.steps[-1]["step"]:
            raise ValueError(f"step {step} is not after {self.steps[-1]['step']}")
        self.events.append({"type": "step", "step": step, **values})
        if wall_time is not None:
            self.timings.append(wall_time)

    def log_collapse(self, step, report, prefix=""):
        for name, value in report.as_dict().items():
            self.events.append({"type": "collapse", "step": step, "metric": prefix + name,
                                "value": value})

    def log_eval(self, step, volume_id, cls, dice, hd95):
        self.events.append({"type": "eval", "step": step, "volume_id": volume_id,
                            "class": cls, "dice": dice, "hd95": hd95})

    @property
    def steps(self):
        return [e for e in self.events if e["type"] == "step"]

    def collapse(self, metric=None):
        return [e for e in self.events if e["type"] == "collapse"
                and (metric is None or e["metric"] == metric)]

    def evals(self, step=None):
        return [e for e in self.events if e["type"] == "eval" and (step is None or e["step"] == step)]

    def losses(self):
        return [e["loss"] for e in self.steps]

    def to_lines(self):
        return [_dumps(e) for e in self.events]

    def write(self, run_dir):
        run_dir = Path(run_dir)
        run_dir.mkdir(parents=True, exist_ok=True)
        (run_dir / RECORDS).write_text("".join(l + "\n" for l in self.to_lines()))
        summary = dict(self.summary, kind=self.kind)
        if self.checkpoint:
            summary["checkpoint"] = self.checkpoint
        (run_dir / SUMMARY).write_text(json.dumps(summary, sort_keys=True, indent=1) + "\n")
        (run_dir / TIMING).write_text("".join(_dumps({"step": e["step"], "wall_time": t}) + "\n"
                                              for e, t in zip(self.steps, self.timings)))
        return run_dir

    @classmethod
    def read(cls, run_dir):
        run_dir = Path(run_dir)
        rec_path, sum_path = run_dir / RECORDS, run_dir / SUMMARY
        if not rec_path.is_file() or not sum_path.is_file():
            raise MissingRecord(f"{run_dir}: no {RECORDS} / {SUMMARY}")
        events = [json.loads(l) for l in rec_path.read_text().splitlines() if l.strip()]
        summary = json.loads(sum_path.read_text())
        rec = cls(kind=summary.get("kind", "pretrain"), events=events, summary=summary,
                  checkpoint=summary.get("checkpoint"))
        timing = run_dir / TIMING
        if timing.is_file():
            rec.timings = [json.loads(l)["wall_time"] for l in timing.read_text().splitlines() if l]
        return rec
