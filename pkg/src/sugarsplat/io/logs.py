"""Line-delimited JSON run logs.

Records hold only deterministic content so two runs with the same seed and
config produce identical files. Wall-clock timings go to a ``.timing.jsonl``
sidecar next to the log.
"""
from __future__ import annotations

import json
import math
import os

import numpy as np


def _clean(value):
    if isinstance(value, dict):
        return {str(k): _clean(v) for k, v in value.items()}
    if isinstance(value, (list, tuple)):
        return [_clean(v) for v in value]
    if isinstance(value, np.ndarray):
        return [_clean(v) for v in value.tolist()]
    if isinstance(value, (np.integer,)):
        return int(value)
    if isinstance(value, (float, np.floating)):
        value = float(value)
        return value if math.isfinite(value) else repr(value)
    return value


class RunLog:
    def __init__(self, path=None):
        self.path = None if path is None else os.fspath(path)
        self.records: list[dict] = []
        self.timings: list[dict] = []
        if self.path:
            os.makedirs(os.path.dirname(os.path.abspath(self.path)), exist_ok=True)
            open(self.path, "w").close()
            open(self.timing_path, "w").close()

    @property
    def timing_path(self):
        return None if self.path is None else self.path + ".timing.jsonl"

    def write(self, record: dict):
        record = _clean(record)
        self.records.append(record)
        if self.path:
            with open(self.path, "a", encoding="utf-8") as fh:
                fh.write(json.dumps(record, sort_keys=True) + "\n")

    def event(self, stage, step, event, **fields):
        self.write({"stage": stage, "step": step, "event": event, **fields})

    def timing(self, stage, step, seconds):
        rec = {"stage": stage, "step": step, "seconds": float(seconds)}
        self.timings.append(rec)
        if self.path:
            with open(self.timing_path, "a", encoding="utf-8") as fh:
                fh.write(json.dumps(rec, sort_keys=True) + "\n")

    def events(self, name=None, stage=None):
        return [r for r in self.records
                if ("event" in r if name is None else r.get("event") == name)
                and (stage is None or r.get("stage") == stage)]


def read_log(path):
    with open(path, "r", encoding="utf-8") as fh:
        return [json.loads(line) for line in fh if line.strip()]
