"""Run-log records and timing summaries."""
import json
import os
import time
from pathlib import Path

import numpy as np

WARMUP_ITERS = 50


def profile(run_log, warmup=WARMUP_ITERS):
    """Average ``time`` / ``data_time`` after the first ``warmup`` iterations.

    ``peak_batch_bytes`` is the largest collated float32 batch seen. If the log
    is not longer than ``warmup`` every record is averaged instead.
    """
    records = list(run_log)
    if not records:
        return {"time_per_iter": float("nan"), "data_time": float("nan"), "peak_batch_bytes": 0,
                "iterations": 0, "warmup_excluded": 0}
    steady = records[warmup:] if len(records) > warmup else records
    shapes = [r["batch_shape"] for r in records if r.get("batch_shape")]
    peak = max((int(np.prod(s)) * 4 for s in shapes), default=0)
    return {
        "time_per_iter": float(np.mean([r["time"] for r in steady])),
        "data_time": float(np.mean([r["data_time"] for r in steady])),
        "peak_batch_bytes": peak,
        "iterations": len(records),
        "warmup_excluded": len(records) - len(steady),
    }


def timed_loop(batches, step, log=None):
    """Drive ``step(batch) -> dict`` over an iterable of batches.

    Data time is the wall time spent pulling the next batch; ``time`` is the
    full iteration (data + step). Each record merges the step's output.
    """
    log = [] if log is None else log
    it = iter(batches)
    i = 0
    while True:
        t0 = time.perf_counter()
        try:
            batch = next(it)
        except StopIteration:
            break
        t1 = time.perf_counter()
        out = step(batch) or {}
        t2 = time.perf_counter()
        log.append({"iter": i, **out, "time": t2 - t0, "data_time": t1 - t0})
        i += 1
    return log


def write_log(records, path):
    path = Path(path)
    tmp = path.with_name(path.name + ".tmp")
    with open(tmp, "w") as f:
        for r in records:
            f.write(json.dumps(r, sort_keys=True) + "\n")
    os.replace(tmp, path)
    return path


def read_log(path):
    with open(path) as f:
        return [json.loads(line) for line in f if line.strip()]


def per_sample_data_time(dataset, spec, indices, seed=0):
    """Mean seconds to decode-normalise-resize one sample under ``spec``."""
    from ..data.resize import resize_sample, sample_rng

    t0 = time.perf_counter()
    for i in indices:
        resize_sample(dataset.sample(i), spec, sample_rng(seed, 0, i))
    return (time.perf_counter() - t0) / max(len(indices), 1)
