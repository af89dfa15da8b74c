"""Paired desk-scale experiments: EPL variants against a supervised baseline.

Every run is keyed by its full configuration, the phantom spec and a hash of
the package sources, so cached results are always those of the current code.
"""

from __future__ import annotations

import hashlib
import json
import os
import time
from dataclasses import replace
from pathlib import Path

import numpy as np

from .model import NetConfig
from .synth import PhantomSpec, ShapeClass, make_dataset
from .trainer import TrainConfig, run, supervised_config

PAIRED_COUNT = 50
PAIRED_RATIO = 0.1
PAIRED_SEEDS = (0, 1, 2)


def paired_phantom() -> PhantomSpec:
    return PhantomSpec(shape=(32, 32, 32), num_classes=2, classes=[ShapeClass()])


def paired_base(iterations: int = 2000) -> TrainConfig:
    return TrainConfig(iterations=iterations, labeled_ratio=None, model=NetConfig(base_width=4),
                       checkpoint_every=max(iterations, 1))


def variants(base: TrainConfig) -> dict:
    """Named configurations compared in the paired runs."""
    return {
        "epl": base,
        "supervised": supervised_config(base),
        "amc": replace(base, fuse_heads_mode="average"),
        "no_urm": replace(base, use_urm=False),
    }


def source_hash() -> str:
    h = hashlib.sha256()
    for path in sorted(Path(__file__).parent.glob("*.py")):
        h.update(path.name.encode())
        h.update(path.read_bytes())
    return h.hexdigest()[:16]


def run_key(cfg: TrainConfig, spec: PhantomSpec, seed: int) -> str:
    blob = json.dumps({"cfg": cfg.to_dict(), "spec": spec.to_dict(), "seed": seed,
                       "count": PAIRED_COUNT, "ratio": PAIRED_RATIO, "src": source_hash()}, sort_keys=True)
    return hashlib.sha256(blob.encode()).hexdigest()[:20]


def run_one(cfg: TrainConfig, spec: PhantomSpec, seed: int) -> dict:
    dataset = make_dataset(replace(spec, seed=seed), PAIRED_COUNT, PAIRED_RATIO, seed=seed)
    start = time.process_time()
    res = run(replace(cfg, seed=seed), dataset)
    return {"dice": res.metrics["mean"]["dice"], "metrics": res.metrics,
            "cpu_seconds": time.process_time() - start, "final_loss": res.reports[-1].to_dict() if res.reports else None}


def run_matrix(names, seeds=PAIRED_SEEDS, base: TrainConfig | None = None, spec: PhantomSpec | None = None,
               cache_dir: str | None = None, log=print) -> dict:
    """Results ``{name: {seed: record}}``, reusing cached records for identical runs."""
    base = base or paired_base()
    spec = spec or paired_phantom()
    table = variants(base)
    out = {}
    for name in names:
        cfg = table[name]
        out[name] = {}
        for seed in seeds:
            path = Path(cache_dir) / f"{name}-{run_key(cfg, spec, seed)}.json" if cache_dir else None
            if path is not None and path.exists():
                rec = json.loads(path.read_text())
            else:
                rec = run_one(cfg, spec, seed)
                if path is not None:
                    os.makedirs(cache_dir, exist_ok=True)
                    path.write_text(json.dumps(rec, indent=2, sort_keys=True))
            if log:
                log(f"{name} seed={seed} dice={rec['dice']:.4f} cpu={rec['cpu_seconds']:.0f}s")
            out[name][seed] = rec
    return out


def mean_dice(results: dict, name: str) -> float:
    return float(np.mean([r["dice"] for r in results[name].values()]))
