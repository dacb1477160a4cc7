"""Multi-seed experiments: manifest, per-seed CSV ledgers, aggregates and SVG plots."""

from __future__ import annotations

import hashlib
import json
import math
import time
from concurrent.futures import ProcessPoolExecutor
from dataclasses import dataclass, field
from html import escape
from pathlib import Path

import numpy as np

from .agent import BACKENDS, OPDOP, run_opdop
from .cmdp import CmdpModel
from .exceptions import ConfigurationError
from .hindsight import solve_hindsight
from .ledger import RegretLedger, fit_regret_slope

DEFAULTS = {
    "backend": "tabular",
    "episodes": 1000,
    "seeds": 1,
    "b": None,
    "c1": 1.0,
    "p": 0.1,
    "alpha_rate": "theorem",
    "workers": 1,
}
MANIFEST = "manifest.json"
AGGREGATE = "aggregate.json"


@dataclass
class RunManifest:
    config: dict
    model_sha256: str
    seeds: list
    hindsight: dict
    ledgers: dict = field(default_factory=dict)
    diagnostics: dict = field(default_factory=dict)
    wall_clock: dict = field(default_factory=dict)
    status: str = "ok"
    error: str | None = None

    def to_dict(self) -> dict:
        return dict(self.__dict__)

    def write(self, out_dir: Path) -> None:
        (out_dir / MANIFEST).write_text(json.dumps(self.to_dict(), indent=2))

    @classmethod
    def read(cls, out_dir) -> RunManifest:
        return cls(**json.loads((Path(out_dir) / MANIFEST).read_text()))


def resolve_config(config) -> dict:
    """Merge a dict or JSON file path over the defaults and validate it."""
    if isinstance(config, (str, Path)):
        config = json.loads(Path(config).read_text())
    cfg = {**DEFAULTS, **{k: v for k, v in dict(config).items() if v is not None}}
    if "model" not in cfg:
        raise ConfigurationError("config needs a 'model' file path")
    if cfg["backend"] not in BACKENDS:
        raise ConfigurationError(f"backend must be one of {BACKENDS}")
    if int(cfg["episodes"]) < 0 or int(cfg["seeds"]) < 1:
        raise ConfigurationError("episodes must be >= 0 and seeds >= 1")
    cfg["episodes"], cfg["seeds"], cfg["workers"] = int(cfg["episodes"]), int(cfg["seeds"]), int(cfg["workers"])
    cfg["model"] = str(cfg["model"])
    return cfg


def _run_seed(model_dict: dict, cfg: dict, seed: int, hindsight, out_dir: str) -> tuple[int, str, dict]:
    model = CmdpModel.from_dict(model_dict)
    est = OPDOP(backend=cfg["backend"], n_episodes=cfg["episodes"], c1=cfg["c1"], p=cfg["p"],
                alpha_rate=cfg["alpha_rate"], random_state=seed)
    config = est.make_config(model, hindsight)
    ledger = run_opdop(model, config, cfg["backend"], seed, hindsight)
    path = Path(out_dir) / f"seed_{seed}.csv"
    ledger.write_csv(path)
    return seed, path.name, {**ledger.diagnostics, "config": config.to_dict()}


def run_experiment(config, out_dir) -> RunManifest:
    """Solve the hindsight problem once, run every seed and write all outputs.

    A failing seed stops the run; the manifest is still written with status
    ``"failed"`` and the ledgers completed so far.
    """
    cfg = resolve_config(config)
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    raw = Path(cfg["model"]).read_bytes()
    model = CmdpModel.from_dict(json.loads(raw))
    if cfg["b"] is not None:
        model = model.with_offset(float(cfg["b"]))
    model.save(out / "model.json")
    hindsight = solve_hindsight(model)
    seeds = list(range(cfg["seeds"]))
    manifest = RunManifest(
        config=cfg,
        model_sha256=hashlib.sha256(raw).hexdigest(),
        seeds=seeds,
        hindsight=hindsight.to_dict(),
    )
    start = time.perf_counter()
    model_dict = model.to_dict()
    try:
        if cfg["workers"] > 1 and len(seeds) > 1:
            with ProcessPoolExecutor(max_workers=cfg["workers"]) as pool:
                futures = [pool.submit(_run_seed, model_dict, cfg, s, hindsight, str(out)) for s in seeds]
                results = [f.result() for f in futures]
        else:
            results = [_run_seed(model_dict, cfg, s, hindsight, str(out)) for s in seeds]
        for seed, name, diag in results:
            manifest.ledgers[str(seed)] = name
            manifest.diagnostics[str(seed)] = diag
    except Exception as exc:
        manifest.status = "failed"
        manifest.error = f"{type(exc).__name__}: {exc}"
        for s in seeds:
            path = out / f"seed_{s}.csv"
            if path.exists():
                manifest.ledgers[str(s)] = path.name
        manifest.wall_clock = {"total_seconds": time.perf_counter() - start}
        manifest.write(out)
        raise
    manifest.wall_clock = {
        "total_seconds": time.perf_counter() - start,
        "per_seed_seconds": {k: v["seconds"] for k, v in manifest.diagnostics.items()},
    }
    manifest.write(out)
    report(out)
    return manifest


def aggregate(ledgers: list[RegretLedger]) -> dict:
    """Seed mean and standard error of the cumulative curves."""
    K = min((len(lg) for lg in ledgers), default=0)
    result = {"episodes": K, "num_seeds": len(ledgers)}
    for col in ("regret_cum", "violation_cum"):
        if K == 0:
            result[col] = {"mean": [], "stderr": []}
            continue
        data = np.array([lg.column(col)[:K] for lg in ledgers])
        se = data.std(axis=0, ddof=1) / math.sqrt(len(ledgers)) if len(ledgers) > 1 else np.zeros(K)
        result[col] = {"mean": data.mean(axis=0).tolist(), "stderr": se.tolist()}
    if K:
        result["final_regret"] = result["regret_cum"]["mean"][-1]
        result["final_violation"] = result["violation_cum"]["mean"][-1]
    if K >= 100:
        result["regret_slope"] = fit_regret_slope(ledgers)
    return result


def report(out_dir) -> dict:
    """Re-read the ledgers of a finished run, rewrite the aggregate JSON and plots."""
    out = Path(out_dir)
    manifest = RunManifest.read(out)
    hs = manifest.hindsight
    model = CmdpModel.load(out / "model.json")
    ledgers = [RegretLedger.read_csv(out / name, hs["optimal_value"], model.constraint_offset)
               for _, name in sorted(manifest.ledgers.items(), key=lambda kv: int(kv[0]))]
    agg = aggregate(ledgers)
    (out / AGGREGATE).write_text(json.dumps(agg))
    K = agg["episodes"]
    k = np.arange(1, K + 1)
    for col, title in (("regret_cum", "Cumulative regret"), ("violation_cum", "Cumulative violation")):
        mean, se = np.array(agg[col]["mean"]), np.array(agg[col]["stderr"])
        write_line_chart(out / f"{col.split('_')[0]}.svg", {"mean": (k, mean, se)}, title, "episode k", col)
    if K:
        mean = np.array(agg["regret_cum"]["mean"])
        write_line_chart(out / "regret_rate.svg", {"Regret(k)/k": (k, mean / k, None)},
                         "Average regret", "episode k", "regret / k")
    return agg


def write_line_chart(path, series: dict, title: str, xlabel: str, ylabel: str,
                     width: int = 640, height: int = 400) -> None:
    """Minimal standalone SVG line chart; each series is ``(x, y, band or None)``."""
    pad = 56
    colors = ("#1f77b4", "#d62728", "#2ca02c", "#9467bd")
    xs = [np.asarray(s[0], float) for s in series.values()]
    ys = [np.asarray(s[1], float) for s in series.values()]
    bands = [None if s[2] is None else np.asarray(s[2], float) for s in series.values()]
    parts = [f'<svg xmlns="http://www.w3.org/2000/svg" width="{width}" height="{height}">',
             '<rect width="100%" height="100%" fill="white"/>',
             f'<text x="{width / 2}" y="20" text-anchor="middle" font-size="14">{escape(title)}</text>',
             f'<text x="{width / 2}" y="{height - 8}" text-anchor="middle" font-size="12">{escape(xlabel)}</text>',
             f'<text x="14" y="{height / 2}" font-size="12" transform="rotate(-90 14 {height / 2})" '
             f'text-anchor="middle">{escape(ylabel)}</text>']
    nonempty = [i for i, x in enumerate(xs) if x.size]
    if nonempty:
        x_lo = min(xs[i].min() for i in nonempty)
        x_hi = max(xs[i].max() for i in nonempty)
        lows = [ys[i] - (bands[i] if bands[i] is not None else 0) for i in nonempty]
        highs = [ys[i] + (bands[i] if bands[i] is not None else 0) for i in nonempty]
        y_lo = min(0.0, min(v.min() for v in lows))
        y_hi = max(v.max() for v in highs)
        x_hi = x_hi if x_hi > x_lo else x_lo + 1
        y_hi = y_hi if y_hi > y_lo else y_lo + 1

        def sx(v):
            return pad + (v - x_lo) / (x_hi - x_lo) * (width - 2 * pad)

        def sy(v):
            return height - pad - (v - y_lo) / (y_hi - y_lo) * (height - 2 * pad)

        parts.append(f'<line x1="{pad}" y1="{height - pad}" x2="{width - pad}" y2="{height - pad}" stroke="black"/>')
        parts.append(f'<line x1="{pad}" y1="{pad}" x2="{pad}" y2="{height - pad}" stroke="black"/>')
        for val, anchor_x in ((x_lo, pad), (x_hi, width - pad)):
            parts.append(f'<text x="{anchor_x}" y="{height - pad + 16}" font-size="10" '
                         f'text-anchor="middle">{val:.4g}</text>')
        for val in (y_lo, y_hi):
            parts.append(f'<text x="{pad - 4}" y="{sy(val) + 4}" font-size="10" text-anchor="end">{val:.4g}</text>')
        for j, (i, name) in enumerate(zip(nonempty, [list(series)[i] for i in nonempty])):
            color = colors[j % len(colors)]
            # thin long curves so files stay small
            step = max(1, xs[i].size // 800)
            x, y = xs[i][::step], ys[i][::step]
            if bands[i] is not None:
                band = bands[i][::step]
                upper = " ".join(f"{sx(a):.1f},{sy(b):.1f}" for a, b in zip(x, y + band))
                lower = " ".join(f"{sx(a):.1f},{sy(b):.1f}" for a, b in zip(x[::-1], (y - band)[::-1]))
                parts.append(f'<polygon points="{upper} {lower}" fill="{color}" fill-opacity="0.2" stroke="none"/>')
            pts = " ".join(f"{sx(a):.1f},{sy(b):.1f}" for a, b in zip(x, y))
            parts.append(f'<polyline points="{pts}" fill="none" stroke="{color}" stroke-width="1.5"/>')
            parts.append(f'<text x="{width - pad}" y="{pad + 14 * j}" font-size="11" fill="{color}" '
                         f'text-anchor="end">{escape(name)}</text>')
    parts.append("</svg>")
    Path(path).write_text("\n".join(parts))
