"""Experiment sweeps over (language, L, schedule, sampler) cells, reports and bound suites."""

from __future__ import annotations

import csv
import dataclasses
import hashlib
import json
import logging
import math
import time
from concurrent.futures import ProcessPoolExecutor
from dataclasses import dataclass, field
from pathlib import Path
from typing import Any

import jsonschema
import numpy as np

from . import analysis
from .adversarial import build_interval_language
from .diffusion import (
    ar_sample_batch,
    build_schedule,
    constant_remask,
    l2r_mdm_sample_batch,
    linear_schedule,
    mdm_sample_batch,
    remdm_sample_batch,
    theoretical_schedule,
)
from .errors import ConfigError, MaskDiffError
from .formal_lang import exact_entropy_ngram, gen_hmm, gen_ngram
from .rng import derive_seed, make_rng

log = logging.getLogger("maskdiff")

SAMPLERS = ("mdm", "mdm_uncached", "remdm", "ar", "l2r")
METRICS = ("ser", "ter", "ter_gap")
STEP_FREE = ("ar", "l2r")

CONFIG_SCHEMA: dict[str, Any] = {
    "type": "object",
    "required": ["language", "lengths", "samplers", "num_sequences", "metrics", "master_seed"],
    "additionalProperties": False,
    "properties": {
        "language": {
            "type": "object",
            "required": ["kind"],
            "properties": {
                "kind": {"enum": ["ngram", "hmm", "interval"]},
                "n": {"type": "integer", "minimum": 2},
                "num_states": {"type": "integer", "minimum": 1},
                "vocab_size": {"type": "integer", "minimum": 2},
                "temperature": {"type": "number"},
                "threshold": {"type": "number", "minimum": 0, "exclusiveMaximum": 1},
                "seed": {"type": "integer", "minimum": 0},
                "l": {"type": "integer", "minimum": 2},
            },
            "additionalProperties": False,
        },
        "lengths": {"type": "array", "items": {"type": "integer", "minimum": 1}, "minItems": 1},
        "schedules": {
            "type": "array",
            "items": {
                "type": "object",
                "required": ["kind"],
                "properties": {
                    "kind": {"enum": ["linear", "theoretical", "custom"]},
                    "N": {"type": "integer", "minimum": 1},
                    "L_div": {"type": "integer", "minimum": 1},
                    "n": {"type": "integer", "minimum": 2},
                    "epsilon": {"type": "number"},
                    "C": {"type": "number"},
                    "deltas": {"type": "array", "items": {"type": "number"}},
                },
                "additionalProperties": False,
            },
        },
        "samplers": {
            "type": "array",
            "minItems": 1,
            "items": {
                "oneOf": [
                    {"enum": list(SAMPLERS)},
                    {
                        "type": "object",
                        "required": ["name"],
                        "properties": {"name": {"enum": list(SAMPLERS)}, "sigma": {"type": "number", "minimum": 0}},
                        "additionalProperties": False,
                    },
                ]
            },
        },
        "num_sequences": {"type": "integer", "minimum": 1},
        "metrics": {"type": "array", "items": {"enum": list(METRICS)}, "minItems": 1},
        "master_seed": {"type": "integer", "minimum": 0},
        "output_dir": {"type": "string"},
        "record_timing": {"type": "boolean"},
    },
}

_LANG_REQUIRED = {"ngram": ("n", "vocab_size", "temperature", "seed"),
                  "hmm": ("num_states", "vocab_size", "temperature", "seed"),
                  "interval": ("l",)}


@dataclass(frozen=True)
class ExperimentConfig:
    language: dict
    lengths: list
    samplers: list
    num_sequences: int
    metrics: list
    master_seed: int
    schedules: list = field(default_factory=list)
    output_dir: str = "results"
    record_timing: bool = False

    @classmethod
    def from_dict(cls, d: dict) -> "ExperimentConfig":
        try:
            jsonschema.validate(d, CONFIG_SCHEMA)
        except jsonschema.ValidationError as e:
            raise ConfigError(f"invalid config: {e.message} at {list(e.absolute_path)}") from None
        cfg = cls(**d)
        cfg.check()
        return cfg

    @classmethod
    def load(cls, path) -> "ExperimentConfig":
        try:
            text = Path(path).read_text()
        except OSError as e:
            raise ConfigError(f"cannot read config {path}: {e}") from None
        try:
            return cls.from_dict(json.loads(text))
        except json.JSONDecodeError as e:
            raise ConfigError(f"config {path} is not valid JSON: {e}") from None

    def to_dict(self) -> dict:
        return dataclasses.asdict(self)

    def hash(self) -> str:
        return hashlib.sha256(json.dumps(self.to_dict(), sort_keys=True).encode()).hexdigest()[:16]

    @property
    def sampler_specs(self) -> list[dict]:
        return [{"name": s} if isinstance(s, str) else dict(s) for s in self.samplers]

    def check(self):
        lang = self.language
        missing = [k for k in _LANG_REQUIRED[lang["kind"]] if k not in lang]
        if missing:
            raise ConfigError(f"language kind {lang['kind']!r} needs {missing}")
        ter = {"ter", "ter_gap"} & set(self.metrics)
        if ter and lang["kind"] == "interval":
            raise ConfigError("TER is undefined on the interval language: most generated sequences score -inf")
        if ter and lang.get("threshold", 0.0) > 0:
            raise ConfigError("TER needs a threshold-0 language; pruned languages give -inf scores to errors")
        if "ter_gap" in self.metrics and lang["kind"] != "ngram":
            raise ConfigError("ter_gap needs the exact entropy, available for n-gram languages only")
        if any(s["name"] not in STEP_FREE for s in self.sampler_specs) and not self.schedules:
            raise ConfigError("diffusion samplers need at least one schedule")
        for s in self.sampler_specs:
            if s["name"] == "remdm" and "sigma" not in s:
                raise ConfigError("the remdm sampler needs a sigma")


@dataclass
class ResultRow:
    language_kind: str
    n_or_states: int
    vocab: int
    threshold: float
    L: int
    N: int
    sampler: str
    metric: str
    value: float
    ci: float
    num_samples: int
    mean_oracle_calls: float
    seed: int
    wall_ms: float


ROW_FIELDS = [f.name for f in dataclasses.fields(ResultRow)]
_ROW_TYPES = {f.name: f.type for f in dataclasses.fields(ResultRow)}


# -------------------------------------------------------------------- cells


@dataclass(frozen=True)
class Cell:
    L: int
    schedule: dict | None
    sampler: dict

    def coords(self, language: dict) -> dict:
        return {"language": language, "L": self.L, "schedule": self.schedule, "sampler": self.sampler}


def enumerate_cells(cfg: ExperimentConfig) -> list[Cell]:
    cells = []
    for L in cfg.lengths:
        for s in cfg.sampler_specs:
            if s["name"] in STEP_FREE:
                cells.append(Cell(L, None, s))
            else:
                cells.extend(Cell(L, sch, s) for sch in cfg.schedules)
    return cells


def resolve_schedule(spec: dict, L: int):
    params = {k: v for k, v in spec.items() if k != "kind"}
    if "L_div" in params:
        N = L // params.pop("L_div")
        if N < 1:
            raise ConfigError(f"schedule {spec} gives N=0 at L={L}")
        params["N"] = N
    return build_schedule(spec["kind"], **params)


def build_language(spec: dict, L: int):
    k = spec["kind"]
    if k == "ngram":
        return gen_ngram(spec["n"], spec["vocab_size"], spec["temperature"], spec.get("threshold", 0.0), spec["seed"])
    if k == "hmm":
        return gen_hmm(spec["num_states"], spec["vocab_size"], spec["temperature"], spec.get("threshold", 0.0),
                       spec["seed"])
    return build_interval_language(L, spec["l"])


def _lang_size(spec: dict) -> int:
    return spec.get("n", spec.get("num_states", spec.get("l")))


def run_cell(cfg: ExperimentConfig, cell: Cell, model=None) -> list[ResultRow]:
    seed = derive_seed(cfg.master_seed, cell.coords(cfg.language))
    rng = make_rng(seed)
    model = model if model is not None else build_language(cfg.language, cell.L)
    L, B, name = cell.L, cfg.num_sequences, cell.sampler["name"]
    t0 = time.perf_counter()
    if name == "ar":
        res, N = ar_sample_batch(model, L, B, rng), L
    elif name == "l2r":
        res, N = l2r_mdm_sample_batch(model, L, B, rng), L
    else:
        sch = resolve_schedule(cell.schedule, L)
        N = sch.num_steps
        if name == "remdm":
            res = remdm_sample_batch(model, L, sch, constant_remask(sch, cell.sampler["sigma"]), B, rng)
        else:
            res = mdm_sample_batch(model, L, sch, B, rng, cache=(name == "mdm"))
    rows = []
    for metric in cfg.metrics:
        if metric == "ser":
            est = analysis.sequence_error_rate(model, res.tokens)
        elif metric == "ter":
            est = analysis.generative_perplexity(model, res.tokens)
        else:
            b = analysis.log2_perplexity(model, res.tokens)
            est = dataclasses.replace(b, value=b.value - exact_entropy_ngram(model, L))
        rows.append((metric, est))
    wall = (time.perf_counter() - t0) * 1000.0 if cfg.record_timing else 0.0
    lang = cfg.language
    return [
        ResultRow(lang["kind"], _lang_size(lang), model.vocab_size, float(lang.get("threshold", 0.0)), L, N,
                  name if name != "remdm" else f"remdm(sigma={cell.sampler['sigma']})", metric, float(e.value),
                  float(e.ci_half_width), e.num_samples, float(res.oracle_calls.mean()), seed, wall)
        for metric, e in rows
    ]


def _check_cell(cfg: ExperimentConfig, cell: Cell) -> str | None:
    lang = cfg.language
    if lang["kind"] == "interval" and cell.L % lang["l"]:
        return f"L={cell.L} is not a multiple of the interval length {lang['l']}"
    if cell.schedule is not None:
        try:
            sch = resolve_schedule(cell.schedule, cell.L)
            if cell.sampler["name"] == "remdm":
                constant_remask(sch, cell.sampler["sigma"]).validate(sch)
        except (MaskDiffError, ValueError) as e:
            return str(e)
    return None


def _run_cell_job(args):
    cfg, cell = args
    return run_cell(cfg, cell)


def run_sweep(cfg: ExperimentConfig, jobs: int = 1) -> list[ResultRow]:
    """Run every valid cell; invalid cells are skipped with a warning."""
    cells = []
    for cell in enumerate_cells(cfg):
        reason = _check_cell(cfg, cell)
        if reason:
            log.warning("skipping cell L=%s schedule=%s sampler=%s: %s", cell.L, cell.schedule, cell.sampler, reason)
        else:
            cells.append(cell)
    if jobs > 1 and len(cells) > 1:
        with ProcessPoolExecutor(max_workers=jobs) as ex:
            parts = list(ex.map(_run_cell_job, [(cfg, c) for c in cells]))
    else:
        shared = None if cfg.language["kind"] == "interval" else build_language(cfg.language, 0)
        parts = []
        for c in cells:
            log.info("cell L=%s schedule=%s sampler=%s", c.L, c.schedule, c.sampler["name"])
            parts.append(run_cell(cfg, c, shared))
    return [r for p in parts for r in p]


# ------------------------------------------------------------------ reports


def _fmt(v) -> str:
    return repr(v) if isinstance(v, float) else str(v)


def write_csv(rows: list[ResultRow], path) -> Path:
    path = Path(path)
    with path.open("w", newline="") as f:
        w = csv.writer(f)
        w.writerow(ROW_FIELDS)
        for r in rows:
            w.writerow([_fmt(getattr(r, k)) for k in ROW_FIELDS])
    return path


def read_csv(path) -> list[ResultRow]:
    casts = {"int": int, "float": float, "str": str}
    with Path(path).open(newline="") as f:
        return [ResultRow(**{k: casts[_ROW_TYPES[k]](v) for k, v in rec.items()}) for rec in csv.DictReader(f)]


def write_jsonl(rows: list[ResultRow], path) -> Path:
    path = Path(path)
    path.write_text("".join(json.dumps(dataclasses.asdict(r)) + "\n" for r in rows))
    return path


def svg_chart(rows: list[ResultRow], title: str, config_hash: str = "") -> str:
    """Metric against N, one polyline per L; log2 N on the horizontal axis."""
    W, H, pad = 640, 400, 60
    series: dict[int, list[tuple[int, float]]] = {}
    for r in rows:
        series.setdefault(r.L, []).append((r.N, r.value))
    xs = [math.log2(n) for pts in series.values() for n, _ in pts]
    ys = [v for pts in series.values() for _, v in pts]
    x0, x1 = min(xs), max(xs)
    y0, y1 = min(ys), max(ys)
    x1 = x1 if x1 > x0 else x0 + 1
    y1 = y1 if y1 > y0 else y0 + 1

    def px(n):
        return pad + (math.log2(n) - x0) / (x1 - x0) * (W - 2 * pad)

    def py(v):
        return H - pad - (v - y0) / (y1 - y0) * (H - 2 * pad)

    colors = ["#1f77b4", "#d62728", "#2ca02c", "#ff7f0e", "#9467bd", "#8c564b"]
    out = [
        f'<svg xmlns="http://www.w3.org/2000/svg" width="{W}" height="{H}" viewBox="0 0 {W} {H}">',
        f"<desc>config-hash: {config_hash}</desc>",
        f'<text x="{W / 2}" y="24" text-anchor="middle" font-size="16">{title}</text>',
        f'<line x1="{pad}" y1="{H - pad}" x2="{W - pad}" y2="{H - pad}" stroke="black"/>',
        f'<line x1="{pad}" y1="{pad}" x2="{pad}" y2="{H - pad}" stroke="black"/>',
        f'<text x="{W / 2}" y="{H - 15}" text-anchor="middle" font-size="12">N (log scale)</text>',
        f'<text x="{pad - 5}" y="{H - pad}" text-anchor="end" font-size="10">{y0:.4g}</text>',
        f'<text x="{pad - 5}" y="{pad}" text-anchor="end" font-size="10">{y1:.4g}</text>',
    ]
    for k, (L, pts) in enumerate(sorted(series.items())):
        pts = sorted(pts)
        c = colors[k % len(colors)]
        coords = " ".join(f"{px(n):.2f},{py(v):.2f}" for n, v in pts)
        out.append(f'<polyline fill="none" stroke="{c}" stroke-width="2" points="{coords}"><title>L={L}</title></polyline>')
        out.append(f'<text x="{W - pad + 4}" y="{pad + 14 * k}" font-size="11" fill="{c}">L={L}</text>')
    for n in sorted({r.N for r in rows}):
        out.append(f'<text x="{px(n):.2f}" y="{H - pad + 14}" text-anchor="middle" font-size="10">{n}</text>')
    out.append("</svg>")
    return "\n".join(out) + "\n"


def write_svgs(rows: list[ResultRow], out_dir, config_hash: str = "") -> list[Path]:
    out_dir = Path(out_dir)
    groups: dict[tuple[str, str], list[ResultRow]] = {}
    for r in rows:
        groups.setdefault((r.metric, r.sampler), []).append(r)
    paths = []
    for (metric, sampler), rs in sorted(groups.items()):
        p = out_dir / f"{metric}_{sampler}.svg".replace("(", "_").replace(")", "").replace("=", "")
        p.write_text(svg_chart(rs, f"{metric} / {sampler}", config_hash))
        paths.append(p)
    return paths


def emit_report(rows: list[ResultRow], out_dir, formats=("csv", "jsonl", "svg"), config_hash: str = "") -> list[Path]:
    if not rows:
        raise ValueError("no rows to report")
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    paths = []
    if "csv" in formats:
        paths.append(write_csv(rows, out / "results.csv"))
    if "jsonl" in formats:
        paths.append(write_jsonl(rows, out / "results.jsonl"))
    if "svg" in formats:
        paths.extend(write_svgs(rows, out, config_hash))
    return paths


# ------------------------------------------------------------ bound suites


@dataclass
class SuiteResult:
    name: str
    passed: bool
    detail: str


def _suite_lemma_b1(rng, instances: int) -> SuiteResult:
    worst = -np.inf
    fails = 0
    for _ in range(instances):
        k = int(rng.integers(1, 4))
        V = int(rng.integers(2, 5))
        q = rng.dirichlet(np.full(V**k, 0.5)).reshape((V,) * k)
        p = rng.dirichlet(np.ones(V), size=k)
        r = analysis.kl_factorized_check(q, p)
        fails += not r.holds
        worst = max(worst, r.kl - r.bound)
    return SuiteResult("lemma_b1", fails == 0, f"{instances} instances, {fails} violations, max kl-bound {worst:.3g}")


def c8_grid():
    scheds = [linear_schedule(8), linear_schedule(32), linear_schedule(128),
              theoretical_schedule(2, 0.3), theoretical_schedule(2, 0.5)]
    return [(s, L) for s in scheds for L in (128, 512)]


def _suite_lemma_c8(rng, trials: int) -> SuiteResult:
    bad = []
    for sch, L in c8_grid():
        e = analysis.estimate_expected_dep(sch, L, 2, trials, rng)
        v = e.violations(3.0)
        if v.size:
            bad.append(f"{sch.kind}/N={sch.num_steps}/L={L} step {int(v[0]) + 1}")
    return SuiteResult("lemma_c8", not bad, "; ".join(bad) or f"{len(c8_grid())} cells, no violation")


def _suite_lemma_d1(rng, trials: int) -> SuiteResult:
    bad = []
    cases = [(linear_schedule(1000), 10)] + c8_grid()
    for sch, L in cases:
        est, bound = analysis.estimate_multi_reveal_prob(sch, L, trials, rng)
        if est.value > bound + 3 * est.sigma + 1e-12:
            bad.append(f"{sch.kind}/N={sch.num_steps}/L={L}: {est.value:.4f} > {bound:.4f}")
    return SuiteResult("lemma_d1", not bad, "; ".join(bad) or f"{len(cases)} cells, no violation")


def _suite_lemma_e2(rng, trials: int) -> SuiteResult:
    bad = []
    for N in (4, 16, 64):
        for l in (2, 3, 5):
            est, bound = analysis.estimate_distinct_reveal_prob(linear_schedule(N), l, trials, rng)
            sigma = math.sqrt(bound * (1 - bound) / trials)
            if est.value > bound + 3 * sigma + 1e-12:
                bad.append(f"N={N}, l={l}: {est.value:.4f} > {bound:.4f}")
    return SuiteResult("lemma_e2", not bad, "; ".join(bad) or "9 cells, no violation")


def _suite_fig3() -> SuiteResult:
    dep = analysis.count_dependencies({1, 5, 9}, {2, 3, 4, 6, 7}, 4, 10)
    sep = analysis.count_separators({2, 3, 4, 6, 7}, 4, 10)
    return SuiteResult("fig3_example", dep == 1 and sep == 1, f"DEP={dep}, SEP={sep}")


def run_verification(seed: int = 0, quick: bool = False) -> list[SuiteResult]:
    """Monte Carlo and exhaustive checks of the factorization and reveal-set bounds."""
    rng = make_rng(seed)
    return [
        _suite_lemma_b1(rng, 1000),
        _suite_lemma_c8(rng, 300 if quick else 2000),
        _suite_lemma_d1(rng, 2000 if quick else 10_000),
        _suite_lemma_e2(rng, 2000 if quick else 10_000),
        _suite_fig3(),
    ]
