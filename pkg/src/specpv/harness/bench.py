"""Benchmark orchestration: run configs, per-cell runs, and the JSON/CSV report.

A cell is one (method, context length) pair. Methods are ``ar`` (plain
autoregressive decoding), ``full`` (speculative decoding with full
verification) and ``partial-<budget>`` (partial verification at that token
budget). Cells are independent; a failing cell is recorded and the run goes
on.
"""

from __future__ import annotations

import csv
import functools
import hashlib
import io
import json
import math
import time
import traceback
from concurrent.futures import ProcessPoolExecutor
from pathlib import Path
from typing import Literal

import numpy as np
from pydantic import BaseModel, ConfigDict, Field, field_validator, model_validator

from ..drafter import make_drafter, template_from_spec
from ..engine import CacheConfig, GenerationConfig, StepRecord, autoregressive_generate, generate
from ..kvstore import REDUCTIONS, SCORE_VARIANTS, OffloadCostModel
from ..model import ModelConfig, TinyTransformer, init_random, load_checkpoint
from ..numerics import RopeConfig
from .corpus import CorpusConfig, gen_corpus
from .metrics import accept_length_tau, rouge_l, speedup_alpha

REPORT_SCHEMA_VERSION = 1
CSV_COLUMNS = ("method", "context_len", "budget", "alpha_measured", "alpha_modeled", "tau", "rouge_l", "steps", "tokens")
TAU_CONVENTION = "mean drafted tokens accepted per verification step; bonus token excluded; zero-accept steps included"
ALPHA_CONVENTION = "micro-average: (sum tokens / sum decode time) over the same ratio for ar at that context length"


class _Strict(BaseModel):
    model_config = ConfigDict(extra="forbid")


class ModelSettings(_Strict):
    checkpoint: str | None = None
    seed: int = 0
    vocab_size: int = Field(256, ge=2)
    dim: int = Field(64, ge=1)
    n_layers: int = Field(4, ge=1)
    n_heads: int = Field(4, ge=1)
    head_dim: int = Field(16, ge=2)
    ffn_dim: int = Field(256, ge=1)
    feature_tap_layers: list[int] = [0, 1, 3]
    max_position: int = Field(16384, ge=1)
    rope_theta: float = Field(10000.0, gt=0)
    rope_scaling_mode: Literal["none", "linear", "yarn-like"] = "none"
    rope_scaling_factor: float = Field(1.0, ge=1.0)

    def to_config(self) -> ModelConfig:
        rope = RopeConfig(
            head_dim=self.head_dim,
            theta_base=self.rope_theta,
            scaling_mode=self.rope_scaling_mode,
            scaling_factor=self.rope_scaling_factor,
        )
        return ModelConfig(
            vocab_size=self.vocab_size,
            dim=self.dim,
            n_layers=self.n_layers,
            n_heads=self.n_heads,
            head_dim=self.head_dim,
            ffn_dim=self.ffn_dim,
            rope=rope,
            feature_tap_layers=tuple(self.feature_tap_layers),
            max_position=self.max_position,
        )

    @model_validator(mode="after")
    def _check(self):
        if self.checkpoint is None:
            self.to_config()
        return self


class DrafterSettings(_Strict):
    kind: Literal["eagle-like", "mock-identical", "mock-noisy", "mock-random"] = "eagle-like"
    p: float = Field(0.9, ge=0.0, le=1.0, description="agreement probability for mock-noisy")
    seed: int = 0


class CacheSettings(_Strict):
    n_sink: int = Field(2, ge=0)
    n_local: int = Field(4, ge=0)
    block_size: int = Field(16, ge=1)
    margin: int = Field(20, ge=0)
    buffer_cap: int | None = Field(None, ge=1)
    score_variant: Literal[SCORE_VARIANTS] = "as-written"  # type: ignore[valid-type]
    reduction: Literal[REDUCTIONS] = "mean"  # type: ignore[valid-type]


class CostSettings(_Strict):
    bandwidth_bytes_per_s: float = Field(16e9, gt=0)
    per_transfer_latency_s: float = Field(10e-6, ge=0)
    device_bytes_per_s: float = Field(1e12, gt=0)

    def to_model(self) -> OffloadCostModel:
        return OffloadCostModel(self.bandwidth_bytes_per_s, self.per_transfer_latency_s, self.device_bytes_per_s)


class CorpusSettings(_Strict):
    seed: int = 0
    period: int = Field(192, ge=1)
    motif_len: int = Field(12, ge=1)
    n_motifs: int = Field(3, ge=1)


class RunConfig(_Strict):
    """Everything a benchmark run needs; validated before any cell runs."""

    model: ModelSettings = ModelSettings()
    drafter: DrafterSettings = DrafterSettings()
    context_lengths: list[int] = [2048]
    budgets: list[int | None] = Field([None, 512, 128], description="null means full verification")
    repetitions: int = Field(1, ge=1)
    max_new_tokens: int = Field(64, ge=1)
    temperature: float = Field(0.0, ge=0.0)
    seed: int = 0
    template: str | list[int] | None = None
    chunk_size: int = Field(64, ge=1)
    cache: CacheSettings = CacheSettings()
    cost: CostSettings = CostSettings()
    corpus: CorpusSettings = CorpusSettings()
    workers: int = Field(1, ge=1)
    output_dir: str | None = None

    @field_validator("context_lengths")
    @classmethod
    def _ctx(cls, v):
        if any(c < 1 for c in v):
            raise ValueError("context lengths must be positive")
        if len(set(v)) != len(v):
            raise ValueError("duplicate context length")
        return v

    @field_validator("budgets")
    @classmethod
    def _budgets(cls, v):
        if len(set(v)) != len(v):
            raise ValueError("duplicate budget")
        return v

    @field_validator("template")
    @classmethod
    def _template(cls, v):
        if v is not None:
            template_from_spec(v)
        return v

    @model_validator(mode="after")
    def _check(self):
        c = self.cache
        floor = (c.n_sink + c.n_local) * c.block_size
        for b in self.budgets:
            if b is not None and b < floor:
                raise ValueError(f"budget {b} is below sink+local ({floor} tokens)")
        CorpusConfig(self.model.vocab_size, self.corpus.period, self.corpus.motif_len, self.corpus.n_motifs)
        self.generation_config(max(self.context_lengths, default=1), None)
        return self

    def methods(self) -> list[tuple[str, int | None]]:
        out = [("ar", None)]
        for b in self.budgets:
            out.append(("full", None) if b is None else (f"partial-{b}", b))
        return out

    def generation_config(self, context_len: int, budget: int | None) -> GenerationConfig:
        c = self.cache
        tpl = template_from_spec(self.template) if self.template is not None else None
        return GenerationConfig(
            max_length=context_len + self.max_new_tokens + 64,
            max_new_tokens=self.max_new_tokens,
            temperature=self.temperature,
            seed=self.seed,
            cache=CacheConfig(
                budget=budget,
                n_sink=c.n_sink,
                n_local=c.n_local,
                buffer_cap=c.buffer_cap,
                block_size=c.block_size,
                score_variant=c.score_variant,
                reduction=c.reduction,
                margin=c.margin,
            ),
            template=tpl,
            chunk_size=self.chunk_size,
            cost=self.cost.to_model(),
        )


class StepRecordOut(_Strict):
    mode: str
    drafted: int
    accepted: int
    emitted: int
    draft_time_s: float
    verify_time_s: float
    modeled_draft_s: float
    modeled_verify_s: float
    cumulative_length: int
    tokens_in_step: int
    full_cache_len: int
    buffer_occupancy: int

    @classmethod
    def from_record(cls, r: StepRecord) -> "StepRecordOut":
        return cls(**{k: getattr(r, k) for k in cls.model_fields})


class CellReport(_Strict):
    method: str
    context_len: int
    budget: int | None
    status: Literal["ok", "failed"]
    error: str | None = None
    tokens: int = 0
    steps: int = 0
    wall_time_s: float = 0.0
    modeled_time_s: float = 0.0
    prefill_time_s: float = 0.0
    throughput_measured: float | None = None
    throughput_modeled: float | None = None
    alpha_measured: float | None = None
    alpha_modeled: float | None = None
    tau: float | None = None
    rouge_l: float | None = None
    mode_counts: dict[str, int] = {}
    output_hashes: list[str] = []
    records: list[list[StepRecordOut]] = Field([], description="raw step records, one list per repetition")


class RunReport(_Strict):
    schema_version: int = REPORT_SCHEMA_VERSION
    config: RunConfig
    tau_convention: str = TAU_CONVENTION
    alpha_convention: str = ALPHA_CONVENTION
    cells: list[CellReport]

    @property
    def ok(self) -> bool:
        return all(c.status == "ok" for c in self.cells)

    def cell(self, method: str, context_len: int) -> CellReport:
        for c in self.cells:
            if c.method == method and c.context_len == context_len:
                return c
        raise KeyError((method, context_len))


# ---------------------------------------------------------------------------
# aggregation (also used to recompute report fields from raw records)
# ---------------------------------------------------------------------------


def flat_records(cell: CellReport) -> list[StepRecordOut]:
    return [r for rep in cell.records for r in rep]


def totals(records) -> tuple[int, float, float]:
    """(tokens, measured decode seconds, modeled decode seconds)."""
    tokens = sum(r.emitted for r in records)
    wall = math.fsum(r.draft_time_s + r.verify_time_s for r in records)
    modeled = math.fsum(r.modeled_draft_s + r.modeled_verify_s for r in records)
    return tokens, wall, modeled


def _throughput(tokens: int, seconds: float) -> float | None:
    return tokens / seconds if seconds > 0 else None


def _alpha(tokens, t, ar_tokens, ar_t) -> float | None:
    if not (t > 0 and ar_t is not None and ar_t > 0 and ar_tokens):
        return None
    return speedup_alpha(tokens, t, ar_t, ar_tokens)


def output_hash(tokens) -> str:
    return hashlib.sha256(np.asarray(tokens, dtype="<u4").tobytes()).hexdigest()


# ---------------------------------------------------------------------------
# running cells
# ---------------------------------------------------------------------------


@functools.lru_cache(maxsize=4)
def _load_model(settings_json: str) -> TinyTransformer:
    s = ModelSettings.model_validate_json(settings_json)
    if s.checkpoint is not None:
        return load_checkpoint(s.checkpoint)
    return init_random(s.to_config(), s.seed)


def build_model(settings: ModelSettings) -> TinyTransformer:
    return _load_model(settings.model_dump_json())


def prompt_for(cfg: RunConfig, context_len: int, rep: int, vocab: int) -> list[int]:
    c = cfg.corpus
    return gen_corpus(c.seed + rep, context_len, vocab, CorpusConfig(vocab, c.period, c.motif_len, c.n_motifs))


def run_cell(cfg: RunConfig, method: str, budget: int | None, context_len: int) -> dict:
    """Run one cell; never raises. Returns raw outputs and records."""
    out = {"method": method, "budget": budget, "context_len": context_len, "outputs": [], "records": []}
    try:
        model = build_model(cfg.model)
        gcfg = cfg.generation_config(context_len, budget)
        prefill = 0.0
        for rep in range(cfg.repetitions):
            prompt = prompt_for(cfg, context_len, rep, model.config.vocab_size)
            t0 = time.perf_counter()
            if method == "ar":
                res = autoregressive_generate(model, prompt, gcfg)
            else:
                d = cfg.drafter
                drafter = make_drafter(d.kind, model, seed=d.seed, p=d.p)
                res = generate(model, drafter, prompt, gcfg)
            elapsed = time.perf_counter() - t0
            prefill += max(0.0, elapsed - sum(r.wall_time_s for r in res.records))
            out["outputs"].append(res.new_tokens)
            out["records"].append([StepRecordOut.from_record(r) for r in res.records])
        out["prefill_time_s"] = prefill
        out["status"] = "ok"
    except Exception as exc:  # a failed cell must not stop the sweep
        out["status"] = "failed"
        out["error"] = f"{type(exc).__name__}: {exc}"
        out["traceback"] = traceback.format_exc()
    return out


def _run_cell_args(args):
    return run_cell(*args)


def run_bench(cfg: RunConfig) -> RunReport:
    """Run every (method, context length) cell and assemble the report."""
    jobs = [(cfg, m, b, L) for L in cfg.context_lengths for m, b in cfg.methods()]
    if cfg.workers > 1 and len(jobs) > 1:
        with ProcessPoolExecutor(max_workers=cfg.workers) as pool:
            raw = list(pool.map(_run_cell_args, jobs))
    else:
        raw = [run_cell(*j) for j in jobs]
    return assemble_report(cfg, raw)


def assemble_report(cfg: RunConfig, raw: list[dict]) -> RunReport:
    by_key = {(r["method"], r["context_len"]): r for r in raw}
    cells = []
    for r in raw:
        if r["status"] != "ok":
            cells.append(
                CellReport(
                    method=r["method"], context_len=r["context_len"], budget=r["budget"], status="failed",
                    error=r.get("error"),
                )
            )
            continue
        recs = [rec for rep in r["records"] for rec in rep]
        tokens, wall, modeled = totals(recs)
        ar = by_key.get(("ar", r["context_len"]))
        ar_ok = ar is not None and ar["status"] == "ok"
        ar_tokens, ar_wall, ar_modeled = totals([x for rep in ar["records"] for x in rep]) if ar_ok else (None,) * 3
        full = by_key.get(("full", r["context_len"]))
        rouge = None
        if full is not None and full["status"] == "ok":
            scores = [
                rouge_l(o, ref) for o, ref in zip(r["outputs"], full["outputs"]) if len(o) and len(ref)
            ]
            rouge = float(np.mean(scores)) if scores else None
        modes: dict[str, int] = {}
        for rec in recs:
            modes[rec.mode] = modes.get(rec.mode, 0) + 1
        cells.append(
            CellReport(
                method=r["method"],
                context_len=r["context_len"],
                budget=r["budget"],
                status="ok",
                tokens=tokens,
                steps=len(recs),
                wall_time_s=wall,
                modeled_time_s=modeled,
                prefill_time_s=r.get("prefill_time_s", 0.0),
                throughput_measured=_throughput(tokens, wall),
                throughput_modeled=_throughput(tokens, modeled),
                alpha_measured=_alpha(tokens, wall, ar_tokens, ar_wall),
                alpha_modeled=_alpha(tokens, modeled, ar_tokens, ar_modeled),
                tau=None if r["method"] == "ar" or not recs else accept_length_tau(recs),
                rouge_l=rouge,
                mode_counts=modes,
                output_hashes=[output_hash(o) for o in r["outputs"]],
                records=r["records"],
            )
        )
    return RunReport(config=cfg, cells=cells)


# ---------------------------------------------------------------------------
# files
# ---------------------------------------------------------------------------


def _fmt(v) -> str:
    if v is None:
        return ""
    if isinstance(v, float):
        return repr(v)
    return str(v)


def report_csv(report: RunReport) -> str:
    buf = io.StringIO()
    w = csv.writer(buf, lineterminator="\n")
    w.writerow(CSV_COLUMNS)
    for c in report.cells:
        budget = "" if c.method == "ar" else ("inf" if c.budget is None else str(c.budget))
        w.writerow(
            [c.method, c.context_len, budget, _fmt(c.alpha_measured), _fmt(c.alpha_modeled), _fmt(c.tau),
             _fmt(c.rouge_l), c.steps, c.tokens]
        )
    return buf.getvalue()


def write_report(report: RunReport, out_dir) -> tuple[Path, Path]:
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    jpath, cpath = out / "report.json", out / "report.csv"
    jpath.write_text(report.model_dump_json(indent=2) + "\n")
    cpath.write_text(report_csv(report))
    return jpath, cpath


def load_report(path) -> RunReport:
    return RunReport.model_validate_json(Path(path).read_text())


def load_run_config(path) -> RunConfig:
    """Read a JSON run config (see docs/config.md)."""
    return RunConfig.model_validate(json.loads(Path(path).read_text()))


def report_schema() -> dict:
    return RunReport.model_json_schema()
