"""Benchmark harness: synthetic corpus, metrics, sweeps, reports, plots and the CLI."""

from .bench import RunConfig, RunReport, load_report, load_run_config, run_bench, write_report
from .corpus import CorpusConfig, gen_corpus, motif_positions
from .metrics import accept_length_tau, rouge_l, speedup_alpha
from .plots import emit_plots

__all__ = [
    "CorpusConfig",
    "RunConfig",
    "RunReport",
    "accept_length_tau",
    "emit_plots",
    "gen_corpus",
    "load_report",
    "load_run_config",
    "motif_positions",
    "rouge_l",
    "run_bench",
    "speedup_alpha",
    "write_report",
]
