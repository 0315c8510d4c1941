"""Command line entry point: ``specpv <verb> ...``.

Verbs: init-model, generate, bench, compare, plot. Output files go to
``--out-dir``, else ``$SPECPV_OUT_DIR``, else ``./specpv-out``.
"""

from __future__ import annotations

import argparse
import json
import os
import sys
import time
from pathlib import Path

from pydantic import ValidationError

from ..drafter import make_drafter
from ..engine import autoregressive_generate, generate
from ..model import save_checkpoint
from .bench import (
    DrafterSettings,
    ModelSettings,
    RunConfig,
    build_model,
    load_report,
    prompt_for,
    run_bench,
    write_report,
)
from .metrics import accept_length_tau, rouge_l
from .plots import emit_plots

OUT_DIR_ENV = "SPECPV_OUT_DIR"
DEFAULT_OUT_DIR = "specpv-out"


def default_out_dir() -> Path:
    return Path(os.environ.get(OUT_DIR_ENV) or DEFAULT_OUT_DIR)


def _int_list(text: str) -> list[int]:
    return [int(t) for t in text.split(",") if t.strip()]


def _budget_list(text: str) -> list[int | None]:
    out = []
    for t in text.split(","):
        t = t.strip().lower()
        if t:
            out.append(None if t in ("none", "inf", "full") else int(t))
    return out


def _budget(text: str) -> int | None:
    return _budget_list(text)[0]


def _add_model_flags(p: argparse.ArgumentParser) -> None:
    g = p.add_argument_group("model")
    g.add_argument("--checkpoint", help="load the target model from this checkpoint")
    g.add_argument("--model-seed", type=int, help="seed for random weights when no checkpoint is given (default 0)")
    g.add_argument("--rope-scaling-mode", choices=["none", "linear", "yarn-like"])
    g.add_argument("--rope-scaling-factor", type=float)


def _model_overrides(args) -> dict:
    """Model fields given on the command line."""
    out = {}
    for flag, key in (
        ("checkpoint", "checkpoint"),
        ("model_seed", "seed"),
        ("rope_scaling_mode", "rope_scaling_mode"),
        ("rope_scaling_factor", "rope_scaling_factor"),
    ):
        if getattr(args, flag) is not None:
            out[key] = getattr(args, flag)
    return out


def build_parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(prog="specpv", description=__doc__.splitlines()[0])
    sub = p.add_subparsers(dest="verb", required=True)

    s = sub.add_parser("init-model", help="write a randomly initialised target model checkpoint")
    s.add_argument("--out", help="checkpoint path (default: <out-dir>/model.spcv)")
    s.add_argument("--out-dir")
    s.add_argument("--seed", type=int, default=0)
    s.add_argument("--vocab-size", type=int, default=256)
    s.add_argument("--dim", type=int, default=64)
    s.add_argument("--n-layers", type=int, default=4)
    s.add_argument("--n-heads", type=int, default=4)
    s.add_argument("--ffn-dim", type=int, default=256)
    s.add_argument("--rope-scaling-mode", choices=["none", "linear", "yarn-like"], default="none")
    s.add_argument("--rope-scaling-factor", type=float, default=1.0)

    s = sub.add_parser("generate", help="generate from one prompt and print tokens and step statistics")
    _add_model_flags(s)
    s.add_argument("--prompt", help="comma-separated token ids; default: a corpus window")
    s.add_argument("--context-len", type=int, default=256, help="corpus prompt length when --prompt is absent")
    s.add_argument("--corpus-seed", type=int, default=0)
    s.add_argument("--drafter", default="eagle-like",
                   choices=["eagle-like", "mock-identical", "mock-noisy", "mock-random"])
    s.add_argument("--p", type=float, default=0.9, help="mock-noisy agreement probability")
    s.add_argument("--drafter-seed", type=int, default=0)
    s.add_argument("--budget", type=_budget, default=None, help="partial-cache token budget, or 'none' for full")
    s.add_argument("--max-new-tokens", type=int, default=64)
    s.add_argument("--temperature", type=float, default=0.0)
    s.add_argument("--seed", type=int, default=0, help="sampling seed")
    s.add_argument("--template", help="tree template: chain(d), binary(d), eagle-like, or a JSON parent list")
    s.add_argument("--reduction", choices=["max", "mean", "last"], default="mean")
    s.add_argument("--score-variant", choices=["as-written", "elementwise"], default="as-written")
    s.add_argument("--ar", action="store_true", help="plain autoregressive decoding instead")
    s.add_argument("--compare-ar", action="store_true", help="also decode autoregressively and report agreement")

    s = sub.add_parser("bench", help="run a benchmark sweep and write report.json and report.csv")
    s.add_argument("--config", help="JSON run config (see docs/config.md); flags below override it")
    s.add_argument("--out-dir")
    _add_model_flags(s)
    s.add_argument("--drafter", choices=["eagle-like", "mock-identical", "mock-noisy", "mock-random"])
    s.add_argument("--p", type=float)
    s.add_argument("--context-lengths", type=_int_list)
    s.add_argument("--budgets", type=_budget_list, help="e.g. none,512,128")
    s.add_argument("--max-new-tokens", type=int)
    s.add_argument("--repetitions", type=int)
    s.add_argument("--temperature", type=float)
    s.add_argument("--template")
    s.add_argument("--reduction", choices=["max", "mean", "last"])
    s.add_argument("--score-variant", choices=["as-written", "elementwise"])
    s.add_argument("--margin", type=int, help="buffer margin above one step's tokens")
    s.add_argument("--workers", type=int)
    s.add_argument("--plots", action="store_true", help="also write SVG charts")

    s = sub.add_parser("compare", help="compare two reports cell by cell")
    s.add_argument("report_a")
    s.add_argument("report_b")

    s = sub.add_parser("plot", help="render SVG charts from a report")
    s.add_argument("--report", help="report.json (default: <out-dir>/report.json)")
    s.add_argument("--out-dir")
    return p


# ---------------------------------------------------------------------------
# verbs
# ---------------------------------------------------------------------------


def cmd_init_model(args) -> int:
    settings = ModelSettings(
        seed=args.seed,
        vocab_size=args.vocab_size,
        dim=args.dim,
        n_layers=args.n_layers,
        n_heads=args.n_heads,
        head_dim=args.dim // args.n_heads,
        ffn_dim=args.ffn_dim,
        feature_tap_layers=sorted({0, args.n_layers // 2 - 1 if args.n_layers > 1 else 0, args.n_layers - 1}),
        rope_scaling_mode=args.rope_scaling_mode,
        rope_scaling_factor=args.rope_scaling_factor,
    )
    out = Path(args.out) if args.out else Path(args.out_dir or default_out_dir()) / "model.spcv"
    out.parent.mkdir(parents=True, exist_ok=True)
    model = build_model(settings)
    save_checkpoint(model, out)
    print(json.dumps({"checkpoint": str(out), "n_params": model.n_params()}))
    return 0


def _parse_template(text):
    if text is None:
        return None
    text = text.strip()
    return json.loads(text) if text.startswith("[") else text


def cmd_generate(args) -> int:
    cfg = RunConfig(
        model=ModelSettings(**_model_overrides(args)),
        drafter=DrafterSettings(kind=args.drafter, p=args.p, seed=args.drafter_seed),
        context_lengths=[max(1, args.context_len)],
        budgets=[args.budget],
        max_new_tokens=args.max_new_tokens,
        temperature=args.temperature,
        seed=args.seed,
        template=_parse_template(args.template),
        cache={"reduction": args.reduction, "score_variant": args.score_variant},
        corpus={"seed": args.corpus_seed},
    )
    model = build_model(cfg.model)
    prompt = _int_list(args.prompt) if args.prompt else prompt_for(cfg, args.context_len, 0, model.config.vocab_size)
    gcfg = cfg.generation_config(len(prompt), args.budget)
    t0 = time.perf_counter()
    if args.ar:
        res = autoregressive_generate(model, prompt, gcfg)
    else:
        res = generate(model, make_drafter(args.drafter, model, seed=args.drafter_seed, p=args.p), prompt, gcfg)
    elapsed = time.perf_counter() - t0
    out = {
        "prompt_len": len(prompt),
        "new_tokens": res.new_tokens,
        "steps": len(res.records),
        "seconds": elapsed,
    }
    if not args.ar:
        modes: dict[str, int] = {}
        for r in res.records:
            modes[r.mode] = modes.get(r.mode, 0) + 1
        out["tau"] = accept_length_tau(res.records) if res.records else None
        out["mode_counts"] = modes
    if args.compare_ar and not args.ar:
        ref = autoregressive_generate(model, prompt, gcfg).new_tokens
        out["identical_to_ar"] = ref == res.new_tokens
        out["rouge_l_vs_ar"] = rouge_l(res.new_tokens, ref)
    print(json.dumps(out))
    return 0


def cmd_bench(args) -> int:
    data = json.loads(Path(args.config).read_text()) if args.config else {}
    data = RunConfig.model_validate(data).model_dump()
    data["model"].update(_model_overrides(args))
    for flag, key in (("drafter", "kind"), ("p", "p")):
        if getattr(args, flag) is not None:
            data["drafter"][key] = getattr(args, flag)
    for flag in ("context_lengths", "budgets", "max_new_tokens", "repetitions", "temperature", "workers"):
        if getattr(args, flag) is not None:
            data[flag] = getattr(args, flag)
    if args.template is not None:
        data["template"] = _parse_template(args.template)
    for flag in ("reduction", "score_variant", "margin"):
        if getattr(args, flag) is not None:
            data["cache"][flag] = getattr(args, flag)
    out_dir = Path(args.out_dir or data.get("output_dir") or default_out_dir())
    data["output_dir"] = str(out_dir)
    cfg = RunConfig.model_validate(data)
    report = run_bench(cfg)
    jpath, cpath = write_report(report, out_dir)
    if args.plots:
        emit_plots(report, out_dir)
    failed = [c for c in report.cells if c.status != "ok"]
    for c in failed:
        print(f"cell {c.method} @ {c.context_len} failed: {c.error}", file=sys.stderr)
    print(json.dumps({"report": str(jpath), "csv": str(cpath), "cells": len(report.cells), "failed": len(failed)}))
    return 0 if report.ok else 1


def cmd_compare(args) -> int:
    a, b = load_report(args.report_a), load_report(args.report_b)
    keys = sorted({(c.method, c.context_len) for c in a.cells} | {(c.method, c.context_len) for c in b.cells},
                  key=lambda k: (k[1], k[0]))
    ok = a.ok and b.ok
    print("method,context_len,alpha_modeled_a,alpha_modeled_b,tau_a,tau_b,outputs_identical")
    for key in keys:
        try:
            ca, cb = a.cell(*key), b.cell(*key)
        except KeyError:
            ok = False
            print(f"{key[0]},{key[1]},missing in one report")
            continue

        def f(v):
            return "" if v is None else f"{v:.6g}"

        same = ca.output_hashes == cb.output_hashes and ca.status == cb.status == "ok"
        print(f"{key[0]},{key[1]},{f(ca.alpha_modeled)},{f(cb.alpha_modeled)},{f(ca.tau)},{f(cb.tau)},{same}")
    return 0 if ok else 1


def cmd_plot(args) -> int:
    out_dir = Path(args.out_dir) if args.out_dir else default_out_dir()
    report = load_report(args.report or out_dir / "report.json")
    files = emit_plots(report, out_dir)
    print(json.dumps({"files": [str(f) for f in files]}))
    return 0 if report.ok else 1


_VERBS = {
    "init-model": cmd_init_model,
    "generate": cmd_generate,
    "bench": cmd_bench,
    "compare": cmd_compare,
    "plot": cmd_plot,
}


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    try:
        return _VERBS[args.verb](args)
    except (ValidationError, ValueError, OSError) as exc:
        print(f"specpv {args.verb}: {exc}", file=sys.stderr)
        return 2


if __name__ == "__main__":
    sys.exit(main())
