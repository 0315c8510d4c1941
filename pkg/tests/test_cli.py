import json
import subprocess
import sys

import pytest

from specpv.harness.cli import main
from specpv.model import load_checkpoint

from .test_bench import SMALL_MODEL


def _json_out(capsys):
    return json.loads(capsys.readouterr().out.strip().splitlines()[-1])


@pytest.fixture(scope="module")
def small_ckpt(tmp_path_factory):
    path = tmp_path_factory.mktemp("ckpt") / "small.spcv"
    assert main(["init-model", "--out", str(path), "--vocab-size", "48", "--dim", "32",
                 "--n-layers", "2", "--n-heads", "2", "--ffn-dim", "64", "--seed", "3"]) == 0
    return path


def test_init_model_writes_loadable_checkpoint(small_ckpt):
    m = load_checkpoint(small_ckpt)
    assert m.config.vocab_size == 48 and m.config.n_layers == 2


def test_init_model_uses_env_out_dir(tmp_path, monkeypatch, capsys):
    monkeypatch.setenv("SPECPV_OUT_DIR", str(tmp_path))
    assert main(["init-model", "--vocab-size", "16", "--dim", "16", "--n-layers", "1",
                 "--n-heads", "1", "--ffn-dim", "16"]) == 0
    assert (tmp_path / "model.spcv").exists()
    assert _json_out(capsys)["checkpoint"] == str(tmp_path / "model.spcv")


def test_generate_full_matches_ar(small_ckpt, capsys):
    code = main(["generate", "--checkpoint", str(small_ckpt), "--context-len", "160",
                 "--drafter", "mock-noisy", "--p", "0.8", "--budget", "none",
                 "--max-new-tokens", "16", "--compare-ar"])
    assert code == 0
    out = _json_out(capsys)
    assert out["identical_to_ar"] is True
    assert out["rouge_l_vs_ar"] == 100.0
    assert len(out["new_tokens"]) == 16
    assert set(out["mode_counts"]) == {"Full"}


def test_generate_partial_reports_agreement(small_ckpt, capsys):
    code = main(["generate", "--checkpoint", str(small_ckpt), "--context-len", "160",
                 "--drafter", "mock-noisy", "--p", "0.8", "--budget", "96",
                 "--max-new-tokens", "16", "--compare-ar"])
    assert code == 0
    out = _json_out(capsys)
    assert 0.0 <= out["rouge_l_vs_ar"] <= 100.0
    assert "Partial" in out["mode_counts"]


def test_generate_explicit_prompt_ar(small_ckpt, capsys):
    assert main(["generate", "--checkpoint", str(small_ckpt), "--prompt", "1,2,3,4",
                 "--max-new-tokens", "5", "--ar"]) == 0
    out = _json_out(capsys)
    assert out["prompt_len"] == 4 and len(out["new_tokens"]) == 5


def _bench_config(tmp_path, **kw):
    cfg = dict(model=SMALL_MODEL, drafter={"kind": "mock-noisy", "p": 0.8},
               context_lengths=[160], budgets=[None, 96], max_new_tokens=8)
    cfg.update(kw)
    path = tmp_path / "run.json"
    path.write_text(json.dumps(cfg))
    return path


def test_bench_compare_plot(tmp_path, monkeypatch, capsys):
    monkeypatch.setenv("SPECPV_OUT_DIR", str(tmp_path / "a"))
    conf = _bench_config(tmp_path)
    assert main(["bench", "--config", str(conf)]) == 0
    out = _json_out(capsys)
    assert out["failed"] == 0 and out["cells"] == 3
    assert (tmp_path / "a" / "report.json").exists() and (tmp_path / "a" / "report.csv").exists()

    assert main(["bench", "--config", str(conf), "--out-dir", str(tmp_path / "b")]) == 0
    capsys.readouterr()
    assert main(["compare", str(tmp_path / "a" / "report.json"), str(tmp_path / "b" / "report.json")]) == 0
    lines = capsys.readouterr().out.strip().splitlines()
    assert len(lines) == 1 + 3
    assert all(line.endswith(",True") for line in lines[1:])

    assert main(["plot"]) == 0
    files = _json_out(capsys)["files"]
    assert len(files) == 3 and all(f.endswith(".svg") for f in files)


def test_bench_flags_override_config(tmp_path, capsys):
    conf = _bench_config(tmp_path)
    assert main(["bench", "--config", str(conf), "--out-dir", str(tmp_path),
                 "--budgets", "none", "--context-lengths", "120"]) == 0
    report = json.loads((tmp_path / "report.json").read_text())
    assert {(c["method"], c["context_len"]) for c in report["cells"]} == {("ar", 120), ("full", 120)}


@pytest.mark.filterwarnings("ignore:report has no successful cells")
def test_bench_failed_cell_exits_1(tmp_path, capsys):
    conf = _bench_config(tmp_path, model=dict(SMALL_MODEL, max_position=256), context_lengths=[400])
    assert main(["bench", "--config", str(conf), "--out-dir", str(tmp_path)]) == 1
    assert "failed" in capsys.readouterr().err
    # compare and plot on a failed report also exit 1
    rep = str(tmp_path / "report.json")
    assert main(["compare", rep, rep]) == 1
    assert main(["plot", "--report", rep, "--out-dir", str(tmp_path)]) == 1


def test_bad_input_exits_2(tmp_path, capsys):
    bad = tmp_path / "bad.json"
    bad.write_text(json.dumps({"context_lengths": [0]}))
    assert main(["bench", "--config", str(bad), "--out-dir", str(tmp_path)]) == 2
    assert main(["generate", "--checkpoint", str(tmp_path / "missing.spcv")]) == 2
    assert main(["compare", str(tmp_path / "nope.json"), str(tmp_path / "nope.json")]) == 2
    assert "specpv" in capsys.readouterr().err


def test_usage_error_exits_2():
    with pytest.raises(SystemExit) as exc:
        main(["frobnicate"])
    assert exc.value.code == 2


def test_module_entry_point():
    res = subprocess.run([sys.executable, "-m", "specpv.harness.cli", "--help"], capture_output=True, text=True)
    assert res.returncode == 0 and "init-model" in res.stdout
