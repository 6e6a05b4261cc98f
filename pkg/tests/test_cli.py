import json
import subprocess
import sys

import pytest

from progfreeze.cli import main
from progfreeze.report import ROW_FIELDS, TABLE_HEADER, parse_markdown_table, read_rows

TINY = """seed: 0
cohort: {n_pos: 10, n_neg: 14, image_size: 16}
architecture: {stem_channels: 4, widths: [4, 4, 8, 8]}
pretrain: {epochs: 1, samples: 64}
train:
  grid:
    - {init: XRAY_LIKE_PRETRAIN, mode: ProgFreeze, epochs: 3}
    - {init: RGB_LIKE_PRETRAIN, mode: FullIFT, probe_epochs: 1, epochs: 3, cutmix: true}
split: {k: 5, repeats: 2}
fedsim: {n_sites: 2, rounds_per_phase: [1, 2, 1], local_epochs_per_round: 1}
"""
XRV = "XRV-ProgFreeze (3e)"
RGB = "RGB-FullIFT + LP + CutMix (3e)"


@pytest.fixture
def config(tmp_path):
    p = tmp_path / "tiny.yaml"
    p.write_text(TINY)
    return p


@pytest.fixture(scope="module")
def ablated(tmp_path_factory):
    d = tmp_path_factory.mktemp("abl")
    (d / "tiny.yaml").write_text(TINY)
    assert main(["ablate", "--config", str(d / "tiny.yaml"), "--out", str(d / "run")]) == 0
    return d


def test_ablate_writes_rows_and_manifest(ablated):
    out = ablated / "run" / "ablate"
    rows = read_rows(out / "rows.csv")
    assert len(rows) == 2 * 10
    assert list(rows[0]) == list(ROW_FIELDS)
    man = json.loads((out / "manifest.json").read_text())
    assert set(man["runs"]) == {XRV, RGB}
    assert len({r["plan_fingerprint"] for r in man["runs"].values()}) == 1


def test_rerun_is_byte_identical(ablated, tmp_path):
    assert main(["ablate", "--config", str(ablated / "tiny.yaml"), "--out", str(tmp_path)]) == 0
    for name in ("rows.csv", "fold_plan.json"):
        assert ((tmp_path / "ablate" / name).read_bytes()
                == (ablated / "run" / "ablate" / name).read_bytes())


def test_report_markdown_and_csv(ablated, capsys):
    assert main(["report", str(ablated / "run" / "ablate")]) == 0
    table = parse_markdown_table(capsys.readouterr().out)
    assert table[0] == list(TABLE_HEADER)
    assert {r[0] for r in table[1:]} == {XRV, RGB}
    assert main(["report", str(ablated / "run" / "ablate"), "--format", "csv"]) == 0
    assert capsys.readouterr().out.startswith("Experiment,AUROC mean,AUROC std")


def test_compare_is_paired_and_antisymmetric(ablated, capsys):
    res = str(ablated / "run" / "ablate")
    assert main(["compare", XRV, XRV, res]) == 0
    same = json.loads(capsys.readouterr().out)
    assert same["t_stat"] == 0.0 and same["p_two_sided"] == 1.0
    assert main(["compare", XRV, RGB, res]) == 0
    ab = json.loads(capsys.readouterr().out)
    assert main(["compare", RGB, XRV, res]) == 0
    ba = json.loads(capsys.readouterr().out)
    assert ab["t_stat"] == pytest.approx(-ba["t_stat"])
    assert ab["p_two_sided"] == pytest.approx(ba["p_two_sided"])


def test_compare_refuses_different_fold_plans(ablated, tmp_path, capsys):
    assert main(["finetune", "--config", str(ablated / "tiny.yaml"), "--seed", "1",
                 "--out", str(tmp_path)]) == 0
    capsys.readouterr()
    code = main(["compare", XRV, XRV, str(ablated / "run" / "ablate"),
                 "--results-b", str(tmp_path / "finetune")])
    assert code == 2
    assert capsys.readouterr().err.startswith("error: usage:")


def test_config_error_exit_code(tmp_path, capsys):
    bad = tmp_path / "bad.yaml"
    bad.write_text("cohort: {n_pos: 10, bogus: 1}\n")
    assert main(["generate", "--config", str(bad), "--out", str(tmp_path)]) == 2
    err = capsys.readouterr().err
    assert err.startswith("error: config: cohort.bogus")


def test_missing_inputs_exit_code(tmp_path, capsys):
    assert main(["generate", "--config", str(tmp_path / "nope.yaml")]) == 1
    assert capsys.readouterr().err.startswith("error: io:")
    assert main(["report", str(tmp_path / "nothing")]) == 1


def test_unknown_config_name_is_usage_error(config, tmp_path, capsys):
    assert main(["finetune", "--config", str(config), "--name", "nope", "--out", str(tmp_path)]) == 2


def test_output_dir_env_override(config, tmp_path, monkeypatch):
    monkeypatch.setenv("PROGFREEZE_OUTPUT_DIR", str(tmp_path / "env"))
    assert main(["generate", "--config", str(config)]) == 0
    assert (tmp_path / "env" / "cohort").is_dir()
    assert main(["generate", "--config", str(config), "--out", str(tmp_path / "flag")]) == 0
    assert (tmp_path / "flag" / "cohort").is_dir()


def test_fedsim_and_baseline_commands(config, tmp_path):
    assert main(["fedsim", "--config", str(config), "--out", str(tmp_path)]) == 0
    ledger = (tmp_path / "fedsim" / "ledger.csv").read_text().splitlines()
    assert ledger[0] == "round,site,phase,upstream_params,downstream_params,features_sent"
    assert (tmp_path / "fedsim" / "cross_site.csv").exists()
    assert main(["baseline-irds", "--config", str(config), "--repeats", "2",
                 "--out", str(tmp_path)]) == 0
    assert len(read_rows(tmp_path / "baseline-irds" / "rows.csv")) == 10


def test_module_entry_point(config, tmp_path):
    proc = subprocess.run([sys.executable, "-m", "progfreeze", "generate", "--config", str(config),
                           "--out", str(tmp_path)], capture_output=True, text=True)
    assert proc.returncode == 0, proc.stderr
    proc = subprocess.run([sys.executable, "-m", "progfreeze", "frobnicate"],
                          capture_output=True, text=True)
    assert proc.returncode == 2
