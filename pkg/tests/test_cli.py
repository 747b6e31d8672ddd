"""Config parsing, subcommand artifacts, determinism, and the K ablation."""

import csv
import os

import numpy as np
import pytest

from flowdc import cli, scenarios


# ---------------------------------------------------------------------------
# config text round trip
# ---------------------------------------------------------------------------

@pytest.mark.parametrize("name", scenarios.SCENARIO_NAMES)
def test_config_round_trip_is_lossless(name):
    scn = scenarios.make_scenario(name)
    text = cli.dump_config(cli.bundle_config(scn))
    rebuilt = cli.build_bundle(cli.parse_config(text))
    assert cli.dump_config(cli.bundle_config(rebuilt)) == text


def test_partial_config_overrides_only_named_keys():
    cfg = cli.parse_config("scenario = explore\nfdc.k = 3\n")
    scn = cli.build_bundle(cfg)
    base = scenarios.make_scenario("explore")
    assert scn.fdc.K == 3
    assert scn.fdc.am.inner_steps == base.fdc.am.inner_steps
    assert scn.am.eta == base.am.eta
    assert scn.alphas == base.alphas


def test_comments_and_blank_lines_ignored():
    cfg = cli.parse_config("# header\n\nscenario = novelty  # trailing\n")
    assert cfg.values == {"scenario": "novelty"}


def test_missing_scenario_key_rejected():
    with pytest.raises(cli.ConfigError, match="scenario"):
        cli.build_bundle(cli.parse_config("fdc.k = 2\n"))


def test_validation_reports_every_violation_at_once():
    bad = ("scenario = nowhere\n"
           "mystery.key = 1\n"
           "fdc.k = notanint\n"
           "flow.sigma_mode = quadratic\n"
           "pretrain.steps = 10\n"
           "pretrain.steps = 20\n")
    with pytest.raises(cli.ConfigError) as err:
        cli.parse_config(bad)
    joined = "\n".join(err.value.violations)
    assert len(err.value.violations) == 5
    assert "nowhere" in joined
    assert "unknown key 'mystery.key'" in joined
    assert "notanint" in joined
    assert "quadratic" in joined
    assert "duplicate key 'pretrain.steps'" in joined


@pytest.mark.parametrize("kind,fragment", [
    ("renyi", "density estimates"),
    ("diverse_modes", "latent conditioning"),
])
def test_out_of_scope_kinds_rejected_with_explanation(kind, fragment):
    with pytest.raises(cli.ConfigError) as err:
        cli.parse_config(f"scenario = explore\nfunctional.kind = {kind}\n")
    joined = "\n".join(err.value.violations)
    assert "out of scope" in joined
    assert fragment in joined


def test_dump_config_rejects_foreign_keys():
    with pytest.raises(ValueError, match="outside the schema"):
        cli.dump_config({"scenario": "explore", "made.up": 1})


def test_scenario_dump_subcommand_prints_parseable_config(capsys):
    assert cli.main(["scenario", "dump", "--name", "novelty"]) == 0
    text = capsys.readouterr().out
    scn = cli.build_bundle(cli.parse_config(text))
    assert scn.name == "novelty"
    assert scn.spec.kind == "sq"


# ---------------------------------------------------------------------------
# cheap subcommands
# ---------------------------------------------------------------------------

def test_simplex_check_writes_one_row_per_trial(tmp_path):
    out = str(tmp_path / "simplex.csv")
    assert cli.main(["simplex-check", "--n", "5", "--trials", "100",
                     "--out", out]) == 0
    with open(out, newline="") as fh:
        rows = list(csv.reader(fh))
    assert rows[0] == ["trial", "n", "alpha", "one_step_sup_err",
                       "rate_slack_factor"]
    assert len(rows) == 101
    errs = [float(r[3]) for r in rows[1:]]
    slacks = [float(r[4]) for r in rows[1:]]
    assert max(errs) < 1e-12
    assert all(0.0 <= s <= 1.0 for s in slacks)


@pytest.mark.parametrize("argv", [
    ["finetune-fdc", "--scenario", "explore", "--ckpt", "{missing}",
     "--outdir", "{tmp}"],
    ["finetune-am", "--scenario", "explore", "--ckpt", "{missing}",
     "--outdir", "{tmp}"],
    ["eval", "--scenario", "explore", "--ckpt", "{missing}",
     "--out", "{tmp}/m.csv"],
])
def test_missing_checkpoint_exits_nonzero_and_names_path(argv, tmp_path,
                                                         capsys):
    missing = str(tmp_path / "no_such_ckpt.txt")
    argv = [a.replace("{missing}", missing).replace("{tmp}", str(tmp_path))
            for a in argv]
    assert cli.main(argv) != 0
    assert missing in capsys.readouterr().out


def test_unreadable_config_exits_nonzero(tmp_path, capsys):
    assert cli.main(["scenario", "dump", "--name", "explore"]) == 0
    capsys.readouterr()
    bad = tmp_path / "bad.cfg"
    bad.write_text("scenario = explore\nfunctional.kind = renyi\n")
    code = cli.main(["pretrain", "--config", str(bad),
                     "--outdir", str(tmp_path / "out")])
    assert code == 2
    assert "out of scope" in capsys.readouterr().out


# ---------------------------------------------------------------------------
# end-to-end artifacts on a miniature budget
# ---------------------------------------------------------------------------

TINY_CFG = """\
scenario = explore
pretrain.steps = 300
fdc.k = 2
fdc.inner_steps = 10
fdc.n_fv = 64
fdc.batch = 32
am.inner_steps = 15
eval.n = 300
eval.seed = 5
"""


@pytest.fixture(scope="module")
def tiny_run(tmp_path_factory):
    """One miniature pretrain shared by the artifact tests."""
    root = tmp_path_factory.mktemp("cli_tiny")
    cfg = root / "tiny.cfg"
    cfg.write_text(TINY_CFG)
    outdir = root / "pre"
    assert cli.main(["pretrain", "--config", str(cfg),
                     "--outdir", str(outdir)]) == 0
    return {"root": root, "cfg": str(cfg),
            "ckpt": str(outdir / "ckpt.txt"), "pre": str(outdir)}


def _read_csv(path):
    with open(path, newline="") as fh:
        return list(csv.reader(fh))


def test_pretrain_writes_config_loss_trace_and_provenance(tiny_run):
    pre = tiny_run["pre"]
    assert os.path.isfile(os.path.join(pre, "ckpt.txt"))
    rows = _read_csv(os.path.join(pre, "pretrain_steps.csv"))
    assert rows[0] == ["step", "loss"]
    assert len(rows) == 301
    config_text = open(os.path.join(pre, "config.txt")).read()
    values = cli.resolve_values(cli.parse_config(config_text))
    assert values["pretrain.steps"] == 300
    assert values["eval.n"] == 300
    prov = open(os.path.join(pre, "provenance.txt")).read()
    assert "command = pretrain" in prov
    assert "input_sha256.config = " in prov


def test_finetune_fdc_records_identical_for_equal_seeds(tiny_run):
    root = tiny_run["root"]
    outs = []
    for tag in ("a", "b"):
        outdir = root / f"fdc_{tag}"
        assert cli.main(["finetune-fdc", "--config", tiny_run["cfg"],
                         "--ckpt", tiny_run["ckpt"],
                         "--outdir", str(outdir), "--seed", "7"]) == 0
        outs.append(outdir)
    rec_a = (outs[0] / "records.csv").read_bytes()
    rec_b = (outs[1] / "records.csv").read_bytes()
    assert rec_a == rec_b
    assert (outs[0] / "ckpt.txt").read_bytes() == \
        (outs[1] / "ckpt.txt").read_bytes()
    rows = _read_csv(str(outs[0] / "records.csv"))
    assert rows[0] == ["iteration", "functional_value", "divergence",
                       "grad_norm"]
    assert [r[0] for r in rows[1:]] == ["0", "1", "2"]
    assert os.path.isfile(outs[0] / "values.svg")
    assert os.path.isfile(outs[0] / "timings.csv")


def test_finetune_am_writes_step_trace(tiny_run):
    outdir = tiny_run["root"] / "am"
    assert cli.main(["finetune-am", "--config", tiny_run["cfg"],
                     "--ckpt", tiny_run["ckpt"],
                     "--outdir", str(outdir), "--seed", "0"]) == 0
    rows = _read_csv(str(outdir / "am_steps.csv"))
    assert rows[0] == ["step", "loss", "mean_reward"]
    assert len(rows) == 16
    assert os.path.isfile(outdir / "ckpt.txt")


def test_eval_writes_metric_rows_and_scatter(tiny_run):
    out = tiny_run["root"] / "metrics.csv"
    assert cli.main(["eval", "--config", tiny_run["cfg"],
                     "--ckpt", tiny_run["ckpt"], "--out", str(out)]) == 0
    rows = _read_csv(str(out))
    assert rows[0] == ["metric", "value", "n", "seed"]
    names = [r[0] for r in rows[1:]]
    assert names == ["mean_reward", "mc_entropy"]
    assert all(r[2] == "300" and r[3] == "5" for r in rows[1:])
    assert np.isfinite([float(r[1]) for r in rows[1:]]).all()
    assert os.path.isfile(tiny_run["root"] / "metrics.svg")


def test_output_svg_zero_suppresses_plots(tiny_run, tmp_path):
    cfg = tmp_path / "nosvg.cfg"
    cfg.write_text(TINY_CFG + "output.svg = 0\n")
    out = tmp_path / "metrics.csv"
    assert cli.main(["eval", "--config", str(cfg),
                     "--ckpt", tiny_run["ckpt"], "--out", str(out)]) == 0
    assert os.path.isfile(out)
    assert not os.path.exists(tmp_path / "metrics.svg")


def test_ablate_k_csv_starts_with_pretrain_baseline_row(tiny_run, tmp_path):
    out = tmp_path / "ablate.csv"
    assert cli.main(["ablate-k", "--config", tiny_run["cfg"],
                     "--k-list", "1,2", "--n-inner", "4",
                     "--ckpt", tiny_run["ckpt"], "--out", str(out)]) == 0
    rows = _read_csv(str(out))
    assert rows[0] == ["K", "runtime_seconds", "metric"]
    assert [r[0] for r in rows[1:]] == ["0", "1", "2"]
    assert float(rows[1][1]) == 0.0
    assert float(rows[2][1]) > 0.0


def test_ablate_k_requires_nonempty_k_list(tiny_run):
    with pytest.raises(ValueError, match="k_list"):
        cli.ablate_k(scenarios.make_scenario("explore"), [], 5,
                     "/dev/null", pre=object())
