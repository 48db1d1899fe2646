import csv
import hashlib
import io
from fractions import Fraction

import numpy as np
import pytest

from robusteval import attacks as A
from robusteval import harness as H
from robusteval.cli import main
from robusteval.data import load_data
from robusteval.errors import ConfigError
from robusteval.model import load_model, save_model
from _toys import tiny_model

DATA = "synth:classes=3,per_class=8,d=8,seed=1"


@pytest.fixture
def workdir(tmp_path):
    save_model(tiny_model(3, seed=5), tmp_path / "m.eeem")
    save_model(tiny_model(3, seed=5, sigma=0.0), tmp_path / "det.eeem")
    return tmp_path


def _config(tmp_path, body, model="m.eeem", name="exp.ini"):
    text = f"model = {model}\ndata = {DATA}\nsamples = 10\nruns = 3\nseed = 2\n" + body
    p = tmp_path / name
    p.write_text(text)
    return p


SWEEP = """
[attack clean]
attack = none
[attack pgd]
attack = pgd
preset = plain
steps = 3
[attack apgd]
attack = apgd
preset = plain
steps = 4
[attack best]
attack = best
of = pgd, apgd
"""


# --- config ---------------------------------------------------------------------------

def test_parse_example_config():
    cfg = H.config_parse("""
# Table row set
model = m.eeem
data = cifar/      ; test split
eps = 8/255
classes = 3, 5
[attack pgd]
attack = pgd
preset = tricks
steps = 20
kappa = 0.5
early_stop = yes
[attack both]
attack = best
of = pgd
""", text=True)
    assert cfg.eps == Fraction(8, 255) and cfg.epsilon == 8 / 255
    assert cfg.classes == [3, 5] and cfg.samples == 100 and cfg.runs == 10
    pgd, both = cfg.attacks
    assert (pgd.attack, pgd.preset, pgd.overrides) == ("pgd", "tricks", {"steps": 20, "kappa": 0.5, "early_stop": True})
    assert both.of == ["pgd"]


@pytest.mark.parametrize("text, line, word", [
    ("model = a\ndata = b\nepsilon = 0.1\n", 3, "epsilon"),
    ("model = a\ndata = b\n[attack x]\nattack = pgd\nstepz = 3\n", 5, "stepz"),
    ("data = b\nseed = 1\n", 2, "model"),
    ("model = a\ndata = b\nmodel = c\n", 3, "duplicate"),
    ("model = a\ndata = b\neps = 9/4\n", 3, "eps"),
    ("model = a\ndata = b\n[attack x]\nattack = best\nof = y\n", 3, "'y'"),
    ("model = a\ndata = b\n[attack x]\npreset = wild\n", 3, "wild"),
    ("model = a\ndata = b\n[defense x]\n", 3, "section"),
    ("model = a\ndata = b\njunk\n", 3, "key = value"),
])
def test_config_errors_name_the_line(text, line, word):
    with pytest.raises(H.ConfigParseError) as exc:
        H.config_parse(text, text=True)
    assert isinstance(exc.value, ConfigError)
    assert exc.value.line == line and f"line {line}:" in str(exc.value) and word in str(exc.value)


def test_sample_selection_is_seeded_and_sorted():
    ds = load_data(DATA)
    a, b = H.select_samples(ds, 10, 3), H.select_samples(ds, 10, 3)
    np.testing.assert_array_equal(a.images, b.images)
    assert len(a) == 10 and len(H.select_samples(ds, 1000, 3)) == len(ds)
    assert len(set(a.labels.tolist())) > 1


# --- experiments ----------------------------------------------------------------------

def test_report_schema_and_rows(workdir):
    res = H.run_experiment(_config(workdir, SWEEP), out_dir=workdir / "run")
    rows = list(csv.DictReader(io.StringIO(res.csv())))
    assert list(rows[0]) == H.COLUMNS
    assert [r["attack"] for r in rows] == ["clean", "pgd", "apgd", "best"]
    assert all(r["eps"] == "8/255" and r["n_samples"] == "10" and r["verified"] == "true" for r in rows)
    for name in ("clean", "pgd", "apgd", "best"):
        assert (workdir / "run" / f"{name}.advx").exists() and (workdir / "run" / f"{name}.bounds.csv").exists()
    assert (workdir / "run" / "results.csv").read_text() == res.csv()
    assert (workdir / "run" / "config.ini").exists()


def test_none_row_equals_clean_accuracy(workdir):
    # frozen mode makes the per-image verifier and the batched evaluator see identical draws
    res = H.run_experiment(_config(workdir, "mode = frozen\n[attack clean]\nattack = none\n"), out_dir=workdir / "run")
    ds = H.select_samples(load_data(DATA), 10, 2)
    m = load_model(workdir / "m.eeem")
    ref = A.evaluate_robust(m, A.AdvBatch(ds.images, ds.images, ds.labels, 8 / 255), runs=3, seed=2, mode="frozen")
    assert res.rows[0].mean == ref.mean and res.rows[0].std == ref.std


def test_best_row_is_at_most_each_component(workdir):
    res = H.run_experiment(_config(workdir, SWEEP, model="det.eeem"), out_dir=workdir / "run")
    by = {r.attack: r.mean for r in res.rows}
    assert by["best"] <= min(by["pgd"], by["apgd"])


def test_bound_failure_makes_the_row_invalid(workdir):
    def inflate(name, batch):
        if name == "pgd":
            batch.adversarials = np.clip(batch.originals + 2 * batch.epsilon, 0, 1)
        return batch

    res = H.run_experiment(_config(workdir, SWEEP), out_dir=workdir / "run", attack_hook=inflate)
    rows = {r.attack: r for r in res.rows}
    assert not rows["pgd"].verified and rows["pgd"].mean is None
    assert rows["apgd"].verified and rows["clean"].verified
    line = [ln for ln in res.csv().splitlines() if ln.startswith("pgd,")][0]
    assert line == "pgd,INVALID,INVALID,10,8/255,false"
    assert "INVALID" in res.table()


def test_reports_are_byte_identical_across_runs(workdir):
    cfg = _config(workdir, SWEEP)
    a = H.run_experiment(cfg, out_dir=workdir / "a")
    b = H.run_experiment(cfg, out_dir=workdir / "b")
    assert (workdir / "a" / "results.csv").read_bytes() == (workdir / "b" / "results.csv").read_bytes()
    assert (workdir / "a" / "manifest.sha256").read_bytes() == (workdir / "b" / "manifest.sha256").read_bytes()
    assert a.csv() == b.csv()


def test_manifest_lists_every_artifact(workdir):
    H.run_experiment(_config(workdir, "[attack pgd]\nsteps = 2\n"), out_dir=workdir / "run")
    run = workdir / "run"
    entries = dict(line.split("  ")[::-1] for line in (run / "manifest.sha256").read_text().splitlines())
    assert set(entries) == {"config.ini", "pgd.advx", "pgd.bounds.csv", "results.csv", "results.txt"}
    for name, digest in entries.items():
        assert hashlib.sha256((run / name).read_bytes()).hexdigest() == digest


def test_seed_environment_override(workdir, monkeypatch):
    cfg = _config(workdir, "[attack pgd]\nsteps = 2\n")
    monkeypatch.setenv(H.SEED_ENV, "11")
    res = H.run_experiment(cfg, out_dir=workdir / "env")
    assert res.seed == 11
    monkeypatch.delenv(H.SEED_ENV)
    assert H.effective_seed(4) == 4


# --- CLI ------------------------------------------------------------------------------

def test_cli_end_to_end(workdir, capsys):
    w = str(workdir)
    assert main(["train", "--data", "synth:classes=2,per_class=10,d=8", "--out", f"{w}/t.eeem",
                 "--epochs", "1", "--widths", "4,5,6", "--metrics", f"{w}/metrics.csv"]) == 0
    assert (workdir / "metrics.csv").read_text().startswith("epoch,")
    assert main(["attack", "--model", f"{w}/m.eeem", "--data", DATA, "--samples", "4", "--steps", "2",
                 "--runs", "2", "--out", f"{w}/b.advx"]) == 0
    assert main(["verify", "--batch", f"{w}/b.advx", "--model", f"{w}/m.eeem", "--data", DATA, "--runs", "2",
                 "--csv", f"{w}/bounds.csv", "--report", f"{w}/report.csv"]) == 0
    assert "bounds PASS" in capsys.readouterr().out
    assert main(["landscape", "--model", f"{w}/m.eeem", "--data", DATA, "--n", "3", "--attack-steps", "2",
                 "--mode", "frozen", "--out", f"{w}/grid.csv"]) == 0
    assert (workdir / "grid.csv").read_text().startswith("alpha,")
    assert main(["unittest", "--model", f"{w}/m.eeem", "--data", DATA, "--samples", "2", "--steps", "20"]) == 0
    assert "unit test pass rate" in capsys.readouterr().out
    assert main(["experiment", str(_config(workdir, "[attack pgd]\nsteps = 2\n")), "--out", f"{w}/run"]) == 0


def test_cli_exit_codes(workdir, capsys):
    w = str(workdir)
    batch = A.AdvBatch(np.full((1, 8, 8, 3), 0.5), np.full((1, 8, 8, 3), 0.6), [0], 8 / 255)
    A.save_advbatch(batch, workdir / "bad.advx")
    assert main(["verify", "--batch", f"{w}/bad.advx"]) == 2
    assert main(["experiment", str(workdir / "missing.ini")]) == 1
    bad = workdir / "bad.ini"
    bad.write_text("model = m.eeem\ndata = x\nwhat = 1\n")
    assert main(["experiment", str(bad)]) == 1
    assert "line 3" in capsys.readouterr().err
