import json

import numpy as np
import pytest

from sparselab import checkpoint, cli, harness
from sparselab.config import parse_config
from sparselab.lifecycle import RunRecord

TINY = """\
name = tiny
technique = {tech}
target_sparsity = {target}
task = copy
run_steps = 30
seeds = {seeds}
vocab_size = 12
d_model = 16
n_heads = 2
n_layers = 1
d_ff = 32
max_seq_len = 8
seq_len = 5
batch_size = 8
n_evals = 3
eval_batches = 1
eval_batch_size = 16
"""


def tiny(tech="MP", target=0.5, seeds="1,2"):
    return TINY.format(tech=tech, target=target, seeds=seeds)


def rec(tech, s, seed, acc, loss):
    return RunRecord(f"{tech}-{seed}", tech, seed, 0, s, "fixed-mask", "early", "none", 0.0,
                     test_accuracy=acc, test_loss=loss)


# ---------------------------------------------------------------- tables


def test_table_rows_and_columns():
    recs = [rec("SLT", s, 1, 0.5 + s / 10, 1.0 - s) for s in (0.3, 0.1, 0.2)]
    recs += [rec("MP", 0.2, 1, 0.9, 0.1)]
    text = harness.emit_table(harness.aggregate(recs, ["SLT"]))
    lines = text.splitlines()
    assert len(lines) == 2 + 3
    assert [ln.split("|")[1].strip() for ln in lines[2:]] == ["10%", "20%", "30%"]
    assert len({len(ln) for ln in lines}) == 1
    both = harness.emit_table(harness.aggregate(recs, ["MP", "SLT"]))
    header = both.splitlines()[0]
    assert header.index("MP acc%") < header.index("SLT acc%")
    assert "n/a" in both


def test_table_flags_every_tie():
    recs = [rec("A", 0.5, 1, 0.75, 0.2), rec("B", 0.5, 1, 0.75, 0.3), rec("C", 0.5, 1, 0.5, 0.2)]
    row = harness.emit_table(recs).splitlines()[2]
    cells = [c.strip() for c in row.split("|")[3:-1]]
    assert cells == ["75.00*", "0.2000*", "75.00*", "0.3000", "50.00", "0.2000*"]


def test_table_means_over_seeds():
    recs = [rec("A", 0.1, 1, 0.1, 1.0), rec("A", 0.1, 2, 0.2, 3.0)]
    t = harness.aggregate(recs)
    cell = t.rows[0].cells["A"]
    assert abs(cell.accuracy - 0.15) <= 1e-12 and cell.loss == 2.0 and cell.n == 2
    assert t.rows[0].memory is None
    t = harness.aggregate(recs, memory={("A", 0.1): 2048})
    assert "2.0 KiB" in harness.emit_table(t)


# ---------------------------------------------------------------- running


def test_mp_experiment(tmp_path):
    cfg = parse_config(tiny())
    table = harness.run_experiment(cfg, tmp_path / "mp")
    assert [r.sparsity for r in table.rows] == [0.5]
    root = tmp_path / "mp"
    per_seed = []
    for seed in (1, 2):
        d = root / "MP" / f"seed-{seed}"
        recs = json.loads((d / "records.json").read_text())
        assert len(recs) == 1
        per_seed.append(recs[0])
        final = checkpoint.load(d / "r00-final.ckpt")
        for e in final.params.prunable():
            assert abs(np.mean(e.values == 0.0) - 0.5) <= 1 / e.values.size
        mem = json.loads((d / "memory.json").read_text())
        assert mem["final"]["total"] == mem["runs"][0]["total"]
    cell = json.loads((root / "table.json").read_text())["rows"][0]["cells"]["MP"]
    assert abs(cell["accuracy"] - (per_seed[0]["test_accuracy"] + per_seed[1]["test_accuracy"]) / 2) <= 1e-12
    assert abs(cell["loss"] - (per_seed[0]["test_loss"] + per_seed[1]["test_loss"]) / 2) <= 1e-12
    assert harness.verify(root) == []
    assert harness.report(root) == (root / "table.md").read_text()


def test_rerun_is_bitwise_identical(tmp_path):
    cfg = parse_config(tiny("SLT", 0.2, "4"))
    harness.run_experiment(cfg, tmp_path / "a")
    harness.run_experiment(cfg, tmp_path / "b")
    files = sorted(p.relative_to(tmp_path / "a") for p in (tmp_path / "a").rglob("*") if p.is_file())
    assert len(files) > 8
    for f in files:
        assert (tmp_path / "a" / f).read_bytes() == (tmp_path / "b" / f).read_bytes(), f


def test_verify_detects_tampering(tmp_path):
    root = tmp_path / "x"
    harness.run_experiment(parse_config(tiny(seeds="1")), root)
    path = root / "MP" / "seed-1" / "r00-final.ckpt"
    blob = bytearray(path.read_bytes())
    blob[len(blob) // 2] ^= 4
    path.write_bytes(bytes(blob))
    (root / "table.md").write_text("edited\n")
    problems = harness.verify(root)
    assert any("checksum" in p for p in problems)
    assert any("table.md" in p for p in problems)


def test_failure_leaves_marker(tmp_path, monkeypatch):
    def boom(*a, **k):
        raise FloatingPointError("diverged")

    monkeypatch.setattr(harness, "execute_plan", boom)
    with pytest.raises(FloatingPointError):
        harness.run_experiment(parse_config(tiny(seeds="1")), tmp_path / "f")
    assert "diverged" in (tmp_path / "f" / "FAILED").read_text()
    assert (tmp_path / "f" / "config.txt").exists()


# ---------------------------------------------------------------- command line


def test_cli_verbs(tmp_path, monkeypatch, capsys):
    cfg = tmp_path / "exp.cfg"
    cfg.write_text(tiny("SLT", 0.1, "1"))
    monkeypatch.setenv(harness.OUT_ENV, str(tmp_path / "out"))
    assert cli.main(["plan", str(cfg), "--technique", "LT", "--target-sparsity", "0.98"]) == 0
    assert "13 training run(s)" in capsys.readouterr().out
    assert cli.main(["run", str(cfg), "--seed", "5"]) == 0
    root = tmp_path / "out" / "tiny"
    assert (root / "SLT" / "seed-5" / "final.spm").exists()
    out = capsys.readouterr().out
    assert out.startswith((root / "table.md").read_text())
    assert cli.main(["report", str(root)]) == 0
    assert capsys.readouterr().out == (root / "table.md").read_text()
    assert cli.main(["verify", str(root)]) == 0
    assert capsys.readouterr().out.startswith("OK")
    assert cli.main(["plan", str(cfg), "--target-sparsity", "0.93"]) == 2
    assert "not on the sparsity ladder" in capsys.readouterr().err


def test_cli_run_failure_exit_code(tmp_path, monkeypatch):
    cfg = tmp_path / "exp.cfg"
    cfg.write_text(tiny(seeds="1"))
    monkeypatch.setattr(harness, "execute_plan", lambda *a, **k: 1 / 0)
    assert cli.main(["run", str(cfg), "--out", str(tmp_path / "o")]) == 1
    assert (tmp_path / "o" / "FAILED").exists()
