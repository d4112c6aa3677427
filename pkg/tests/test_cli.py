import json
import subprocess
import sys

import pytest

from rotshield import cli
from rotshield.container import load_model

SMALL = {"dims": [64, 32, 16], "outliers": [[0, 7, 32.0]], "calib_batches": 4, "trials": 40,
         "ber": 1e-3, "n_flips": 3, "top_k": 8, "alphas": [1000.0, 6.0]}


def run(*argv):
    return cli.main([str(a) for a in argv])


@pytest.fixture
def workdir(tmp_path):
    cfg = tmp_path / "cfg.json"
    cfg.write_text(json.dumps(SMALL))
    assert run("build-model", "--config", cfg, "--out", tmp_path / "base.rort") == 0
    assert run("protect", "--config", cfg, "--model", tmp_path / "base.rort", "--out", tmp_path / "prot.rort") == 0
    return tmp_path


def read_jsonl(path):
    return [json.loads(line) for line in path.read_text().splitlines()]


def test_init_config_round_trips(tmp_path):
    assert run("init-config", tmp_path / "c.json") == 0
    assert json.loads((tmp_path / "c.json").read_text())["alpha"] == 6.0


def test_calibrate_then_protect_from_stats(workdir):
    cfg = workdir / "cfg.json"
    assert run("calibrate", "--config", cfg, "--model", workdir / "base.rort", "--out", workdir / "s.json") == 0
    stats = json.loads((workdir / "s.json").read_text())
    assert stats["layers"]["0"]["outliers"] == [7]
    assert run("protect", "--config", cfg, "--model", workdir / "base.rort", "--stats", workdir / "s.json",
               "--out", workdir / "p2.rort") == 0
    assert (workdir / "p2.rort").read_bytes() == (workdir / "prot.rort").read_bytes()
    assert run("calibrate", "--config", cfg, "--model", workdir / "prot.rort", "--out", workdir / "x.json") == 1


def test_protect_rejects_mismatched_stats(workdir):
    bad = workdir / "bad.json"
    bad.write_text(json.dumps({"layers": {"0": {"peaks": [1.0] * 5, "mean": 1, "stddev": 0, "alpha": 6,
                                                "tau": 1, "outliers": []}}}))
    assert run("protect", "--model", workdir / "base.rort", "--stats", bad, "--out", workdir / "p.rort") == 1


def test_verify_passes_and_reports(workdir):
    out = workdir / "v.json"
    assert run("verify", "--config", workdir / "cfg.json", "--model", workdir / "base.rort",
               "--protected", workdir / "prot.rort", "--out", out) == 0
    doc = json.loads(out.read_text())
    assert doc["passed"] and doc["layers"][0]["reflectors"] == 1


def test_verify_identity_protection_has_zero_deviation(workdir):
    cfg = workdir / "cfg.json"
    assert run("protect", "--config", cfg, "--alpha", "1e6", "--model", workdir / "base.rort",
               "--out", workdir / "id.rort") == 0
    out = workdir / "v.json"
    assert run("verify", "--config", cfg, "--model", workdir / "base.rort", "--protected", workdir / "id.rort",
               "--out", out) == 0
    doc = json.loads(out.read_text())
    assert doc["passed"] and doc["model_deviation"] == 0.0
    assert all(layer["deviation"] == 0.0 for layer in doc["layers"])


def test_verify_full_precision_model(tmp_path):
    cfg = tmp_path / "cfg.json"
    cfg.write_text(json.dumps(SMALL | {"dtype": "f64", "requantize": False}))
    run("build-model", "--config", cfg, "--out", tmp_path / "b.rort")
    run("protect", "--config", cfg, "--model", tmp_path / "b.rort", "--out", tmp_path / "p.rort")
    assert run("verify", "--config", cfg, "--model", tmp_path / "b.rort", "--protected", tmp_path / "p.rort",
               "--out", tmp_path / "v.json") == 0
    assert json.loads((tmp_path / "v.json").read_text())["model_deviation"] <= 1e-9


def test_verify_fails_with_tiny_tolerance(workdir):
    assert run("verify", "--model", workdir / "base.rort", "--protected", workdir / "prot.rort",
               "--tol", "1e-15") == 1


def test_verify_rejects_dim_mismatch(workdir, tmp_path):
    cfg = tmp_path / "other.json"
    cfg.write_text(json.dumps(SMALL | {"dims": [64, 16, 16]}))
    run("build-model", "--config", cfg, "--out", tmp_path / "o.rort")
    assert run("verify", "--model", workdir / "base.rort", "--protected", tmp_path / "o.rort") == 1


def test_attack_random_appends_and_resumes(workdir):
    cfg, out = workdir / "cfg.json", workdir / "r.jsonl"
    assert run("attack", "random", "--config", cfg, "--model", workdir / "base.rort", "--out", out,
               "--trials", 3) == 0
    assert run("attack", "random", "--config", cfg, "--model", workdir / "base.rort", "--out", out,
               "--trials", 5) == 0
    resumed = read_jsonl(out)
    full = workdir / "full.jsonl"
    run("attack", "random", "--config", cfg, "--model", workdir / "base.rort", "--out", full, "--trials", 5)
    assert resumed == read_jsonl(full)
    assert [r["trial"] for r in resumed] == [0, 1, 2, 3, 4]


def test_attack_greedy(workdir):
    out = workdir / "g.jsonl"
    assert run("attack", "greedy", "--config", workdir / "cfg.json", "--model", workdir / "base.rort",
               "--out", out) == 0
    (rec,) = read_jsonl(out)
    assert rec["kind"] == "greedy" and len(rec["trace"]) == 4


def test_attack_spfa_finds_planted_row(workdir):
    out = workdir / "s.jsonl"
    assert run("attack", "spfa", "--config", workdir / "cfg.json", "--trials", 400, "--model",
               workdir / "base.rort", "--protected", workdir / "prot.rort", "--out", out) == 0
    *skipped, located, column = read_jsonl(out)
    assert all(r["located"] is None and not r["isolable"] for r in skipped)
    loc = located["flips"][0]
    assert located["kind"] == "spfa_locate" and located["failed"]
    assert (loc["layer_id"], loc["row"]) == (0, 7)
    assert column["kind"] == "spfa_column" and column["hamming_cost"] > 1
    assert column["extra"]["row"] == 7 and column["extra"]["col"] == loc["col"]


def test_evaluate_zero_ber(workdir):
    out = workdir / "ev"
    assert run("evaluate", "--config", workdir / "cfg.json", "--ber", 0, "--trials", 5, "--model",
               workdir / "base.rort", "--protected", workdir / "prot.rort", "--out-dir", out) == 0
    report = json.loads((out / "report.json").read_text())
    assert report["baseline"]["fail_rate"] == 0 and report["protected"]["fail_rate"] == 0
    header = (out / "baseline_trials.csv").read_text().splitlines()[0]
    assert header == "trial,seed,n_flips,metric_before,metric_after,failed"


def test_evaluate_is_byte_identical_across_reruns_and_workers(workdir):
    args = ["evaluate", "--config", workdir / "cfg.json", "--trials", 12, "--model", workdir / "base.rort",
            "--protected", workdir / "prot.rort"]
    run(*args, "--out-dir", workdir / "a")
    run(*args, "--out-dir", workdir / "a2")
    run(*args, "--workers", 2, "--out-dir", workdir / "b")
    for name in ("report.json", "baseline_trials.csv", "protected_trials.csv", "protected_trials.jsonl"):
        data = (workdir / "a" / name).read_bytes()
        assert data == (workdir / "a2" / name).read_bytes() == (workdir / "b" / name).read_bytes()


def test_sweep_alpha_csv(workdir):
    out = workdir / "sw.csv"
    assert run("sweep-alpha", "--config", workdir / "cfg.json", "--model", workdir / "base.rort",
               "--out", out) == 0
    lines = out.read_text().splitlines()
    assert lines[0] == "alpha,reflectors,post_attack_metric,steps_to_failure"
    assert lines[1].startswith("1000.0,0,") and lines[2].startswith("6.0,1,")


def test_build_model_reproducible(tmp_path):
    run("build-model", "--out", tmp_path / "a.rort", "--config", tmp_path / "missing.json")
    for name in ("a", "b"):
        assert run("build-model", "--out", tmp_path / f"{name}.rort") == 0
    assert (tmp_path / "a.rort").read_bytes() == (tmp_path / "b.rort").read_bytes()
    model, meta = load_model(tmp_path / "a.rort")
    assert model.dims == (256, 128, 32) and meta["planted_outliers"] == [[0, 7, 32.0]]


def test_validation_errors_exit_one(tmp_path, capsys):
    assert run("build-model") == 1
    assert run("frobnicate") == 1
    assert run("build-model", "--out", tmp_path / "m.rort", "--bogus-flag") == 1
    assert run("build-model", "--out", tmp_path / "m.rort", "--trials", 0) == 1
    assert "trials:" in capsys.readouterr().err
    cfg = tmp_path / "c.json"
    cfg.write_text(json.dumps({"alpha": "high"}))
    assert run("build-model", "--config", cfg, "--out", tmp_path / "m.rort") == 1
    assert "alpha:" in capsys.readouterr().err
    assert run("verify", "--model", tmp_path / "nope.rort", "--protected", tmp_path / "nope.rort") == 1
    (tmp_path / "junk.rort").write_bytes(b"JUNK")
    (tmp_path / "junk.rort.json").write_text("{}")
    assert run("attack", "random", "--model", tmp_path / "junk.rort", "--out", tmp_path / "o.jsonl") == 1


def test_internal_error_exits_two(monkeypatch, tmp_path):
    def boom(args):
        raise RuntimeError("boom")

    monkeypatch.setitem(cli.COMMANDS, "build-model", boom)
    assert run("build-model", "--out", tmp_path / "m.rort") == 2


def test_module_entry_point(tmp_path):
    ok = subprocess.run([sys.executable, "-m", "rotshield", "init-config", str(tmp_path / "c.json")])
    bad = subprocess.run([sys.executable, "-m", "rotshield", "--nope"], capture_output=True, text=True)
    assert ok.returncode == 0 and bad.returncode == 1 and "error" in bad.stderr
