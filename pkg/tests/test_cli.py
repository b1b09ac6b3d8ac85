import csv
import json

import numpy as np
import pytest

from fedicl import cli, core, data
from fedicl.core import Example, RealLabel


def write_config(tmp_path, obj, name="config.json"):
    path = tmp_path / name
    path.write_text(json.dumps(obj))
    return str(path)


def run_cli(tmp_path, mode, config=None, out="out", extra=()):
    args = [mode, "--output", str(tmp_path / out)]
    if config is not None:
        args += ["--config", config]
    args += list(extra)
    return cli.main(args), tmp_path / out


# ---------------------------------------------------------------------------
# theory mode
# ---------------------------------------------------------------------------

def test_theory_matched_moments(tmp_path):
    cfg = write_config(tmp_path, {"theory": {"construction": "matched_moments",
                                             "d": 2, "rounds": 12}})
    code, out = run_cli(tmp_path, "theory", cfg)
    assert code == cli.EXIT_PASS
    report = json.loads((out / "theory_report.json").read_text())
    assert report["pass"] is True
    assert all(abs(r - 0.5) <= 1e-9 for r in report["ratios"])


def test_theory_explicit_instance_fixed_point(tmp_path):
    cfg = write_config(tmp_path, {"theory": {
        "gamma": [[3.0]],
        "clients": [[{"x": [1.0], "y": 1.0}]],
        "server": [[1.0]],
        "rounds": 10}})
    code, out = run_cli(tmp_path, "theory", cfg)
    assert code == cli.EXIT_PASS
    report = json.loads((out / "theory_report.json").read_text())
    assert report["w_star"] == pytest.approx([3 / 17], abs=1e-12)
    assert report["w_limit"] == pytest.approx([1 / 3], abs=1e-12)


def test_theory_synthetic_default_passes(tmp_path):
    cfg = write_config(tmp_path, {"theory": {"d": 2, "num_clients": 2,
                                             "examples_per_client": 50,
                                             "num_queries": 8, "rounds": 15},
                                  "seed": 4})
    code, out = run_cli(tmp_path, "theory", cfg)
    assert code == cli.EXIT_PASS


def test_theory_noncontractive_exit_code_and_report(tmp_path):
    # single example x = sqrt(6) with Gamma = [3]: H = 6*6/9 = 4 >= 2
    x = float(np.sqrt(6.0))
    cfg = write_config(tmp_path, {"theory": {
        "gamma": [[3.0]],
        "clients": [[{"x": [x], "y": 1.0}]],
        "server": [[x]],
        "rounds": 5}})
    code, out = run_cli(tmp_path, "theory", cfg)
    assert code == cli.EXIT_NONCONTRACTIVE
    report = json.loads((out / "theory_report.json").read_text())
    assert report["pass"] is False


def test_malformed_config_exit_code(tmp_path):
    bad = tmp_path / "broken.json"
    bad.write_text("{not json")
    code, out = run_cli(tmp_path, "theory", str(bad))
    assert code == cli.EXIT_CONFIG
    assert not (out / "theory_report.json").exists()


def test_missing_required_key_exit_code(tmp_path):
    cfg = write_config(tmp_path, {"theory": {"clients": [], "rounds": 3}})
    code, _ = run_cli(tmp_path, "theory", cfg)
    assert code == cli.EXIT_CONFIG


# ---------------------------------------------------------------------------
# simulate mode
# ---------------------------------------------------------------------------

SIM_CFG = {"dataset": {"d": 2, "num_clients": 3, "examples_per_client": 4,
                       "num_queries": 3},
           "protocol": {"rounds": 5},
           "backend": {"kind": "lsa"},
           "seed": 13}


def test_simulate_verify_theory(tmp_path):
    cfg = write_config(tmp_path, SIM_CFG)
    code, out = run_cli(tmp_path, "simulate", cfg, extra=["--verify-theory"])
    assert code == cli.EXIT_PASS
    metrics = json.loads((out / "metrics.json").read_text())
    assert metrics["theory_ok"] is True
    assert max(metrics["max_theory_deviation_per_round"]) <= 1e-9
    assert len(core.load_traces(out / "traces.jsonl")) == 5
    assert (out / "ledger.csv").exists()


def test_simulate_gt_variant_single_round(tmp_path):
    cfg = dict(SIM_CFG)
    cfg["protocol"] = {"rounds": 6, "variant": "fedicl_gt"}
    code, out = run_cli(tmp_path, "simulate", write_config(tmp_path, cfg))
    assert code == cli.EXIT_PASS
    assert len(core.load_traces(out / "traces.jsonl")) == 1


def test_simulate_same_seed_byte_identical(tmp_path):
    cfg = write_config(tmp_path, SIM_CFG)
    run_cli(tmp_path, "simulate", cfg, out="a")
    run_cli(tmp_path, "simulate", cfg, out="b")
    assert (tmp_path / "a/traces.jsonl").read_bytes() == \
        (tmp_path / "b/traces.jsonl").read_bytes()
    assert (tmp_path / "a/ledger.csv").read_bytes() == \
        (tmp_path / "b/ledger.csv").read_bytes()


def test_simulate_seed_flag_overrides_config(tmp_path):
    cfg = write_config(tmp_path, SIM_CFG)
    run_cli(tmp_path, "simulate", cfg, out="a")
    run_cli(tmp_path, "simulate", cfg, out="c", extra=["--seed", "99"])
    assert (tmp_path / "a/traces.jsonl").read_bytes() != \
        (tmp_path / "c/traces.jsonl").read_bytes()


def test_simulate_from_dataset_files(tmp_path):
    rng = np.random.default_rng(17)
    paths = []
    for cid in (1, 2):
        examples = [Example(tuple(x), RealLabel(float(x.sum())))
                    for x in rng.standard_normal((4, 2))]
        p = tmp_path / f"client_{cid}.jsonl"
        data.save_dataset(examples, p)
        paths.append(str(p))
    queries = [Example(tuple(x), RealLabel(0.0))
               for x in rng.standard_normal((3, 2))]
    qpath = tmp_path / "queries.jsonl"
    data.save_dataset(queries, qpath)
    cfg = write_config(tmp_path, {
        "dataset": {"client_paths": paths, "query_path": str(qpath),
                    "d": 2},
        "protocol": {"rounds": 3},
        "backend": {"kind": "lsa"}})
    # file-backed datasets carry no Gamma, so the lsa backend is unavailable
    code, _ = run_cli(tmp_path, "simulate", cfg)
    assert code == cli.EXIT_CONFIG


def test_simulate_verify_theory_needs_synthetic_setup(tmp_path):
    p = tmp_path / "c.jsonl"
    data.save_dataset([Example((1.0,), RealLabel(1.0))], p)
    q = tmp_path / "q.jsonl"
    data.save_dataset([Example((1.0,), RealLabel(0.0))], q)
    cfg = write_config(tmp_path, {
        "dataset": {"client_paths": [str(p)], "query_path": str(q)},
        "backend": {"kind": "remote", "endpoint": "http://unused"}})
    code, _ = run_cli(tmp_path, "simulate", cfg, extra=["--verify-theory"])
    assert code == cli.EXIT_CONFIG


def test_simulate_unknown_backend_kind(tmp_path):
    cfg = dict(SIM_CFG, backend={"kind": "quantum"})
    code, _ = run_cli(tmp_path, "simulate", write_config(tmp_path, cfg))
    assert code == cli.EXIT_CONFIG


# ---------------------------------------------------------------------------
# partition mode
# ---------------------------------------------------------------------------

def make_corpus_file(tmp_path, n=40):
    rng = np.random.default_rng(5)
    cats = ("algebra", "history")
    examples = [Example((float(i),), RealLabel(0.0),
                        category=cats[int(rng.integers(2))])
                for i in range(n)]
    path = tmp_path / "corpus.jsonl"
    data.save_dataset(examples, path)
    return str(path), examples


def test_partition_outputs_and_manifest(tmp_path):
    corpus_path, examples = make_corpus_file(tmp_path)
    cfg = write_config(tmp_path, {"dataset": {"path": corpus_path},
                                  "partition": {"num_clients": 3,
                                                "alpha": 1.0, "seed": 2}})
    code, out = run_cli(tmp_path, "partition", cfg)
    assert code == cli.EXIT_PASS
    manifest = json.loads((out / "manifest.json").read_text())
    assert sorted(int(k) for k in manifest) == list(range(len(examples)))
    loaded = []
    for cid in (1, 2, 3):
        loaded.extend(data.load_dataset(out / f"client_{cid}.jsonl"))
    assert sorted(loaded, key=lambda e: e.covariate) == sorted(
        examples, key=lambda e: e.covariate)


def test_partition_deterministic_across_runs(tmp_path):
    corpus_path, _ = make_corpus_file(tmp_path)
    cfg = write_config(tmp_path, {"dataset": {"path": corpus_path},
                                  "partition": {"num_clients": 2,
                                                "alpha": 0.5, "seed": 7}})
    run_cli(tmp_path, "partition", cfg, out="p1")
    run_cli(tmp_path, "partition", cfg, out="p2")
    assert (tmp_path / "p1/manifest.json").read_bytes() == \
        (tmp_path / "p2/manifest.json").read_bytes()


# ---------------------------------------------------------------------------
# report mode
# ---------------------------------------------------------------------------

def test_report_rows_and_deviation_column(tmp_path):
    cfg = write_config(tmp_path, SIM_CFG)
    code, out = run_cli(tmp_path, "simulate", cfg, extra=["--verify-theory"])
    assert code == cli.EXIT_PASS
    code, rout = run_cli(tmp_path, "report", out="rep",
                         extra=["--traces", str(out / "traces.jsonl")])
    assert code == cli.EXIT_PASS
    with open(rout / "report.csv") as fh:
        rows = list(csv.DictReader(fh))
    assert [int(r["round"]) for r in rows] == [1, 2, 3, 4, 5]
    assert all(float(r["max_theory_deviation"]) <= 1e-9 for r in rows)
    assert all(int(r["num_queries"]) == 3 for r in rows)


def test_report_requires_traces(tmp_path):
    code, _ = run_cli(tmp_path, "report")
    assert code == cli.EXIT_CONFIG
