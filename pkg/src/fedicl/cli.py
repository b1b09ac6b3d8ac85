"""Config-driven entry points.

Four commands share one JSON config file with sections
{dataset, partition, protocol, backend, output}:

    theory     closed-form contraction verification, JSON report
    simulate   full protocol run: traces JSONL, ledger CSV, metrics JSON
    partition  Dirichlet split into per-client JSONL files plus a manifest
    report     per-round metric tables (CSV) from saved traces

Exit codes: 0 pass, 1 verification failure, 2 config error,
3 backend error, 4 non-contractive configuration.
"""

from __future__ import annotations

import argparse
import csv
import json
import os
import sys
from typing import Dict, List, Optional, Sequence

import numpy as np

from . import core, data, lsa, protocol, theory
from .backend import GenerationParams, LsaBackend, RemoteBackend

EXIT_PASS = 0
EXIT_FAIL = 1
EXIT_CONFIG = 2
EXIT_BACKEND = 3
EXIT_NONCONTRACTIVE = 4


class ConfigError(ValueError):
    pass


def load_config(path: str) -> dict:
    try:
        with open(path) as fh:
            return json.load(fh)
    except (OSError, json.JSONDecodeError) as exc:
        raise ConfigError(f"cannot read config {path}: {exc}")


def _substream(seed: int, name: str) -> np.random.Generator:
    # all randomness flows from one root seed split into named substreams;
    # crc32 keeps the split stable across processes
    import zlib
    return np.random.default_rng(np.random.SeedSequence(
        entropy=seed, spawn_key=(zlib.crc32(name.encode()),)))


def _require(cfg: dict, key: str, where: str):
    if key not in cfg:
        raise ConfigError(f"missing {where}.{key}")
    return cfg[key]


# ---------------------------------------------------------------------------
# Synthetic regression instances (theory / LSA simulate modes)
# ---------------------------------------------------------------------------

def synthesize_instance(cfg: dict, seed: int):
    """Sample clients, server queries, and Gamma from config parameters."""
    d = int(cfg.get("d", 2))
    num_clients = int(cfg.get("num_clients", 2))
    n = int(cfg.get("examples_per_client", 5))
    m = int(cfg.get("num_queries", 4))
    t_prompt = int(cfg.get("t_prompt", 10))
    lam = np.array(cfg["lambda"]) if "lambda" in cfg else np.eye(d)
    rng = _substream(seed, "instance")
    gamma_mat = lsa.gamma(lam, t_prompt)
    w_true = rng.standard_normal(d)
    clients = []
    for cid in range(1, num_clients + 1):
        xs = rng.standard_normal((n, d))
        examples = tuple(
            core.Example(covariate=tuple(x), label=core.RealLabel(float(x @ w_true)))
            for x in xs)
        clients.append(core.ClientDataset(client_id=cid, examples=examples))
    queries = tuple(tuple(x) for x in rng.standard_normal((m, d)))
    return clients, queries, gamma_mat


def matched_moment_instance(cfg: dict):
    """Covariates whose empirical second moments equal Gamma exactly,
    which forces H_cont = I and exact per-round error halving."""
    d = int(cfg.get("d", 2))
    t_prompt = int(cfg.get("t_prompt", 2))
    lam = np.array(cfg["lambda"]) if "lambda" in cfg else np.eye(d)
    gamma_mat = lsa.gamma(lam, t_prompt)
    # columns of sqrt(d * Gamma): {+/- v_j} has second moment Gamma
    root = np.linalg.cholesky(gamma_mat * d)
    vecs = [tuple(s * root[:, j]) for j in range(d) for s in (+1.0, -1.0)]
    examples = tuple(core.Example(covariate=v, label=core.RealLabel(float(i + 1)))
                     for i, v in enumerate(vecs))
    clients = [core.ClientDataset(client_id=1, examples=examples)]
    return clients, tuple(vecs), gamma_mat


# ---------------------------------------------------------------------------
# Commands
# ---------------------------------------------------------------------------

def explicit_instance(tcfg: dict):
    """Clients, queries, and Gamma spelled out verbatim in the config."""
    gamma_mat = np.array(_require(tcfg, "gamma", "theory"))
    clients = []
    for cid, rows in enumerate(_require(tcfg, "clients", "theory"), start=1):
        examples = tuple(core.Example(covariate=tuple(r["x"]),
                                      label=core.RealLabel(float(r["y"])))
                         for r in rows)
        clients.append(core.ClientDataset(client_id=cid, examples=examples))
    queries = tuple(tuple(x) for x in _require(tcfg, "server", "theory"))
    return clients, queries, gamma_mat


def cmd_theory(config: dict, output_dir: str, seed: int) -> int:
    tcfg = config.get("theory", {})
    rounds = int(tcfg.get("rounds", 20))
    if tcfg.get("construction") == "matched_moments":
        clients, queries, gamma_mat = matched_moment_instance(tcfg)
    elif "clients" in tcfg:
        clients, queries, gamma_mat = explicit_instance(tcfg)
    else:
        clients, queries, gamma_mat = synthesize_instance(tcfg, seed)
    state = theory.TheoryState.initialize(clients, queries, gamma_mat)
    state = theory.iterate_recursion(state, rounds)
    report = theory.verify_contraction(state)
    os.makedirs(output_dir, exist_ok=True)
    report_path = os.path.join(output_dir, "theory_report.json")
    obj = report.to_json()
    obj["w_star"] = state.w_star.tolist() if state.w_star is not None else None
    obj["w_limit"] = state.w_limit.tolist()
    with open(report_path, "w") as fh:
        json.dump(obj, fh, indent=2)
    if not report.contractive:
        return EXIT_NONCONTRACTIVE
    return EXIT_PASS if report.passed else EXIT_FAIL


def _build_protocol_config(config: dict) -> protocol.ProtocolConfig:
    pcfg = config.get("protocol", {})
    return protocol.ProtocolConfig(
        rounds=int(pcfg.get("rounds", 6)),
        variant=pcfg.get("variant", "fedicl"),
        aggregation=pcfg.get("aggregation", "average"),
        context_count=pcfg.get("context_count"),
        init_mode=pcfg.get("init_mode", "zeros"),
        seed=int(pcfg.get("seed", config.get("seed", 0))),
        options=tuple(pcfg.get("options", ())),
        charge_questions_after_round_one=bool(
            pcfg.get("charge_questions_after_round_one", False)),
    )


def _build_backend(config: dict, gamma_mat: Optional[np.ndarray]):
    bcfg = config.get("backend", {})
    kind = bcfg.get("kind", "lsa")
    params = GenerationParams(
        temperature=float(bcfg.get("temperature", 0.1)),
        max_tokens=int(bcfg.get("max_tokens", 256)),
        context_count=int(bcfg.get("context_count", 5)),
        model_name=bcfg.get("model_name", "gpt-4o-mini"),
        timeout_ms=int(bcfg.get("timeout_ms", 30_000)),
        max_retries=int(bcfg.get("max_retries", 3)),
    )
    if kind == "lsa":
        if gamma_mat is None:
            raise ConfigError("lsa backend needs lambda/t_prompt to derive gamma")
        return LsaBackend(gamma_mat), params
    if kind == "remote":
        endpoint = bcfg.get("endpoint") or os.environ.get("FEDICL_ENDPOINT")
        if not endpoint:
            raise ConfigError("remote backend needs backend.endpoint or "
                              "FEDICL_ENDPOINT")
        return RemoteBackend(endpoint, params=params,
                             template_id=bcfg.get("template", "open_qa")), params
    raise ConfigError(f"unknown backend kind: {kind!r}")


def cmd_simulate(config: dict, output_dir: str, seed: int,
                 verify_theory: bool = False) -> int:
    pconf = _build_protocol_config(config)
    scfg = config.get("dataset", {})
    gamma_mat = None
    if "client_paths" in scfg:
        # pre-partitioned client files (see partition mode) plus a query file
        clients_data = []
        for cid, path in enumerate(scfg["client_paths"], start=1):
            clients_data.append(core.ClientDataset(
                client_id=cid, examples=tuple(data.load_dataset(path))))
        queries = tuple(ex.covariate
                        for ex in data.load_dataset(_require(scfg, "query_path",
                                                             "dataset")))
    else:
        clients_data, queries, gamma_mat = synthesize_instance(scfg, seed)
    backend, gen_params = _build_backend(config, gamma_mat)
    clients = [protocol.ClientState(client_id=ds.client_id, original=ds,
                                    backend=backend) for ds in clients_data]

    theory_trace = None
    state = None
    if verify_theory and gamma_mat is None:
        raise ConfigError("--verify-theory needs the synthetic LSA setup")
    if gamma_mat is not None:
        state = theory.TheoryState.initialize(clients_data, queries, gamma_mat)
        state = theory.iterate_recursion(state, pconf.effective_rounds)
        theory_trace = state.w_trace

    os.makedirs(output_dir, exist_ok=True)
    trace_path = os.path.join(output_dir, "traces.jsonl")
    try:
        result = protocol.run(pconf, clients, queries,
                              gen_params=gen_params,
                              theory_w_trace=theory_trace,
                              trace_path=trace_path)
    except protocol.ProtocolError:
        return EXIT_BACKEND
    result.ledger.export_csv(os.path.join(output_dir, "ledger.csv"))

    metrics: Dict[str, object] = {"rounds": len(result.traces)}
    if verify_theory and state is not None:
        xm = core.covariate_matrix(queries)
        max_dev = []
        for trace in result.traces:
            labels = core.real_values(trace.aggregated.labels)
            w_k1 = state.w_trace[trace.round]
            max_dev.append(float(np.max(np.abs(labels - xm @ w_k1))))
        metrics["max_theory_deviation_per_round"] = max_dev
        metrics["theory_ok"] = bool(max(max_dev) <= 1e-9)
    with open(os.path.join(output_dir, "metrics.json"), "w") as fh:
        json.dump(metrics, fh, indent=2)
    if verify_theory and not metrics.get("theory_ok", True):
        return EXIT_FAIL
    return EXIT_PASS


def cmd_partition(config: dict, output_dir: str, seed: int) -> int:
    pcfg = config.get("partition", {})
    dataset_path = _require(config.get("dataset", {}), "path", "dataset")
    examples = data.load_dataset(dataset_path)
    categories = sorted({ex.category for ex in examples if ex.category})
    prior = pcfg.get("prior")
    if prior is None:
        prior = [1.0 / len(categories)] * len(categories)
    spec = data.PartitionSpec(
        num_clients=int(_require(pcfg, "num_clients", "partition")),
        alpha=float(_require(pcfg, "alpha", "partition")),
        prior=tuple(prior),
        seed=int(pcfg.get("seed", seed)),
    )
    clients, manifest = data.dirichlet_partition(examples, spec, categories)
    os.makedirs(output_dir, exist_ok=True)
    for ds in clients:
        data.save_dataset(ds.examples,
                          os.path.join(output_dir, f"client_{ds.client_id}.jsonl"))
    with open(os.path.join(output_dir, "manifest.json"), "w") as fh:
        json.dump({str(k): v for k, v in sorted(manifest.items())}, fh,
                  indent=2, sort_keys=True)
    return EXIT_PASS


def cmd_report(trace_paths: Sequence[str], output_dir: str) -> int:
    """Summarize one or more trace files into a per-round CSV."""
    os.makedirs(output_dir, exist_ok=True)
    rows: List[dict] = []
    for path in trace_paths:
        traces = core.load_traces(path)
        if not traces:
            raise ConfigError(f"no traces in {path}")
        m = len(traces[0].aggregated)
        for trace in traces:
            if len(trace.aggregated) != m:
                raise ConfigError(f"{path}: trace rounds disagree on query count")
            row = {"source": os.path.basename(path), "round": trace.round,
                   "num_queries": len(trace.aggregated)}
            if trace.theory_w is not None:
                labels = core.real_values(trace.aggregated.labels)
                xm = core.covariate_matrix(trace.aggregated.covariates)
                row["max_theory_deviation"] = float(
                    np.max(np.abs(labels - xm @ np.array(trace.theory_w))))
            rows.append(row)
    fields = ["source", "round", "num_queries", "max_theory_deviation"]
    with open(os.path.join(output_dir, "report.csv"), "w", newline="") as fh:
        writer = csv.DictWriter(fh, fieldnames=fields)
        writer.writeheader()
        for row in rows:
            writer.writerow(row)
    return EXIT_PASS


# ---------------------------------------------------------------------------
# Argument parsing
# ---------------------------------------------------------------------------

def main(argv: Optional[Sequence[str]] = None) -> int:
    parser = argparse.ArgumentParser(
        prog="fedicl",
        description="Federated in-context learning: theory verification, "
                    "simulation, partitioning, reporting.")
    parser.add_argument("mode", choices=["theory", "simulate", "partition",
                                         "report"])
    parser.add_argument("--config", help="path to JSON experiment config")
    parser.add_argument("--seed", type=int, help="override config seed")
    parser.add_argument("--output", default="out", help="output directory")
    parser.add_argument("--verify-theory", action="store_true",
                        help="cross-check simulate labels against the "
                             "closed-form recursion")
    parser.add_argument("--traces", nargs="*", default=[],
                        help="trace files for report mode")
    args = parser.parse_args(argv)

    try:
        config = load_config(args.config) if args.config else {}
        seed = args.seed if args.seed is not None else int(config.get("seed", 0))
        if args.mode == "theory":
            return cmd_theory(config, args.output, seed)
        if args.mode == "simulate":
            return cmd_simulate(config, args.output, seed,
                                verify_theory=args.verify_theory)
        if args.mode == "partition":
            return cmd_partition(config, args.output, seed)
        if args.mode == "report":
            if not args.traces:
                raise ConfigError("report mode needs --traces")
            return cmd_report(args.traces, args.output)
    except ConfigError as exc:
        print(f"config error: {exc}", file=sys.stderr)
        return EXIT_CONFIG
    except (ValueError, KeyError) as exc:
        print(f"config error: {exc}", file=sys.stderr)
        return EXIT_CONFIG
    return EXIT_CONFIG


if __name__ == "__main__":
    sys.exit(main())
