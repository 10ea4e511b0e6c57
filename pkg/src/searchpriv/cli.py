"""Command-line interface.

Every subcommand accepts ``--config FILE`` with ``key = value`` lines (keys
are the long option names, dashes or underscores); explicit flags win over
the file. The default seed comes from ``SEARCHPRIV_SEED`` (else 0).
"""

from __future__ import annotations

import argparse
import csv
import io
import json
import logging
import math
import os
import sys
import tempfile
from concurrent.futures import ProcessPoolExecutor
from pathlib import Path
from typing import Any, Optional

import numpy as np

from . import __version__
from .anonymity import histograms_from_anonymous, k_query_anonymize
from .apps import evaluate_cache, evaluate_substitutions, frequent_queries, synthetic_postings
from .privacy_analysis import (
    check_implication,
    counterexample_A_hat,
    fixture_instance,
    random_instance,
    verify_indistinguishability,
    verify_prob_dp,
)
from .searchlog import (
    ItemKind,
    SearchLog,
    build_histogram,
    generate_synthetic,
    ingest_tsv,
    log_summary,
)
from .utility import DistanceMetric, count_distance, top_j_coverage
from .zealous import (
    plan_from_parameters,
    plan_indistinguishable,
    plan_probabilistic,
    sanitize,
    sweep_tau,
)

logger = logging.getLogger("searchpriv")

DEFAULT_DELTA = 0.001
SEED_ENV = "SEARCHPRIV_SEED"

EVAL_FIELDS = ["kind", "algorithm", "m", "epsilon", "k", "j", "metric", "value"]
APP_FIELDS = ["algorithm", "parameter", "m", "j", "metric", "value"]


# --------------------------------------------------------------------------
# helpers


def default_seed() -> int:
    return int(os.environ.get(SEED_ENV, "0"))


def parse_list(text: str, cast=float) -> list:
    out = []
    for part in str(text).split(","):
        part = part.strip()
        if not part:
            continue
        if ".." in part:
            lo, hi = part.split("..")
            out.extend(cast(v) for v in range(int(lo), int(hi) + 1))
        else:
            out.append(cast(part))
    if not out:
        raise argparse.ArgumentTypeError(f"empty list {text!r}")
    return out


def read_config(path: str) -> dict[str, str]:
    cfg = {}
    for raw in Path(path).read_text(encoding="utf-8").splitlines():
        line = raw.split("#", 1)[0].strip()
        if not line:
            continue
        key, sep, value = line.partition("=")
        if not sep:
            key, _, value = line.partition(" ")
        cfg[key.strip().replace("-", "_")] = value.strip()
    return cfg


def write_atomic(path: Optional[str], text: str) -> None:
    if path is None or path == "-":
        sys.stdout.write(text)
        return
    target = Path(path)
    target.parent.mkdir(parents=True, exist_ok=True)
    fd, tmp = tempfile.mkstemp(dir=target.parent, prefix=f".{target.name}.")
    with os.fdopen(fd, "w", encoding="utf-8") as fh:
        fh.write(text)
    os.replace(tmp, target)


def csv_text(fields: list[str], rows: list[dict], config: dict) -> str:
    buf = io.StringIO()
    buf.write("# config: " + json.dumps(config, sort_keys=True) + "\n")
    w = csv.DictWriter(buf, fieldnames=fields, lineterminator="\n", extrasaction="ignore")
    w.writeheader()
    for row in rows:
        w.writerow({k: _fmt(row.get(k)) for k in fields})
    return buf.getvalue()


def _fmt(v):
    if v is None:
        return ""
    if isinstance(v, float):
        return "nan" if math.isnan(v) else repr(v)
    return v


def echo_config(args: argparse.Namespace) -> dict[str, Any]:
    # Output locations and scheduling do not affect results.
    skip = {"func", "config", "out", "csv", "jobs", "verbose"}
    return {k: v for k, v in sorted(vars(args).items()) if k not in skip and not callable(v)}


def load_log(args: argparse.Namespace) -> SearchLog:
    if getattr(args, "input", None):
        return ingest_tsv(args.input, args.format)
    return generate_synthetic(args.users, args.vocab, args.zipf, args.queries_per_user, args.seed)


def add_log_args(p: argparse.ArgumentParser) -> None:
    g = p.add_argument_group("input (a log file, or a synthetic log when omitted)")
    g.add_argument("--input", help="TSV search log")
    g.add_argument("--format", default="auto", choices=["auto", "native", "aol"])
    g.add_argument("--users", type=int, default=2000)
    g.add_argument("--vocab", type=int, default=1000)
    g.add_argument("--zipf", type=float, default=1.0)
    g.add_argument("--queries-per-user", default="poisson:8")


def add_seed(p: argparse.ArgumentParser) -> None:
    p.add_argument("--seed", type=int, default=None, help=f"RNG seed (default ${SEED_ENV} or 0)")


# --------------------------------------------------------------------------
# commands


def cmd_ingest(args) -> int:
    log = ingest_tsv(args.input, args.format)
    summary = log_summary(log)
    summary["config"] = echo_config(args)
    if args.kind:
        hist = build_histogram(log, ItemKind.parse(args.kind))
        text = hist.to_csv() if (args.out or "").endswith(".csv") else hist.to_jsonl()
        write_atomic(args.out, text)
        if args.out and args.out != "-":
            print(json.dumps(summary, indent=2))
    else:
        write_atomic(args.out, json.dumps(summary, indent=2) + "\n")
    return 0


def cmd_generate(args) -> int:
    log = generate_synthetic(args.users, args.vocab, args.zipf, args.queries_per_user, args.seed)
    write_atomic(args.out, log.to_tsv())
    return 0


def _plan_table(plan) -> str:
    rows = [("m", plan.m), ("lambda", plan.lam), ("tau", plan.tau), ("tau'", plan.tau_prime),
            ("U", plan.users), ("epsilon", plan.epsilon), ("delta", plan.delta),
            ("epsilon'", plan.epsilon_prime), ("delta'", plan.delta_prime)]
    return "\n".join(f"{k:>9}  {'-' if v is None else f'{v:.6g}'}" for k, v in rows) + "\n"


def cmd_plan(args) -> int:
    by_params = args.lam is not None or args.tau_prime is not None
    by_budget = args.epsilon is not None
    by_indist = args.epsilon_prime is not None
    if sum([by_params, by_budget, by_indist]) != 1:
        raise SystemExit("plan: give exactly one of --epsilon/--delta, --lambda/--tau-prime, "
                         "or --epsilon-prime/--delta-prime")
    if args.sweep_tau and not by_budget:
        raise SystemExit("plan: --sweep-tau needs --epsilon")
    if by_params and (args.lam is None or args.tau_prime is None):
        raise SystemExit("plan: --lambda and --tau-prime go together")

    out: dict[str, Any] = {"config": echo_config(args)}
    if by_budget:
        if args.users is None:
            raise SystemExit("plan: --users is required with --epsilon")
        plan = plan_probabilistic(args.epsilon, args.delta, args.m, args.users, args.tau)
        if args.sweep_tau:
            rows = sweep_tau(args.epsilon, args.delta, args.m, args.users, args.sweep_tau)
            best = min(rows, key=lambda r: r[1])
            sys.stdout.write("   tau        tau'\n")
            for t, tp in rows:
                mark = "  <- min" if (t, tp) == best else ""
                sys.stdout.write(f"{t:6g}  {tp:10.4f}{mark}\n")
            out["sweep"] = [{"tau": t, "tau_prime": tp} for t, tp in rows]
            out["argmin_tau"] = best[0]
    elif by_params:
        plan = plan_from_parameters(args.m, args.lam, args.tau if args.tau is not None else 1.0,
                                    args.tau_prime, args.users)
    else:
        dp = args.delta_prime if args.delta_prime is not None else args.delta
        plan = plan_indistinguishable(args.epsilon_prime, dp, args.m, args.users)
    sys.stdout.write(_plan_table(plan))
    out["plan"] = plan.to_dict()
    text = json.dumps(out, indent=2) + "\n"
    if args.out:
        write_atomic(args.out, text)
    else:
        sys.stdout.write(text)
    return 0


def cmd_sanitize(args) -> int:
    log = load_log(args)
    kind = ItemKind.parse(args.kind)
    plan = plan_probabilistic(args.epsilon, args.delta, args.m, log.user_count, args.tau)
    result = sanitize(log, kind, plan, args.seed)
    write_atomic(args.out, result.to_json(config=echo_config(args)))
    if args.csv:
        write_atomic(args.csv, "# config: " + json.dumps(echo_config(args), sort_keys=True) + "\n"
                     + result.to_csv())
    return 0


def cmd_anonymize(args) -> int:
    log = load_log(args)
    anon = k_query_anonymize(log, args.k, args.seed)
    write_atomic(args.out, anon.log.to_tsv())
    return 0


def cmd_verify(args) -> int:
    reports = []
    fixture = fixture_instance()
    reports.append(("fixture", verify_prob_dp(fixture, args.samples, args.seed)))
    reports.append(("fixture", verify_indistinguishability(fixture)))
    reports.append(("fixture", check_implication(fixture, min(args.samples, 2000), args.seed)))
    rng = np.random.default_rng([args.seed, 9])
    for i in range(args.instances):
        inst = random_instance(rng)
        reports.append((f"random-{i}", verify_prob_dp(inst, args.samples, args.seed + i)))
        reports.append((f"random-{i}", check_implication(inst, min(args.samples, 2000), args.seed + i)))
    _, a_hat = counterexample_A_hat(list(range(args.a_hat_domain)), [0], args.seed)
    ok = all(r.passed is not False for _, r in reports) and a_hat.indistinguishable
    payload = {
        "config": echo_config(args),
        "passed": ok,
        "checks": [{"instance": name, **r.to_dict()} for name, r in reports],
        "a_hat": {
            "domain_size": a_hat.domain_size, "delta_prime": a_hat.delta_prime,
            "max_event_gap": {str(k): v for k, v in a_hat.max_event_gap.items()},
            "indistinguishable": a_hat.indistinguishable,
            "breach": [a_hat.breach_prob_s, a_hat.breach_prob_neighbor],
        },
    }
    write_atomic(args.out, json.dumps(payload, indent=2, default=str) + "\n")
    for name, r in reports:
        logger.info("%-10s %-22s %s", name, r.check, r.status)
    return 0 if ok else 1


# --------------------------------------------------------------------------
# sweeps


_WORKER_LOG: Optional[SearchLog] = None


def _init_worker(log: SearchLog) -> None:
    global _WORKER_LOG
    _WORKER_LOG = log


def _zealous_point(task) -> tuple:
    kind, epsilon, m, delta, seed = task
    log = _WORKER_LOG
    plan = plan_probabilistic(epsilon, delta, m, log.user_count)
    return task, sanitize(log, kind, plan, seed).entries


def _run_zealous(log: SearchLog, tasks: list, jobs: int) -> dict:
    if jobs > 1:
        with ProcessPoolExecutor(jobs, initializer=_init_worker, initargs=(log,)) as ex:
            return dict(ex.map(_zealous_point, tasks))
    _init_worker(log)
    return dict(map(_zealous_point, tasks))


def eval_rows(log: SearchLog, kinds, epsilons, ms, ks, js, delta, seed, jobs=1) -> list[dict]:
    """Distance, coverage and size statistics for every sweep point."""
    rows = []
    truths = {kind: build_histogram(log, kind) for kind in kinds}

    def emit(kind, algorithm, m, eps, k, published):
        truth = truths[kind]
        base = {"kind": kind.value, "algorithm": algorithm, "m": m, "epsilon": eps, "k": k}
        rows.append({**base, "j": None, "metric": "distinct_items", "value": len(published)})
        rows.append({**base, "j": None, "metric": "total_items", "value": math.fsum(published.values())})
        if truth.counts:
            rows.append({**base, "j": None, "metric": "avg_count_diff",
                         "value": count_distance(truth, published, DistanceMetric.AVG_COUNT_DIFF)})
        for j in js:
            if not truth.counts:
                continue
            rows.append({**base, "j": j, "metric": "avg_l1",
                         "value": count_distance(truth, published, DistanceMetric.AVG_L1, j)})
            rows.append({**base, "j": j, "metric": "kl",
                         "value": count_distance(truth, published, DistanceMetric.KL, j)})
            rows.append({**base, "j": j, "metric": "coverage",
                         "value": top_j_coverage(truth, published, j)})

    for kind in kinds:
        emit(kind, "original", None, None, None, truths[kind].counts)
    tasks = [(kind, eps, m, delta, seed) for kind in kinds for m in ms for eps in epsilons]
    results = _run_zealous(log, tasks, jobs)
    for task in tasks:
        kind, eps, m, _, _ = task
        emit(kind, "zealous", m, eps, None, results[task])
    for k in ks:
        anon = k_query_anonymize(log, k, seed)
        for kind in kinds:
            if kind is not ItemKind.CLICK:
                emit(kind, "k_anonymity", None, None, k, histograms_from_anonymous(anon, kind).counts)
    return rows


def cmd_eval(args) -> int:
    log = load_log(args)
    kinds = [ItemKind.parse(k) for k in args.kinds.split(",")]
    rows = eval_rows(log, kinds, args.epsilons, args.ms, args.ks, args.js, args.delta,
                     args.seed, args.jobs)
    write_atomic(args.out, csv_text(EVAL_FIELDS, rows, echo_config(args)))
    return 0


def cache_rows(log: SearchLog, epsilons, ms, ks, delta, seed, budget, corpus_size) -> list[dict]:
    truth = build_histogram(log, ItemKind.KEYWORD)
    postings = synthetic_postings(truth.counts, corpus_size=corpus_size, seed=seed,
                                  memory_budget=budget)
    rows = [{"algorithm": "original", "parameter": None, "metric": "hit_probability",
             "value": evaluate_cache(truth, truth, postings)}]
    for m in ms:
        for eps in epsilons:
            plan = plan_probabilistic(eps, delta, m, log.user_count)
            published = sanitize(log, ItemKind.KEYWORD, plan, seed)
            rows.append({"algorithm": "zealous", "parameter": eps, "m": m, "metric": "hit_probability",
                         "value": evaluate_cache(truth, published, postings)})
    for k in ks:
        anon = histograms_from_anonymous(k_query_anonymize(log, k, seed), ItemKind.KEYWORD)
        rows.append({"algorithm": "k_anonymity", "parameter": k, "metric": "hit_probability",
                     "value": evaluate_cache(truth, anon, postings)})
    return rows


def cmd_cache_app(args) -> int:
    log = load_log(args)
    rows = cache_rows(log, args.epsilons, args.ms, args.ks, args.delta, args.seed,
                      args.budget_bytes, args.corpus_size)
    write_atomic(args.out, csv_text(APP_FIELDS, rows, echo_config(args)))
    return 0


def subst_rows(log: SearchLog, epsilons, ms, ks, js, delta, seed, n_queries) -> list[dict]:
    truth = build_histogram(log, ItemKind.QUERY_PAIR)
    queries = frequent_queries(build_histogram(log, ItemKind.QUERY), n_queries)
    rows = []

    def emit(algorithm, parameter, m, published):
        for j in js:
            rep = evaluate_substitutions(truth, published, queries, j).to_dict()
            for metric in ("precision", "recall", "map", "ndcg", "coverage"):
                rows.append({"algorithm": algorithm, "parameter": parameter, "m": m, "j": j,
                             "metric": metric, "value": rep[metric]})

    emit("original", None, None, truth)
    for m in ms:
        for eps in epsilons:
            plan = plan_probabilistic(eps, delta, m, log.user_count)
            emit("zealous", eps, m, sanitize(log, ItemKind.QUERY_PAIR, plan, seed))
    for k in ks:
        anon = k_query_anonymize(log, k, seed)
        emit("k_anonymity", k, None, histograms_from_anonymous(anon, ItemKind.QUERY_PAIR))
    return rows


def cmd_subst_app(args) -> int:
    log = load_log(args)
    rows = subst_rows(log, args.epsilons, args.ms, args.ks, args.js, args.delta, args.seed,
                      args.n_queries)
    write_atomic(args.out, csv_text(APP_FIELDS, rows, echo_config(args)))
    return 0


# --------------------------------------------------------------------------
# parser


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="searchpriv", description=__doc__.splitlines()[0])
    parser.add_argument("--version", action="version", version=__version__)
    parser.add_argument("-v", "--verbose", action="store_true")
    sub = parser.add_subparsers(dest="command", required=True)

    def command(name, func, help_text):
        p = sub.add_parser(name, help=help_text)
        p.add_argument("--config", help="key = value file; flags override it")
        p.set_defaults(func=func)
        return p

    p = command("ingest", cmd_ingest, "parse a log and print statistics or a histogram")
    p.add_argument("--input", required=True)
    p.add_argument("--format", default="auto", choices=["auto", "native", "aol"])
    p.add_argument("--kind", help="write this histogram (JSON lines, or CSV for *.csv)")
    p.add_argument("--out")

    p = command("generate", cmd_generate, "write a synthetic Zipf log as TSV")
    p.add_argument("--users", type=int, default=2000)
    p.add_argument("--vocab", type=int, default=1000)
    p.add_argument("--zipf", type=float, default=1.0)
    p.add_argument("--queries-per-user", default="poisson:8")
    add_seed(p)
    p.add_argument("--out")

    p = command("plan", cmd_plan, "compute sanitizer parameters and guarantees")
    p.add_argument("--epsilon", type=float)
    p.add_argument("--delta", type=float, default=DEFAULT_DELTA)
    p.add_argument("--epsilon-prime", type=float)
    p.add_argument("--delta-prime", type=float)
    p.add_argument("--lambda", dest="lam", type=float)
    p.add_argument("--tau-prime", type=float)
    p.add_argument("--tau", type=float)
    p.add_argument("--m", type=int, default=1)
    p.add_argument("--users", type=int)
    p.add_argument("--sweep-tau", type=lambda s: parse_list(s, int))
    p.add_argument("--out")

    p = command("sanitize", cmd_sanitize, "publish a sanitized histogram")
    add_log_args(p)
    p.add_argument("--kind", default="keyword")
    p.add_argument("--epsilon", type=float, required=True)
    p.add_argument("--delta", type=float, default=DEFAULT_DELTA)
    p.add_argument("--m", type=int, default=1)
    p.add_argument("--tau", type=float)
    add_seed(p)
    p.add_argument("--out")
    p.add_argument("--csv")

    p = command("anonymize", cmd_anonymize, "k-query anonymize a log")
    add_log_args(p)
    p.add_argument("--k", type=int, required=True)
    add_seed(p)
    p.add_argument("--out")

    p = command("verify", cmd_verify, "run the exact privacy checks")
    p.add_argument("--instances", type=int, default=20)
    p.add_argument("--samples", type=int, default=10_000)
    p.add_argument("--a-hat-domain", type=int, default=11)
    add_seed(p)
    p.add_argument("--out")

    sweep_defaults = {"epsilons": "1,2,5,10", "ms": "1,4,8", "ks": "10,60", "js": "10,100"}

    def add_sweep(p, *names):
        casts = {"epsilons": float, "ms": int, "ks": int, "js": int}
        for name in names:
            p.add_argument(f"--{name}", type=lambda s, c=casts[name]: parse_list(s, c),
                           default=parse_list(sweep_defaults[name], casts[name]))
        p.add_argument("--delta", type=float, default=DEFAULT_DELTA)

    p = command("eval", cmd_eval, "histogram statistics over a parameter sweep")
    add_log_args(p)
    p.add_argument("--kinds", default="keyword,query,click,query_pair")
    add_sweep(p, "epsilons", "ms", "ks", "js")
    p.add_argument("--jobs", type=int, default=1)
    add_seed(p)
    p.add_argument("--out")

    p = command("cache-app", cmd_cache_app, "index caching hit probabilities")
    add_log_args(p)
    add_sweep(p, "epsilons", "ms", "ks")
    p.add_argument("--budget-bytes", type=int, default=1 << 30)
    p.add_argument("--corpus-size", type=int, default=10_000_000)
    add_seed(p)
    p.add_argument("--out")

    p = command("subst-app", cmd_subst_app, "query substitution quality")
    add_log_args(p)
    add_sweep(p, "epsilons", "ms", "ks")
    p.add_argument("--js", type=lambda s: parse_list(s, int), default=[2, 5])
    p.add_argument("--n-queries", type=int, default=1000)
    add_seed(p)
    p.add_argument("--out")
    return parser


def _apply_config(parser: argparse.ArgumentParser, argv: list[str]) -> argparse.Namespace:
    subparsers = parser._subparsers._group_actions[0].choices
    command = next((a for a in argv if a in subparsers), None)
    path = None
    for i, arg in enumerate(argv):
        if arg == "--config" and i + 1 < len(argv):
            path = argv[i + 1]
        elif arg.startswith("--config="):
            path = arg.split("=", 1)[1]
    if command is None or path is None:
        return parser.parse_args(argv)
    subparser = subparsers[command]
    known = {a.dest: a for a in subparser._actions}
    defaults = {}
    for key, value in read_config(path).items():
        if key not in known or key in ("help", "config"):
            parser.error(f"unknown config key {key!r} for {command}")
        action = known[key]
        defaults[key] = action.type(value) if action.type else value
    subparser.set_defaults(**defaults)
    # Config values may satisfy required options.
    for action in subparser._actions:
        if action.dest in defaults:
            action.required = False
    return parser.parse_args(argv)


def main(argv: Optional[list[str]] = None) -> int:
    parser = build_parser()
    argv = sys.argv[1:] if argv is None else list(argv)
    args = _apply_config(parser, argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(message)s")
    if hasattr(args, "seed") and args.seed is None:
        args.seed = default_seed()
    try:
        return args.func(args)
    except (ValueError, OSError) as exc:
        parser.exit(2, f"searchpriv {args.command}: error: {exc}\n")


if __name__ == "__main__":
    sys.exit(main())
