"""Config-driven experiment harness: simulate -> estimate -> train/eval.

One JSON config describes the whole experiment; every verb derives its
randomness from the config's global seed, so a fixed config reproduces its
outputs byte for byte. Outputs carry a manifest with the config hash, and
downstream verbs refuse to mix outputs produced under a different config.
"""

from __future__ import annotations

import argparse
import concurrent.futures
import copy
import csv
import hashlib
import json
import sys
from pathlib import Path
from typing import Optional

import numpy as np

from . import em as em_mod
from . import evaluation, ingest, network, rank, simulate
from .core import Dataset, PropensityParams, derive_rng, derive_seed

DEFAULT_CONFIG = {
    "seed": 7,
    "output_dir": "ultrapair-run",
    "dataset": {
        "source": "synthetic",
        "num_requests": 160,
        "items_per_request": 12,
        "feature_dim": 8,
        "normalize": False,
        "train_path": None,
        "valid_path": None,
        "test_path": None,
    },
    "sim": {
        "num_positions": 10,
        "eta": 1.0,
        "click_noise": 0.1,
        "delta": 3.0,
        "bias_curve": None,
        "gmm_mu": list(simulate.DEFAULT_GMM_MU),
        "gmm_sigma": list(simulate.DEFAULT_GMM_SIGMA),
        "sessions_per_request": {"train": 16, "valid": 4, "test": 4},
        "initial_ranker_fraction": 0.05,
    },
    "em": {
        "alpha": 0.5,
        "alpha_decay": 1.0,
        "batch_size": 2000,
        "max_epochs": 15,
        "tolerance": 1e-3,
        "regressor_hidden": [16],
        "regressor_lr": 0.1,
        "regressor_steps": 80,
        "bernoulli_sampling": True,
        "pair_target_mode": "marginal",
        "max_pairs_per_request": None,
    },
    "train": {
        "learning_rate": 0.02,
        "epochs": 25,
        "batch_size": 256,
        "hidden": [64, 32],
        "gain_mode": "linear",
        "val_metric": "reward",
        "val_k": 10,
        "learning_rates": {},
    },
    "methods": [
        "Opt",
        "BayesIPW",
        "IPW",
        "NaivePairwise",
        "NaivePointwise",
        "OraclePairwise",
    ],
    "eval_ks": [3, 5, 10],
    "reward_trials": 100,
    "repeats": 10,
    "sweep": {"eta": [0.5, 1.0, 1.5, 2.0], "delta": [2.0, 3.0, 4.0]},
}

LOG_FILES = {split: f"logs_{split}.jsonl" for split in ("train", "valid", "test")}


class UsageError(ValueError):
    """Bad arguments or config: exits with status 1."""


def deep_merge(base: dict, override: dict) -> dict:
    merged = copy.deepcopy(base)
    for key, value in override.items():
        if isinstance(value, dict) and isinstance(merged.get(key), dict):
            merged[key] = deep_merge(merged[key], value)
        else:
            merged[key] = copy.deepcopy(value)
    return merged


def set_by_path(config: dict, dotted: str, value) -> None:
    parts = dotted.split(".")
    node = config
    for part in parts[:-1]:
        if not isinstance(node.get(part), dict):
            node[part] = {}
        node = node[part]
    node[parts[-1]] = value


def load_config(path: Optional[str], overrides: list[str]) -> dict:
    if path is None:
        raise UsageError("--config is required")
    try:
        with open(path, "r", encoding="utf-8") as fh:
            user = json.load(fh)
    except FileNotFoundError:
        raise UsageError(f"config file not found: {path}") from None
    except json.JSONDecodeError as exc:
        raise UsageError(f"config is not valid JSON: {exc}") from None
    config = deep_merge(DEFAULT_CONFIG, user)
    for item in overrides:
        if not item.startswith("--") or "=" not in item:
            raise UsageError(f"cannot parse override {item!r}; expected --key=value")
        key, _, raw = item[2:].partition("=")
        try:
            value = json.loads(raw)
        except json.JSONDecodeError:
            value = raw
        set_by_path(config, key, value)
    return config


def config_hash(config: dict) -> str:
    canonical = json.dumps(config, sort_keys=True, separators=(",", ":"))
    return hashlib.sha256(canonical.encode("utf-8")).hexdigest()


# ---------------------------------------------------------------------------
# Pipeline pieces
# ---------------------------------------------------------------------------


def build_dataset_splits(config: dict) -> tuple[Dataset, Dataset, Dataset]:
    ds_cfg = config["dataset"]
    if ds_cfg["source"] == "synthetic":
        syn = ingest.make_synthetic_config(
            num_requests=int(ds_cfg["num_requests"]),
            items_per_request=int(ds_cfg["items_per_request"]),
            feature_dim=int(ds_cfg["feature_dim"]),
            rng_seed=derive_seed(config["seed"], "dataset"),
        )
        dataset = ingest.generate_synthetic(syn)
        return ingest.split_by_request_hash(dataset)
    if ds_cfg["source"] == "letor":
        for field in ("train_path", "valid_path", "test_path"):
            if not ds_cfg.get(field):
                raise UsageError(f"dataset.{field} is required for letor input")
        dim = ds_cfg.get("feature_dim")
        splits = [
            ingest.parse_letor(ds_cfg[f"{name}_path"], feature_dim=dim)
            for name in ("train", "valid", "test")
        ]
        if ds_cfg.get("normalize"):
            lo, hi = ingest.fit_minmax(splits[0])
            splits = [ingest.apply_minmax(s, lo, hi) for s in splits]
        return tuple(splits)  # type: ignore[return-value]
    raise UsageError(f"unknown dataset.source {ds_cfg['source']!r}")


def build_sim_config(config: dict) -> simulate.SimConfig:
    sim = config["sim"]
    return simulate.SimConfig(
        num_positions=int(sim["num_positions"]),
        eta=float(sim["eta"]),
        click_noise=float(sim["click_noise"]),
        delta=float(sim["delta"]),
        bias_curve=None if sim["bias_curve"] is None else np.asarray(sim["bias_curve"]),
        gmm_mu=sim["gmm_mu"],
        gmm_sigma=sim["gmm_sigma"],
        rng_seed=derive_seed(config["seed"], "sim"),
    )


def build_em_config(config: dict) -> em_mod.EMConfig:
    em = config["em"]
    return em_mod.EMConfig(
        alpha=float(em["alpha"]),
        alpha_decay=float(em["alpha_decay"]),
        batch_size=int(em["batch_size"]),
        max_epochs=int(em["max_epochs"]),
        tolerance=float(em["tolerance"]),
        regressor_hidden=tuple(int(h) for h in em["regressor_hidden"]),
        regressor_lr=float(em["regressor_lr"]),
        regressor_steps=int(em["regressor_steps"]),
        bernoulli_sampling=bool(em["bernoulli_sampling"]),
        pair_target_mode=str(em["pair_target_mode"]),
        max_pairs_per_request=(
            None
            if em["max_pairs_per_request"] is None
            else int(em["max_pairs_per_request"])
        ),
        rng_seed=derive_seed(config["seed"], "em"),
    )


def build_train_config(config: dict, method: str, repeat: int) -> rank.TrainConfig:
    train = config["train"]
    lr = float(train.get("learning_rates", {}).get(method, train["learning_rate"]))
    # validation reward cannot look past the simulated position budget
    val_k = min(int(train["val_k"]), int(config["sim"]["num_positions"]))
    return rank.TrainConfig(
        learning_rate=lr,
        epochs=int(train["epochs"]),
        batch_size=int(train["batch_size"]),
        hidden=tuple(int(h) for h in train["hidden"]),
        gain_mode=str(train["gain_mode"]),
        val_metric=str(train["val_metric"]),
        val_k=val_k,
        rng_seed=derive_seed(config["seed"], "train", method, repeat),
    )


def _out_dir(config: dict) -> Path:
    out = Path(config["output_dir"])
    out.mkdir(parents=True, exist_ok=True)
    return out


def _write_manifest(config: dict, out: Path) -> None:
    manifest = {"config_hash": config_hash(config), "seed": config["seed"]}
    with (out / "manifest.json").open("w", encoding="utf-8") as fh:
        json.dump(manifest, fh, indent=2, sort_keys=True)
        fh.write("\n")


def _check_manifest(config: dict, out: Path) -> None:
    manifest_path = out / "manifest.json"
    if not manifest_path.exists():
        raise FileNotFoundError(f"no manifest in {out}; run simulate first")
    with manifest_path.open("r", encoding="utf-8") as fh:
        manifest = json.load(fh)
    if manifest.get("config_hash") != config_hash(config):
        raise ValueError(
            f"outputs in {out} were produced under a different config; refusing to mix"
        )


def cmd_simulate(config: dict) -> int:
    out = _out_dir(config)
    splits = dict(zip(("train", "valid", "test"), build_dataset_splits(config)))
    sim_config = build_sim_config(config)
    scorer = simulate.train_initial_ranker(
        splits["train"],
        float(config["sim"]["initial_ranker_fraction"]),
        derive_rng(config["seed"], "initial-ranker"),
    )
    sessions = config["sim"]["sessions_per_request"]
    for split, dataset in splits.items():
        logs = simulate.simulate_dataset(
            dataset,
            scorer,
            sim_config,
            sessions_per_request=int(sessions[split]),
            seed=derive_seed(config["seed"], "simulate", split),
        )
        ingest.write_logs(logs, out / LOG_FILES[split])
        print(f"wrote {len(logs)} impressions to {out / LOG_FILES[split]}")
    _write_manifest(config, out)
    return 0


def cmd_estimate(config: dict) -> int:
    out = _out_dir(config)
    _check_manifest(config, out)
    logs = ingest.read_logs(out / LOG_FILES["train"])
    if not logs:
        raise ValueError(f"no impressions in {out / LOG_FILES['train']}")
    train_split = build_dataset_splits(config)[0]
    result = em_mod.run_em(logs, train_split, build_em_config(config))
    params_doc = {
        "config_hash": config_hash(config),
        "theta": [float(v) for v in result.params.theta],
        "theta_neg": [float(v) for v in result.params.theta_neg],
        "eps_pos": [[float(v) for v in row] for row in result.params.eps_pos],
        "eps_neg": [[float(v) for v in row] for row in result.params.eps_neg],
    }
    with (out / "params.json").open("w", encoding="utf-8") as fh:
        json.dump(params_doc, fh, indent=2, sort_keys=True)
        fh.write("\n")
    network.save_model(result.g, out / "regressor_g.npz")
    network.save_model(result.h, out / "regressor_h.npz")
    em_mod.write_trace_csv(result.trace, out / "trace.csv", result.params.num_positions)
    status = "converged" if result.converged else "stopped at the epoch budget"
    print(f"EM {status} after {len(result.trace)} epochs; params -> {out / 'params.json'}")
    if not result.converged:
        print("warning: EM did not reach the tolerance; using the best state seen")
    return 0


def load_estimates(config: dict, out: Path) -> tuple[PropensityParams, em_mod.Regressors]:
    params_path = out / "params.json"
    if not params_path.exists():
        raise FileNotFoundError(f"no params.json in {out}; run estimate first")
    with params_path.open("r", encoding="utf-8") as fh:
        doc = json.load(fh)
    if doc.get("config_hash") != config_hash(config):
        raise ValueError(
            f"params in {out} were estimated under a different config; refusing to mix"
        )
    params = PropensityParams(
        theta=np.asarray(doc["theta"]),
        theta_neg=np.asarray(doc["theta_neg"]),
        eps_pos=np.asarray(doc["eps_pos"]),
        eps_neg=np.asarray(doc["eps_neg"]),
    )
    regressors = em_mod.Regressors(
        g=network.load_model(out / "regressor_g.npz"),
        h=network.load_model(out / "regressor_h.npz"),
    )
    return params, regressors


def _evaluate_model(
    model: network.RankerModel,
    test: Dataset,
    sim_config: simulate.SimConfig,
    config: dict,
    method: str,
    repeat: int,
) -> dict[tuple[str, int], float]:
    ks = [int(k) for k in config["eval_ks"]]
    values: dict[tuple[str, int], float] = {}
    ndcg_totals = {k: 0.0 for k in ks}
    for request in test:
        ranking = evaluation.model_ranking(model, request)
        grades = request.grades()
        for k in ks:
            ndcg_totals[k] += evaluation.ndcg_at_k(ranking, grades, k)
    for k in ks:
        values[("ndcg", k)] = ndcg_totals[k] / len(test)
    rewards = evaluation.reward_at_ks(
        model,
        test,
        sim_config,
        ks,
        num_trials=int(config["reward_trials"]),
        rng=derive_rng(config["seed"], "reward", method, repeat),
    )
    for k in ks:
        values[("reward", k)] = rewards[k]
    return values


def _run_one(config: dict, method: str, repeat: int) -> dict[tuple[str, int], float]:
    out = Path(config["output_dir"])
    train_split, valid_split, test_split = build_dataset_splits(config)
    sim_config = build_sim_config(config)
    variant = rank.LossVariant.parse(method)
    params = regressors = None
    if variant in rank.DEBIASED_VARIANTS:
        params, regressors = load_estimates(config, out)
    logs = ingest.read_logs(out / LOG_FILES["train"])
    model = rank.train_ranker(
        logs,
        train_split,
        params,
        regressors,
        variant,
        build_train_config(config, method, repeat),
        valid_dataset=valid_split,
        sim_config=sim_config,
    )
    return _evaluate_model(model, test_split, sim_config, config, method, repeat)


def cmd_train_eval(config: dict, jobs: int = 1) -> int:
    out = _out_dir(config)
    _check_manifest(config, out)
    methods = list(config["methods"])
    if not methods:
        raise UsageError("methods list is empty")
    repeats = int(config["repeats"])
    tasks = [(method, repeat) for method in methods for repeat in range(repeats)]
    results: dict[tuple[str, int], dict] = {}
    if jobs > 1:
        with concurrent.futures.ProcessPoolExecutor(max_workers=jobs) as pool:
            futures = {
                pool.submit(_run_one, config, method, repeat): (method, repeat)
                for method, repeat in tasks
            }
            for future in concurrent.futures.as_completed(futures):
                results[futures[future]] = future.result()
    else:
        for method, repeat in tasks:
            results[(method, repeat)] = _run_one(config, method, repeat)

    ks = [int(k) for k in config["eval_ks"]]
    with (out / "runs.csv").open("w", encoding="utf-8", newline="") as fh:
        writer = csv.writer(fh, lineterminator="\n")
        writer.writerow(["method", "metric", "k", "repeat", "value"])
        for method in methods:
            for metric in ("ndcg", "reward"):
                for k in ks:
                    for repeat in range(repeats):
                        value = results[(method, repeat)][(metric, k)]
                        writer.writerow([method, metric, k, repeat, repr(value)])

    rows = []
    for method in methods:
        for metric in ("ndcg", "reward"):
            for k in ks:
                summary = evaluation.aggregate_runs(
                    [results[(method, r)][(metric, k)] for r in range(repeats)]
                )
                rows.append(
                    evaluation.ReportRow(
                        method=method,
                        metric=metric,
                        k=k,
                        mean=summary.mean,
                        std=summary.std,
                        runs=summary.runs,
                    )
                )
    report = evaluation.EvalReport(rows=rows)
    evaluation.write_report_csv(report, out / "report.csv")
    print(f"wrote {len(rows)} report rows to {out / 'report.csv'}")
    return 0


def cmd_report(config: dict) -> int:
    out = Path(config["output_dir"])
    report_path = out / "report.csv"
    if not report_path.exists():
        raise FileNotFoundError(f"no report.csv in {out}")
    report = evaluation.read_report_csv(report_path)
    print(evaluation.format_report_table(report))
    return 0


def cmd_sweep(config: dict, param: str, jobs: int = 1) -> int:
    if param not in ("eta", "delta"):
        raise UsageError(f"sweep parameter must be eta or delta, got {param!r}")
    values = config["sweep"][param]
    if "NaivePairwise" not in config["methods"]:
        raise UsageError("sweeps compare against NaivePairwise; add it to methods")
    base_out = _out_dir(config)
    ks = [int(k) for k in config["eval_ks"]]
    rows = []
    for value in values:
        sub = copy.deepcopy(config)
        sub["sim"][param] = value
        sub["output_dir"] = str(base_out / f"{param}_{value}")
        cmd_simulate(sub)
        cmd_estimate(sub)
        cmd_train_eval(sub, jobs=jobs)
        report = evaluation.read_report_csv(Path(sub["output_dir"]) / "report.csv")
        for metric in ("ndcg", "reward"):
            for k in ks:
                base = report.row("NaivePairwise", metric, k).mean
                for method in config["methods"]:
                    row = report.row(method, metric, k)
                    gain = (row.mean - base) / base if base != 0 else float("nan")
                    rows.append((param, value, method, metric, k, row.mean, row.std, gain))
    sweep_path = base_out / f"sweep_{param}.csv"
    with sweep_path.open("w", encoding="utf-8", newline="") as fh:
        writer = csv.writer(fh, lineterminator="\n")
        writer.writerow(
            ["param", "value", "method", "metric", "k", "mean", "std", "gain_over_naive_pairwise"]
        )
        for row in rows:
            writer.writerow(
                [row[0], row[1], row[2], row[3], row[4], repr(row[5]), repr(row[6]), repr(row[7])]
            )
    print(f"wrote sweep results to {sweep_path}")
    return 0


# ---------------------------------------------------------------------------
# Entry point
# ---------------------------------------------------------------------------


class _Parser(argparse.ArgumentParser):
    def error(self, message):  # usage errors exit 1, not argparse's 2
        self.print_usage(sys.stderr)
        raise UsageError(message)


def build_parser() -> _Parser:
    parser = _Parser(prog="ultra-pair", description=__doc__)
    sub = parser.add_subparsers(dest="verb", required=True)
    for verb in ("simulate", "estimate", "train-eval", "report", "sweep"):
        p = sub.add_parser(verb)
        p.add_argument("--config", required=True, help="experiment config (JSON)")
        p.add_argument("--jobs", type=int, default=1, help="parallel workers")
        p.add_argument("--seed", type=int, default=None, help="override config seed")
        if verb == "sweep":
            p.add_argument(
                "--param", required=True, choices=("eta", "delta"),
                help="which simulation knob to sweep",
            )
    return parser


def main(argv: Optional[list[str]] = None) -> int:
    argv = list(sys.argv[1:] if argv is None else argv)
    known, overrides = [], []
    for token in argv:
        # --section.key=value tokens are config overrides, not argparse flags
        (overrides if token.startswith("--") and "=" in token and "." in
         token.split("=", 1)[0] else known).append(token)
    parser = build_parser()
    try:
        args = parser.parse_args(known)
        config = load_config(args.config, overrides)
        if args.seed is not None:
            config["seed"] = args.seed
        if args.verb == "simulate":
            return cmd_simulate(config)
        if args.verb == "estimate":
            return cmd_estimate(config)
        if args.verb == "train-eval":
            return cmd_train_eval(config, jobs=args.jobs)
        if args.verb == "report":
            return cmd_report(config)
        if args.verb == "sweep":
            return cmd_sweep(config, args.param, jobs=args.jobs)
        raise UsageError(f"unknown verb {args.verb!r}")
    except UsageError as exc:
        print(f"usage error: {exc}", file=sys.stderr)
        return 1
    except SystemExit as exc:  # argparse --help
        return int(exc.code or 0)
    except Exception as exc:  # noqa: BLE001 - CLI boundary
        print(f"error: {exc}", file=sys.stderr)
        return 2


if __name__ == "__main__":
    sys.exit(main())
