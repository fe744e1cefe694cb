"""Command-line pipeline.

Subcommands share one experiment directory::

    config.txt                      resolved configuration
    expert/q_net.seqn               expert Q-network; training_curve.csv
    data/dataset.jsonl              logged batch dataset
    audit/audit.txt, audit.json     overlap and summary diagnostics
    cf/<mode>/                      propensity.seqn (iptw), dynamics.seqn, metrics.csv
    cirl/<mode>/                    iterations.csv, result.json, q_nets/, mu_curves/
    eval/                           rewards.csv, accuracy.csv, weights.csv
    report/                         table CSVs, weights.svg, margins.svg

Each stage also writes ``manifest.json`` (inputs with hashes, seeds, timings).
Any config key can be overridden with ``--<key> <value>``, e.g.
``--cirl.max_iters 5``.
"""

import argparse
import hashlib
import json
import os
import sys
import time

import numpy as np

from . import __version__, cfmodel, cirl, cohort, evalreport, expert, seqnet
from .config import DEFAULTS, ExperimentConfig
from .errors import CfirlError, InvalidArgument, MissingArtifact
from .oncosim import RewardWeights, SimConfig
from .policies import MixturePolicy
from .policyopt import CandidatePolicy
from .rng import derive_seed
from .tdlearn import TDHyper

STAGES = ("train-expert", "gen-data", "audit", "train-cf", "run-cirl", "evaluate", "report")
METHOD_NAMES = {"iptw": "CIRL", "plain-h": "MB(h)", "plain-x": "MB(x)"}


def _sha256(path):
    h = hashlib.sha256()
    with open(path, "rb") as fh:
        for block in iter(lambda: fh.read(1 << 20), b""):
            h.update(block)
    return h.hexdigest()


class Experiment:
    """Paths, typed settings and stage seeds for one experiment directory."""

    def __init__(self, cfg, out_dir=None):
        self.cfg = cfg
        self.root = out_dir or cfg["output_dir"]
        self.budget = float(cfg["budget"])
        if self.budget <= 0:
            raise InvalidArgument("budget must be positive")
        self.seed = int(cfg["seed"])

    # -- paths
    def path(self, *parts):
        return os.path.join(self.root, *parts)

    def ensure(self, *parts):
        d = self.path(*parts)
        os.makedirs(d, exist_ok=True)
        return d

    def require(self, rel, producer):
        p = self.path(*rel.split("/"))
        if not os.path.exists(p):
            raise MissingArtifact(p, producer)
        return p

    # -- settings
    def sim_config(self):
        return SimConfig(**self.cfg.section("sim"))

    def true_weights(self):
        return RewardWeights(tuple(self.cfg["expert.weights"]), self.cfg["expert.gamma"])

    @property
    def gamma(self):
        return float(self.cfg["expert.gamma"])

    def expert_hyper(self):
        s = self.cfg.section("expert")
        keys = ("hidden_dim", "batch_size", "learning_rate", "target_sync", "replay_capacity", "eps_max", "eps_min",
                "eps_decay", "iterations")
        return expert.QLearningHyper(**{k: s[k] for k in keys}).scaled(self.budget)

    def cf_hyper(self, propensity=False):
        s = self.cfg.section("cf")
        iters = s["propensity_iterations"] if propensity else s["iterations"]
        return cfmodel.FitHyper(s["hidden_dim"], s["batch_size"], s["learning_rate"], iters).scaled(self.budget)

    def td_hyper(self):
        s = self.cfg.section("cirl")
        keys = ("hidden_dim", "batch_size", "learning_rate", "target_sync", "eps_max", "eps_min", "eps_decay",
                "iterations")
        return TDHyper(**{k: s[k] for k in keys}).scaled(self.budget)

    def stage_seed(self, *keys):
        return derive_seed(self.seed, *keys)

    def dataset_seed(self):
        s = int(self.cfg["dataset.seed"])
        return s if s >= 0 else self.stage_seed("dataset")

    # -- bookkeeping
    def write_config(self):
        os.makedirs(self.root, exist_ok=True)
        with open(self.path("config.txt"), "w", encoding="utf-8") as fh:
            fh.write(self.cfg.to_text())

    def manifest(self, stage_dir, stage, inputs, outputs, seeds, started, extra=None):
        m = {
            "stage": stage,
            "version": __version__,
            "config_digest": self.cfg.digest(),
            "inputs": {os.path.relpath(p, self.root): _sha256(p) for p in inputs},
            "outputs": {os.path.relpath(p, self.root): _sha256(p) for p in outputs},
            "seeds": seeds,
            "seconds": round(time.time() - started, 3),
        }
        if extra:
            m.update(extra)
        with open(os.path.join(stage_dir, "manifest.json"), "w", encoding="utf-8") as fh:
            json.dump(m, fh, indent=2, sort_keys=True)
            fh.write("\n")


def _log(msg):
    print(msg, file=sys.stderr, flush=True)


# ------------------------------------------------------------------- stages


def train_expert_stage(exp):
    t0 = time.time()
    d = exp.ensure("expert")
    seed = exp.stage_seed("expert")
    curve = expert.TrainingCurve()
    hyper = exp.expert_hyper()
    _log(f"train-expert: {hyper.iterations} iterations")
    net = expert.train_expert(exp.sim_config(), exp.true_weights(), hyper, seed=seed, curve=curve)
    q_path = os.path.join(d, "q_net.seqn")
    seqnet.save_params(net, q_path)
    curve_path = os.path.join(d, "training_curve.csv")
    evalreport.write_csv(curve_path, curve.header, curve.rows)
    exp.manifest(d, "train-expert", [], [q_path, curve_path], {"expert": seed}, t0)
    return net


def load_expert(exp):
    net = seqnet.load_params(exp.require("expert/q_net.seqn", "train-expert"))
    return net


def logging_policy_of(exp, net=None):
    return expert.logging_policy(net or load_expert(exp), exp.sim_config(), exp.cfg["expert.kappa"])


def gen_data_stage(exp):
    t0 = time.time()
    q_path = exp.require("expert/q_net.seqn", "train-expert")
    policy = logging_policy_of(exp)
    seed = exp.dataset_seed()
    n = int(exp.cfg["dataset.n"])
    _log(f"gen-data: {n} trajectories, kappa={policy.kappa}")
    ds = cohort.generate(policy, exp.sim_config(), n, seed)
    d = exp.ensure("data")
    path = os.path.join(d, "dataset.jsonl")
    cohort.save(ds, path)
    exp.manifest(d, "gen-data", [q_path], [path], {"dataset": seed}, t0)
    return ds


def load_dataset(exp):
    return cohort.load(exp.require("data/dataset.jsonl", "gen-data"))


def audit_stage(exp):
    t0 = time.time()
    ds = load_dataset(exp)
    report = cohort.audit(ds, exp.cfg["cf.overlap_threshold"])
    d = exp.ensure("audit")
    txt, js = os.path.join(d, "audit.txt"), os.path.join(d, "audit.json")
    with open(txt, "w", encoding="utf-8") as fh:
        fh.write(report.to_text() + "\n")
    with open(js, "w", encoding="utf-8") as fh:
        json.dump(report.to_dict(), fh, indent=2)
        fh.write("\n")
    exp.manifest(d, "audit", [exp.path("data", "dataset.jsonl")], [txt, js], {}, t0)
    print(report.to_text())
    return report


def _mode(exp, mode):
    mode = mode or exp.cfg["cf.mode"]
    if mode not in cfmodel.CLI_MODES:
        raise InvalidArgument(f"unknown mode {mode!r}; choose from {sorted(cfmodel.CLI_MODES)}")
    return mode


def train_cf_stage(exp, mode=None):
    t0 = time.time()
    mode = _mode(exp, mode)
    full_mode = cfmodel.CLI_MODES[mode]
    ds = load_dataset(exp)
    train, val = ds.split(0.9)
    d = exp.ensure("cf", mode)
    seed = exp.stage_seed("cf", mode)
    outputs, rows = [], []
    prop = None
    if full_mode == "iptw_history":
        _log("train-cf: propensity model")
        prop = cfmodel.fit_propensity(train, exp.cf_hyper(propensity=True), seed=seed,
                                      force=exp.cfg["cf.force"], threshold=exp.cfg["cf.overlap_threshold"])
        p = os.path.join(d, "propensity.seqn")
        seqnet.save_params(prop.net, p)
        outputs.append(p)
        ll, base = cfmodel.propensity_log_loss(prop, val)
        rows += [("propensity_log_loss", ll), ("constant_log_loss", base)]
    _log(f"train-cf: dynamics ({full_mode})")
    dyn = cfmodel.fit_dynamics(train, prop, full_mode, exp.cf_hyper(), seed=seed)
    p = os.path.join(d, "dynamics.seqn")
    seqnet.save_params(dyn.net, p)
    outputs.append(p)
    rows += [("factual_rmse", cfmodel.factual_rmse(dyn, val)), ("counterfactual_rmse", cfmodel.counterfactual_rmse(dyn, val))]
    metrics = os.path.join(d, "metrics.csv")
    evalreport.write_csv(metrics, ("metric", "value"), rows)
    outputs.append(metrics)
    exp.manifest(d, "train-cf", [exp.path("data", "dataset.jsonl")], outputs, {"cf": seed}, t0, {"mode": full_mode})
    return dyn


def load_feature_map(exp, mode):
    mode = _mode(exp, mode)
    net = seqnet.load_params(exp.require(f"cf/{mode}/dynamics.seqn", f"train-cf --mode {mode}"))
    dyn = cfmodel.DynamicsModel(net, cfmodel.CLI_MODES[mode], exp.sim_config())
    return cfmodel.FeatureMap(dyn)


def run_cirl_stage(exp, mode=None):
    t0 = time.time()
    mode = _mode(exp, mode)
    fmap = load_feature_map(exp, mode)
    ds = load_dataset(exp)
    d = exp.ensure("cirl", mode)
    qdir = exp.ensure("cirl", mode, "q_nets")
    mdir = exp.ensure("cirl", mode, "mu_curves")
    seed = exp.stage_seed("cirl", mode)
    hyper = exp.td_hyper()

    def progress(it):
        _log(f"run-cirl[{mode}] k={it.k} w={np.round(cirl.l1_normalize(it.weights), 4)} "
             f"margin={it.margin:.5f} ({it.seconds:.0f}s)")

    res = cirl.run_cirl(ds, fmap, exp.gamma, exp.cfg["cirl.epsilon"], exp.cfg["cirl.max_iters"], hyper, hyper,
                        seed=seed, on_iteration=progress, mu_loss=exp.cfg["cirl.mu_loss"])
    save_cirl_result(d, res)
    outputs = []
    for k, (pol, mnet) in enumerate(zip(res.policies, res.mu_nets)):
        p = os.path.join(qdir, f"q_{k:03d}.seqn")
        seqnet.save_params(pol.q_net, p)
        c = os.path.join(mdir, f"mu_{k:03d}.csv")
        evalreport.write_csv(c, ("iteration", "td_loss", "mu_1", "mu_2"), mnet.curve)
        outputs += [p, c]
    outputs += [os.path.join(d, "iterations.csv"), os.path.join(d, "result.json")]
    exp.manifest(d, "run-cirl", [exp.path("data", "dataset.jsonl"), exp.path("cf", mode, "dynamics.seqn")], outputs,
                 {"cirl": seed}, t0, {"status": res.status})
    return res


def save_cirl_result(d, res):
    rows = []
    for it in res.iterations:
        wn = cirl.l1_normalize(it.weights)
        rows.append((it.k, *it.weights, *wn, *it.mu, *it.mu_bar, it.margin, it.distance))
    evalreport.write_csv(
        os.path.join(d, "iterations.csv"),
        ("k", "w_1", "w_2", "w1_l1", "w2_l1", "mu_1", "mu_2", "mu_bar_1", "mu_bar_2", "margin", "distance"),
        rows,
    )
    out = {
        "status": res.status,
        "selected": res.selected,
        "selected_weights": [float(v) for v in res.selected_weights],
        "mu_expert": [float(v) for v in res.mu_expert],
        "lambdas": [float(v) for v in res.mixing.lambdas],
        "mixing_distance": res.mixing.distance,
        "margins": [float(v) for v in res.margins],
        "weights": [[float(v) for v in it.weights] for it in res.iterations],
    }
    with open(os.path.join(d, "result.json"), "w", encoding="utf-8") as fh:
        json.dump(out, fh, indent=2)
        fh.write("\n")


class LoadedCirl:
    """A finished CIRL run read back from disk."""

    def __init__(self, exp, mode):
        d = exp.path("cirl", mode)
        path = exp.require(f"cirl/{mode}/result.json", f"run-cirl --mode {mode}")
        with open(path, encoding="utf-8") as fh:
            self.result = json.load(fh)
        cfg = exp.sim_config()
        memoryless = cfmodel.CLI_MODES[mode] == "plain_memoryless"
        self.policies = []
        for k, w in enumerate(self.result["weights"]):
            net = seqnet.load_params(os.path.join(d, "q_nets", f"q_{k:03d}.seqn"))
            self.policies.append(CandidatePolicy(net, cfg, w, memoryless=memoryless))
        self.mode = mode

    @property
    def selected_policy(self):
        return self.policies[self.result["selected"]]

    def mixture(self):
        return MixturePolicy(self.policies, self.result["lambdas"])


def cirl_modes_present(exp):
    return [m for m in cfmodel.CLI_MODES if os.path.exists(exp.path("cirl", m, "result.json"))]


def evaluate_stage(exp):
    t0 = time.time()
    cfg = exp.sim_config()
    net = load_expert(exp)
    modes = cirl_modes_present(exp)
    if not modes:
        raise MissingArtifact(exp.path("cirl", "<mode>", "result.json"), "run-cirl")
    truth = exp.true_weights()
    gamma = exp.gamma
    M, n_test = int(exp.cfg["eval.rollouts"]), int(exp.cfg["eval.n_test"])
    r_seed, a_seed = exp.stage_seed("eval.rewards"), exp.stage_seed("eval.accuracy")
    log_pol = logging_policy_of(exp, net)
    entries = [("expert", expert.greedy_policy(net, cfg)), ("expert_logging", log_pol)]
    weight_rows = []
    for mode in modes:
        run = LoadedCirl(exp, mode)
        name = METHOD_NAMES[mode]
        entries += [(name, run.mixture()), (f"{name} selected", run.selected_policy)]
        cmp = evalreport.weight_report(np.asarray(run.result["selected_weights"]), cirl.l1_normalize(truth.vector))
        weight_rows.append((name, exp.seed, *cmp.recovered, cmp.l1_distance, all(cmp.sign_agreement), cmp.ordering_agrees))
    reward_rows, acc_rows = [], []
    for name, pol in entries:
        _log(f"evaluate: {name}")
        mean, se = evalreport.cumulative_reward(pol, cfg, truth, gamma, M, r_seed)
        reward_rows.append((name, mean, se, M))
        acc, ase = evalreport.action_match_accuracy(pol, log_pol, cfg, n_test, a_seed)
        acc_rows.append((name, acc, ase, n_test))
    d = exp.ensure("eval")
    files = [os.path.join(d, f) for f in ("rewards.csv", "accuracy.csv", "weights.csv")]
    evalreport.write_csv(files[0], ("method", "mean_cumulative_reward", "stderr", "rollouts"), reward_rows)
    evalreport.write_csv(files[1], ("method", "accuracy", "stderr", "test_trajectories"), acc_rows)
    evalreport.write_csv(files[2], ("method", "seed", "w_1", "w_2", "l1_distance", "signs_agree", "ordering_agrees"),
                         weight_rows)
    exp.manifest(d, "evaluate", [exp.path("expert", "q_net.seqn")], files, {"rewards": r_seed, "accuracy": a_seed}, t0)
    return {"rewards": reward_rows, "accuracy": acc_rows, "weights": weight_rows}


def report_stage(exp):
    t0 = time.time()
    rewards = exp.require("eval/rewards.csv", "evaluate")
    accuracy = exp.require("eval/accuracy.csv", "evaluate")
    weights = exp.require("eval/weights.csv", "evaluate")
    d = exp.ensure("report")
    outputs = []
    for src, name in ((rewards, "table_rewards.csv"), (accuracy, "table_accuracy.csv"), (weights, "weights.csv")):
        header, rows = evalreport.read_csv(src)
        p = os.path.join(d, name)
        evalreport.write_csv(p, header, rows)
        outputs.append(p)
    margin_rows, traces, points = [], {}, {}
    for mode in cirl_modes_present(exp):
        with open(exp.path("cirl", mode, "result.json"), encoding="utf-8") as fh:
            res = json.load(fh)
        _, its = evalreport.read_csv(exp.path("cirl", mode, "iterations.csv"))
        name = METHOD_NAMES[mode]
        for row in its:
            k, w1, w2, mu1, mu2, margin, dist = row[0], row[3], row[4], row[5], row[6], row[9], row[10]
            margin_rows.append((name, exp.seed, k, margin, dist, w1, w2, mu1, mu2))
        traces[name] = [float(r[9]) for r in its[1:]]
        points[name] = [res["selected_weights"]]
    p = os.path.join(d, "margins.csv")
    evalreport.write_csv(p, ("method", "seed", "iteration", "margin", "distance", "w_1", "w_2", "mu_1", "mu_2"),
                         margin_rows)
    outputs.append(p)
    truth = cirl.l1_normalize(exp.true_weights().vector)
    svg_w, svg_m = os.path.join(d, "weights.svg"), os.path.join(d, "margins.svg")
    evalreport.plot_weights(svg_w, points, truth)
    evalreport.plot_margins(svg_m, traces, exp.cfg["cirl.epsilon"])
    outputs += [svg_w, svg_m]
    exp.manifest(d, "report", [rewards, accuracy, weights], outputs, {}, t0)
    for p in outputs[:2]:
        with open(p, encoding="utf-8") as fh:
            print(fh.read().rstrip())
    return outputs


def pipeline(exp):
    train_expert_stage(exp)
    gen_data_stage(exp)
    audit_stage(exp)
    for mode in exp.cfg["pipeline.modes"]:
        train_cf_stage(exp, mode)
        run_cirl_stage(exp, mode)
    evaluate_stage(exp)
    report_stage(exp)


# ---------------------------------------------------------------------- CLI


def build_parser():
    p = argparse.ArgumentParser(prog="cfirl", description="Batch counterfactual inverse reinforcement learning.")
    p.add_argument("--version", action="version", version=f"cfirl {__version__}")
    sub = p.add_subparsers(dest="command", required=True, metavar="command")
    helps = {
        "train-expert": "train the simulated expert's Q-network",
        "gen-data": "log a batch dataset with the expert's stochastic policy",
        "audit": "overlap and summary diagnostics of the dataset",
        "train-cf": "fit the counterfactual (propensity + dynamics) model",
        "run-cirl": "recover reward weights with the projection loop",
        "evaluate": "roll out recovered policies in the simulator",
        "report": "write table CSVs and SVG figures",
        "pipeline": "run every stage in order",
    }
    for name, h in helps.items():
        sp = sub.add_parser(name, help=h, description=h)
        sp.add_argument("--config", help="config file (key = value lines)")
        sp.add_argument("--seed", type=int, help="master seed")
        sp.add_argument("--budget", type=float, help="scale factor on training iteration counts")
        sp.add_argument("--output-dir", help="experiment directory")
        if name in ("train-cf", "run-cirl"):
            sp.add_argument("--mode", choices=sorted(cfmodel.CLI_MODES), help="counterfactual model variant")
    return p


def parse_overrides(extra):
    """``--section.key value`` / ``--section.key=value`` pairs for any config key."""
    out = {}
    i = 0
    while i < len(extra):
        tok = extra[i]
        if not tok.startswith("--"):
            raise InvalidArgument(f"unexpected argument {tok!r}")
        key = tok[2:]
        if "=" in key:
            key, value = key.split("=", 1)
            i += 1
        else:
            if i + 1 >= len(extra):
                raise InvalidArgument(f"missing value for --{key}")
            value = extra[i + 1]
            i += 2
        if key not in DEFAULTS:
            raise InvalidArgument(f"unknown option --{key}")
        out[key] = value
    return out


def make_experiment(args, extra):
    cfg = ExperimentConfig.load(args.config) if args.config else ExperimentConfig()
    for k, v in parse_overrides(extra).items():
        cfg.set(k, v)
    if args.seed is not None:
        cfg.set("seed", args.seed)
    if args.budget is not None:
        cfg.set("budget", float(args.budget))
    if args.output_dir is not None:
        cfg.set("output_dir", args.output_dir)
    return Experiment(cfg)


def run(argv=None):
    parser = build_parser()
    args, extra = parser.parse_known_args(argv)
    exp = make_experiment(args, extra)
    exp.write_config()
    cmd = args.command
    if cmd == "train-expert":
        train_expert_stage(exp)
    elif cmd == "gen-data":
        gen_data_stage(exp)
    elif cmd == "audit":
        audit_stage(exp)
    elif cmd == "train-cf":
        train_cf_stage(exp, args.mode)
    elif cmd == "run-cirl":
        run_cirl_stage(exp, args.mode)
    elif cmd == "evaluate":
        evaluate_stage(exp)
    elif cmd == "report":
        report_stage(exp)
    elif cmd == "pipeline":
        pipeline(exp)
    return 0


def main(argv=None):
    try:
        return run(argv)
    except CfirlError as e:
        print(f"cfirl: error [{e.category}]: {e}", file=sys.stderr)
        return e.exit_code


if __name__ == "__main__":
    sys.exit(main())
