"""End-to-end experiment pipeline: simulate, fit outcome models, train, evaluate.

Everything lives under one output directory::

    population.json              ground-truth g and noise level
    policies/assignment.json     randomization density P^R
    data/randomized.jsonl        D_R, the training experiment
    data/outcome_randomized.jsonl  separate randomized rows for fitting g-hat
    data/outcome_confounded.jsonl  the same rows after the confounder
    data/evaluation.jsonl        held-out randomized rows for the reward table
    data/text_frequencies.csv    empirical vs. assigned text frequencies of D_R
    models/ghat_{clean,confounded}.json, models/pr_hat.json
    policies/<arm>.json, traces/<arm>.csv
    results/*.csv, results/*.txt
    manifest.json                one entry per emitted file

Arms are FT, the three objectives trained with the clean outcome model, a
reseeded CPO run, and DR-CPO / OO-RLHF trained with the confounded model.
"""
import hashlib
import json
import os

import numpy as np
from scipy.stats import binom

from . import outcome_model
from .errors import MissingArtifact
from .estimators import WeightOptions
from .evaluation import confounding_impact, format_table, reward_table, win_rate, write_csv
from .optimizer import train, write_trace
from .policy import Policy, mle_fit, random_policy, uniform_policy
from .simulator import LabeledDataset, Population, confound, run_experiment, true_value
from .textspace import enumerate_texts

METHODS = ("FT", "CPO", "DRCPO", "OORLHF")
VARIANTS = ("clean", "confounded", "reseed")

# arm name -> (method, variant); the order is the row order of every table
ARMS = {
    "FT": ("FT", "clean"),
    "CPO": ("CPO", "clean"),
    "CPO-reseed": ("CPO", "reseed"),
    "DRCPO": ("DRCPO", "clean"),
    "DRCPO-confounded": ("DRCPO", "confounded"),
    "OORLHF": ("OORLHF", "clean"),
    "OORLHF-confounded": ("OORLHF", "confounded"),
}

# method -> (confounded arm, clean arm) for the confounding-impact table
IMPACT_PAIRS = {
    "CPO": ("CPO-reseed", "CPO"),
    "DRCPO": ("DRCPO-confounded", "DRCPO"),
    "OORLHF": ("OORLHF-confounded", "OORLHF"),
}

POPULATION = "population.json"
ASSIGNMENT = "policies/assignment.json"
D_R = "data/randomized.jsonl"
D_OUTCOME = "data/outcome_randomized.jsonl"
D_CONFOUNDED = "data/outcome_confounded.jsonl"
D_EVAL = "data/evaluation.jsonl"
FREQUENCIES = "data/text_frequencies.csv"
GHAT = {"clean": "models/ghat_clean.json", "confounded": "models/ghat_confounded.json"}
PR_HAT = "models/pr_hat.json"
MANIFEST = "manifest.json"


def arm_name(method, variant="clean"):
    if method not in METHODS:
        raise ValueError(f"method must be one of {METHODS}")
    if variant not in VARIANTS:
        raise ValueError(f"variant must be one of {VARIANTS}")
    if method == "FT":
        if variant != "clean":
            raise ValueError("FT has no variants")
        return "FT"
    if variant == "clean":
        return method
    name = f"{method}-{variant}"
    if name not in ARMS:
        raise ValueError(f"{method} has no {variant!r} variant")
    return name


def _sha256(path):
    h = hashlib.sha256()
    with open(path, "rb") as fh:
        for chunk in iter(lambda: fh.read(1 << 20), b""):
            h.update(chunk)
    return h.hexdigest()


class Workspace:
    """Paths, artifact loading and manifest bookkeeping for one output directory."""

    def __init__(self, cfg, out_dir):
        self.cfg = cfg
        self.out_dir = out_dir
        os.makedirs(out_dir, exist_ok=True)
        self._manifest = self._read_manifest()

    def path(self, rel):
        full = os.path.join(self.out_dir, rel)
        os.makedirs(os.path.dirname(full), exist_ok=True)
        return full

    def exists(self, rel):
        return os.path.exists(os.path.join(self.out_dir, rel))

    def require(self, rel, step):
        if not self.exists(rel):
            raise MissingArtifact(
                f"{rel} not found in {self.out_dir}; run `causalpo {step} --config "
                f"{self.cfg.path} --out-dir {self.out_dir}` first"
            )
        return os.path.join(self.out_dir, rel)

    # manifest

    def _read_manifest(self):
        fresh = {
            "config": os.path.basename(self.cfg.path),
            "config_hash": self.cfg.text_hash,
            "master_seed": self.cfg.seed,
            "files": {},
            "checks": {},
        }
        if self.exists(MANIFEST):
            with open(os.path.join(self.out_dir, MANIFEST)) as fh:
                old = json.load(fh)
            if old.get("config_hash") == self.cfg.text_hash:
                return old
        return fresh

    def record(self, rel, command, seeds=None):
        self._manifest["files"][rel] = {
            "command": command,
            "config_hash": self.cfg.text_hash,
            "seeds": {k: int(v) for k, v in sorted((seeds or {}).items())},
            "sha256": _sha256(os.path.join(self.out_dir, rel)),
        }

    def check(self, name, value):
        self._manifest["checks"][name] = value

    def save_manifest(self):
        with open(os.path.join(self.out_dir, MANIFEST), "w") as fh:
            json.dump(self._manifest, fh, indent=1, sort_keys=True)
            fh.write("\n")

    # artifacts

    def population(self):
        with open(self.require(POPULATION, "simulate")) as fh:
            return Population.from_dict(json.load(fh))

    def assignment(self):
        return Policy.load(self.require(ASSIGNMENT, "simulate"))

    def dataset(self, rel):
        assignment = self.assignment()
        ds = LabeledDataset.load(self.require(rel, "simulate"), None)
        if ds.provenance.randomized:
            ds.assignment = assignment
        return ds

    def ghat(self, variant):
        return outcome_model.OutcomeModel.load(self.require(GHAT[variant], "fit-outcome"))

    def pr_hat(self):
        return Policy.load(self.require(PR_HAT, "fit-outcome"))

    def policy(self, arm):
        return Policy.load(self.require(f"policies/{arm}.json", f"train --method {ARMS[arm][0]}"))

    def trained_arms(self):
        return [a for a in ARMS if self.exists(f"policies/{a}.json")]


def build_assignment(cfg):
    if cfg.assignment_kind == "uniform":
        return uniform_policy(cfg.vocab, cfg.assignment_order, "assignment")
    rng = np.random.default_rng(cfg.seed_for("assignment"))
    return random_policy(cfg.vocab, rng, cfg.assignment_order, cfg.assignment_scale, "assignment")


def frequency_rows(ds, assignment, level=0.99):
    """Empirical text counts against exact binomial bounds under ``assignment``.

    Each row carries a pointwise ``level`` interval and a Bonferroni-adjusted
    interval valid simultaneously over all texts.
    """
    texts = enumerate_texts(ds.vocab)
    p = np.exp(assignment.log_prob_batch(texts))
    codes = np.zeros(len(ds), dtype=np.int64)
    for t in range(ds.vocab.seq_len):
        codes = codes * ds.vocab.size + ds.texts[:, t]
    counts = np.bincount(codes, minlength=texts.shape[0])
    n = len(ds)
    alpha = 1 - level
    family = alpha / texts.shape[0]
    rows = []
    for text, c, q in zip(texts.tolist(), counts.tolist(), p.tolist()):
        lo, hi = binom.ppf([alpha / 2, 1 - alpha / 2], n, q)
        flo, fhi = binom.ppf([family / 2, 1 - family / 2], n, q)
        rows.append({
            "text": " ".join(map(str, text)),
            "count": int(c),
            "frequency": c / n,
            "expected": q,
            "lower_99": int(lo), "upper_99": int(hi),
            "lower_99_simultaneous": int(flo), "upper_99_simultaneous": int(fhi),
        })
    return rows


def simulate(cfg, out_dir):
    ws = Workspace(cfg, out_dir)
    cmd = "simulate"
    pop = cfg.build_population()
    with open(ws.path(POPULATION), "w") as fh:
        json.dump(pop.to_dict(), fh, indent=1, sort_keys=True)
        fh.write("\n")
    ws.record(POPULATION, cmd, {"population": cfg.seed_for("population")})

    assignment = build_assignment(cfg)
    assignment.save(ws.path(ASSIGNMENT))
    ws.record(ASSIGNMENT, cmd, {"assignment": cfg.seed_for("assignment")})

    d_r = run_experiment(pop, assignment, cfg.n, np.random.default_rng(cfg.seed_for("randomized")))
    d_o = run_experiment(pop, assignment, cfg.n_outcome, np.random.default_rng(cfg.seed_for("outcome_data")))
    d_e = run_experiment(pop, assignment, cfg.n, np.random.default_rng(cfg.seed_for("evaluation_data")))
    d_c = confound(d_o, cfg.confounder, pop, np.random.default_rng(cfg.seed_for("confound")))
    for rel, ds, seeds in (
        (D_R, d_r, {"randomized": cfg.seed_for("randomized")}),
        (D_OUTCOME, d_o, {"outcome_data": cfg.seed_for("outcome_data")}),
        (D_EVAL, d_e, {"evaluation_data": cfg.seed_for("evaluation_data")}),
        (D_CONFOUNDED, d_c, {"outcome_data": cfg.seed_for("outcome_data"), "confound": cfg.seed_for("confound")}),
    ):
        ds.save(ws.path(rel))
        ws.record(rel, cmd, seeds)

    if cfg.vocab.n_texts <= 10**5:
        rows = frequency_rows(d_r, assignment)
        write_csv(rows, ws.path(FREQUENCIES))
        ws.record(FREQUENCIES, cmd, {"randomized": cfg.seed_for("randomized")})
        ws.check("text_frequencies", {
            "n": len(d_r),
            "texts": len(rows),
            "outside_99_pointwise": sum(not r["lower_99"] <= r["count"] <= r["upper_99"] for r in rows),
            "outside_99_simultaneous": sum(
                not r["lower_99_simultaneous"] <= r["count"] <= r["upper_99_simultaneous"] for r in rows
            ),
        })
    ws.save_manifest()
    return ws


def fit_outcome(cfg, out_dir):
    ws = Workspace(cfg, out_dir)
    cmd = "fit-outcome"
    for variant, rel in (("clean", D_OUTCOME), ("confounded", D_CONFOUNDED)):
        model = outcome_model.fit(ws.dataset(rel), cfg.feature_order, cfg.ridge_lambda)
        model.save(ws.path(GHAT[variant]))
        ws.record(GHAT[variant], cmd)
    d_r = ws.dataset(D_R)
    assignment = ws.assignment()
    pr_hat = mle_fit(d_r.texts, cfg.vocab, assignment.order, cfg.smoothing, "pr-hat")
    pr_hat.save(ws.path(PR_HAT))
    ws.record(PR_HAT, cmd)
    ws.save_manifest()
    return ws


def _ensure_inputs(cfg, ws, auto_build):
    needed = (POPULATION, ASSIGNMENT, D_R, D_OUTCOME, D_CONFOUNDED, D_EVAL, GHAT["clean"], GHAT["confounded"], PR_HAT)
    if all(ws.exists(rel) for rel in needed) or not auto_build:
        return
    if not all(ws.exists(rel) for rel in needed[:6]):
        simulate(cfg, ws.out_dir)
    fit_outcome(cfg, ws.out_dir)
    ws._manifest = ws._read_manifest()


def reference_policy(cfg, ws, ft):
    if cfg.reference == "uniform":
        return uniform_policy(cfg.vocab, cfg.policy_order, "f0")
    if cfg.reference == "ft":
        return ft
    return ws.assignment()


def randomization_density(cfg, ws):
    return ws.assignment() if cfg.propensity == "known" else ws.pr_hat()


def train_arm(cfg, out_dir, method, variant="clean", auto_build=False):
    """Fit FT by maximum likelihood, then run ``method`` from it; persist the result."""
    arm = arm_name(method, variant)
    ws = Workspace(cfg, out_dir)
    _ensure_inputs(cfg, ws, auto_build)
    d_r = ws.dataset(D_R)
    ft = mle_fit(d_r.texts, cfg.vocab, cfg.policy_order, cfg.smoothing, "FT")
    cmd = f"train --method {method} --variant {variant}"
    if method == "FT":
        ft.save(ws.path("policies/FT.json"))
        ws.record("policies/FT.json", cmd)
        ws.save_manifest()
        return ft, []
    pop = ws.population()
    ghat = ws.ghat("confounded" if variant == "confounded" else "clean") if method != "CPO" else None
    pR = randomization_density(cfg, ws)
    f0 = reference_policy(cfg, ws, ft)
    purpose = f"train.{arm}"
    tcfg = cfg.train_config(method, purpose)
    policy, trace = train(tcfg, ft, d_r if method != "OORLHF" else None, pR, ghat, f0, pop)
    policy.name = arm
    policy.save(ws.path(f"policies/{arm}.json"))
    write_trace(trace, ws.path(f"traces/{arm}.csv"))
    for rel in (f"policies/{arm}.json", f"traces/{arm}.csv"):
        ws.record(rel, cmd, {purpose: tcfg.seed})
    ws.save_manifest()
    return policy, trace


def _emit(ws, rows, name, fields, cmd, seeds):
    write_csv(rows, ws.path(f"results/{name}.csv"), fields)
    with open(ws.path(f"results/{name}.txt"), "w") as fh:
        fh.write(format_table(rows, fields))
    for ext in ("csv", "txt"):
        ws.record(f"results/{name}.{ext}", cmd, seeds)


WIN_FIELDS = ["policy_a", "policy_b", "wins", "ties", "total", "rate", "ci_low", "ci_high"]
REWARD_FIELDS = ["policy", "propensity", "dr", "dr_se", "ipw", "ipw_se", "out", "out_se", "stabilization", "true_value"]
IMPACT_FIELDS = ["method", "confounded_arm", "clean_arm", "impact", "ci_low", "ci_high", "significant"]


def evaluate(cfg, out_dir, plot=False):
    """Win-rate matrix, reward table and confounding-impact table over the trained arms.

    Returns a dict with the row lists, keyed like the result files.
    """
    ws = Workspace(cfg, out_dir)
    arms = ws.trained_arms()
    if not arms:
        raise MissingArtifact(
            f"no trained policies in {out_dir}; run `causalpo train --method <M> "
            f"--config {cfg.path} --out-dir {out_dir}` first"
        )
    policies = {a: ws.policy(a) for a in arms}
    pop = ws.population()
    cmd = "evaluate"

    seed_w = cfg.seed_for("evaluate.win_rates")
    win_rows = []
    for i, a in enumerate(arms):
        for j, b in enumerate(arms):
            rng = np.random.default_rng([seed_w, i, j])
            wr = win_rate(policies[a], policies[b], pop, cfg.pairs, rng, cfg.interval)
            win_rows.append({"policy_a": a, "policy_b": b, "wins": wr.wins, "ties": wr.ties,
                             "total": wr.total, "rate": wr.rate, "ci_low": wr.ci_low, "ci_high": wr.ci_high})
    _emit(ws, win_rows, "win_rates", WIN_FIELDS, cmd, {"evaluate.win_rates": seed_w})

    seed_r = cfg.seed_for("evaluate.reward_table")
    d_e = ws.dataset(D_EVAL)
    ghat = ws.ghat("clean")
    ft = mle_fit(ws.dataset(D_R).texts, cfg.vocab, cfg.policy_order, cfg.smoothing, "FT")
    f0 = reference_policy(cfg, ws, ft)
    stabilized = WeightOptions(cfg.training["self_normalize"], cfg.training["clip_max"])
    all_opts = [stabilized] if stabilized == WeightOptions() else [WeightOptions(), stabilized]
    reward_rows = []
    for label, density in (("known", ws.assignment()), ("estimated", ws.pr_hat())):
        for opts in all_opts:
            rows = reward_table(policies, d_e, density, ghat, f0, cfg.eval_m, opts, seed_r, pop)
            for row in rows:
                row["propensity"] = label
            reward_rows.extend(rows)
    _emit(ws, reward_rows, "reward_table", REWARD_FIELDS, cmd, {"evaluate.reward_table": seed_r})

    seed_i = cfg.seed_for("evaluate.impact")
    impact_rows = []
    for k, (method, (conf_arm, clean_arm)) in enumerate(IMPACT_PAIRS.items()):
        if conf_arm not in policies or clean_arm not in policies:
            continue
        res = confounding_impact(method, policies[conf_arm], policies[clean_arm], pop, cfg.pairs,
                                 np.random.default_rng([seed_i, k]))
        impact_rows.append({"method": method, "confounded_arm": conf_arm, "clean_arm": clean_arm,
                            "impact": res.impact, "ci_low": res.ci_low, "ci_high": res.ci_high,
                            "significant": res.significant})
    if impact_rows:
        _emit(ws, impact_rows, "confounding_impact", IMPACT_FIELDS, cmd, {"evaluate.impact": seed_i})

    if plot:
        _emit_plots(ws, arms, policies, pop, win_rows, impact_rows, cmd)
    ws.save_manifest()
    return {"win_rates": win_rows, "reward_table": reward_rows, "confounding_impact": impact_rows}


def _emit_plots(ws, arms, policies, pop, win_rows, impact_rows, cmd):
    """x,y CSVs: true value per arm, win rate vs. FT per arm, impact per method."""
    series = {
        "plot_true_value": [{"x": a, "y": true_value(policies[a], pop)} for a in arms],
        "plot_win_rate_vs_ft": [
            {"x": r["policy_a"], "y": r["rate"]} for r in win_rows if r["policy_b"] == "FT"
        ],
        "plot_confounding_impact": [{"x": r["method"], "y": r["impact"]} for r in impact_rows],
    }
    for name, rows in series.items():
        if rows:
            write_csv(rows, ws.path(f"results/{name}.csv"), ["x", "y"])
            ws.record(f"results/{name}.csv", cmd)
