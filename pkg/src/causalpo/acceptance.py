"""The acceptance suite and the one-shot ``reproduce-all`` runner.

Each ``criterion_*`` function returns a CriterionResult whose ``measured``
lines hold the numbers behind the verdict. ``reproduce_all`` runs the whole
pipeline, every criterion, and writes ``report.md``; a failing step is
recorded and the remaining independent steps still run.
"""
import filecmp
import json
import math
import os
import tempfile
import time
import traceback
from dataclasses import dataclass, field

import numpy as np

from . import experiment as ex
from .estimators import WeightOptions, v_dr, v_ipw, v_out
from .evaluation import build_scenario, bias_variance_experiment, prediction_mse, random_triple, write_csv
from .optimizer import TrainConfig, draw_minibatch, estimate_on_batch, objective_gradient, surrogate_value, train
from .outcome_model import OutcomeModel
from .policy import mle_fit, random_policy
from .simulator import Population, run_experiment
from .textspace import Vocab

RUNTIME_BUDGET_C1 = 120.0

TITLES = {
    1: "IPW unbiasedness with known randomization",
    2: "DR unbiased under a confounded outcome model",
    3: "DR unbiased under an estimated randomization density",
    4: "DR variance below IPW with a good outcome model",
    5: "Optimization efficacy against FT",
    6: "Robustness to a confounded outcome model",
    7: "Gradient correctness",
    8: "Exact identities",
    9: "Determinism of reproduce-all",
}


@dataclass
class CriterionResult:
    number: int
    title: str
    passed: bool
    measured: list = field(default_factory=list)
    elapsed: float = 0.0  # wall time; kept out of the report so reruns stay identical

    @property
    def status(self):
        return "PASS" if self.passed else "FAIL"


def _acc(cfg, key, default):
    return int(cfg.acceptance.get(key, default))


def _triple_seed(cfg, purpose, i):
    return cfg.seed_for(purpose) + 1000 * i


def _ratio(report):
    return report.bias / report.se_mean if report.se_mean > 0 else math.inf


def criterion_1(cfg, threads=1, reports=None):
    R, n = _acc(cfg, "replicates", 1000), _acc(cfg, "n", 2000)
    t0 = time.perf_counter()
    ok, lines = True, []
    for i in range(_acc(cfg, "triples", 5)):
        seed = _triple_seed(cfg, "acceptance.ipw", i)
        rep = bias_variance_experiment("ipw", build_scenario("ipw-known", seed, n=n), R, seed + 500, threads)
        ok &= rep.unbiased(3.0)
        lines.append(f"triple {i}: V(f)={rep.true_value:.4f} mean={rep.mean:.4f} bias/SE={_ratio(rep):+.2f}")
        if reports is not None:
            reports.append(rep)
    elapsed = time.perf_counter() - t0
    in_budget = elapsed < RUNTIME_BUDGET_C1
    lines.append(f"runtime within {RUNTIME_BUDGET_C1:.0f} s budget: {'yes' if in_budget else 'no'}")
    return CriterionResult(1, TITLES[1], bool(ok and in_budget), lines, elapsed)


def criterion_2(cfg, threads=1, reports=None):
    R, n, m = _acc(cfg, "replicates", 1000), _acc(cfg, "n", 2000), _acc(cfg, "m", 2000)
    ok, lines = True, []
    for i in range(_acc(cfg, "triples", 5)):
        seed = _triple_seed(cfg, "acceptance.wrong_ghat", i)
        sc = build_scenario("negated-ghat", seed, n=n, m=m)
        dr = bias_variance_experiment("dr", sc, R, seed + 500, threads)
        out = bias_variance_experiment("out", sc, R, seed + 500, threads)
        ok &= dr.unbiased(3.0) and abs(_ratio(out)) > 10
        lines.append(f"triple {i}: DR bias/SE={_ratio(dr):+.2f}, outcome-only bias/SE={_ratio(out):+.1f}")
        if reports is not None:
            reports.extend([dr, out])
    return CriterionResult(2, TITLES[2], bool(ok), lines)


def criterion_3(cfg, threads=1, reports=None):
    R, n, m = _acc(cfg, "replicates", 1000), _acc(cfg, "n", 2000), _acc(cfg, "m", 2000)
    dr_ok, ipw_biased, lines = True, False, []
    for i in range(_acc(cfg, "triples", 5)):
        seed = _triple_seed(cfg, "acceptance.estimated_pr", i)
        sc = build_scenario("estimated-pr", seed, n=n, m=m)
        dr = bias_variance_experiment("dr", sc, R, seed + 500, threads)
        ipw = bias_variance_experiment("ipw", sc, R, seed + 500, threads)
        dr_ok &= dr.unbiased(3.0)
        ipw_biased |= abs(_ratio(ipw)) > 3
        lines.append(f"triple {i}: DR bias/SE={_ratio(dr):+.2f}, IPW with estimated density bias/SE={_ratio(ipw):+.1f}")
        if reports is not None:
            reports.extend([dr, ipw])
    return CriterionResult(3, TITLES[3], bool(dr_ok and ipw_biased), lines)


def criterion_4(cfg, threads=1, reports=None):
    R = _acc(cfg, "replicates", 1000)
    n, factor = _acc(cfg, "variance_n", 500), _acc(cfg, "variance_m_factor", 100)
    ok, lines = True, []
    for i in range(_acc(cfg, "triples", 5)):
        seed = _triple_seed(cfg, "acceptance.variance", i)
        sc = build_scenario("variance", seed, n=n, m_factor=factor)
        mspe, g2 = prediction_mse(sc.ghat, sc.pop, sc.assignment)
        dr = bias_variance_experiment("dr", sc, R, seed + 500, threads)
        ipw = bias_variance_experiment("ipw", sc, R, seed + 500, threads)
        ok &= mspe < g2 and dr.variance < ipw.variance
        lines.append(
            f"triple {i}: MSPE={mspe:.4f} < E[g^2]={g2:.3f}; Var(DR)={dr.variance:.5f} vs Var(IPW)={ipw.variance:.5f}"
        )
        if reports is not None:
            reports.extend([dr, ipw])
    # not a gate: with a pure-noise outcome model the ordering may flip
    seed = _triple_seed(cfg, "acceptance.variance", 0)
    sc = build_scenario("noise-ghat", seed, n=n, m_factor=factor)
    dr = bias_variance_experiment("dr", sc, R, seed + 500, threads)
    ipw = bias_variance_experiment("ipw", sc, R, seed + 500, threads)
    lines.append(f"noise outcome model (informational): Var(DR)={dr.variance:.4f} vs Var(IPW)={ipw.variance:.4f}")
    if reports is not None:
        reports.extend([dr, ipw])
    return CriterionResult(4, TITLES[4], bool(ok), lines)


def _row(rows, **match):
    for r in rows:
        if all(r.get(k) == v for k, v in match.items()):
            return r
    return None


def criterion_5(results):
    if results is None:
        return CriterionResult(5, TITLES[5], False, ["evaluation results unavailable (see failed steps)"])
    ok, lines = True, []
    ft = _row(results["reward_table"], policy="FT", propensity="known")
    for arm in ("CPO", "DRCPO"):
        wr = _row(results["win_rates"], policy_a=arm, policy_b="FT")
        tv = _row(results["reward_table"], policy=arm, propensity="known")
        if wr is None or tv is None or ft is None:
            ok = False
            lines.append(f"{arm}: missing from the evaluation results")
            continue
        ok &= wr["rate"] > 0.5 and wr["ci_low"] > 0.5 and tv["true_value"] > ft["true_value"]
        lines.append(
            f"{arm} vs FT: win rate {wr['rate']:.4f} [{wr['ci_low']:.4f}, {wr['ci_high']:.4f}]; "
            f"V={tv['true_value']:.4f} vs FT {ft['true_value']:.4f}"
        )
    return CriterionResult(5, TITLES[5], bool(ok), lines)


def criterion_6(results):
    if results is None:
        return CriterionResult(6, TITLES[6], False, ["evaluation results unavailable (see failed steps)"])
    rows = {r["method"]: r for r in results["confounding_impact"]}
    missing = [m for m in ("CPO", "DRCPO", "OORLHF") if m not in rows]
    if missing:
        return CriterionResult(6, TITLES[6], False, [f"missing impact rows: {', '.join(missing)}"])
    cpo, dr, oo = rows["CPO"], rows["DRCPO"], rows["OORLHF"]
    oo_ok = oo["ci_high"] < 0
    dr_ok = not dr["ci_high"] < cpo["ci_low"]
    cpo_ok = cpo["ci_low"] <= 0 <= cpo["ci_high"]
    lines = [
        f"{m}: impact {r['impact']:+.4f} [{r['ci_low']:+.4f}, {r['ci_high']:+.4f}]"
        for m, r in (("OORLHF", oo), ("DRCPO", dr), ("CPO", cpo))
    ]
    return CriterionResult(6, TITLES[6], bool(oo_ok and dr_ok and cpo_ok), lines)


def _fd_grad(f, theta, h):
    grad = np.zeros_like(theta)
    flat = theta.reshape(-1)
    out = grad.reshape(-1)
    for i in range(flat.size):
        keep = flat[i]
        flat[i] = keep + h
        up = f()
        flat[i] = keep - h
        down = f()
        flat[i] = keep
        out[i] = (up - down) / (2 * h)
    return grad


def _rel(a, b):
    return float(np.linalg.norm(a - b) / max(np.linalg.norm(b), 1e-300))


_OPTS = (
    WeightOptions(),
    WeightOptions(self_normalize=True),
    WeightOptions(clip_max=3.0),
    WeightOptions(self_normalize=True, clip_max=3.0),
)


def gradient_instance(seed, i):
    """Relative FD errors (log-prob gradient, objective gradient) for one random instance."""
    rng = np.random.default_rng([seed, i])
    vocab = Vocab(int(rng.integers(2, 4)), int(rng.integers(1, 4)))
    order = int(rng.integers(0, 3))
    policy = random_policy(vocab, rng, order, 1.0, "f")
    text = rng.integers(0, vocab.size, vocab.seq_len)
    analytic = policy.grad_log_prob(text)
    fd = _fd_grad(lambda: policy.log_prob(text), policy.logits, 1e-6)
    err_logp = _rel(fd, analytic)

    pop = Population.random(vocab, rng, 1.0, 1.0, 1.0)
    assignment = random_policy(vocab, rng, 1, 0.5, "assignment")
    ds = run_experiment(pop, assignment, 40, rng)
    ghat = OutcomeModel(vocab, rng.standard_normal(vocab.feature_dim(2)), 2, 0.0)
    f0 = random_policy(vocab, rng, 1, 0.5, "f0")
    cfg = TrainConfig(
        objective=("CPO", "DRCPO", "OORLHF")[i % 3],
        batch=(None, 25)[(i // 3) % 2],
        m_per_step=30,
        weight_opts=_OPTS[i % 4],
        seed=i,
    )
    state = np.random.default_rng([seed, i, 1])
    replay = np.random.default_rng([seed, i, 1])
    estimate, grad = objective_gradient(cfg, policy, ds, assignment, ghat, f0, state)
    batch = draw_minibatch(cfg, ds, replay) if cfg.objective != "OORLHF" else None
    est = estimate_on_batch(cfg, policy, batch, assignment, ghat, f0, replay)
    if est.value != estimate:
        return err_logp, math.inf
    probe = policy.copy()
    fd = _fd_grad(lambda: surrogate_value(probe, policy, est.terms), probe.logits, 1e-6)
    return err_logp, _rel(fd, grad)


def criterion_7(cfg):
    seed = cfg.seed_for("acceptance.gradients")
    count = _acc(cfg, "gradient_instances", 100)
    errs = np.array([gradient_instance(seed, i) for i in range(count)])
    worst_lp, worst_obj = errs.max(axis=0)
    ok = worst_lp < 1e-6 and worst_obj < 1e-4
    lines = [
        f"{count} instances; worst log-prob gradient relative error {worst_lp:.2e} (< 1e-6)",
        f"worst objective gradient relative error {worst_obj:.2e} (< 1e-4)",
    ]
    return CriterionResult(7, TITLES[7], bool(ok), lines)


def identity_checks(seed):
    """Each exact identity as (name, holds)."""
    policy, pop, assignment = random_triple(seed)
    f0 = random_policy(pop.vocab, np.random.default_rng([seed, 1]), 1, 0.5, "f0")
    ds = run_experiment(pop, assignment, 300, np.random.default_rng([seed, 2]))
    zero = OutcomeModel.constant(pop.vocab, 0.0)
    checks = []
    for opts in _OPTS:
        a = v_dr(policy, ds, assignment, zero, f0, 200, np.random.default_rng([seed, 3]), opts).value
        b = v_ipw(policy, ds, assignment, opts).value
        checks.append((f"DR with zero outcome model == IPW [{opts.describe()}]", a == b))

    exact = Population(pop.vocab, pop.g_weights, 0.0)
    ds0 = run_experiment(exact, assignment, 300, np.random.default_rng([seed, 4]))
    g = OutcomeModel.from_population(exact)
    for opts in _OPTS:
        a = v_dr(policy, ds0, assignment, g, f0, 200, np.random.default_rng([seed, 5]), opts).value
        b = v_out(policy, f0, g, 200, np.random.default_rng([seed, 5]), opts).value
        checks.append((f"DR with exact g and no noise == outcome-only [{opts.describe()}]", a == b))

    checks.append(("IPW at f = P^R == mean(Y)", v_ipw(assignment, ds).value == float(np.mean(ds.outcomes))))

    ft = mle_fit(ds.texts, pop.vocab, 1, 0.5, "FT")
    for objective in ("CPO", "DRCPO", "OORLHF"):
        cfg = TrainConfig(objective, steps=5, learning_rate=0.0, m_per_step=50, seed=seed)
        trained, _ = train(cfg, ft, ds, assignment, zero, f0)
        checks.append((f"{objective} with learning rate 0 returns the FT policy", np.array_equal(trained.logits, ft.logits)))
    return checks


def criterion_8(cfg):
    checks = identity_checks(cfg.seed_for("acceptance.identities"))
    failed = [name for name, ok in checks if not ok]
    lines = [f"{len(checks) - len(failed)}/{len(checks)} identities hold bitwise"]
    lines += [f"failed: {name}" for name in failed]
    return CriterionResult(8, TITLES[8], not failed, lines)


# ---------------------------------------------------------------- runner


def pipeline_steps(cfg, out_dir, plot=False):
    steps = [
        ("simulate", lambda: ex.simulate(cfg, out_dir)),
        ("fit-outcome", lambda: ex.fit_outcome(cfg, out_dir)),
    ]
    for arm, (method, variant) in ex.ARMS.items():
        steps.append((f"train {arm}", lambda m=method, v=variant: ex.train_arm(cfg, out_dir, m, v)))
    steps.append(("evaluate", lambda: ex.evaluate(cfg, out_dir, plot)))
    return steps


def _tree(root, skip):
    files = []
    for dirpath, _, names in os.walk(root):
        for name in names:
            rel = os.path.relpath(os.path.join(dirpath, name), root)
            if rel not in skip:
                files.append(rel)
    return sorted(files)


def _manifest_without(path, rel):
    with open(path) as fh:
        data = json.load(fh)
    data["files"].pop(rel, None)
    return data


def compare_runs(dir_a, dir_b):
    """Paths whose bytes differ between two output trees (report excluded)."""
    skip = {"report.md", ex.MANIFEST}
    files_a, files_b = _tree(dir_a, skip), _tree(dir_b, skip)
    diffs = sorted(set(files_a) ^ set(files_b))
    for rel in sorted(set(files_a) & set(files_b)):
        if not filecmp.cmp(os.path.join(dir_a, rel), os.path.join(dir_b, rel), shallow=False):
            diffs.append(rel)
    ma, mb = os.path.join(dir_a, ex.MANIFEST), os.path.join(dir_b, ex.MANIFEST)
    if os.path.exists(ma) != os.path.exists(mb) or (
        os.path.exists(ma) and _manifest_without(ma, "report.md") != _manifest_without(mb, "report.md")
    ):
        diffs.append(ex.MANIFEST)
    return diffs


@dataclass
class ReproduceResult:
    criteria: list
    failures: list  # (step, message)
    report_path: str

    @property
    def passed(self):
        return not self.failures and all(c.passed for c in self.criteria)

    def vector(self):
        return [c.passed for c in self.criteria]


def _criterion_error(number, exc):
    return CriterionResult(number, TITLES[number], False, [f"error: {type(exc).__name__}: {exc}"])


def reproduce_all(cfg, out_dir, threads=1, plot=False, check_determinism=True, log=None):
    """simulate -> fit -> train every arm -> evaluate -> acceptance suite -> report.md."""
    log = log or (lambda msg: None)
    failures = []
    results = None
    for name, step in pipeline_steps(cfg, out_dir, plot):
        log(f"step: {name}")
        try:
            out = step()
        except Exception as exc:  # keep going; dependent steps will report their own failure
            failures.append((name, f"{type(exc).__name__}: {exc}"))
            log(traceback.format_exc())
            continue
        if name == "evaluate":
            results = out

    reports = []
    criteria = []
    runners = [
        (1, lambda: criterion_1(cfg, threads, reports)),
        (2, lambda: criterion_2(cfg, threads, reports)),
        (3, lambda: criterion_3(cfg, threads, reports)),
        (4, lambda: criterion_4(cfg, threads, reports)),
        (5, lambda: criterion_5(results)),
        (6, lambda: criterion_6(results)),
        (7, lambda: criterion_7(cfg)),
        (8, lambda: criterion_8(cfg)),
    ]
    for number, run in runners:
        log(f"criterion {number}: {TITLES[number]}")
        t0 = time.perf_counter()
        try:
            res = run()
        except Exception as exc:
            res = _criterion_error(number, exc)
            log(traceback.format_exc())
        res.elapsed = res.elapsed or time.perf_counter() - t0
        criteria.append(res)

    ws = ex.Workspace(cfg, out_dir)
    if reports:
        rel = "acceptance/bias_variance.csv"
        write_csv([r.as_row() for r in reports], ws.path(rel))
        ws.record(rel, "reproduce-all", {
            p: cfg.seed_for(p) for p in ("acceptance.ipw", "acceptance.wrong_ghat",
                                         "acceptance.estimated_pr", "acceptance.variance")
        })

    if check_determinism:
        log("criterion 9: second run for the determinism check")
        t0 = time.perf_counter()
        ws.save_manifest()
        with tempfile.TemporaryDirectory() as tmp:
            try:
                again = reproduce_all(cfg, tmp, threads, plot, check_determinism=False)
                diffs = compare_runs(out_dir, tmp)
                same_vector = again.vector() == [c.passed for c in criteria]
                lines = [f"{len(diffs)} differing files" + (f": {', '.join(diffs[:5])}" if diffs else ""),
                         f"identical PASS/FAIL vector: {'yes' if same_vector else 'no'}"]
                res = CriterionResult(9, TITLES[9], not diffs and same_vector, lines)
            except Exception as exc:
                res = _criterion_error(9, exc)
        res.elapsed = time.perf_counter() - t0
        criteria.append(res)

    report = ws.path("report.md")
    with open(report, "w") as fh:
        fh.write(render_report(cfg, criteria, failures))
    ws.record("report.md", "reproduce-all", {"master": cfg.seed})
    ws.save_manifest()
    return ReproduceResult(criteria, failures, report)


def render_report(cfg, criteria, failures):
    lines = [
        "# Reproduction report",
        "",
        f"- config: `{os.path.basename(cfg.path)}` (sha256 `{cfg.text_hash[:16]}`)",
        f"- master seed: {cfg.seed}",
        "",
        "## Pipeline steps",
        "",
    ]
    if failures:
        lines += [f"- FAILED `{step}`: {msg}" for step, msg in failures]
    else:
        lines.append("- all steps completed")
    lines += ["", "## Acceptance criteria", "", "| # | criterion | result | measured |", "|---|---|---|---|"]
    for c in criteria:
        lines.append(f"| {c.number} | {c.title} | {c.status} | {'<br>'.join(c.measured)} |")
    passed = sum(c.passed for c in criteria)
    lines += ["", f"{passed}/{len(criteria)} criteria passed.", ""]
    return "\n".join(lines)
