"""Command-line entry point: ``gmce {gen,train,eval,gradcheck,reproduce-3path,run-gridworld}``.

Exit codes: 0 success, 2 usage or input error, 3 numerical failure.
Every command writes ``run_manifest.json`` into its output directory, also on
failure.
"""

from __future__ import annotations

import argparse
import csv
import hashlib
import io
import json
import logging
import os
import sys
import time
from pathlib import Path

import numpy as np

from . import __version__
from .environments import (
    ROADNET_THETA_MU,
    ROADNET_THETA_R,
    GridConfig,
    ThreePathConfig,
    build_gridworld,
    build_synthetic_roadnet,
    build_three_path,
    generate_dataset,
    gridworld_rewards,
    three_path_theta,
    value_iteration,
)
from .evaluation import (
    METRIC_LABELS,
    dataset_log_prob,
    export_reward_table,
    matching_metrics,
    reward_table,
)
from .gfunc import GSpec, identity_theta
from .io import (
    FormatError,
    atomic_write_text,
    check_features,
    load_features,
    load_mdp,
    load_trajectories,
    save_features,
    save_mdp,
    save_trajectories,
    write_json,
)
from .mdp import DimensionError, Trajectory, validate_mdp, validate_trajectory
from .solver import NumericalError, RewardModel, enumerate_paths, gmce_backward, trajectory_log_prob
from .training import FitConfig, FittedModel, finite_diff_check, fit

log = logging.getLogger("gmce")

EXIT_OK, EXIT_INPUT, EXIT_NUMERIC = 0, 2, 3


class InputError(Exception):
    pass


class Run:
    """Collects artifacts, digests and timings for the run manifest."""

    def __init__(self, args, argv):
        self.args = args
        self.argv = list(argv)
        self.out_dir = Path(args.out_dir)
        self.artifacts: list[str] = []
        self.inputs: dict[str, str] = {}
        self.timings: dict[str, float] = {}
        self.t0 = time.perf_counter()

    def path(self, name) -> Path:
        p = self.out_dir / name
        self.artifacts.append(str(p))
        return p

    def input(self, path) -> Path:
        path = Path(path)
        if not path.is_file():
            raise InputError(f"input file not found: {path}")
        self.inputs[str(path)] = hashlib.sha256(path.read_bytes()).hexdigest()
        return path

    def timed(self, name):
        run = self

        class _Timer:
            def __enter__(self):
                self.t = time.perf_counter()

            def __exit__(self, *exc):
                run.timings[name] = round(time.perf_counter() - self.t, 6)

        return _Timer()

    def write_manifest(self, error=None):
        flags = {k: v for k, v in vars(self.args).items() if k != "func"}
        manifest = {
            "command": self.args.command,
            "argv": self.argv,
            "flags": flags,
            "seeds": {k: v for k, v in flags.items() if "seed" in k},
            "version": __version__,
            "threads": os.environ.get("GMCE_THREADS"),
            "inputs": self.inputs,
            "artifacts": self.artifacts,
            "timings": {**self.timings, "total": round(time.perf_counter() - self.t0, 6)},
            "error": error,
        }
        self.out_dir.mkdir(parents=True, exist_ok=True)
        write_json(self.out_dir / "run_manifest.json", manifest)


# ---------------------------------------------------------------------- gen


def _write_env(run, mdp, features):
    save_mdp(mdp, run.path("mdp.json"))
    save_features(features, run.path("features.json"))


def _write_dataset(run, ds):
    save_trajectories(ds.train, run.path("train.jsonl"))
    save_trajectories(ds.test, run.path("test.jsonl"))
    save_trajectories(ds.train + ds.test, run.path("trajectories.jsonl"))
    write_json(run.path("dataset.json"), dict(ds.metadata))


def gen_gridworld(run, args):
    cfg = GridConfig(args.width, args.height, args.slip, horizon=args.horizon or 50)
    mdp, features = build_gridworld(cfg)
    truth = gridworld_rewards(cfg)
    policy, values = value_iteration(mdp, features.reward_tensor(mdp) @ truth)
    ds = generate_dataset(mdp, policy, args.n, args.split, args.seed, start=cfg.start_state)
    _write_env(run, mdp, features)
    _write_dataset(run, ds)
    write_json(
        run.path("gridworld.json"),
        {
            "width": cfg.width,
            "height": cfg.height,
            "slip": cfg.slip,
            "start": cfg.start_state,
            "terminal": cfg.terminal_state,
            "horizon": cfg.horizon,
            "step_reward": cfg.step_reward,
            "terminal_reward": cfg.terminal_reward,
            "rewards": truth.tolist(),
            "expert_policy": {str(s): a for s, a in policy.items()},
            "values": values.tolist(),
        },
    )
    return f"gridworld: {len(ds.train)} train / {len(ds.test)} test trajectories"


def gen_threepath(run, args):
    cfg = ThreePathConfig(args.example, horizon=args.horizon)
    mdp, features = build_three_path(cfg)
    _write_env(run, mdp, features)
    theta = three_path_theta(cfg)
    paths = enumerate_paths(
        mdp, 0, mdp.n_states - 1, mdp.horizon, rewards=lambda s, a: float(features.reward_features[(s, a)] @ theta)
    )
    write_json(
        run.path("rewards.json"),
        {
            "example": cfg.example,
            "state_rewards": list(cfg.rewards()),
            "theta_r": theta.tolist(),
            "paths": [{"states": list(p.states), "actions": list(p.actions), "reward": p.reward} for p in paths],
        },
    )
    return f"three-path example {cfg.example}: {len(paths)} origin-destination paths"


def gen_roadnet(run, args):
    net = build_synthetic_roadnet(args.nodes, args.blocks, args.seed)
    mdp, features = net.mdp, net.features
    if args.horizon:
        mdp = mdp.with_horizon(args.horizon)
    truth = GSpec(ROADNET_THETA_MU)
    policy = gmce_backward(mdp, features, RewardModel(ROADNET_THETA_R), truth)
    ds = generate_dataset(mdp, policy, args.n, args.split, args.seed, start=net.origin)
    _write_env(run, mdp, features)
    _write_dataset(run, ds)
    write_json(
        run.path("roadnet.json"),
        {
            "origin": net.origin,
            "blocks": [list(b) for b in net.blocks],
            "theta_r": ROADNET_THETA_R.tolist(),
            "gspec": truth.to_dict(),
        },
    )
    return f"roadnet: {mdp.n_states} links, {len(ds.train)} train / {len(ds.test)} test trajectories"


def cmd_gen(run, args):
    kinds = {"gridworld": gen_gridworld, "threepath": gen_threepath, "roadnet": gen_roadnet}
    if args.kind != "threepath" and not 0 <= args.split <= 1:
        raise InputError("--split must be in [0, 1]")
    with run.timed("gen"):
        msg = kinds[args.kind](run, args)
    print(msg)


# -------------------------------------------------------------------- train


def _load_inputs(run, args, need=("mdp", "features")):
    mdp = load_mdp(run.input(args.mdp))
    if args.horizon:
        mdp = mdp.with_horizon(args.horizon)
    report = validate_mdp(mdp)
    if not report.ok:
        raise InputError(f"{args.mdp}: invalid MDP: " + "; ".join(report.messages()[:5]))
    features = load_features(run.input(args.features))
    try:
        check_features(mdp, features)
    except DimensionError as exc:
        raise InputError(f"{args.features}: {exc}") from exc
    return mdp, features


def _load_trajs(run, path, mdp):
    trajs = load_trajectories(run.input(path))
    for i, tr in enumerate(trajs):
        report = validate_trajectory(mdp, tr)
        if not report.ok:
            raise InputError(f"{path}: trajectory {i}: {report.messages()[0]}")
    return trajs


def _fit_config(args, kind):
    return FitConfig(
        max_iters=args.max_iters,
        grad_tol=args.grad_tol,
        direction=args.direction,
        l2_reg=(args.l2, args.l2),
        freeze_mu=(kind == "mce"),
        seed=args.seed,
        init_noise=args.init_noise,
        mce_warmup=not args.no_warmup,
    )


def _template(args, features, n_states, kind):
    link = "linear" if kind == "mce" else args.link
    return GSpec(identity_theta(features.state_matrix(n_states), link), link=link, mu_floor=args.mu_floor)


def cmd_train(run, args):
    mdp, features = _load_inputs(run, args)
    train = _load_trajs(run, args.train, mdp)
    template = _template(args, features, mdp.n_states, args.model)
    init = None
    if args.init_model:
        warm = FittedModel.from_dict(json.loads(run.input(args.init_model).read_text()))
        theta_mu = warm.theta_mu if warm.gspec.link == template.link else template.theta_mu
        init = (warm.theta_r, theta_mu)
    with run.timed("fit"):
        model = fit(mdp, features, train, template, _fit_config(args, args.model), lam=args.lam, init=init)
    write_json(run.path("model.json"), model.to_dict())
    print(f"{args.model} train LL: {model.ll_trace[-1]:.6f} ({model.iterations_used} iterations, {model.message})")


# --------------------------------------------------------------------- eval


def _grid_shape(args):
    env = Path(args.env) if args.env else Path(args.mdp).with_name("gridworld.json")
    if env.is_file():
        data = json.loads(env.read_text())
        return data["width"], data["height"]
    return None


def evaluate_model(model, mdp, features, test, train=None, max_len=None):
    policy = model.policy(mdp, features)
    report = matching_metrics(policy, mdp, test, max_len)
    metrics = {METRIC_LABELS["test_log_prob"]: dataset_log_prob(policy, test)}
    if train is not None:
        metrics["Log Prob. (training)"] = dataset_log_prob(policy, train)
    metrics.update(
        {
            METRIC_LABELS["avg_matching"]: report.avg_matching,
            METRIC_LABELS["ninety_matching"]: report.ninety_matching,
            METRIC_LABELS["mean_path_prob"]: report.mean_path_prob,
        }
    )
    return policy, report, metrics


def _metrics_csv(metrics: dict) -> str:
    buf = io.StringIO()
    w = csv.writer(buf, lineterminator="\n")
    w.writerow(["metric", "value"])
    for k, v in metrics.items():
        w.writerow([k, repr(float(v))])
    return buf.getvalue()


def cmd_eval(run, args):
    mdp, features = _load_inputs(run, args)
    model = FittedModel.from_dict(json.loads(run.input(args.model).read_text()))
    if model.theta_r.size != features.d_reward or model.theta_mu.size != features.d_mu:
        raise InputError(
            f"model dimensions ({model.theta_r.size}, {model.theta_mu.size}) do not match features "
            f"({features.d_reward}, {features.d_mu})"
        )
    test = _load_trajs(run, args.test, mdp)
    train = _load_trajs(run, args.train, mdp) if args.train else None
    with run.timed("eval"):
        policy, report, metrics = evaluate_model(model, mdp, features, test, train, args.max_len)
    write_json(run.path("metrics.json"), {"model": model.kind, **metrics, "matching": report.to_dict()})
    atomic_write_text(run.path("metrics.csv"), _metrics_csv(metrics))
    export_reward_table(model, features, mdp, args.out_dir, "reward_table", _grid_shape(args), title=f"{model.kind} reward")
    run.artifacts += [str(Path(args.out_dir) / "reward_table.csv"), str(Path(args.out_dir) / "reward_table.svg")]
    if args.policy:
        write_json(run.path("policy.json"), policy.to_dict())
    for k, v in metrics.items():
        print(f"{k}: {v:.6g}")


def cmd_gradcheck(run, args):
    mdp, features = _load_inputs(run, args)
    train = _load_trajs(run, args.train, mdp)
    if args.model:
        params = FittedModel.from_dict(json.loads(run.input(args.model).read_text()))
    else:
        template = _template(args, features, mdp.n_states, "gmce")
        params = (RewardModel(np.zeros(features.d_reward), args.lam), template)
    report = finite_diff_check(mdp, features, train, params, args.step)
    write_json(run.path("gradcheck.json"), report.to_dict())
    print(f"max relative error: {report.max_rel:.3g}")


# ---------------------------------------------------------- reproduce-3path


def three_path_sweeps(n_points: int = 61):
    """Path probabilities over mu(1) and the ratio curve over R(4) on example 2."""
    cfg = ThreePathConfig(2)
    mdp, features = build_three_path(cfg)
    theta = three_path_theta(cfg)
    dest = mdp.n_states - 1
    paths = enumerate_paths(mdp, 0, dest, mdp.horizon)
    names = ["{" + ",".join(map(str, p.states)) + "}" for p in paths]

    def path_probs(theta_r, mu1):
        mu = np.ones(mdp.n_states)
        mu[1] = mu1
        policy = gmce_backward(mdp, features, RewardModel(theta_r), GSpec(mu))
        return {n: float(np.exp(trajectory_log_prob(policy, Trajectory.of(p.steps)))) for n, p in zip(names, paths)}

    mu_grid = np.unique(np.concatenate([np.geomspace(1e-3, 2.0, n_points), [1.0, 0.5]]))
    sweep_mu = [(float(m), path_probs(theta, m)) for m in mu_grid]
    for m, pr in sweep_mu:
        # the two routes through link 1 share every link cost but the last, which is equal
        if abs(pr["{0,1,3,5}"] - pr["{0,1,4,5}"]) > 1e-10:
            raise NumericalError(f"P({{0,1,3,5}}) != P({{0,1,4,5}}) at mu(1)={m}")
    r4_grid = np.linspace(-4.0, 0.0, n_points)
    sweep_r4 = []
    for r4 in r4_grid:
        th = theta.copy()
        th[4] = r4
        pr = path_probs(th, 0.5)
        sweep_r4.append((float(r4), pr["{0,1,3,5}"] / pr["{0,2,5}"], pr))
    return names, sweep_mu, sweep_r4


def cmd_reproduce_3path(run, args):
    with run.timed("sweeps"):
        names, sweep_mu, sweep_r4 = three_path_sweeps(args.points)
    buf = io.StringIO()
    w = csv.writer(buf, lineterminator="\n")
    w.writerow(["mu1"] + [f"P{n}" for n in names])
    for m, pr in sweep_mu:
        w.writerow([repr(m)] + [repr(pr[n]) for n in names])
    atomic_write_text(run.path("sweep_mu.csv"), buf.getvalue())
    buf = io.StringIO()
    w = csv.writer(buf, lineterminator="\n")
    w.writerow(["R4", "ratio"] + [f"P{n}" for n in names])
    for r4, ratio, pr in sweep_r4:
        w.writerow([repr(r4), repr(ratio)] + [repr(pr[n]) for n in names])
    atomic_write_text(run.path("sweep_r4.csv"), buf.getvalue())
    from .plotting import path_probability_figure

    path_probability_figure(
        [m for m, _ in sweep_mu],
        {n: [pr[n] for _, pr in sweep_mu] for n in names},
        [r for r, _, _ in sweep_r4],
        [q for _, q, _ in sweep_r4],
        run.path("three_path.svg"),
    )
    at_one = dict(sweep_mu)[1.0]
    print("mu(1)=1: " + ", ".join(f"P{n}={at_one[n]:.6f}" for n in names))
    print(f"ratio at R(4)=-4: {sweep_r4[0][1]:.4f}; at R(4)=0: {sweep_r4[-1][1]:.4f}")


# ------------------------------------------------------------ run-gridworld


def run_gridworld_experiment(out_dir, seed=0, n=200, split=0.8, max_iters=500, horizon=50, link="linear", direction="gradient"):
    """Generate, fit both models, evaluate; returns a summary dict and writes artifacts."""
    out_dir = Path(out_dir)
    cfg = GridConfig(horizon=horizon)
    mdp, features = build_gridworld(cfg)
    truth = gridworld_rewards(cfg)
    expert, _ = value_iteration(mdp, features.reward_tensor(mdp) @ truth)
    ds = generate_dataset(mdp, expert, n, split, seed, start=cfg.start_state)
    phi = features.state_matrix(mdp.n_states)
    mce_cfg = FitConfig(max_iters=max_iters, freeze_mu=True, direction=direction, seed=seed)
    gmce_cfg = FitConfig(max_iters=4 * max_iters, direction=direction, seed=seed)
    timings = {}
    t = time.perf_counter()
    mce = fit(mdp, features, ds.train, GSpec(identity_theta(phi, "linear")), mce_cfg)
    timings["fit_mce"] = time.perf_counter() - t
    t = time.perf_counter()
    gmce = fit(mdp, features, ds.train, GSpec(identity_theta(phi, link), link=link), gmce_cfg)
    timings["fit_gmce"] = time.perf_counter() - t
    summary = {"seed": seed, "n_train": len(ds.train), "n_test": len(ds.test), "models": {}}
    grid = (cfg.width, cfg.height)
    tables = {"actual": truth.reshape(cfg.height, cfg.width)}
    for name, model in (("MCE", mce), ("GMCE", gmce)):
        _, report, metrics = evaluate_model(model, mdp, features, ds.test, ds.train)
        tab = reward_table(model.theta_r, model.gspec, features, mdp)
        tables[name] = tab.rewards.reshape(cfg.height, cfg.width)
        sub = out_dir / name.lower()
        write_json(sub / "model.json", model.to_dict())
        export_reward_table(model, features, mdp, sub, "reward_table", grid, title=f"{name} reward")
        write_json(sub / "metrics.json", {**metrics, "matching": report.to_dict()})
        summary["models"][name] = {
            **metrics,
            "converged": model.converged,
            "iterations": model.iterations_used,
            "reward_argmax": int(np.argmax(tab.rewards)),
        }
    summary["terminal"] = cfg.terminal_state
    summary["timings"] = timings
    from .plotting import ll_trace_figure, reward_heatmaps

    reward_heatmaps(tables, out_dir / "rewards.svg", cmap="viridis")
    ll_trace_figure({"MCE": mce.ll_trace, "GMCE": gmce.ll_trace}, out_dir / "ll_trace.svg")
    rows = ["Log Prob. (training)", METRIC_LABELS["test_log_prob"], METRIC_LABELS["avg_matching"], METRIC_LABELS["ninety_matching"], METRIC_LABELS["mean_path_prob"]]
    buf = io.StringIO()
    w = csv.writer(buf, lineterminator="\n")
    w.writerow(["metric", "MCE", "GMCE"])
    for r in rows:
        w.writerow([r, repr(summary["models"]["MCE"][r]), repr(summary["models"]["GMCE"][r])])
    atomic_write_text(out_dir / "table.csv", buf.getvalue())
    write_json(out_dir / "summary.json", summary)
    return summary


def cmd_run_gridworld(run, args):
    summary = run_gridworld_experiment(args.out_dir, args.seed, args.n, args.split, args.max_iters, args.horizon or 50, args.link, args.direction)
    for name in ("summary.json", "table.csv", "rewards.svg", "ll_trace.svg"):
        run.artifacts.append(str(Path(args.out_dir) / name))
    for m in ("mce", "gmce"):
        for name in ("model.json", "metrics.json", "reward_table.csv", "reward_table.svg"):
            run.artifacts.append(str(Path(args.out_dir) / m / name))
    run.timings.update(summary["timings"])
    print(f"{'':28s}{'MCE':>14s}{'GMCE':>14s}")
    for r in ["Log Prob. (training)", "Log Prob. (test)", "Avg. Matching", "90% Matching", "Prob. of most likely path"]:
        print(f"{r:28s}{summary['models']['MCE'][r]:14.6g}{summary['models']['GMCE'][r]:14.6g}")


# ------------------------------------------------------------------- parser


def _fit_flags(p):
    p.add_argument("--max-iters", type=int, default=500)
    p.add_argument("--grad-tol", type=float, default=1e-5)
    p.add_argument("--link", choices=["linear", "log"], default="linear")
    p.add_argument("--lambda", dest="lam", type=float, default=1.0)
    p.add_argument("--l2", type=float, default=0.0, help="L2 penalty for both parameter blocks")
    p.add_argument("--direction", choices=["gradient", "lbfgs"], default="gradient")
    p.add_argument("--mu-floor", type=float, default=1e-6)
    p.add_argument("--init-noise", type=float, default=0.0)
    p.add_argument("--no-warmup", action="store_true", help="gmce: skip the classical warm-up stage")


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="gmce", description=__doc__.splitlines()[0])
    parser.add_argument("--version", action="version", version=__version__)
    parser.add_argument("-v", "--verbose", action="store_true")
    sub = parser.add_subparsers(dest="command", required=True)

    def common(p, seed=True):
        p.add_argument("--out-dir", default=".")
        p.add_argument("--horizon", type=int, default=None)
        if seed:
            p.add_argument("--seed", type=int, default=0)

    g = sub.add_parser("gen", help="write a built-in environment and demonstrations")
    g.add_argument("kind", choices=["gridworld", "threepath", "roadnet"])
    common(g)
    g.add_argument("--n", type=int, default=200, help="number of trajectories")
    g.add_argument("--split", type=float, default=0.8, help="training fraction")
    g.add_argument("--width", type=int, default=5)
    g.add_argument("--height", type=int, default=5)
    g.add_argument("--slip", type=float, default=0.8)
    g.add_argument("--example", type=int, choices=[1, 2], default=2)
    g.add_argument("--nodes", type=int, default=30)
    g.add_argument("--blocks", type=int, default=3)
    g.set_defaults(func=cmd_gen)

    t = sub.add_parser("train", help="fit a model by maximum likelihood")
    t.add_argument("model", choices=["mce", "gmce"])
    common(t)
    t.add_argument("--mdp", required=True)
    t.add_argument("--features", required=True)
    t.add_argument("--train", required=True)
    t.add_argument("--init-model", default=None, help="warm start from a model.json")
    _fit_flags(t)
    t.set_defaults(func=cmd_train)

    e = sub.add_parser("eval", help="score a fitted model on held-out trajectories")
    common(e, seed=False)
    e.add_argument("--model", required=True)
    e.add_argument("--mdp", required=True)
    e.add_argument("--features", required=True)
    e.add_argument("--test", required=True)
    e.add_argument("--train", default=None)
    e.add_argument("--env", default=None, help="gridworld.json for heatmap layout")
    e.add_argument("--max-len", type=int, default=None)
    e.add_argument("--policy", action="store_true", help="also export the policy log-probabilities")
    e.set_defaults(func=cmd_eval)

    c = sub.add_parser("gradcheck", help="compare the analytic gradient with central differences")
    common(c, seed=False)
    c.add_argument("--mdp", required=True)
    c.add_argument("--features", required=True)
    c.add_argument("--train", required=True)
    c.add_argument("--model", default=None)
    c.add_argument("--step", type=float, default=1e-6)
    _fit_flags(c)
    c.set_defaults(func=cmd_gradcheck)

    r = sub.add_parser("reproduce-3path", help="path-probability sweeps on the overlapping three-path network")
    common(r, seed=False)
    r.add_argument("--points", type=int, default=61)
    r.set_defaults(func=cmd_reproduce_3path)

    w = sub.add_parser("run-gridworld", help="generate, train MCE and GMCE, evaluate")
    common(w)
    w.add_argument("--n", type=int, default=200)
    w.add_argument("--split", type=float, default=0.8)
    w.add_argument("--max-iters", type=int, default=500)
    w.add_argument("--link", choices=["linear", "log"], default="linear")
    w.add_argument("--direction", choices=["gradient", "lbfgs"], default="gradient")
    w.set_defaults(func=cmd_run_gridworld)
    return parser


def main(argv=None) -> int:
    argv = sys.argv[1:] if argv is None else argv
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except SystemExit as exc:
        return int(exc.code or 0)
    logging.basicConfig(level=logging.DEBUG if args.verbose else logging.WARNING, format="%(levelname)s %(name)s: %(message)s")
    run = Run(args, argv)
    code, error = EXIT_OK, None
    try:
        args.func(run, args)
    except NumericalError as exc:
        code, error = EXIT_NUMERIC, f"NumericalError: {exc}"
    except (InputError, FormatError, DimensionError, ValueError, KeyError, OSError) as exc:
        # bad files, bad flag values and unwritable outputs
        code, error = EXIT_INPUT, f"{type(exc).__name__}: {exc}"
    try:
        run.write_manifest(error)
    except OSError as exc:
        print(f"gmce: could not write manifest: {exc}", file=sys.stderr)
        code = code or EXIT_INPUT
    if error:
        print(f"gmce: error: {error}", file=sys.stderr)
    return code


def main_entry():
    sys.exit(main())


if __name__ == "__main__":
    main_entry()
