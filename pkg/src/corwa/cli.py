"""Command-line surface: train, verify, cegis, simulate, transfer,
redver, and report subcommands, each driven by a scenario config file.

Exit codes: 0 on success (for verify/cegis only when the outcome is
Verified/CertifiedConverged), 2 when verification falls short, 1 on
errors.
"""

from __future__ import annotations

import argparse
import csv
import dataclasses
import json
import os
import sys
import time

import numpy as np

from .cegis import CONVERGED, CegisConfig, run_cegis
from .certificate import load_certificate, save_certificate, solve_positive_p
from .config import ScenarioConfig, load_config, save_config
from .dynamics import compute_lipschitz_budget, fit_surrogate
from .scenario import build_scenario, init_certificate
from .simulate import (
    simulate,
    write_metrics,
    write_metrics_csv,
    write_trajectory_csv,
    write_vp_csv,
)
from .training import TrainingConfig, sample_dataset, train_round
from .transfer import (
    SystemSignature,
    TransferRejected,
    chain_role_map,
    find_embedding,
    red_ver,
    transfer_certificate,
)
from .verifier import (
    VERIFIED,
    VerificationProblem,
    agent_verdict,
    compute_margins,
    verify_agent,
)


def _training_config(cfg: ScenarioConfig, seed) -> TrainingConfig:
    t = cfg.training
    return TrainingConfig(
        learning_rate=t.learning_rate, decay_factor=t.decay_factor,
        decay_interval=t.decay_interval, epochs=t.epochs,
        batch_size=t.batch_size, dataset_size=t.dataset_size,
        val_split=t.val_split, seed=seed, lie_step=t.lie_step,
        unsafe_fraction=t.unsafe_fraction,
        boundary_fraction=t.boundary_fraction)


def _cegis_config(cfg: ScenarioConfig, seed) -> CegisConfig:
    c = cfg.cegis
    return CegisConfig(
        max_iterations=c.max_iterations, augment_count=c.augment_count,
        noise_scale=c.noise_scale, cex_weight=c.cex_weight,
        cex_weight_decay=c.cex_weight_decay, seed=seed)


def _write_loss_csv(path, curve):
    with open(path, "w", newline="") as f:
        w = csv.writer(f)
        w.writerow(["epoch", "l_ctrl", "l_clf", "l_cbf", "total", "val_total"])
        for row in curve:
            w.writerow([row["epoch"], row["l_ctrl"], row["l_clf"],
                        row["l_cbf"], row["total"], row["val_total"]])


def _prepare(args):
    cfg = load_config(args.config)
    if args.seed is not None:
        cfg.seed = args.seed
    if args.out is not None:
        cfg.out = args.out
    if getattr(args, "budget", None) is not None:
        cfg.verifier.max_boxes = args.budget
    os.makedirs(cfg.out, exist_ok=True)
    save_config(cfg, os.path.join(cfg.out, "config.yaml"))
    return cfg, build_scenario(cfg)


def cmd_train(args):
    cfg, scn = _prepare(args)
    cert, coupling = init_certificate(scn, seed=cfg.seed)
    tcfg = _training_config(cfg, cfg.seed)
    dataset = sample_dataset(scn, tcfg)
    curve = train_round(cert, coupling, dataset, tcfg, scn.topo, scn.model)
    save_certificate(cert, os.path.join(cfg.out, "certificate.json"))
    _write_loss_csv(os.path.join(cfg.out, "loss.csv"), curve)
    print(f"trained {cfg.scenario}: final loss {curve[-1]['total']:.4g} "
          f"(val {curve[-1]['val_total']:.4g})")
    return 0


def _run_verification(cfg, scn, cert):
    vcfg = cfg.verifier
    surrogate = fit_surrogate(
        scn.model, scn.topo, {i: scn.patterns[i] for i in range(scn.q)},
        points_per_dim=vcfg.surrogate_points, hidden=list(vcfg.surrogate_hidden),
        budget=vcfg.surrogate_budget, seed=cfg.seed)
    budget = compute_lipschitz_budget(scn.model, cert, scn.topo)
    eps = np.array([surrogate.eps_hat(i) for i in range(scn.q)])
    margins = compute_margins(budget, vcfg.t_step, eps)
    problem = VerificationProblem(scn.model, scn.topo, vcfg.t_step, margins,
                                  scn.patterns)
    domains = scn.query_domains()
    outcomes = []
    for i in range(scn.q):
        outcomes.extend(verify_agent(
            cert, surrogate, problem, i, domains,
            max_depth=vcfg.max_depth, max_boxes=vcfg.max_boxes))
    return outcomes


def cmd_verify(args):
    cfg, scn = _prepare(args)
    cert_path = args.cert or os.path.join(cfg.out, "certificate.json")
    cert = load_certificate(cert_path)
    t0 = time.monotonic()
    outcomes = _run_verification(cfg, scn, cert)
    verdict = agent_verdict(outcomes)
    payload = {
        "verdict": verdict,
        "wall_time": time.monotonic() - t0,
        "queries": [o.to_dict() for o in outcomes],
    }
    with open(os.path.join(cfg.out, "verification.json"), "w") as f:
        json.dump(payload, f, indent=2)
    print(f"verification verdict: {verdict} "
          f"({len(outcomes)} queries, {payload['wall_time']:.1f}s)")
    return 0 if verdict == VERIFIED else 2


def cmd_cegis(args):
    cfg, scn = _prepare(args)
    cert, coupling = init_certificate(scn, seed=cfg.seed)
    tcfg = _training_config(cfg, cfg.seed)
    ccfg = _cegis_config(cfg, cfg.seed)

    def checkpoint(c, it):
        save_certificate(c, os.path.join(cfg.out, f"certificate_iter{it:03d}.json"))

    cert, report = run_cegis(scn, cert, coupling, tcfg, ccfg,
                             checkpoint=checkpoint, log=print)
    save_certificate(cert, os.path.join(cfg.out, "certificate.json"))
    with open(os.path.join(cfg.out, "cegis.json"), "w") as f:
        json.dump(report.to_dict(), f, indent=2)
    with open(os.path.join(cfg.out, "cegis_summary.txt"), "w") as f:
        f.write(report.summary_table() + "\n")
    print(report.summary_table())
    return 0 if report.final_status == CONVERGED else 2


def cmd_simulate(args):
    cfg, scn = _prepare(args)
    cert_path = args.cert or os.path.join(cfg.out, "certificate.json")
    cert = load_certificate(cert_path)
    if len(cert.v_nets) != scn.q:
        raise ValueError("certificate agent count does not match the scenario")
    result = simulate(scn, cert, seed=cfg.seed)
    write_trajectory_csv(os.path.join(cfg.out, "trajectory.csv"), result)
    write_metrics(os.path.join(cfg.out, "metrics.json"), result.metrics)
    write_metrics_csv(os.path.join(cfg.out, "metrics.csv"), result.metrics)
    write_vp_csv(os.path.join(cfg.out, "vp.csv"), result)
    print(json.dumps(result.metrics.to_dict(), indent=2))
    return 0


def cmd_transfer(args):
    cfg, scn = _prepare(args)
    large_cfg = load_config(args.large_config)
    if args.seed is not None:
        large_cfg.seed = args.seed
    large_scn = build_scenario(large_cfg)
    cert = load_certificate(args.cert)
    tau = find_embedding(SystemSignature.of(scn.model, scn.topo),
                         SystemSignature.of(large_scn.model, large_scn.topo))
    if tau is None:
        print("no substructure embedding exists")
        return 3
    role_map = chain_role_map(scn.q, large_scn.q)
    try:
        big = transfer_certificate(cert, tau, scn.topo, large_scn.topo, role_map)
    except TransferRejected as e:
        print(f"transfer rejected: {e}")
        return 3
    out = os.path.join(cfg.out, "certificate_transferred.json")
    save_certificate(big, out)
    print(f"transferred certificate written to {out} (tau = {tau})")
    return 0


def cmd_redver(args):
    cfg, scn = _prepare(args)
    sizes = [int(s) for s in args.sizes.split(",")]
    calls = {"train": 0}

    def make_scenario(size):
        c = load_config(args.config)
        c.seed = cfg.seed
        c.topology = dataclasses.replace(c.topology, q=size)
        return build_scenario(c)

    def train_once(scenario):
        calls["train"] += 1
        cert, coupling = init_certificate(scenario, seed=cfg.seed)
        tcfg = _training_config(cfg, cfg.seed)
        ccfg = _cegis_config(cfg, cfg.seed)
        cert, report = run_cegis(scenario, cert, coupling, tcfg, ccfg, log=print)
        print(f"redver base training: {report.final_status}")
        return cert

    rows, certs = red_ver(make_scenario, sizes, train_once, rng_seed=cfg.seed)
    path = os.path.join(cfg.out, "redver.csv")
    with open(path, "w", newline="") as f:
        w = csv.writer(f)
        w.writerow(["size", "train_time", "transfer_time", "spot_verdict",
                    "residual_gap"])
        for row in rows:
            w.writerow(row.to_list())
    for size, cert in certs.items():
        save_certificate(cert, os.path.join(cfg.out, f"certificate_n{size}.json"))
    print(f"training invoked {calls['train']} time(s); report at {path}")
    return 0 if calls["train"] == 1 else 1


def cmd_report(args):
    return render_report(args.artifacts)


def render_report(artifacts_dir):
    """Render summary tables and SVG plots from a run directory."""
    import matplotlib
    matplotlib.use("Agg")
    import matplotlib.pyplot as plt

    needed = ["trajectory.csv", "metrics.json"]
    missing = [f for f in needed if not os.path.exists(os.path.join(artifacts_dir, f))]
    if missing:
        raise FileNotFoundError(
            f"missing artifacts in {artifacts_dir}: expected {missing}")

    rows = []
    with open(os.path.join(artifacts_dir, "trajectory.csv")) as f:
        for rec in csv.DictReader(f):
            rows.append(rec)
    agents = sorted({int(r["agent"]) for r in rows})
    state_cols = [k for k in rows[0] if k.startswith("x")]

    fig, ax = plt.subplots(figsize=(7, 5))
    for i in agents:
        pts = [(float(r["t"]),) + tuple(float(r[c]) for c in state_cols)
               for r in rows if int(r["agent"]) == i]
        pts.sort()
        arr = np.array(pts)
        if len(state_cols) >= 2:
            ax.plot(arr[:, 1], arr[:, 2], label=f"agent {i}")
        else:
            ax.plot(arr[:, 0], arr[:, 1], label=f"agent {i}")
    ax.legend()
    ax.set_title("trajectories")
    fig.savefig(os.path.join(artifacts_dir, "trajectory.svg"))
    plt.close(fig)

    vp_path = os.path.join(artifacts_dir, "vp.csv")
    if os.path.exists(vp_path):
        with open(vp_path) as f:
            data = np.array([[float(r["t"]), float(r["vp"]), float(r["bound"])]
                             for r in csv.DictReader(f)])
        fig, ax = plt.subplots(figsize=(7, 4))
        ax.semilogy(data[:, 0], np.maximum(data[:, 1], 1e-12), label="V_p")
        ax.semilogy(data[:, 0], np.maximum(data[:, 2], 1e-12), "--",
                    label="exponential bound")
        ax.legend()
        ax.set_title("comparison Lyapunov decay")
        fig.savefig(os.path.join(artifacts_dir, "vp_decay.svg"))
        plt.close(fig)

    loss_path = os.path.join(artifacts_dir, "loss.csv")
    if os.path.exists(loss_path):
        with open(loss_path) as f:
            recs = list(csv.DictReader(f))
        fig, ax = plt.subplots(figsize=(7, 4))
        for key in ("l_ctrl", "l_clf", "l_cbf", "total", "val_total"):
            ax.plot([float(r["epoch"]) for r in recs],
                    [float(r[key]) for r in recs], label=key)
        ax.legend()
        ax.set_title("training loss")
        fig.savefig(os.path.join(artifacts_dir, "loss.svg"))
        plt.close(fig)

    cert_path = os.path.join(artifacts_dir, "certificate.json")
    cfg_path = os.path.join(artifacts_dir, "config.yaml")
    if os.path.exists(cert_path) and os.path.exists(cfg_path):
        _render_contours(artifacts_dir, cert_path, cfg_path, plt)

    with open(os.path.join(artifacts_dir, "metrics.json")) as f:
        metrics = json.load(f)
    with open(os.path.join(artifacts_dir, "metrics_table.csv"), "w", newline="") as f:
        w = csv.writer(f)
        w.writerow(list(metrics.keys()))
        w.writerow(list(metrics.values()))
    print(f"report rendered into {artifacts_dir}")
    return 0


def _render_contours(artifacts_dir, cert_path, cfg_path, plt, grid=200):
    cert = load_certificate(cert_path)
    cfg = load_config(cfg_path)
    scn = build_scenario(cfg)
    dom = scn.model.domain[0]
    xs = np.linspace(dom.lower[0], dom.upper[0], grid)
    ys = np.linspace(dom.lower[1], dom.upper[1], grid)
    vx = np.zeros((grid, grid))
    hx = np.zeros((grid, grid))
    base = dom.center
    m0 = scn.topo.max_neighborhood[0] * scn.model.n
    for a, x in enumerate(xs):
        for b, y in enumerate(ys):
            state = base.copy()
            state[0], state[1] = x, y
            vx[b, a] = cert.v_value(0, state)
            ext = np.zeros(m0)
            ext[: scn.model.n] = state
            hx[b, a] = cert.h_value(0, ext)
    for name, z in (("v_contour", vx), ("h_contour", hx)):
        fig, ax = plt.subplots(figsize=(6, 5))
        cs = ax.contourf(xs, ys, z, levels=30)
        fig.colorbar(cs)
        if name == "h_contour":
            ax.contour(xs, ys, z, levels=[0.0], colors="red")
        ax.set_title(name)
        fig.savefig(os.path.join(artifacts_dir, f"{name}.svg"))
        plt.close(fig)


def main(argv=None):
    parser = argparse.ArgumentParser(
        prog="corwa",
        description="cooperative reach-while-avoid certificates: synthesis, "
                    "verification, transfer, and experiments")
    sub = parser.add_subparsers(dest="command", required=True)

    def common(p, cert_opt=False):
        p.add_argument("--config", required=True, help="scenario config path")
        p.add_argument("--seed", type=int, default=None, help="seed override")
        p.add_argument("--out", default=None, help="output directory override")
        p.add_argument("--budget", type=int, default=None,
                       help="verifier box budget override")
        if cert_opt:
            p.add_argument("--cert", default=None, help="certificate path")

    common(sub.add_parser("train", help="one training round"))
    common(sub.add_parser("verify", help="verify a certificate"), cert_opt=True)
    common(sub.add_parser("cegis", help="run the synthesis loop"))
    common(sub.add_parser("simulate", help="closed-loop rollout"), cert_opt=True)
    p = sub.add_parser("transfer", help="transfer a certificate to a larger system")
    common(p, cert_opt=True)
    p.add_argument("--large-config", required=True)
    p = sub.add_parser("redver", help="train once, transfer across sizes")
    common(p)
    p.add_argument("--sizes", default="3,6,30")
    p = sub.add_parser("report", help="render plots and tables")
    p.add_argument("--artifacts", required=True)

    args = parser.parse_args(argv)
    handlers = {
        "train": cmd_train, "verify": cmd_verify, "cegis": cmd_cegis,
        "simulate": cmd_simulate, "transfer": cmd_transfer,
        "redver": cmd_redver, "report": cmd_report,
    }
    try:
        return handlers[args.command](args)
    except (ValueError, FileNotFoundError, RuntimeError) as e:
        print(f"error: {e}", file=sys.stderr)
        return 1


if __name__ == "__main__":
    sys.exit(main())
