"""Counterexample-guided inductive synthesis: alternate certificate
training with formal verification, feeding verifier witnesses back into
the training set until every query verifies or the iteration budget is
exhausted.
"""

from __future__ import annotations

import time
from dataclasses import dataclass, field

import numpy as np

from .certificate import CoRwaCertificate, CouplingParams
from .dynamics import compute_lipschitz_budget, fit_surrogate
from .topology import JointState
from .training import Sample, TrainingConfig, sample_dataset, train_round
from .verifier import (
    COUNTEREXAMPLE,
    UNKNOWN,
    VERIFIED,
    VerificationProblem,
    compute_margins,
    verify_agent,
)

CONVERGED = "CertifiedConverged"
EXHAUSTED = "IterationBudgetExhausted"


@dataclass
class CegisConfig:
    max_iterations: int = 100
    augment_count: int = 20          # Gaussian variants per counterexample
    noise_scale: float = 0.01        # fraction of each dimension's width
    cex_weight: float = 5.0
    cex_weight_decay: float = 0.5
    double_budget_on_unknown: bool = True
    seed: int = 0

    def __post_init__(self):
        if self.max_iterations <= 0 or self.augment_count <= 0:
            raise ValueError("counts must be positive")


@dataclass
class CegisReport:
    iterations: list = field(default_factory=list)
    final_status: str = EXHAUSTED
    verification_passes: int = 0

    def to_dict(self):
        return {
            "final_status": self.final_status,
            "verification_passes": self.verification_passes,
            "iterations": self.iterations,
        }

    def summary_table(self):
        lines = ["iter  cex  unknown  verified  train_loss  val_loss"]
        for it in self.iterations:
            lines.append(
                "{iteration:4d}  {counterexamples:3d}  {unknowns:7d}  "
                "{verified:8d}  {train_loss:10.4g}  {val_loss:8.4g}".format(**it))
        lines.append(f"status: {self.final_status}")
        return "\n".join(lines)


def augment_counterexamples(scenario, dataset: list[Sample], witnesses,
                            config: CegisConfig, rng, weight: float):
    """Append each witness plus `augment_count` Gaussian-perturbed
    variants (componentwise noise scaled by the domain width, clipped to
    the domain), tagged through the scenario geometry. Returns the
    indices of the new samples."""
    model, topo = scenario.model, scenario.topo
    widths = np.stack([model.domain[j].width for j in range(topo.q)])
    lows = np.stack([model.domain[j].lower for j in range(topo.q)])
    highs = np.stack([model.domain[j].upper for j in range(topo.q)])
    new_idx = []
    for w in witnesses:
        w = np.asarray(w, dtype=float)
        pts = [w]
        for _ in range(config.augment_count):
            noise = rng.normal(size=w.shape) * config.noise_scale * widths
            pts.append(np.clip(w + noise, lows, highs))
        for x in pts:
            joint = JointState(x)
            tags = [scenario.region_tag(joint, j) for j in range(topo.q)]
            nom = np.stack([scenario.nominal(joint, j) for j in range(topo.q)])
            bs = [bool(scenario.barrier_safe(joint, j)) for j in range(topo.q)]
            new_idx.append(len(dataset))
            dataset.append(Sample(x, tags, nominal=nom, weight=weight,
                                  barrier_safe=bs))
    return new_idx


def run_cegis(scenario, cert: CoRwaCertificate, coupling: CouplingParams,
              train_cfg: TrainingConfig, cegis_cfg: CegisConfig,
              dataset: list[Sample] | None = None, verify_fn=None,
              surrogate=None, checkpoint=None, log=None):
    """Algorithm: verify the current certificate; if every query is
    Verified, stop with CertifiedConverged. Otherwise augment the
    dataset with witnesses, train one round, and repeat. Unknown
    outcomes block convergence; the box budget is doubled once before
    they count as failures.
    """
    vcfg = scenario.cfg.verifier
    model, topo = scenario.model, scenario.topo
    if dataset is None:
        dataset = sample_dataset(scenario, train_cfg)
    if surrogate is None and verify_fn is None:
        surrogate = fit_surrogate(
            model, topo, {i: scenario.patterns[i] for i in range(topo.q)},
            points_per_dim=vcfg.surrogate_points,
            hidden=list(vcfg.surrogate_hidden),
            budget=vcfg.surrogate_budget, seed=cegis_cfg.seed)
    domains = scenario.query_domains()
    budget_mult = 1

    def default_verify(c, mult):
        lb = compute_lipschitz_budget(model, c, topo)
        eps = np.array([surrogate.eps_hat(i) for i in range(topo.q)])
        margins = compute_margins(lb, vcfg.t_step, eps)
        problem = VerificationProblem(model, topo, vcfg.t_step, margins,
                                      scenario.patterns)
        outcomes = []
        for i in range(topo.q):
            outcomes.extend(verify_agent(
                c, surrogate, problem, i, domains,
                max_depth=vcfg.max_depth, max_boxes=vcfg.max_boxes * mult))
        return outcomes

    verify = verify_fn if verify_fn is not None else (
        lambda c, mult: default_verify(c, mult))

    report = CegisReport()
    cex_samples = []                # (index, iteration added)
    last_train = {"total": float("nan"), "val_total": float("nan")}
    status = EXHAUSTED
    for it in range(cegis_cfg.max_iterations):
        t0 = time.monotonic()
        outcomes = verify(cert, budget_mult)
        report.verification_passes += 1
        ce = [o for o in outcomes if o.status == COUNTEREXAMPLE]
        unk = [o for o in outcomes if o.status == UNKNOWN]
        ver = [o for o in outcomes if o.status == VERIFIED]
        if not ce and unk and budget_mult == 1 and cegis_cfg.double_budget_on_unknown:
            budget_mult = 2
            outcomes = verify(cert, budget_mult)
            report.verification_passes += 1
            ce = [o for o in outcomes if o.status == COUNTEREXAMPLE]
            unk = [o for o in outcomes if o.status == UNKNOWN]
            ver = [o for o in outcomes if o.status == VERIFIED]
        entry = {
            "iteration": it,
            "counterexamples": len(ce),
            "unknowns": len(unk),
            "verified": len(ver),
            "train_loss": last_train["total"],
            "val_loss": last_train["val_total"],
            "dataset_size": len(dataset),
            "wall_time": 0.0,
        }
        if log:
            log(f"[cegis] iter {it}: {len(ce)} cex, {len(unk)} unknown, "
                f"{len(ver)} verified")
        if not ce and not unk:
            entry["wall_time"] = time.monotonic() - t0
            report.iterations.append(entry)
            status = CONVERGED
            break
        rng = np.random.default_rng(cegis_cfg.seed * 7919 + it)
        # decay the emphasis of earlier counterexample batches
        for idx, _ in cex_samples:
            dataset[idx].weight = max(
                1.0, dataset[idx].weight * cegis_cfg.cex_weight_decay)
        if ce:
            new_idx = augment_counterexamples(
                scenario, dataset, [o.witness for o in ce], cegis_cfg, rng,
                cegis_cfg.cex_weight)
            cex_samples.extend((k, it) for k in new_idx)
        near = [w for o in unk for w in o.frontier]
        if near:
            # unresolved frontier centers are near-violations: train on
            # them at reduced emphasis so thin margins get widened
            new_idx = augment_counterexamples(
                scenario, dataset, near, cegis_cfg, rng,
                max(2.0, 0.5 * cegis_cfg.cex_weight))
            cex_samples.extend((k, it) for k in new_idx)
        # anneal across rounds: the decay schedule runs on the global
        # epoch counter so late rounds make smaller, non-oscillating steps
        round_cfg = TrainingConfig(
            learning_rate=train_cfg.lr_at(it * train_cfg.epochs),
            decay_factor=train_cfg.decay_factor,
            decay_interval=train_cfg.decay_interval,
            epochs=train_cfg.epochs,
            batch_size=train_cfg.batch_size,
            dataset_size=train_cfg.dataset_size,
            val_split=train_cfg.val_split,
            seed=train_cfg.seed + it,
            lie_step=train_cfg.lie_step,
            unsafe_fraction=train_cfg.unsafe_fraction,
            boundary_fraction=train_cfg.boundary_fraction)
        curve = train_round(cert, coupling, dataset, round_cfg, topo, model)
        last_train = {"total": curve[-1]["total"], "val_total": curve[-1]["val_total"]}
        entry["train_loss"] = last_train["total"]
        entry["val_loss"] = last_train["val_total"]
        entry["wall_time"] = time.monotonic() - t0
        report.iterations.append(entry)
        if checkpoint:
            checkpoint(cert, it)
    report.final_status = status
    return cert, report
