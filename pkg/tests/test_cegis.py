import numpy as np
import pytest

from corwa.cegis import (
    CONVERGED,
    EXHAUSTED,
    CegisConfig,
    augment_counterexamples,
    run_cegis,
)
from corwa.config import config_from_dict
from corwa.scenario import build_scenario, init_certificate
from corwa.training import TrainingConfig, sample_dataset
from corwa.verifier import VerificationOutcome


def tiny_scenario():
    cfg = config_from_dict({
        "scenario": "di2", "seed": 0,
        "topology": {"q": 2, "m": 2, "radius": 10.0, "position_slice": [0]},
        "dynamics": {"coupling": 0.05, "u_max": 1.5, "sim_dt": 0.05, "sim_steps": 50},
        "sets": {"goal_radius": 0.5, "initial_low": [-1.2, -0.3],
                 "initial_high": [-0.2, 0.3],
                 "domain_low": [-2.0, -0.8], "domain_high": [2.0, 0.8],
                 "unsafe_coord": 0, "unsafe_threshold": 1.4, "unsafe_side": "above",
                 "safe_band": 0.4, "positivity_radius": 0.1},
        "nets": {"h_hidden": [4]},
    })
    return build_scenario(cfg)


@pytest.fixture(scope="module")
def scenario():
    return tiny_scenario()


def base_train_cfg(seed=0):
    return TrainingConfig(learning_rate=0.01, epochs=2, batch_size=16,
                          dataset_size=64, seed=seed, lie_step=1e-3)


class TestRunCegis:
    def test_already_verified_returns_immediately(self, scenario):
        cert, coupling = init_certificate(scenario, seed=0)
        calls = {"n": 0}

        def verify(c, mult):
            calls["n"] += 1
            return [VerificationOutcome("Verified", 0, "lyap_positive", ())]

        cert, report = run_cegis(scenario, cert, coupling, base_train_cfg(),
                                 CegisConfig(max_iterations=10, seed=0),
                                 dataset=sample_dataset(scenario, base_train_cfg()),
                                 verify_fn=verify)
        assert report.final_status == CONVERGED
        assert report.verification_passes == 1
        assert calls["n"] == 1
        assert len(report.iterations) == 1

    def test_fixed_counterexample_frozen_training_exhausts(self, scenario):
        cert, coupling = init_certificate(scenario, seed=1)
        witness = np.stack([scenario.model.domain[j].center for j in range(2)])

        def verify(c, mult):
            return [VerificationOutcome("Counterexample", 0, "lyap_decrement", (),
                                        witness=witness.copy(),
                                        witness_residual=1.0)]

        tcfg = base_train_cfg()
        tcfg.learning_rate = 0.0
        cert, report = run_cegis(scenario, cert, coupling, tcfg,
                                 CegisConfig(max_iterations=5, seed=0),
                                 dataset=sample_dataset(scenario, tcfg),
                                 verify_fn=verify)
        assert report.final_status == EXHAUSTED
        assert len(report.iterations) == 5

    def test_unknown_triggers_one_budget_doubling(self, scenario):
        cert, coupling = init_certificate(scenario, seed=2)
        mults = []

        def verify(c, mult):
            mults.append(mult)
            if len(mults) < 2:
                return [VerificationOutcome("Unknown", 0, "lyap_decrement", ())]
            return [VerificationOutcome("Verified", 0, "lyap_decrement", ())]

        cert, report = run_cegis(scenario, cert, coupling, base_train_cfg(),
                                 CegisConfig(max_iterations=3, seed=0),
                                 dataset=sample_dataset(scenario, base_train_cfg()),
                                 verify_fn=verify)
        assert mults == [1, 2]
        assert report.final_status == CONVERGED

    def test_dataset_grows_monotonically(self, scenario):
        cert, coupling = init_certificate(scenario, seed=3)
        witness = np.stack([scenario.model.domain[j].center for j in range(2)])
        sizes = []
        dataset = sample_dataset(scenario, base_train_cfg())

        def verify(c, mult):
            sizes.append(len(dataset))
            return [VerificationOutcome("Counterexample", 0, "lyap_decrement", (),
                                        witness=witness.copy(),
                                        witness_residual=1.0)]

        run_cegis(scenario, cert, coupling, base_train_cfg(),
                  CegisConfig(max_iterations=4, seed=0),
                  dataset=dataset, verify_fn=verify)
        assert all(b >= a for a, b in zip(sizes, sizes[1:]))
        assert sizes[-1] > sizes[0]


class TestAugment:
    def test_one_witness_adds_21_samples(self, scenario):
        dataset = []
        rng = np.random.default_rng(0)
        witness = np.stack([scenario.model.domain[j].center for j in range(2)])
        idx = augment_counterexamples(scenario, dataset, [witness],
                                      CegisConfig(augment_count=20, seed=0),
                                      rng, weight=5.0)
        assert len(idx) == 21
        assert len(dataset) == 21
        assert all(dataset[k].weight == 5.0 for k in idx)

    def test_zero_witnesses_no_change(self, scenario):
        dataset = []
        rng = np.random.default_rng(0)
        idx = augment_counterexamples(scenario, dataset, [],
                                      CegisConfig(seed=0), rng, weight=5.0)
        assert idx == [] and dataset == []

    def test_variants_clipped_to_domain(self, scenario):
        dataset = []
        rng = np.random.default_rng(1)
        corner = np.stack([scenario.model.domain[j].upper for j in range(2)])
        augment_counterexamples(scenario, dataset, [corner],
                                CegisConfig(augment_count=20, noise_scale=0.5,
                                            seed=0), rng, weight=2.0)
        for s in dataset:
            for j in range(2):
                assert scenario.model.domain[j].contains(s.x[j])

    def test_deterministic_given_seed(self, scenario):
        witness = np.stack([scenario.model.domain[j].center for j in range(2)])
        outs = []
        for _ in range(2):
            dataset = []
            rng = np.random.default_rng(7)
            augment_counterexamples(scenario, dataset, [witness],
                                    CegisConfig(seed=0), rng, weight=1.0)
            outs.append(np.stack([s.x for s in dataset]))
        assert np.array_equal(outs[0], outs[1])
