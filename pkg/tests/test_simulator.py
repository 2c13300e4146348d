import math

import numpy as np
import pytest
from scipy.stats import spearmanr

from cfseq.simulator import (
    ConfigError,
    DomainError,
    PatientParams,
    SimulationConfig,
    chemo_concentration,
    continue_trajectory,
    diameter_from_volume,
    enumerate_one_step_counterfactuals,
    generate_dataset,
    load_bundles,
    load_dataset,
    one_step_bundles,
    sample_patient_params,
    save_bundles,
    save_dataset,
    simulate_trajectory,
    sliding_treatment_counterfactuals,
    treatment_probability,
    tumor_step,
    unit_rng,
)


def _component(weight, mean=0.07, std=0.01, low=0.03, high=0.12):
    def tn(m, s, lo, hi):
        return {"mean": m, "std": s, "low": lo, "high": hi}
    return {"weight": weight, "params": {
        "rho": tn(mean, std, low, high),
        "carrying_capacity": tn(1000.0, std * 1000, 500.0, 1150.0),
        "beta_c": tn(0.02, std, 0.0, 0.05),
        "alpha_r": tn(0.03, std, 0.0, 0.06),
        "beta_r": tn(0.003, std / 10, 0.0, 0.006),
    }}


# --- patient sampling


def test_degenerate_spec_returns_means():
    spec = {"components": [_component(1.0, std=0.0)]}
    p = sample_patient_params(np.random.default_rng(0), spec)
    assert (p.rho, p.carrying_capacity, p.beta_c, p.alpha_r, p.beta_r) == (0.07, 1000.0, 0.02, 0.03, 0.003)
    assert p.mixture_component == 0


def test_draws_respect_truncation_bounds():
    spec = {"components": [_component(1.0, std=0.05, low=0.05, high=0.08)]}
    rng = np.random.default_rng(1)
    rhos = np.array([sample_patient_params(rng, spec).rho for _ in range(10_000)])
    assert rhos.min() >= 0.05 and rhos.max() <= 0.08


def test_component_frequencies_match_weights():
    w = np.array([0.2, 0.3, 0.5])
    spec = {"components": [_component(x) for x in w]}
    rng = np.random.default_rng(2)
    n = 10_000
    labels = np.array([sample_patient_params(rng, spec).mixture_component for _ in range(n)])
    freq = np.bincount(labels, minlength=3)
    band = 3 * np.sqrt(n * w * (1 - w))
    assert np.all(np.abs(freq - n * w) <= band)


@pytest.mark.parametrize("bad", [
    {"components": []},
    {"components": [_component(1.0, std=-0.1)]},
    {"components": [_component(0.0)]},
])
def test_invalid_heterogeneity_rejected(bad):
    with pytest.raises(ConfigError):
        sample_patient_params(np.random.default_rng(0), bad)


def test_patient_params_invariants():
    with pytest.raises(DomainError):
        PatientParams(rho=0.0, carrying_capacity=1.0, beta_c=0, alpha_r=0, beta_r=0)
    with pytest.raises(DomainError):
        PatientParams(rho=0.1, carrying_capacity=1.0, beta_c=-1, alpha_r=0, beta_r=0)


# --- dynamics


def test_chemo_concentration_examples():
    cfg = SimulationConfig(n_units=10)
    assert chemo_concentration(0, False, cfg) == 0
    assert chemo_concentration(0, True, cfg) == 5
    assert chemo_concentration(5, False, cfg) == 2.5


def _params(rho=0.1, K=1000.0, beta_c=0.0, alpha_r=0.0, beta_r=0.0):
    return PatientParams(rho=rho, carrying_capacity=K, beta_c=beta_c, alpha_r=alpha_r, beta_r=beta_r)


def test_tumor_step_fixed_point():
    assert tumor_step(1000.0, 0.0, False, _params(K=1000.0), 0.0) == 1000.0


def test_tumor_step_growth():
    assert tumor_step(1.0, 0.0, False, _params(rho=0.1, K=math.e), 0.0) == pytest.approx(1.1, abs=1e-15)


def test_tumor_step_chemo_kill():
    # volume equals K so the log term is zero
    assert tumor_step(1.0, 0.2, False, _params(K=1.0, beta_c=1.0), 0.0) == pytest.approx(0.8, abs=1e-15)


def test_tumor_step_radio_kill_and_clamps():
    p = _params(K=1.0, alpha_r=0.1, beta_r=0.01)
    assert tumor_step(1.0, 0.0, True, p, 0.0, radio_dose=2.0) == pytest.approx(1 - 0.2 - 0.04)
    assert tumor_step(1.0, 0.0, False, _params(K=1.0, beta_c=10.0), 0.0) >= 0  # noop: no concentration
    assert tumor_step(1.0, 5.0, False, _params(K=1.0, beta_c=10.0), 0.0) == 1e-3
    assert tumor_step(1100.0, 0.0, False, _params(K=1e6), 0.5) == 1150.0


def test_tumor_step_rejects_nonpositive_volume():
    with pytest.raises(DomainError):
        tumor_step(0.0, 0.0, False, _params(), 0.0)


def test_treatment_probability_examples():
    assert treatment_probability(3.7, 0.0, 10.0) == 0.5
    assert treatment_probability(5.0, 17.0, 10.0) == 0.5
    assert treatment_probability(10.0, 6.0, 10.0) == pytest.approx(0.9525741268, abs=1e-9)


def test_diameter_from_volume_examples():
    assert diameter_from_volume(0.0) == 0.0
    assert diameter_from_volume(math.pi / 6) == pytest.approx(1.0, abs=1e-15)
    assert diameter_from_volume(4 * math.pi / 3) == pytest.approx(2.0, abs=1e-15)
    with pytest.raises(DomainError):
        diameter_from_volume(-1.0)


def test_default_d_max_matches_volume_cap():
    cfg = SimulationConfig(n_units=10)
    assert cfg.d_max == diameter_from_volume(1150.0)


@pytest.mark.parametrize("kwargs", [
    {"chemo_decay": 1.0}, {"chemo_decay": -0.1}, {"diameter_window": 0},
    {"split_fractions": (0.5, 0.2, 0.2)},
])
def test_config_invariants(kwargs):
    with pytest.raises(ConfigError):
        SimulationConfig(**kwargs)


# --- trajectories


def _rate_and_corr(gamma, n_units, horizon=25):
    cfg = SimulationConfig(gamma=gamma, n_units=n_units, horizon=horizon, seed=3)
    ds = generate_dataset(cfg)
    flags = np.concatenate([t.chemo_flags for t in ds.trajectories] + [t.radio_flags for t in ds.trajectories])
    diam = np.concatenate([t.avg_diameters for t in ds.trajectories] * 2)
    return ds, flags, diam


def test_unconfounded_assignment_rate():
    ds, flags, diam = _rate_and_corr(0.0, 200)
    assert flags.size >= 10_000
    assert abs(flags.mean() - 0.5) <= 0.02
    assert abs(spearmanr(diam, flags)[0]) < 0.05


def test_confounded_assignment_correlates_with_diameter():
    _, flags, diam = _rate_and_corr(6.0, 200)
    assert spearmanr(diam, flags)[0] > 0


def test_trajectory_replay_is_bit_identical():
    cfg = SimulationConfig(n_units=1, horizon=20)
    p = sample_patient_params(unit_rng(0, 0))
    a = simulate_trajectory(p, cfg, np.random.default_rng(7))
    b = simulate_trajectory(p, cfg, np.random.default_rng(7))
    for name in ("volumes", "chemo_flags", "radio_flags", "concentrations", "assignment_probs", "noise"):
        assert np.array_equal(getattr(a, name), getattr(b, name))


def test_trajectory_invariants():
    ds = generate_dataset(SimulationConfig(gamma=6.0, n_units=60, horizon=30, seed=11))
    for tr in ds.trajectories:
        assert len(tr.volumes) == len(tr.chemo_flags) + 1
        assert np.all(np.isfinite(tr.volumes))
        assert np.all((tr.volumes >= 1e-3) & (tr.volumes <= 1150.0))
        assert set(np.unique(tr.chemo_flags)) <= {0, 1}
        assert np.all((tr.assignment_probs > 0) & (tr.assignment_probs < 1))


def test_default_heterogeneity_half_of_untreated_grow_large():
    cfg = SimulationConfig(n_units=300, horizon=30, seed=5)
    ds = generate_dataset(cfg)
    big = [continue_trajectory(tr, 0, np.zeros((30, 2)), cfg)[-1] >= 575 for tr in ds.trajectories]
    assert 0.3 <= np.mean(big) <= 0.7


# --- dataset


def test_split_sizes_and_partition():
    cfg = SimulationConfig(n_units=10, split_fractions=(0.6, 0.2, 0.2), horizon=5)
    ds = generate_dataset(cfg)
    assert [len(ds.splits[s]) for s in ("train", "val", "test")] == [6, 2, 2]
    assert sorted(sum(ds.splits.values(), [])) == list(range(10))
    assert generate_dataset(cfg).splits == ds.splits


def test_too_few_units_for_splits():
    with pytest.raises(ConfigError):
        generate_dataset(SimulationConfig(n_units=3, split_fractions=(0.6, 0.2, 0.2), horizon=5))


def test_export_roundtrip(tmp_path):
    cfg = SimulationConfig(n_units=10, horizon=6, split_fractions=(0.6, 0.2, 0.2), seed=4)
    ds = generate_dataset(cfg)
    paths = save_dataset(ds, tmp_path, config_hash="abc")
    header = paths["train"].read_text().splitlines()[0]
    assert header == "unit_id,t,volume,chemo,radio,concentration,prob"
    back = load_dataset(tmp_path)
    assert back.splits == ds.splits
    for a, b in zip(ds.trajectories, back.trajectories):
        assert np.array_equal(a.volumes, b.volumes)
        assert np.array_equal(a.chemo_flags, b.chemo_flags)
        assert np.array_equal(a.noise, b.noise)
        assert a.params == b.params
    first = paths["train"].read_bytes()
    save_dataset(generate_dataset(cfg), tmp_path, config_hash="abc")
    assert paths["train"].read_bytes() == first


# --- counterfactuals


@pytest.fixture(scope="module")
def panel():
    cfg = SimulationConfig(gamma=6.0, n_units=20, horizon=12, seed=9)
    return cfg, generate_dataset(cfg)


def test_one_step_consistency_everywhere(panel):
    cfg, ds = panel
    for tr in ds.trajectories:
        for t in range(1, tr.horizon):
            b = enumerate_one_step_counterfactuals(tr, t, cfg)
            assert b.treatment_plans.shape == (4, 1, 2)
            fact = [i for i, p in enumerate(b.treatment_plans) if np.array_equal(p[0], b.factual_plan[0])]
            assert len(fact) == 1
            assert b.true_outcomes[fact[0], 0] == tr.volumes[t + 1]


def test_full_factual_continuation_is_bit_exact(panel):
    cfg, ds = panel
    tr = ds.trajectories[0]
    plan = np.stack([tr.chemo_flags, tr.radio_flags], axis=1)
    assert np.array_equal(continue_trajectory(tr, 0, plan, cfg), tr.volumes[1:])


def test_untreated_exceeds_fully_treated():
    cfg = SimulationConfig(n_units=1, horizon=5, noise_std=0.0)
    p = PatientParams(rho=0.1, carrying_capacity=1000.0, beta_c=0.02, alpha_r=0.03, beta_r=0.003,
                      initial_volume=10.0)
    tr = simulate_trajectory(p, cfg, np.random.default_rng(0))
    b = enumerate_one_step_counterfactuals(tr, 2, cfg)
    assert b.true_outcomes[0, 0] > b.true_outcomes[3, 0]


def test_one_step_anchor_range(panel):
    cfg, ds = panel
    for t in (0, ds.trajectories[0].horizon):
        with pytest.raises(IndexError):
            enumerate_one_step_counterfactuals(ds.trajectories[0], t, cfg)


def test_sliding_bundle_shapes(panel):
    cfg, ds = panel
    tr = ds.trajectories[1]
    one = sliding_treatment_counterfactuals(tr, 3, 1, cfg)
    assert one.treatment_plans.shape == (1, 1, 2) and one.treatment_plans[0, 0].tolist() == [1, 1]
    six = sliding_treatment_counterfactuals(tr, 3, 6, cfg)
    assert six.treatment_plans.shape == (6, 6, 2)
    treated = six.treatment_plans.any(axis=2)
    assert np.array_equal(treated, np.eye(6, dtype=bool))
    flat = {p.tobytes() for p in six.treatment_plans}
    assert len(flat) == 6
    with pytest.raises(IndexError):
        sliding_treatment_counterfactuals(tr, tr.horizon - 2, 6, cfg)


def test_sliding_outcomes_match_continuation(panel):
    cfg, ds = panel
    tr = ds.trajectories[2]
    b = sliding_treatment_counterfactuals(tr, 2, 4, cfg)
    for plan, out in zip(b.treatment_plans, b.true_outcomes):
        assert np.array_equal(out, continue_trajectory(tr, 2, plan, cfg))


def test_bundle_roundtrip(tmp_path, panel):
    cfg, ds = panel
    bundles = one_step_bundles(ds.trajectories[:2], cfg)
    path = save_bundles(bundles, tmp_path / "b.json", "h")
    back = load_bundles(path)
    assert len(back) == len(bundles)
    assert all(np.array_equal(a.true_outcomes, b.true_outcomes) for a, b in zip(bundles, back))
