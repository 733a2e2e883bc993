"""Adam, schedule composition, determinism, and the label gate."""

import numpy as np
import pytest

from genuda.autograd import Tensor
from genuda.corpus import (SynthSpec, gated_label_access_count,
                           reset_gated_label_access_count, synth_generate)
from genuda.kvconfig import ConfigError, parse_kv
from genuda.model import Parameters
from genuda.training import (AdamState, TrainConfig, adam_step, cpt_texts,
                             init_adam, log_to_csv, run)


@pytest.fixture(scope="module")
def tiny_pair():
    return synth_generate(SynthSpec(train_size=60, val_size=10, test_size=10,
                                    background_size=40, informative_per_class=6,
                                    seed=11))


def tiny_config(**overrides):
    base = dict(schedule="two_phase_cpt", phase1_steps=4, phase2_steps=4,
                batch_size=4, d_model=16, n_heads=2, d_ff=24, seed=0)
    base.update(overrides)
    return TrainConfig(**base)


# --------------------------------------------------------------------- Adam

def one_param(value):
    return Parameters({"w": Tensor(np.array([value]), requires_grad=True)})


def test_adam_zero_gradient_is_noop():
    params = one_param(3.0)
    state = init_adam(params)
    adam_step(state, params, {"w": np.zeros(1)}, lr=0.1)
    assert params["w"].data[0] == 3.0


def test_adam_first_step_magnitude_is_lr():
    params = one_param(0.0)
    state = init_adam(params)
    adam_step(state, params, {"w": np.array([7.3])}, lr=0.05)
    # bias-corrected m-hat / sqrt(v-hat) = sign(g) on step one
    assert params["w"].data[0] == pytest.approx(-0.05, rel=1e-6)


def test_adam_descends_quadratic_bowl():
    """Scalar oracle: f(w) = (w - 3)^2, gradient 2(w - 3)."""
    params = one_param(-2.0)
    state = init_adam(params)
    losses = []
    for _ in range(50):
        w = params["w"].data[0]
        losses.append((w - 3.0) ** 2)
        adam_step(state, params, {"w": np.array([2.0 * (w - 3.0)])}, lr=0.1)
    assert all(b < a for a, b in zip(losses, losses[1:]))


def test_adam_skips_frozen_tensors():
    params = Parameters({"w": Tensor(np.ones(2), requires_grad=True),
                         "frozen": Tensor(np.ones(2), requires_grad=False)})
    state = init_adam(params)
    adam_step(state, params, {"w": np.ones(2), "frozen": np.ones(2)}, lr=0.1)
    np.testing.assert_array_equal(params["frozen"].data, np.ones(2))
    assert (params["w"].data != 1.0).all()


# ----------------------------------------------------------------- schedules

def test_two_phase_logs_cpt_then_cls(tiny_pair):
    result = run(tiny_config(), tiny_pair)
    assert len(result.log) == 8
    for row in result.log[:4]:
        assert row.loss_cpt is not None and row.loss_cls is None
    for row in result.log[4:]:
        assert row.loss_cls is not None and row.loss_cpt is None


def test_single_phase_lambda_zero_at_step_zero(tiny_pair):
    result = run(tiny_config(schedule="single_phase_cpt"), tiny_pair)
    first = result.log[0]
    assert first.lam == 0.0
    # pure-CPT step: the classification term contributes nothing
    assert first.loss == first.loss_cpt
    assert len(result.log) == 8


def test_single_phase_loss_is_declared_combination(tiny_pair):
    result = run(tiny_config(schedule="single_phase_cpt"), tiny_pair)
    for row in result.log:
        assert row.loss == row.loss_cls * row.lam + row.loss_cpt * (1.0 - row.lam)


def test_vanilla_lambda_is_half(tiny_pair):
    result = run(tiny_config(schedule="single_phase_vanilla"), tiny_pair)
    assert {row.lam for row in result.log} == {0.5}


def test_udapter_fixed_weight_combination(tiny_pair):
    result = run(tiny_config(schedule="udapter_fixed_weight", phase1_steps=2,
                             phase2_steps=2), tiny_pair)
    assert result.config.mmd_weight == 3.0
    for row in result.log:
        assert row.loss == row.loss_cls + row.loss_div * 3.0


def test_udapter_joint_combination(tiny_pair):
    result = run(tiny_config(schedule="udapter_joint", phase1_steps=2,
                             phase2_steps=2), tiny_pair)
    for row in result.log:
        assert row.loss == row.loss_cls * row.lam + row.loss_div * (1.0 - row.lam)


def test_udapter_two_phase_structure(tiny_pair):
    result = run(tiny_config(schedule="udapter_two_phase", phase1_steps=3,
                             phase2_steps=2), tiny_pair)
    assert all(r.loss_div is not None for r in result.log[:3])
    assert all(r.loss_cls is not None for r in result.log[3:])


def test_supervised_baselines_run_phase2_budget(tiny_pair):
    result = run(tiny_config(schedule="src_only"), tiny_pair)
    assert len(result.log) == 4
    assert all(r.loss_cls is not None for r in result.log)


def test_divergence_kinds_all_run(tiny_pair):
    for kind in ("mkmmd", "mmd_logits", "coral"):
        result = run(tiny_config(schedule="udapter_joint", phase1_steps=1,
                                 phase2_steps=1, divergence_kind=kind), tiny_pair)
        assert all(r.loss_div is not None for r in result.log)


def test_decoder_only_clm_schedule(tiny_pair):
    result = run(tiny_config(arch="decoder_only"), tiny_pair)
    assert result.config.resolved_cpt_kind() == "clm"
    assert len(result.log) == 8


def test_selective_masking_schedule_runs(tiny_pair):
    result = run(tiny_config(mask_strategy="informative", pmi_min_freq=2),
                 tiny_pair)
    assert len(result.log) == 8


def test_kshot_phase2(tiny_pair):
    result = run(tiny_config(kshot=8), tiny_pair)
    assert len(result.log) == 8


# ----------------------------------------------------------- phase-1 pools

def test_cpt_pool_selection(tiny_pair):
    src = set(tiny_pair.source.train.texts)
    tgt = set(tiny_pair.target.train.texts)
    assert set(cpt_texts(tiny_pair, "source_only")) == src
    assert set(cpt_texts(tiny_pair, "target_only")) == tgt
    assert set(cpt_texts(tiny_pair, "source_and_target")) == src | tgt


# ------------------------------------------------------------- label gating

def test_only_src_plus_tgt_touches_hidden_labels(tiny_pair):
    for schedule in ("two_phase_cpt", "single_phase_cpt", "udapter_joint",
                     "src_only"):
        reset_gated_label_access_count()
        run(tiny_config(schedule=schedule, phase1_steps=2, phase2_steps=2),
            tiny_pair)
        assert gated_label_access_count() == 0, schedule
    reset_gated_label_access_count()
    run(tiny_config(schedule="src_plus_tgt", phase2_steps=2), tiny_pair)
    assert gated_label_access_count() == 1


# -------------------------------------------------------------- determinism

def test_identical_configs_reproduce_bitwise(tiny_pair):
    a = run(tiny_config(schedule="single_phase_cpt"), tiny_pair)
    b = run(tiny_config(schedule="single_phase_cpt"), tiny_pair)
    assert log_to_csv(a.log) == log_to_csv(b.log)
    for name in a.state.params.names():
        np.testing.assert_array_equal(a.state.params[name].data,
                                      b.state.params[name].data)


def test_different_seeds_differ(tiny_pair):
    a = run(tiny_config(), tiny_pair)
    b = run(tiny_config(seed=1), tiny_pair)
    assert log_to_csv(a.log) != log_to_csv(b.log)


# ------------------------------------------------------------------ config

def test_config_kv_round_trip():
    config = tiny_config(schedule="udapter_joint", lr=0.01)
    again = TrainConfig.from_kv(config.to_kv())
    assert again == config
    assert again.hash() == config.hash()


def test_config_hash_stable_under_reordering():
    kv = tiny_config().to_kv()
    text_forward = "\n".join(f"{k} = {v}" for k, v in kv.items())
    text_reverse = "\n".join(f"{k} = {v}" for k, v in reversed(list(kv.items())))
    a = TrainConfig.from_kv(parse_kv(text_forward))
    b = TrainConfig.from_kv(parse_kv(text_reverse))
    assert a.hash() == b.hash()


def test_unknown_config_key_is_fatal():
    with pytest.raises(ConfigError, match="no_such_key"):
        TrainConfig.from_kv({"no_such_key": "1"})


def test_divergence_schedule_needs_batch_of_two():
    with pytest.raises(ConfigError):
        TrainConfig(schedule="udapter_joint", batch_size=1)


def test_unknown_schedule_rejected():
    with pytest.raises(ConfigError):
        TrainConfig(schedule="mystery")
