import numpy as np
import pytest

from poirec import diffusion as df
from poirec import tensor as T
from poirec.diffusion import NoiseSchedule, SamplerConfig
from poirec.tensor import NonFiniteError, Tensor


DEFAULTS = NoiseSchedule()  # beta 0.1 -> 20, horizon 1


# -- schedule -------------------------------------------------------------------


def test_beta_endpoints():
    assert DEFAULTS.beta(0.0) == 0.1
    assert DEFAULTS.beta(1.0) == 20.0


def test_beta_midpoint_hand_value():
    assert abs(DEFAULTS.beta(0.5) - 10.05) < 1e-12


def test_beta_rejects_out_of_range():
    with pytest.raises(ValueError):
        DEFAULTS.beta(1.5)
    with pytest.raises(ValueError):
        DEFAULTS.beta(-0.1)


def test_beta_monotone():
    ts = np.linspace(0, 1, 101)
    betas = DEFAULTS.beta(ts)
    assert (np.diff(betas) >= 0).all()


def test_schedule_validation():
    with pytest.raises(ValueError):
        NoiseSchedule(beta_min=2.0, beta_max=1.0)
    with pytest.raises(ValueError):
        NoiseSchedule(horizon=0.0)
    NoiseSchedule(beta_min=0.0, beta_max=0.0)  # degenerate no-diffusion case


# -- kernel ---------------------------------------------------------------------


def test_kernel_stats_at_zero():
    mc, std = df.kernel_stats(0.0, DEFAULTS)
    assert mc == 1.0 and std == 0.0


def test_kernel_stats_at_horizon_hand_values():
    # B(1) = 0.1 + 19.9/2 = 10.05
    mc, std = df.kernel_stats(1.0, DEFAULTS)
    assert abs(DEFAULTS.integral(1.0) - 10.05) < 1e-12
    assert abs(mc - np.exp(-5.025)) < 1e-12
    assert abs(mc - 6.56e-3) < 1e-4
    assert abs(std ** 2 - (1.0 - np.exp(-10.05))) < 1e-12


def test_kernel_matches_euler_simulation():
    # small-scale forward-simulation oracle (full-size run lives in acceptance)
    rng = np.random.default_rng(0)
    n_paths, d, dt = 4000, 4, 1e-3
    v = np.ones((n_paths, d))
    t = 0.0
    for _ in range(500):  # up to t = 0.5
        beta = DEFAULTS.beta(t)
        v = v - 0.5 * beta * v * dt + np.sqrt(beta * dt) * rng.standard_normal(v.shape)
        t += dt
    mc, std = df.kernel_stats(0.5, DEFAULTS)
    assert np.abs(v.mean(axis=0) - mc).max() < 0.05
    assert np.abs(v.var(axis=0) - std ** 2).max() < 0.05 * std ** 2 + 0.02


def test_perturb_identity_at_zero():
    v0 = np.array([1.0, -2.0, 0.5])
    out = df.perturb(v0, 0.0, np.zeros(3), DEFAULTS)
    assert np.array_equal(out.data, v0)


def test_perturb_noiseless_center():
    v0 = np.array([1.0, 0.0])
    out = df.perturb(v0, 0.7, np.zeros(2), DEFAULTS)
    mc, _ = df.kernel_stats(0.7, DEFAULTS)
    assert np.allclose(out.data, mc * v0)


def test_perturb_basis_vector_at_horizon():
    e1 = np.array([1.0, 0.0, 0.0])
    out = df.perturb(e1, 1.0, np.zeros(3), DEFAULTS)
    assert abs(out.data[0] - 6.56e-3) < 1e-4
    assert np.all(out.data[1:] == 0)


# -- conditional score -------------------------------------------------------------


def test_score_zero_at_kernel_mean():
    v0 = np.array([0.3, -0.7])
    mc, _ = df.kernel_stats(0.4, DEFAULTS)
    s = df.conditional_score(mc * v0, v0, 0.4, DEFAULTS)
    assert np.allclose(s.data, 0.0)


def test_score_equals_negative_noise_over_std():
    rng = np.random.default_rng(1)
    v0 = rng.normal(size=5)
    eps = rng.normal(size=5)
    t = 0.35
    _, std = df.kernel_stats(t, DEFAULTS)
    v_t = df.perturb(v0, t, eps, DEFAULTS)
    s = df.conditional_score(v_t, v0, t, DEFAULTS)
    assert np.max(np.abs(s.data - (-eps / std))) < 1e-12


def test_score_rejects_t_zero():
    with pytest.raises(ValueError):
        df.conditional_score(np.zeros(2), np.zeros(2), 0.0, DEFAULTS)


def test_score_matches_numeric_log_density_gradient():
    rng = np.random.default_rng(2)
    for trial in range(20):
        d = 4
        v0 = rng.normal(size=d)
        v_t = rng.normal(size=d)
        t = rng.uniform(0.05, 1.0)
        s = df.conditional_score(v_t, v0, t, DEFAULTS).data
        eps = 1e-6
        num = np.zeros(d)
        for i in range(d):
            vp, vm = v_t.copy(), v_t.copy()
            vp[i] += eps
            vm[i] -= eps
            num[i] = (df.log_kernel_density(vp, v0, t, DEFAULTS)
                      - df.log_kernel_density(vm, v0, t, DEFAULTS)) / (2 * eps)
        rel = np.abs(s - num) / np.maximum(1e-8, np.abs(s) + np.abs(num))
        assert rel.max() < 1e-5, f"trial {trial}: {rel.max()}"


# -- score network -------------------------------------------------------------------


def test_score_net_zero_weights_zero_output():
    params = df.init_score_params(np.random.default_rng(3), 4, (8,))
    for p in params.values():
        p.data[...] = 0.0
    out = df.score_net(Tensor(np.ones((2, 4))), Tensor(np.ones((2, 4))), params)
    assert np.array_equal(out.data, np.zeros((2, 4)))


def test_score_net_conditioning_is_live():
    rng = np.random.default_rng(4)
    params = df.init_score_params(rng, 4, (8,))
    v = Tensor(rng.normal(size=(1, 4)))
    a = df.score_net(v, Tensor(rng.normal(size=(1, 4))), params).data
    b = df.score_net(v, Tensor(rng.normal(size=(1, 4))), params).data
    assert not np.allclose(a, b)


def test_score_net_unconditioned_width():
    rng = np.random.default_rng(5)
    params = df.init_score_params(rng, 4, (8,), conditioned=False)
    out = df.score_net(Tensor(rng.normal(size=(3, 4))), None, params)
    assert out.shape == (3, 4)


def test_score_net_time_feature():
    rng = np.random.default_rng(6)
    params = df.init_score_params(rng, 4, (8,), time_feature=True)
    v, c = Tensor(rng.normal(size=(2, 4))), Tensor(rng.normal(size=(2, 4)))
    a = df.score_net(v, c, params, t=np.array([0.1, 0.9])).data
    b = df.score_net(v, c, params, t=np.array([0.9, 0.1])).data
    assert not np.allclose(a, b)


def test_score_net_weight_gradients():
    rng = np.random.default_rng(7)
    params = df.init_score_params(rng, 3, (5,))
    v = Tensor(rng.normal(size=(2, 3)))
    c = Tensor(rng.normal(size=(2, 3)))
    probe = Tensor(rng.normal(size=(2, 3)))
    for name in sorted(params):
        saved = params[name]

        def f(x, name=name, saved=saved):
            params[name] = x
            try:
                return T.sum_all(T.multiply(df.score_net(v, c, params), probe))
            finally:
                params[name] = saved

        err = T.grad_check(f, Tensor(saved.data.copy()))
        assert err < 1e-4, f"{name}: {err}"


# -- reverse sampler -------------------------------------------------------------------


def oracle_score_fn(v0, schedule):
    def fn(v, t):
        return df.conditional_score(v, Tensor(np.broadcast_to(v0, v.shape).copy()), t, schedule)
    return fn


def test_degenerate_zero_schedule_is_identity():
    sched = NoiseSchedule(beta_min=0.0, beta_max=0.0)
    cfg = SamplerConfig(step_size=0.01, stochastic=True)
    proto = np.random.default_rng(8).normal(size=(2, 3))
    out = df.reverse_sample(Tensor(proto), lambda v, t: T.scale(v, 0.0), sched, cfg,
                            np.random.default_rng(0))
    assert np.array_equal(out.data, proto)


def test_oracle_sampler_lands_near_target():
    rng = np.random.default_rng(9)
    d = 8
    v0 = rng.normal(size=d)
    cfg = SamplerConfig(step_size=0.01, stochastic=False)
    proto = Tensor(rng.normal(size=(1, d)))
    out = df.reverse_sample(proto, oracle_score_fn(v0, DEFAULTS), DEFAULTS, cfg,
                            np.random.default_rng(1))
    dist = np.linalg.norm(out.data[0] - v0)
    assert dist < 0.05 * np.sqrt(d)


def test_oracle_sampler_contracts():
    rng = np.random.default_rng(10)
    d = 6
    cfg = SamplerConfig(step_size=0.01, stochastic=False)
    for _ in range(20):
        v0 = rng.normal(size=d)
        proto = rng.normal(size=(1, d)) * 2.0
        out = df.reverse_sample(Tensor(proto), oracle_score_fn(v0, DEFAULTS),
                                DEFAULTS, cfg, np.random.default_rng(2))
        assert np.linalg.norm(out.data[0] - v0) < np.linalg.norm(proto[0] - v0)


def test_single_step_sampler():
    calls = []

    def counting_score(v, t):
        calls.append(t)
        return T.scale(v, 0.0)

    cfg = SamplerConfig(step_size=1.0, stochastic=False)
    df.reverse_sample(Tensor(np.zeros((1, 2))), counting_score, DEFAULTS, cfg,
                      np.random.default_rng(3))
    assert calls == [1.0]


def test_step_size_must_divide_horizon():
    with pytest.raises(ValueError):
        SamplerConfig(step_size=0.03).n_steps(1.0)


def test_stochastic_sampler_reproducible():
    rng = np.random.default_rng(11)
    d = 4
    v0 = rng.normal(size=d)
    proto = Tensor(rng.normal(size=(1, d)))
    cfg = SamplerConfig(step_size=0.02, stochastic=True)
    a = df.reverse_sample(proto, oracle_score_fn(v0, DEFAULTS), DEFAULTS, cfg,
                          np.random.default_rng(42)).data
    b = df.reverse_sample(proto, oracle_score_fn(v0, DEFAULTS), DEFAULTS, cfg,
                          np.random.default_rng(42)).data
    assert np.array_equal(a, b)


def test_sampler_aborts_on_nonfinite():
    cfg = SamplerConfig(step_size=0.5, stochastic=False)

    def bad_score(v, t):
        return Tensor(np.full(v.shape, np.nan))

    with pytest.raises(NonFiniteError) as e:
        df.reverse_sample(Tensor(np.zeros((1, 2))), bad_score, DEFAULTS, cfg,
                          np.random.default_rng(0))
    assert "step 0" in str(e.value)


def test_sampler_checkpoints():
    cfg = SamplerConfig(step_size=0.25, stochastic=False)
    proto = Tensor(np.ones((1, 2)))
    out, trace = df.reverse_sample(proto, lambda v, t: T.scale(v, 0.0), DEFAULTS, cfg,
                                   np.random.default_rng(0),
                                   checkpoints=(0.0, 1 / 3, 2 / 3, 1.0))
    assert set(trace) == {0.0, 1 / 3, 2 / 3, 1.0}
    assert np.array_equal(trace[0.0], np.ones((1, 2)))
    assert np.array_equal(trace[1.0], out.data)


def test_detached_sampler_builds_no_tape():
    rng = np.random.default_rng(12)
    proto = Tensor(rng.normal(size=(1, 3)), requires_grad=True)
    cfg = SamplerConfig(step_size=0.5, stochastic=False, backprop_through_sampler=False)
    out = df.reverse_sample(proto, lambda v, t: T.scale(v, 0.0), DEFAULTS, cfg,
                            np.random.default_rng(0))
    assert not out._needs_grad


# -- fisher loss ---------------------------------------------------------------------


def test_fisher_loss_zero_for_exact_score():
    rng = np.random.default_rng(13)
    target = rng.normal(size=4)

    def exact(v_t, t):
        return df.conditional_score(v_t, Tensor(np.broadcast_to(target, v_t.shape).copy()),
                                    t, DEFAULTS)

    loss = df.fisher_loss(Tensor(target), None, {}, DEFAULTS,
                          np.random.default_rng(5), score_fn=exact)
    assert loss.item() < 1e-24


def test_fisher_loss_nonnegative():
    rng = np.random.default_rng(14)
    params = df.init_score_params(rng, 4, (8,))
    for trial in range(10):
        loss = df.fisher_loss(Tensor(rng.normal(size=(3, 4))), Tensor(rng.normal(size=(3, 4))),
                              params, DEFAULTS, np.random.default_rng(trial))
        assert loss.item() >= 0.0


def test_fisher_loss_gradients():
    rng = np.random.default_rng(15)
    params = df.init_score_params(rng, 3, (4,))
    target = Tensor(rng.normal(size=(2, 3)))
    cond = Tensor(rng.normal(size=(2, 3)))
    for name in sorted(params):
        saved = params[name]

        def f(x, name=name, saved=saved):
            params[name] = x
            try:
                return df.fisher_loss(target, cond, params, DEFAULTS,
                                      np.random.default_rng(7))
            finally:
                params[name] = saved

        err = T.grad_check(f, Tensor(saved.data.copy()))
        assert err < 1e-4, f"{name}: {err}"

    def f_target(x):
        return df.fisher_loss(x, cond, params, DEFAULTS, np.random.default_rng(7))

    assert T.grad_check(f_target, Tensor(target.data.copy())) < 1e-4
