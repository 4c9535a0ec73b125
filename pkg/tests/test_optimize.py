import pytest

from tokenq.analytic import clipped_service_moments
from tokenq.dist import Deterministic, LogNormal, Uniform
from tokenq.errors import InvalidArgumentError, NoFeasiblePointError
from tokenq.fixtures import BATCH_HEAVY, BATCH_LIGHT
from tokenq.latency import SingleLatencyModel
from tokenq.optimize import (
    SimSettings,
    TokenLimitObjective,
    expected_utility,
    grid,
    optimal_fixed_batch,
    optimize_token_limit,
    recommend_policy,
)

CHAT = LogNormal(7, 0.7)
GRID = grid(100, 3000, 100)


def test_grid_inclusive():
    assert grid(100, 500, 100) == [100, 200, 300, 400, 500]
    assert len(GRID) == 30 and GRID[-1] == 3000
    with pytest.raises(InvalidArgumentError):
        grid(5, 1, 1)


@pytest.mark.parametrize(
    "kwargs",
    [
        dict(variant="V3", theta=0.5, grid=[1]),
        dict(variant="V1", theta=1.5, grid=[1]),
        dict(variant="V1", theta=0.5, grid=[]),
        dict(variant="V1", theta=0.5, grid=[3, 2]),
        dict(variant="V1", theta=0.5, grid=[0.5, 2]),
        dict(variant="V2", theta=0.5, grid=[1, 2]),
        dict(variant="V2", theta=0.5, grid=[1, 2], tau=10, loss_cost=-1),
    ],
)
def test_objective_validation(kwargs):
    with pytest.raises(InvalidArgumentError):
        TokenLimitObjective(**kwargs)


def test_expected_utility_delegates():
    assert expected_utility(CHAT, 1600) == CHAT.clipped_utility_mean(1600)
    assert expected_utility(Uniform(100), 100) == 1.0


def test_deterministic_law_picks_smallest_saturating_limit():
    obj = TokenLimitObjective("V1", 0.99, grid(100, 1000, 100))
    opt = optimize_token_limit(obj, 0.01, SingleLatencyModel(0.02, 0.2), Deterministic(450))
    assert opt.best == 500


def test_v1_chat_workload(chat_model):
    opt = optimize_token_limit(TokenLimitObjective("V1", 119 / 120, GRID), 1 / 40, chat_model, CHAT)
    assert opt.sense == "max" and not opt.excluded
    brute = max(opt.table, key=lambda r: (r["objective"], -r["n_max"]))
    assert brute["n_max"] == opt.best and brute["objective"] == opt.value
    assert GRID[0] < opt.best < GRID[-1]
    row = {r["n_max"]: r for r in opt.table}
    for n, r in row.items():
        assert r["objective"] == pytest.approx(119 / 120 * r["utility"] - r["mean_wait"] / 120)
        assert isinstance(r["objective"], float)


def test_v1_excludes_exactly_the_unstable_points(chat_model):
    lam = 1 / 22
    opt = optimize_token_limit(TokenLimitObjective("V1", 0.99, GRID), lam, chat_model, CHAT)
    unstable = [n for n in GRID if lam * clipped_service_moments(chat_model, CHAT, n)[0] >= 1]
    assert unstable
    assert [n for n, _ in opt.excluded] == unstable
    assert all("unstable" in why for _, why in opt.excluded)
    assert len(opt.table) + len(unstable) == len(GRID)


def test_v1_all_unstable_raises(chat_model):
    with pytest.raises(NoFeasiblePointError):
        optimize_token_limit(TokenLimitObjective("V1", 0.9, GRID), 1.0, chat_model, CHAT)


def test_v2_excludes_scv_violations_but_not_overload():
    m = SingleLatencyModel(0.02, 0.0)
    d = LogNormal(5, 1.5)
    obj = TokenLimitObjective("V2", 0.9, [100, 500, 1000, 2000], loss_cost=1, tau=20)
    opt = optimize_token_limit(obj, 2.0, m, d)  # rho > 1 at every point
    assert [n for n, _ in opt.excluded] == [1000, 2000]
    assert all("scv" in why for _, why in opt.excluded)
    assert all(r["rho"] > 1 for r in opt.table)


def test_v2_chat_workload(chat_model):
    obj = TokenLimitObjective("V2", 0.95, GRID, loss_cost=4, tau=60)
    opt = optimize_token_limit(obj, 1 / 25, chat_model, CHAT)
    row = {r["n_max"]: r for r in opt.table}
    for r in opt.table:
        assert r["objective"] == pytest.approx(0.95 * r["utility"] - 0.05 * r["mean_wait"] - 4 * r["loss_fraction"])
    assert GRID[0] < opt.best < GRID[-1]
    assert row[opt.best]["loss_fraction"] <= 0.5 * row[3000]["loss_fraction"]
    # the literal "+" variant scores delay as a reward
    plus = optimize_token_limit(
        TokenLimitObjective("V2", 0.95, GRID, loss_cost=4, tau=60, plus_sign=True), 1 / 25, chat_model, CHAT
    )
    assert plus.best > opt.best


def test_rescaling_delay_with_theta_resolved_keeps_argmax(chat_model):
    theta = 119 / 120
    opt = optimize_token_limit(TokenLimitObjective("V1", theta, GRID), 1 / 40, chat_model, CHAT)
    k = 3.7
    # (1 - t) k / t = (1 - theta) / theta
    t = k * theta / (k * theta + 1 - theta)
    scaled = [(t * r["utility"] - (1 - t) * k * r["mean_wait"], -r["n_max"], r["n_max"]) for r in opt.table]
    assert max(scaled)[2] == opt.best


def test_simulated_mode_uses_simulator(chat_model):
    obj = TokenLimitObjective("V1", 119 / 120, [800, 1600])
    sim = SimSettings(horizon=4000, warmup=200, seed=1, replications=2)
    opt = optimize_token_limit(obj, 1 / 40, chat_model, CHAT, simulate=sim)
    ana = optimize_token_limit(obj, 1 / 40, chat_model, CHAT)
    for s, a in zip(opt.table, ana.table):
        assert s["mean_wait"] != a["mean_wait"]
        assert s["mean_wait"] == pytest.approx(a["mean_wait"], rel=0.5)


# -- batch sizing ------------------------------------------------------------------------------


def test_fixed_batch_small_lambda_prefers_b1():
    opt = optimal_fixed_batch(0.001, BATCH_LIGHT, Deterministic(200), range(1, 17))
    assert opt.best == 1 and opt.sense == "min"


def test_fixed_batch_heavy_tail_optimum_is_interior():
    opt = optimal_fixed_batch(0.43, BATCH_HEAVY, CHAT, range(1, 129))
    assert opt.best == 8
    assert [b for b, _ in opt.excluded] == [1, 2, 3, 4]
    brute = min(opt.table, key=lambda r: (r["mean_delay"], r["b"]))
    assert brute["b"] == opt.best


def test_fixed_batch_infeasible():
    with pytest.raises(NoFeasiblePointError):
        optimal_fixed_batch(50.0, BATCH_LIGHT, Uniform(1000), range(1, 9))


def test_recommend_policy_heavy_tail():
    cmp = recommend_policy(0.43, BATCH_HEAVY, CHAT)
    assert cmp.heavy_tail and cmp.recommended == "dynamic_bmax"
    assert cmp.b_star == 8 and cmp.throughput_argmax != cmp.b_star
    dyn, fixed = cmp.row("dynamic")["analytic"], cmp.row("fixed")["analytic"]
    assert dyn == pytest.approx(125, rel=0.1)
    assert fixed < 0.25 * dyn
    assert cmp.row("dynamic_bmax")["analytic"] is None
    assert cmp.row("elastic")["analytic"] < dyn


def test_recommend_policy_low_load_heavy_tail_caps_batches():
    cmp = recommend_policy(0.01, BATCH_HEAVY, CHAT)
    assert cmp.recommended == "dynamic_bmax"


def test_recommend_policy_light_tail_with_simulation():
    sim = SimSettings(horizon=5000, warmup=300, seed=3, replications=2)
    cmp = recommend_policy(0.3, BATCH_LIGHT, Uniform(1000), simulate=sim)
    assert not cmp.heavy_tail and cmp.recommended == "dynamic"
    assert cmp.row("dynamic")["analytic"] is not None and cmp.row("elastic")["analytic"] is not None
    assert cmp.row("elastic")["simulated"] <= cmp.row("dynamic")["simulated"]
    assert cmp.row("dynamic")["simulated"] <= cmp.row("dynamic")["analytic"]
