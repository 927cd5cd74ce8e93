import csv
import io
import json
import math
from dataclasses import replace

import numpy as np
import pytest
from scipy.optimize import brentq

from planner_cases import SRC_FORM, TGT_FORM, as_fit, random_problem
from ptpplaw.forms import EvalPoint, LawForm, LawParams, asymptotic_loss, eval_law
from ptpplaw.planner import (
    SCAN_POINTS,
    PlanConstraints,
    PlanProblem,
    default_r_grid,
    flops,
    forgetting,
    min_feasible_atpp,
    plan,
    verify_plan,
)
from ptpplaw.synth import SOURCE_TRUTH, TARGET_TRUTH

SRC = as_fit(SRC_FORM, SOURCE_TRUTH)
TGT = as_fit(TGT_FORM, TARGET_TRUTH)


def paper_problem(**kw):
    args = dict(src_fit=SRC, tgt_fit=TGT, N=8.1e9, ptpp=279.0, constraints=PlanConstraints.parse("2%", 1.8))
    args.update(kw)
    return PlanProblem(**args)


def test_flops():
    assert flops(8.1e9, 0.0) == 0.0
    assert flops(8.1e9, 8.9) == pytest.approx(3.504e21, rel=1e-3)
    assert flops(8.1e9, 17.8) == 2 * flops(8.1e9, 8.9)


def test_constraint_parsing():
    c = PlanConstraints.parse("2%", 1.8)
    assert (c.forgetting, c.mode) == (0.02, "relative")
    assert c.allowed_forgetting(3.0) == pytest.approx(0.06)
    a = PlanConstraints.parse("0.05", 1.8)
    assert (a.forgetting, a.mode) == (0.05, "absolute")
    assert math.isinf(PlanConstraints.parse("inf", 1.8).forgetting)
    with pytest.raises(ValueError):
        PlanConstraints(-0.1, 1.8)


def test_forgetting_examples():
    x = EvalPoint(N=1e9, D=4e9, r=0.25, ptpp=31)
    beta, nu = 0.5, 0.5
    B = 0.06 * x.D ** beta / x.r ** nu
    src = as_fit(LawForm.DCPT_BASELINE, LawParams(E=3.0, B=B, beta=beta, nu=nu))
    assert forgetting(src, x, baseline_measured=3.0) == pytest.approx(0.06, rel=1e-12)
    assert forgetting(src, x, baseline_measured=3.0) / 3.0 == pytest.approx(0.02, rel=1e-12)
    same = eval_law(src.form, src.params, x)
    assert forgetting(src, x, baseline_measured=same) == 0.0
    with pytest.raises(ValueError):
        forgetting(src, EvalPoint(N=1e9, D=0.0, r=0.25, ptpp=31))


def test_default_r_grid():
    g = default_r_grid()
    assert len(g) == 2048
    assert g[0] == pytest.approx(1e-3) and g[-1] == pytest.approx(1 - 1e-9, abs=1e-15)
    assert np.all(np.diff(g) > 0)


def test_unreachable_floor_infeasible():
    r = 0.3
    floor = asymptotic_loss(TGT.params, TGT.form, 8.1e9, r, 279.0)
    p = paper_problem(constraints=PlanConstraints(math.inf, floor * 0.999, "absolute"))
    assert min_feasible_atpp(r, p) is None


def test_tau_zero_infeasible():
    res = plan(paper_problem(constraints=PlanConstraints.parse("2%", 0.0), r_grid=tuple(default_r_grid(64))))
    assert not res.feasible and res.atpp_star is None
    assert res.diagnoses
    assert json.loads(res.to_json())["feasible"] is False


def test_paper_configuration_runs():
    res = plan(paper_problem())
    assert res.feasible
    assert verify_plan(json.loads(res.to_json()), SRC, TGT)["ok"]
    assert res.binding_constraint in ("forgetting", "target", "both")
    assert res.D_star == pytest.approx(res.atpp_star * 8.1e9)


def test_bisect_matches_scan():
    rng = np.random.default_rng(10)
    ln_step = math.log(1e6) / (SCAN_POINTS - 1)
    for _ in range(10):
        p = random_problem(rng, r_grid=tuple(default_r_grid(64)))
        for r in p.r_grid[::8]:
            b = min_feasible_atpp(r, p, "bisect")
            s = min_feasible_atpp(r, p, "scan")
            assert (b is None) == (s is None)
            if b is not None:
                # the scan's first feasible point lies at most one step above the lattice answer
                assert -1e-6 <= math.log(s / b) <= ln_step + 1e-6


def test_plan_satisfies_constraints():
    rng = np.random.default_rng(11)
    for _ in range(10):
        p = random_problem(rng, r_grid=tuple(default_r_grid(256)))
        res = plan(p)
        assert res.feasible
        check = verify_plan(json.loads(res.to_json()), p.src_fit, p.tgt_fit)
        assert check["ok"] and check["src_slack"] >= -1e-6 and check["tgt_slack"] >= -1e-6


def test_monotone_in_tau():
    p = paper_problem(r_grid=tuple(default_r_grid(128)))
    prev = -math.inf
    for tau in (1.9, 1.85, 1.8, 1.79, 1.78):
        res = plan(replace(p, constraints=PlanConstraints.parse("2%", tau)))
        a = math.inf if not res.feasible else res.atpp_star
        assert a >= prev
        prev = a


def test_unbounded_forgetting_is_target_only():
    p = paper_problem(constraints=PlanConstraints.parse("inf", 1.8), r_grid=tuple(default_r_grid(32)))
    res = plan(p)

    def tgt_only(r):
        f = lambda ln_a: eval_law(TGT.form, TGT.params, EvalPoint(8.1e9, math.exp(ln_a) * 8.1e9, r, 279.0)) - 1.8
        lo, hi = math.log(p.atpp_min), math.log(p.atpp_max)
        if f(hi) > 0:
            return math.inf
        if f(lo) <= 0:
            return p.atpp_min
        return math.exp(brentq(f, lo, hi, xtol=1e-12))

    expected = min(tgt_only(r) for r in p.r_grid)
    assert res.atpp_star == pytest.approx(expected, rel=2e-6)
    assert res.binding_constraint == "target"
    out = json.loads(res.to_json())
    assert out["constraints"]["forgetting"] == "inf"
    assert verify_plan(out, SRC, TGT)["ok"]


def test_scan_fallback_for_non_monotone_law():
    flat = as_fit(LawForm.DCPT_BASELINE, LawParams(E=1.5, A=50, alpha=0.3, C=0.02, gamma=0.5))
    p = paper_problem(src_fit=flat, r_grid=tuple(default_r_grid(16)))
    assert plan(p).method == "scan"
    assert plan(paper_problem(r_grid=tuple(default_r_grid(16)))).method == "bisect"


def test_unconverged_fit_rejected():
    bad = replace(TGT, converged=False)
    with pytest.raises(ValueError, match="converge"):
        plan(paper_problem(tgt_fit=bad))
    assert plan(paper_problem(tgt_fit=bad, require_converged=False, r_grid=(0.3,))) is not None


def test_csv_exports():
    res = plan(paper_problem(r_grid=tuple(default_r_grid(64)), landscape_atpp_points=8, landscape_r_points=5))
    rows = list(csv.reader(io.StringIO(res.feasibility_csv())))
    assert rows[0] == ["r", "atpp", "src_slack", "tgt_slack", "feasible"]
    assert len(rows) == 1 + 5 * 8
    f = list(csv.reader(io.StringIO(res.forgetting_landscape_csv())))
    assert f[0] == ["replay_pct", "atpp", "forgetting_nats", "forgetting_rel"]
    t = list(csv.reader(io.StringIO(res.target_landscape_csv())))
    assert t[0] == ["replay_pct", "atpp", "target_loss"] and len(t) == 41
    x = EvalPoint(8.1e9, float(t[1][1]) * 8.1e9, float(t[1][0]) / 100, 279.0)
    assert float(t[1][2]) == pytest.approx(eval_law(TGT.form, TGT.params, x), rel=1e-12)


def test_grid_refinement_stability():
    rng = np.random.default_rng(8)
    for _ in range(50):
        p = random_problem(rng)
        a = plan(replace(p, r_grid=tuple(default_r_grid())))
        b = plan(replace(p, r_grid=tuple(default_r_grid(4096))))
        assert a.feasible and b.feasible
        assert abs(a.atpp_star / b.atpp_star - 1) <= 0.01
