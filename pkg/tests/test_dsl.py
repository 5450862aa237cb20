import math

import numpy as np
import pytest
import torch
from hypothesis import given, settings, strategies as st

from advscene.dsl import (
    DslError, EvalContext, adv_collision_loss, compile_source, evaluate, gradient_check, parse,
    print_program,
)
from advscene.dsl.syntax import BinOp, Call, Name, Num, Program, WeightDecl
from advscene.guidance import canonical_source
from advscene.world import VehicleFootprint, env_coll_pens, veh_coll_pens

from dslgen import directional_fd, random_context, random_program, rng_for


def prog(body: str, level: str = "medium", **weights) -> str:
    weights = {"w_adv": 1.5, **weights}
    decls = "".join(f"weight {k} = {v}\n" for k, v in weights.items())
    return f"level: {level}\n{decls}loss = {body}\n"


def value(body: str, ctx: EvalContext, **weights) -> torch.Tensor:
    return evaluate(compile_source(prog(body, **weights)), ctx, grad=False).loss


@pytest.fixture
def ctx():
    return random_context(rng_for(0))


# --------------------------------------------------------------------------
# parsing


class TestParse:
    def test_weighted_builtin_call(self):
        p = parse("loss = w_adv * sum_t(veh_coll_pens(adv, ego))".join(["level: medium\n"
                                                                        "weight w_adv = 1.5\n", ""]))
        assert p.loss == BinOp("*", Name("w_adv"),
                               Call("sum_t", (Call("veh_coll_pens", (Name("adv"), Name("ego"))),)))

    def test_unbalanced_parenthesis_span(self):
        src = "level: medium\nweight w_adv = 1.5\nloss = sum_t(dist(adv, ego)"
        with pytest.raises(DslError) as e:
            parse(src)
        d = e.value.diagnostic
        assert d.phase == "parse" and "unbalanced" in d.message
        assert src[d.span.start:d.span.end] == "sum_t"
        assert (d.span.line, d.span.col) == (3, 8)

    def test_stray_close_paren(self):
        src = "level: weak\nweight w_adv = 0.5\nloss = w_adv)"
        with pytest.raises(DslError) as e:
            parse(src)
        d = e.value.diagnostic
        assert src[d.span.start:d.span.end] == ")"

    @pytest.mark.parametrize("src", [
        "level: medium\nweight adv = 1.0\nloss = 1",
        "level: medium\nweight w_adv = 1.5\nloss = level",
        "level: medium\nweight w_adv = 1.5\nloss = ego(1)",
    ])
    def test_reserved_words(self, src):
        with pytest.raises(DslError) as e:
            parse(src)
        assert e.value.diagnostic.phase == "parse"
        assert "reserved" in e.value.diagnostic.message

    def test_bad_character_and_level(self):
        for src in ("level: medium\nloss = 1 $ 2", "level: extreme\nloss = 1"):
            with pytest.raises(DslError) as e:
                parse(src)
            assert e.value.diagnostic.span.valid_in(src)

    def test_size_limit(self):
        src = "level: medium\nweight w_adv = 1.5\nloss = " + "1 + " * 20000 + "1"
        with pytest.raises(DslError, match="exceeds"):
            parse(src)

    def test_diagnostic_format(self):
        with pytest.raises(DslError) as e:
            parse("level: medium\nloss = (")
        assert str(e.value.diagnostic).startswith("parse:2:")

    def test_comments_and_whitespace(self):
        p = parse("# header\nlevel:weak   # trailing\nweight w_adv=0.5\nloss=w_adv")
        assert p.level == "weak" and p.weights == (WeightDecl("w_adv", 0.5),)


IDENTS = st.sampled_from(["w_adv", "w_x", "adv", "ego", "others", "foo"])
FUNCS = st.sampled_from(["sum_t", "dist", "relu", "clip", "fixed", "g"])
NUMS = st.floats(0, 1e6, allow_nan=False, allow_infinity=False)
EXPRS = st.recursive(
    st.one_of(NUMS.map(Num), IDENTS.map(Name)),
    lambda sub: st.one_of(
        st.tuples(st.sampled_from("+-*/"), sub, sub).map(lambda t: BinOp(*t)),
        st.tuples(FUNCS, st.lists(sub, max_size=3).map(tuple)).map(lambda t: Call(*t))),
    max_leaves=12)


@settings(max_examples=200, deadline=None)
@given(st.sampled_from(["weak", "medium", "strong"]),
       st.lists(st.tuples(st.sampled_from(["w_adv", "w_a", "k1"]), NUMS).map(lambda t: WeightDecl(*t)),
                max_size=3).map(tuple),
       EXPRS)
def test_print_parse_round_trip(level, weights, expr):
    p = Program(level, weights, expr)
    assert parse(print_program(p)) == p


@settings(max_examples=300, deadline=None)
@given(st.text(max_size=80))
def test_parser_is_total(text):
    try:
        compile_source(text)
    except DslError as e:
        assert all(d.span.valid_in(text) for d in e.diagnostics)


@settings(max_examples=200, deadline=None)
@given(st.text(alphabet="()+-*/, 0123456789.adv_egothrsum", max_size=40))
def test_compile_is_total_on_near_programs(body):
    src = "level: medium\nweight w_adv = 1.5\nloss = " + body
    try:
        compile_source(src)
    except DslError as e:
        assert all(d.span.valid_in(src) for d in e.diagnostics)


# --------------------------------------------------------------------------
# typechecking


class TestTypecheck:
    def test_medium_program_accepted(self):
        p = compile_source(canonical_source("medium"))
        assert p.level == "medium" and p.w_adv == 1.5
        assert p.routes() == ["adv", "adv", "others"]

    def test_weak_with_strong_weight_rejected(self):
        with pytest.raises(DslError) as e:
            compile_source(canonical_source("weak", w_adv=3.0))
        d = e.value.diagnostic
        assert d.phase == "typecheck" and "outside the weak range" in d.message

    @pytest.mark.parametrize("level,w,ok", [
        ("weak", 0.25, True), ("weak", 1.0, False), ("medium", 1.0, True), ("medium", 2.0, False),
        ("strong", 2.0, True), ("strong", 4.0, True), ("strong", 4.01, False), ("weak", 0.2, False),
    ])
    def test_range_table_edges(self, level, w, ok):
        src = prog("w_adv * adv_collision(adv, ego)", level=level, w_adv=w)
        if ok:
            compile_source(src)
        else:
            with pytest.raises(DslError):
                compile_source(src)

    def test_mixed_routing_rejected(self):
        src = prog("sum_t(veh_coll_pens(adv, others))")
        with pytest.raises(DslError) as e:
            compile_source(src)
        d = e.value.diagnostic
        assert "mixes" in d.message
        assert src[d.span.start:d.span.end] == "sum_t(veh_coll_pens(adv, others))"

    def test_fixed_resolves_mixing(self):
        p = compile_source(prog("sum_t(veh_coll_pens(adv, fixed(others))) "
                                "+ sum_t(veh_coll_pens(others, fixed(adv)))"))
        assert p.routes() == ["adv", "others"]

    @pytest.mark.parametrize("body,needle", [
        ("sum_t(foo(adv))", "unknown builtin"),
        ("w_zz * 2", "unknown identifier"),
        ("dist(adv)", "argument"),
        ("dist(adv, ego)", "must be a scalar"),
        ("sum_t(dist(adv, others))", "expected agent"),
        ("adv + 1", "needs numbers"),
        ("sum_t(speed(adv)) / sum_t(speed(adv))", "divisor"),
        ("sum_t(speed(adv)) / (1 - 1)", "division by zero"),
        ("speed(adv, 1.5)", "integer literal"),
        ("sum_t(1)", "expected series"),
    ])
    def test_errors(self, body, needle):
        src = prog(body)
        with pytest.raises(DslError) as e:
            compile_source(src)
        d = e.value.diagnostic
        assert d.phase == "typecheck" and needle in d.message
        assert d.span.valid_in(src)

    def test_missing_and_duplicate_weights(self):
        with pytest.raises(DslError, match="must be declared"):
            compile_source("level: weak\nloss = 1")
        with pytest.raises(DslError, match="declared twice"):
            compile_source("level: weak\nweight w_adv = 0.5\nweight w_adv = 0.5\nloss = 1")

    def test_indexed_builtin_is_scalar(self):
        compile_source(prog("speed(adv, 3) + dist(adv, ego, 12)"))

    def test_constant_term_routes_nowhere(self):
        assert compile_source(prog("w_adv * 2 - 1")).routes() == ["none", "none"]


# --------------------------------------------------------------------------
# evaluation


class TestBuiltins:
    def test_distance_squared_gradient_is_analytic(self, ctx):
        res = evaluate(compile_source(prog("sum_t(sq(dist(adv, ego)))")), ctx)
        a, e = ctx.trajs[ctx.adv_id], ctx.trajs[ctx.ego_id]
        expect = torch.zeros_like(a)
        expect[1:, :2] = 2 * (a[1:, :2] - e[1:, :2])
        assert torch.allclose(res.grads[ctx.adv_id], expect, atol=1e-9)
        assert ctx.ego_id not in res.grads

    def test_constant_has_zero_gradient(self, ctx):
        res = evaluate(compile_source(prog("1.0")), ctx)
        assert float(res.loss) == 1.0
        assert all(float(g.abs().max()) == 0 for g in res.grads.values())

    def test_kinematic_series(self, ctx):
        a = ctx.trajs[ctx.adv_id].numpy()
        e = ctx.trajs[ctx.ego_id].numpy()
        T = len(a) - 1
        d = np.hypot(*(a[1:, :2] - e[1:, :2]).T)
        assert float(value("sum_t(dist(adv, ego))", ctx)) == pytest.approx(d.sum(), rel=1e-12)
        assert float(value("mean_t(speed(adv))", ctx)) == pytest.approx(a[1:, 3].mean(), rel=1e-12)
        lon = np.diff(a[:, 3]) / 0.5
        assert float(value("sum_t(lon_accel(adv))", ctx)) == pytest.approx(lon.sum(), rel=1e-9)
        dth = np.arctan2(np.sin(np.diff(a[:, 2])), np.cos(np.diff(a[:, 2])))
        lat = a[1:, 3] * dth / 0.5
        assert float(value("sum_t(lat_accel(adv))", ctx)) == pytest.approx(lat.sum(), rel=1e-9)
        hd = np.abs(np.arctan2(np.sin(a[1:, 2] - e[1:, 2]), np.cos(a[1:, 2] - e[1:, 2])))
        assert float(value("sum_t(heading_diff(adv, ego))", ctx)) == pytest.approx(hd.sum(), rel=1e-9)
        assert float(value("speed(adv, 3)", ctx)) == pytest.approx(a[3, 3])
        # step indices clamp into 1..T
        assert float(value("speed(adv, 99)", ctx)) == pytest.approx(a[T, 3])
        assert float(value("speed(adv, 0)", ctx)) == pytest.approx(a[1, 3])

    def test_penalties_match_world_model(self, ctx):
        fp = ctx.footprints
        ids = ctx.other_ids
        tr = {k: v.numpy() for k, v in ctx.trajs.items()}
        T = ctx.horizon
        oo = sum(veh_coll_pens(tr[i][t, :2], tr[j][t, :2], fp[i], fp[j])
                 for t in range(1, T + 1) for n, i in enumerate(ids) for j in ids[n + 1:])
        assert float(value("sum_t(veh_coll_pens(others, others))", ctx)) == pytest.approx(oo, abs=1e-9)
        ae = sum(veh_coll_pens(tr[ctx.adv_id][t, :2], tr[ctx.ego_id][t, :2], fp[ctx.adv_id],
                               fp[ctx.ego_id]) for t in range(1, T + 1))
        assert float(value("sum_t(veh_coll_pens(adv, ego))", ctx)) == pytest.approx(ae, abs=1e-9)
        env = sum(env_coll_pens(tuple(tr[i][t, :2]), fp[i], ctx.map)
                  for t in range(1, T + 1) for i in ids)
        assert float(value("sum_t(env_coll_pens(others))", ctx)) == pytest.approx(env, abs=1e-9)

    def test_reductions_and_elementwise(self, ctx):
        a = ctx.trajs[ctx.adv_id].numpy()[1:, 3]
        T = len(a)
        smax = float(value("max_t(speed(adv))", ctx))
        smin = float(value("min_t(speed(adv))", ctx))
        assert smax == pytest.approx(np.log(np.exp(10 * a).sum()) / 10, rel=1e-12)
        assert a.max() <= smax <= a.max() + math.log(T) / 10 + 1e-12
        assert a.min() - math.log(T) / 10 - 1e-12 <= smin <= a.min()
        assert float(value("hard_max_t(speed(adv))", ctx)) == a.max()
        assert float(value("hard_min_t(speed(adv))", ctx)) == a.min()
        assert float(value("sum_t(clip(speed(adv), 9, 10))", ctx)) == pytest.approx(np.clip(a, 9, 10).sum())
        assert float(value("sum_t(relu(speed(adv) - 10))", ctx)) == pytest.approx(np.maximum(a - 10, 0).sum())
        assert float(value("sum_t(neg(speed(adv)))", ctx)) == pytest.approx(-a.sum())
        assert float(value("sum_t(sq(speed(adv)))", ctx)) == pytest.approx((a * a).sum())
        assert float(value("sum_t(abs(10 - speed(adv)))", ctx)) == pytest.approx(np.abs(10 - a).sum())

    @settings(max_examples=40, deadline=None)
    @given(st.lists(st.floats(-50, 50), min_size=2, max_size=30))
    def test_smooth_extrema_bound(self, xs):
        from advscene.dsl.runtime import _Evaluator
        x = torch.tensor(xs, dtype=torch.float64)
        ev = _Evaluator.__new__(_Evaluator)
        tol = math.log(len(xs)) / 10 + 1e-9
        assert max(xs) - 1e-9 <= float(ev.b_max_t(x)) <= max(xs) + tol
        assert min(xs) - tol <= float(ev.b_min_t(x)) <= min(xs) + 1e-9

    def test_ttc_caps_when_separating(self, ctx):
        trajs = dict(ctx.trajs)
        adv = trajs[ctx.adv_id].clone()
        ego = trajs[ctx.ego_id]
        # adversary far ahead and faster on the same heading: never closes
        adv[:, :2] = ego[:, :2] + torch.tensor([60.0, 0.0], dtype=torch.float64)
        adv[:, 2] = ego[:, 2]
        adv[:, 3] = ego[:, 3] + 5
        trajs[ctx.adv_id] = adv
        c2 = EvalContext(trajs, ctx.ego_id, ctx.adv_id, ctx.footprints, ctx.map)
        assert float(value("hard_min_t(ttc(adv, ego))", c2)) == pytest.approx(10.0)

    def test_ttc_head_on_closing_time(self):
        T = 4
        a = torch.zeros(T + 1, 4, dtype=torch.float64)
        b = torch.zeros(T + 1, 4, dtype=torch.float64)
        a[:, 3] = 5.0
        b[:, 0] = 40.0
        b[:, 2] = math.pi
        b[:, 3] = 5.0
        fp = VehicleFootprint(4.0, 2.0)
        c = EvalContext({1: a, 2: b}, 2, 1, {1: fp, 2: fp})
        gap = 40.0 - 2 * fp.disc_radius
        assert float(value("ttc(adv, ego, 1)", c)) == pytest.approx(gap / 10.0, rel=1e-6)


class TestAdvCollision:
    def test_coincident_is_zero(self):
        p = torch.randn(12, 2, dtype=torch.float64)
        assert float(adv_collision_loss(p, p, 4.0)) == pytest.approx(0.0, abs=1e-9)

    @settings(max_examples=40, deadline=None)
    @given(st.integers(0, 10_000))
    def test_doubling_gaps_increases(self, seed):
        g = torch.Generator().manual_seed(seed)
        ego = torch.randn(12, 2, generator=g, dtype=torch.float64) * 10
        gap = torch.randn(12, 2, generator=g, dtype=torch.float64) * 3
        assert adv_collision_loss(ego + 2 * gap, ego, 3.0) > adv_collision_loss(ego + gap, ego, 3.0)

    def test_gradient_points_toward_ego(self, ctx):
        res = evaluate(compile_source(prog("w_adv * adv_collision(adv, ego)")), ctx)
        g = res.grads[ctx.adv_id][1:, :2]
        gap = (ctx.trajs[ctx.adv_id] - ctx.trajs[ctx.ego_id])[1:, :2]
        assert ((g * gap).sum(-1) > 0).all()   # descent direction -g closes the gap


# --------------------------------------------------------------------------
# gradients, routing and totality


def test_reverse_mode_matches_central_differences():
    # each routed part is probed along its own agents; fixed(...) bindings stay constant
    rng = rng_for(7)
    worst = 0.0
    for _ in range(20):
        program = compile_source(random_program(rng))
        c = random_context(rng)
        res = evaluate(program, c)
        for route, ids in (("adv", [c.adv_id]), ("others", c.other_ids)):

            def f(trajs):
                cc = EvalContext(trajs, c.ego_id, c.adv_id, c.footprints, c.map, c.tick)
                return float(getattr(evaluate(program, cc, grad=False), route))

            dirs, fd = directional_fd(f, c.trajs, ids, rng)
            an = sum(float((res.grads[a] * dirs[a]).sum()) for a in ids)
            worst = max(worst, abs(an - fd) / max(1.0, abs(fd)))
    assert worst < 1e-4


def test_routing_soundness():
    rng = rng_for(3)
    for _ in range(30):
        program = compile_source(random_program(rng))
        c = random_context(rng)
        for term in program.terms:
            if term.route == "none":
                continue
            single = type(program)(program.ast, program.level, program.weights, (term,))
            g = evaluate(single, c).grads
            for aid, grad in g.items():
                own = (aid == c.adv_id) == (term.route == "adv")
                if not own:
                    assert float(grad.abs().max()) == 0.0


def test_gradient_check_accepts_generated_programs():
    rng = rng_for(11)
    for _ in range(10):
        assert gradient_check(compile_source(random_program(rng)), random_context(rng)) is None


def test_totality_fuzz():
    rng = rng_for(2024)
    for i in range(1000):
        program = compile_source(random_program(rng))
        res = evaluate(program, random_context(rng), grad=(i % 4 == 0))
        assert torch.isfinite(res.loss).all()


def test_batched_context_matches_unbatched():
    rng = rng_for(5)
    program = compile_source(canonical_source("strong"))
    c = random_context(rng, batch=3)
    batched = evaluate(program, c, grad=False).loss
    for s in range(3):
        single = EvalContext({a: t[s] for a, t in c.trajs.items()}, c.ego_id, c.adv_id,
                             c.footprints, c.map)
        assert float(evaluate(program, single, grad=False).loss) == pytest.approx(float(batched[s]))


def test_non_finite_context_reports_eval_node(ctx):
    trajs = dict(ctx.trajs)
    bad = trajs[ctx.adv_id].clone()
    bad[3, 3] = float("inf")
    trajs[ctx.adv_id] = bad
    c = EvalContext(trajs, ctx.ego_id, ctx.adv_id, ctx.footprints, ctx.map)
    with pytest.raises(DslError) as e:
        evaluate(compile_source(prog("sum_t(speed(adv))")), c)
    assert e.value.diagnostic.phase == "eval" and "speed" in e.value.diagnostic.message


def test_misaligned_context_rejected(ctx):
    trajs = dict(ctx.trajs)
    trajs[ctx.adv_id] = trajs[ctx.adv_id][:-1]
    with pytest.raises(DslError, match="aligned"):
        EvalContext(trajs, ctx.ego_id, ctx.adv_id, ctx.footprints, ctx.map)
