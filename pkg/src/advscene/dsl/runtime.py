"""Differentiable evaluation of typechecked guidance programs.

Values are torch tensors with optional leading batch (sample) dimensions.
Series cover future steps 1..T; trajectories bound in the context include the
current state at index 0.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field
from typing import Optional, Sequence

import torch
import torch.nn.functional as F

from ..world import D_BUFFER, TICK, MapModel, VehicleFootprint, env_coll_pens_t, normalize_angle_t
from .check import BUILTINS, GuidanceProgram, Term
from .errors import Diagnostic, DslError
from .syntax import BinOp, Call, Expr, Name, Num, describe

SMOOTH_TEMPERATURE = 10.0
TTC_CAP = 10.0
TTC_SHARPNESS = 5.0
HINGE_SHARPNESS = 2.0


@dataclass
class EvalContext:
    """Bindings for one evaluation.

    ``trajs`` maps agent id to a state tensor (..., T+1, 4); the ego entry is
    always treated as a constant.
    """
    trajs: dict
    ego_id: int
    adv_id: int
    footprints: dict
    map: Optional[MapModel] = None
    tick: float = TICK
    d_buffer: float = D_BUFFER

    def __post_init__(self):
        if self.ego_id not in self.trajs or self.adv_id not in self.trajs:
            raise DslError(Diagnostic("eval", "context must bind both ego and adv"))
        lengths = {v.shape[-2] for v in self.trajs.values()}
        if len(lengths) != 1:
            raise DslError(Diagnostic("eval", f"context horizons are not aligned: {sorted(lengths)}"))
        if min(lengths) < 2:
            raise DslError(Diagnostic("eval", "context needs at least one future step"))

    @property
    def horizon(self) -> int:
        return next(iter(self.trajs.values())).shape[-2] - 1

    @property
    def other_ids(self) -> list:
        return [a for a in self.trajs if a not in (self.ego_id, self.adv_id)]

    def radius(self, agent_id: int) -> float:
        return self.footprints[agent_id].disc_radius


@dataclass(frozen=True)
class AgentSet:
    ids: tuple
    name: str
    fixed: bool = False


class _Evaluator:
    def __init__(self, ctx: EvalContext, weights: dict, route: str, check: bool):
        self.ctx = ctx
        self.weights = weights
        self.route = route
        self.check = check
        self.dtype = next(iter(ctx.trajs.values())).dtype
        # expand every binding to one batch shape so scalars and series align
        batch = torch.broadcast_shapes(*(t.shape[:-2] for t in ctx.trajs.values()))
        self.trajs = {a: t.expand(*batch, *t.shape[-2:]) for a, t in ctx.trajs.items()}

    # ---- bindings
    def states(self, agents: AgentSet) -> torch.Tensor:
        """(..., n, T+1, 4) with gradient only where the current route allows it."""
        out = []
        for aid in agents.ids:
            s = self.trajs[aid]
            live = (not agents.fixed and aid != self.ctx.ego_id and
                    ((self.route == "adv" and aid == self.ctx.adv_id) or
                     (self.route == "others" and aid != self.ctx.adv_id)))
            out.append(s if live else s.detach())
        if not out:
            ref = next(iter(self.trajs.values()))
            return ref.new_zeros(ref.shape[:-2] + (0,) + ref.shape[-2:])
        return torch.stack(out, -3)

    def radii(self, agents: AgentSet) -> torch.Tensor:
        return torch.tensor([self.ctx.radius(a) for a in agents.ids], dtype=self.dtype)

    def agent_set(self, name: str) -> AgentSet:
        c = self.ctx
        if name == "adv":
            return AgentSet((c.adv_id,), name)
        if name == "ego":
            return AgentSet((c.ego_id,), name)
        return AgentSet(tuple(c.other_ids), name)

    # ---- evaluation
    def eval(self, node: Expr):
        v = self._eval(node)
        if self.check and isinstance(v, torch.Tensor) and not torch.isfinite(v).all():
            raise DslError(Diagnostic("eval", f"{describe(node)} produced a non-finite value",
                                      node.span))
        return v

    def _eval(self, node: Expr):
        if isinstance(node, Num):
            return torch.tensor(node.value, dtype=self.dtype)
        if isinstance(node, Name):
            if node.ident in ("adv", "ego", "others"):
                return self.agent_set(node.ident)
            return torch.tensor(self.weights[node.ident], dtype=self.dtype)
        if isinstance(node, BinOp):
            a, b = self.eval(node.left), self.eval(node.right)
            a, b = _align(a, b)
            if node.op == "+":
                return a + b
            if node.op == "-":
                return a - b
            if node.op == "*":
                return a * b
            return a / b
        return self._call(node)

    def _call(self, node: Call):
        f = node.func
        if f == "fixed":
            inner = self.eval(node.args[0])
            return AgentSet(inner.ids, inner.name, True)
        sig = BUILTINS[f]
        args = [self.eval(a) for a in node.args[:len(sig.params)]]
        index = int(node.args[-1].value) if sig.index and len(node.args) > len(sig.params) else None
        out = getattr(self, "b_" + f)(*args)
        if index is not None:
            t = min(max(index, 1), self.ctx.horizon)
            out = out[..., t - 1]
        return out

    # ---- builtins over agents (series results cover steps 1..T)
    def b_veh_coll_pens(self, A: AgentSet, B: AgentSet):
        pa = self.states(A)[..., 1:, :2]
        pb = self.states(B)[..., 1:, :2]
        if not A.ids or not B.ids:
            return torch.zeros(pa.shape[:-3] + (self.ctx.horizon,), dtype=self.dtype)
        diff = pa.unsqueeze(-3) - pb.unsqueeze(-4)                # (..., nA, nB, T, 2)
        d = torch.sqrt((diff * diff).sum(-1) + 1e-24)
        p = (self.radii(A)[:, None] + self.radii(B)[None, :] + self.ctx.d_buffer)[..., None]
        pen = torch.relu(1.0 - d / p)
        keep = torch.tensor([[(i < j) if set(A.ids) == set(B.ids) else (a != b)
                              for j, b in enumerate(B.ids)] for i, a in enumerate(A.ids)],
                            dtype=self.dtype)
        return (pen * keep[..., None]).sum((-3, -2))

    def b_env_coll_pens(self, A: AgentSet):
        s = self.states(A)[..., 1:, :2]
        if not A.ids or self.ctx.map is None:
            return torch.zeros(s.shape[:-3] + (self.ctx.horizon,), dtype=self.dtype)
        pen = env_coll_pens_t(s, self.radii(A)[:, None], self.ctx.map)
        return pen.sum(-2)

    def _one(self, A: AgentSet) -> torch.Tensor:
        return self.states(A)[..., 0, :, :]

    def b_dist(self, A, B):
        d = self._one(A)[..., 1:, :2] - self._one(B)[..., 1:, :2]
        return torch.sqrt((d * d).sum(-1) + 1e-24)

    def b_speed(self, A):
        return self._one(A)[..., 1:, 3]

    def b_lon_accel(self, A):
        v = self._one(A)[..., 3]
        return (v[..., 1:] - v[..., :-1]) / self.ctx.tick

    def b_lat_accel(self, A):
        s = self._one(A)
        w = normalize_angle_t(s[..., 1:, 2] - s[..., :-1, 2]) / self.ctx.tick
        return s[..., 1:, 3] * w

    def b_heading_diff(self, A, B):
        d = self._one(A)[..., 1:, 2] - self._one(B)[..., 1:, 2]
        return torch.atan2(torch.sin(d), torch.cos(d)).abs()

    def b_ttc(self, A, B):
        return smooth_ttc(self._one(A)[..., 1:, :], self._one(B)[..., 1:, :],
                          self.ctx.radius(A.ids[0]) + self.ctx.radius(B.ids[0]))

    def b_adv_collision(self, A, B):
        sa, sb = self._one(A), self._one(B)
        p = self.ctx.radius(A.ids[0]) + self.ctx.radius(B.ids[0]) + self.ctx.d_buffer
        return adv_collision_loss(sa[..., 1:, :2], sb[..., 1:, :2], p)

    # ---- reductions and elementwise
    def b_sum_t(self, x):
        return x.sum(-1)

    def b_mean_t(self, x):
        return x.mean(-1)

    def b_max_t(self, x):
        return torch.logsumexp(SMOOTH_TEMPERATURE * x, -1) / SMOOTH_TEMPERATURE

    def b_min_t(self, x):
        return -torch.logsumexp(-SMOOTH_TEMPERATURE * x, -1) / SMOOTH_TEMPERATURE

    def b_hard_max_t(self, x):
        return x.max(-1).values

    def b_hard_min_t(self, x):
        return x.min(-1).values

    def b_clip(self, x, lo, hi):
        x, lo = _align(x, lo)
        x, hi = _align(x, hi)
        lo, hi = _align(lo, hi)
        return torch.minimum(torch.maximum(x, lo), torch.maximum(hi, lo))

    def b_relu(self, x):
        return torch.relu(x)

    def b_neg(self, x):
        return -x

    def b_sq(self, x):
        return x * x

    def b_abs(self, x):
        return x.abs()


def _align(a: torch.Tensor, b: torch.Tensor):
    """Broadcast a scalar-per-sample against a series (..., T)."""
    if a.dim() == b.dim():
        return a, b
    return (a.unsqueeze(-1), b) if a.dim() < b.dim() else (a, b.unsqueeze(-1))


def smooth_ttc(sa: torch.Tensor, sb: torch.Tensor, r: float, cap: float = TTC_CAP) -> torch.Tensor:
    """Constant-velocity disc closing time with a softplus-smoothed closing speed."""
    dp = sb[..., :2] - sa[..., :2]
    va = sa[..., 3:4] * torch.stack([torch.cos(sa[..., 2]), torch.sin(sa[..., 2])], -1)
    vb = sb[..., 3:4] * torch.stack([torch.cos(sb[..., 2]), torch.sin(sb[..., 2])], -1)
    d = torch.sqrt((dp * dp).sum(-1) + 1e-24)
    closing = -((vb - va) * dp).sum(-1) / d
    closing_s = F.softplus(TTC_SHARPNESS * closing) / TTC_SHARPNESS
    gap = torch.relu(d - r)
    return torch.clamp(gap / (closing_s + 1e-9), max=cap)


def _softplus_s(x: torch.Tensor, s: float = HINGE_SHARPNESS) -> torch.Tensor:
    return F.softplus(s * x) / s


def adv_collision_loss(pa: torch.Tensor, pb: torch.Tensor, p: float) -> torch.Tensor:
    """Sum over steps of a softened ``max(0, d - p)``, offset so it is 0 at contact,
    plus the terminal center distance."""
    d = torch.sqrt(((pa - pb) ** 2).sum(-1) + 1e-24)
    base = _softplus_s(torch.tensor(-p, dtype=d.dtype))
    return (_softplus_s(d - p) - base).sum(-1) + d[..., -1]


# --------------------------------------------------------------------------
# public API


@dataclass
class EvalResult:
    loss: torch.Tensor            # (...) total
    adv: torch.Tensor             # part routed to the adversary latent
    others: torch.Tensor          # part routed to the other latents (plus constant terms)
    grads: dict = field(default_factory=dict)   # agent id -> d loss / d states


def evaluate_terms(program: GuidanceProgram, ctx: EvalContext, check: bool = True) -> tuple:
    """Evaluate each routed term; returns ``(adv_part, others_part)`` tensors."""
    adv = others = None
    for term in program.terms:
        ev = _Evaluator(ctx, program.weights, term.route, check)
        v = term.sign * ev.eval(term.expr)
        if term.route == "adv":
            adv = v if adv is None else adv + v
        else:
            others = v if others is None else others + v
    batch = torch.broadcast_shapes(*(t.shape[:-2] for t in ctx.trajs.values()))
    dtype = next(iter(ctx.trajs.values())).dtype
    zero = torch.zeros(batch, dtype=dtype)
    adv = zero if adv is None else adv.expand(batch) if adv.dim() == 0 else adv
    others = zero if others is None else others.expand(batch) if others.dim() == 0 else others
    return adv, others


def evaluate(program: GuidanceProgram, ctx: EvalContext, grad: bool = True) -> EvalResult:
    """Loss and its gradient w.r.t. every non-ego trajectory binding.

    The gradient for each binding follows the routing table: a term routed to
    the adversary contributes only to the adversary's binding, and vice versa.
    """
    trajs = {}
    for aid, s in ctx.trajs.items():
        t = s.detach().clone()
        if grad and aid != ctx.ego_id:
            t.requires_grad_(True)
        trajs[aid] = t
    local = EvalContext(trajs, ctx.ego_id, ctx.adv_id, ctx.footprints, ctx.map, ctx.tick, ctx.d_buffer)
    adv, others = evaluate_terms(program, local, check=True)
    total = adv + others
    grads = {}
    if grad:
        live = [a for a in trajs if trajs[a].requires_grad]
        if total.requires_grad:
            gs = torch.autograd.grad(total.sum(), [trajs[a] for a in live], allow_unused=True)
        else:
            gs = [None] * len(live)
        for aid, g in zip(live, gs):
            g = torch.zeros_like(trajs[aid]) if g is None else g
            if not torch.isfinite(g).all():
                raise DslError(Diagnostic("gradcheck", f"non-finite gradient for agent {aid}"))
            grads[aid] = g
    return EvalResult(total.detach(), adv.detach(), others.detach(), grads)


def gradient_check(program: GuidanceProgram, ctx: EvalContext, n_dirs: int = 3,
                   h: float = 1e-6, rtol: float = 1e-3, seed: int = 0) -> Optional[Diagnostic]:
    """Directional finite-difference check of the routed reverse-mode gradient.

    Each route is probed separately: the adversary-routed part along adversary
    directions, the others-routed part along directions over the other agents.
    Returns None on success or a ``gradcheck`` diagnostic.
    """
    res = evaluate(program, ctx, grad=True)
    if not torch.isfinite(res.loss).all():
        return Diagnostic("gradcheck", "loss is not finite")
    gen = torch.Generator().manual_seed(seed)
    groups = {"adv": [ctx.adv_id], "others": ctx.other_ids}
    for route, ids in groups.items():
        ids = [a for a in ids if a in res.grads]
        if not ids:
            continue
        for _ in range(n_dirs):
            dirs = {a: torch.randn(ctx.trajs[a].shape, generator=gen, dtype=ctx.trajs[a].dtype)
                    for a in ids}
            analytic = sum(float((res.grads[a] * dirs[a]).sum()) for a in ids)

            def at(scale):
                moved = {a: (s + scale * dirs[a] if a in dirs else s) for a, s in ctx.trajs.items()}
                c = EvalContext(moved, ctx.ego_id, ctx.adv_id, ctx.footprints, ctx.map, ctx.tick,
                                ctx.d_buffer)
                r = evaluate(program, c, grad=False)
                return float(getattr(r, route).sum())

            numeric = (at(h) - at(-h)) / (2 * h)
            if not math.isfinite(numeric):
                return Diagnostic("gradcheck", "finite-difference probe is not finite")
            if abs(analytic - numeric) > rtol * max(1.0, abs(numeric)):
                return Diagnostic("gradcheck", f"{route} gradient mismatch: reverse-mode "
                                               f"{analytic:.6g} vs finite difference {numeric:.6g}")
    return None
