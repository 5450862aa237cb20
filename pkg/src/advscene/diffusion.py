"""Latent diffusion: noise schedules, the denoiser, training, DDIM sampling and
guided sampling with clean-latent (reconstruction) guidance."""

from __future__ import annotations

import math
import time
import warnings
from dataclasses import asdict, dataclass, field
from typing import Callable, NamedTuple, Optional, Sequence, Union

import numpy as np
import torch
from torch import nn

from .codec import CondLatent, LatentScene, ModelError, SceneCodec, decode_tensor, scene_features
from .io import read_blob, write_blob
from .world import Scenario, WorldError

DIFF_SCHEMA = "diff.v1"
SCHEDULE_KINDS = ("cosine", "linear", "constant")


# --------------------------------------------------------------------------
# schedules


def _cosine_alpha_bar(u: np.ndarray, s: float = 0.008) -> np.ndarray:
    f = lambda x: np.cos((x + s) / (1 + s) * math.pi / 2) ** 2
    return f(u) / f(0.0)


@dataclass(frozen=True)
class NoiseSchedule:
    """Discrete schedule over steps 1..K with ``alpha_bar[0] = 1``."""
    K: int
    kind: str = "cosine"
    beta: float = 0.01   # constant schedule only

    def __post_init__(self):
        if self.K < 1:
            raise WorldError(f"schedule needs K >= 1, got {self.K}")
        if self.kind not in SCHEDULE_KINDS:
            raise WorldError(f"unknown schedule kind {self.kind!r}")
        if self.kind == "constant" and not 0.0 < self.beta < 1.0:
            raise WorldError("constant beta must lie in (0, 1)")

    @property
    def continuous(self) -> bool:
        """Whether the schedule is a discretization of a K-independent curve."""
        return self.kind == "cosine"

    @property
    def betas(self) -> np.ndarray:
        K = self.K
        if self.kind == "cosine":
            ab = _cosine_alpha_bar(np.arange(K + 1) / K)
            b = 1.0 - ab[1:] / ab[:-1]
        elif self.kind == "linear":
            scale = 1000.0 / K
            b = np.linspace(scale * 1e-4, scale * 0.02, K)
        else:
            b = np.full(K, self.beta)
        return np.clip(b, 1e-8, 0.999)

    @property
    def alpha_bar(self) -> np.ndarray:
        """``alpha_bar[k]`` for k = 0..K."""
        return np.concatenate([[1.0], np.cumprod(1.0 - self.betas)])

    def u(self, k) -> float:
        """Normalized time fed to the denoiser."""
        return k / self.K

    def alpha_bar_at(self, u: torch.Tensor) -> torch.Tensor:
        """Continuous alpha_bar for training; falls back to the discrete table."""
        if self.continuous:
            ab = torch.as_tensor(_cosine_alpha_bar(u.detach().numpy()), dtype=u.dtype)
            # match the beta clip of the discrete table at the last step
            return ab.clamp(min=float(self.alpha_bar[-1]))
        k = torch.round(u * self.K).long()
        return torch.as_tensor(self.alpha_bar, dtype=u.dtype)[k]

    def to_dict(self) -> dict:
        return {"K": self.K, "kind": self.kind, "beta": self.beta}


def forward_noise(z0: torch.Tensor, k: int, eps: torch.Tensor, schedule: NoiseSchedule) -> torch.Tensor:
    """Closed-form marginal q(z_k | z_0)."""
    if not 0 <= k <= schedule.K:
        raise WorldError(f"forward_noise: k={k} outside [0, {schedule.K}]")
    ab = float(schedule.alpha_bar[k])
    return math.sqrt(ab) * z0 + math.sqrt(1.0 - ab) * eps


# --------------------------------------------------------------------------
# denoiser


def timestep_embedding(u: torch.Tensor, dim: int) -> torch.Tensor:
    """Sinusoidal embedding of normalized time ``u`` in [0, 1]."""
    half = dim // 2
    freqs = torch.exp(-math.log(10000.0) * torch.arange(half, dtype=u.dtype) / half)
    arg = (u * 1000.0).unsqueeze(-1) * freqs
    return torch.cat([torch.sin(arg), torch.cos(arg)], -1)


@dataclass(frozen=True)
class DenoiserConfig:
    d_z: int = 32
    d_c: int = 32
    hidden: int = 256
    blocks: int = 3
    t_embed: int = 64
    epochs: int = 200
    lr: float = 5e-4
    batch_scenes: int = 32
    seed: int = 0


class ResBlock(nn.Module):
    def __init__(self, h: int, d_c: int, d_t: int):
        super().__init__()
        self.norm = nn.LayerNorm(h)
        self.inp = nn.Linear(h, h)
        self.t_proj = nn.Linear(d_t, h)
        self.c_proj = nn.Linear(d_c, h)
        self.pool_proj = nn.Linear(h, h)
        self.out = nn.Linear(h, h)
        self.act = nn.SiLU()

    def forward(self, h, temb, c, mask):
        a = self.act(self.norm(h))
        if mask is None:
            pooled = a.mean(-2, keepdim=True)
        else:
            m = mask.unsqueeze(-1).to(a.dtype)
            pooled = (a * m).sum(-2, keepdim=True) / m.sum(-2, keepdim=True).clamp(min=1.0)
        a = self.inp(a) + self.t_proj(temb) + self.c_proj(c) + self.pool_proj(pooled)
        return h + self.out(self.act(a))


class Denoiser(nn.Module):
    """Per-agent residual MLP with time embedding, additive conditioning and a
    permutation-invariant scene-pooling term in every block."""

    def __init__(self, cfg: DenoiserConfig = DenoiserConfig()):
        super().__init__()
        self.cfg = cfg
        h = cfg.hidden
        self.t_mlp = nn.Sequential(nn.Linear(cfg.t_embed, h), nn.SiLU(), nn.Linear(h, h))
        self.inp = nn.Linear(cfg.d_z, h)
        self.blocks = nn.ModuleList(ResBlock(h, cfg.d_c, h) for _ in range(cfg.blocks))
        self.out_norm = nn.LayerNorm(h)
        self.out = nn.Linear(h, cfg.d_z)
        nn.init.zeros_(self.out.weight)
        nn.init.zeros_(self.out.bias)
        self.double()

    def forward(self, z: torch.Tensor, u, c: torch.Tensor, mask: Optional[torch.Tensor] = None):
        """``z``: (..., N, d_z); ``u``: scalar or (...); ``c``: broadcastable to (..., N, d_c)."""
        u = torch.as_tensor(u, dtype=z.dtype)
        u = u.expand(z.shape[:-2]) if u.dim() == 0 else u
        temb = self.t_mlp(timestep_embedding(u, self.cfg.t_embed)).unsqueeze(-2)
        h = self.inp(z)
        for blk in self.blocks:
            h = blk(h, temb, c, mask)
        return self.out(torch.nn.functional.silu(self.out_norm(h)))


# --------------------------------------------------------------------------
# training


@dataclass
class LatentDataset:
    """Padded per-scene latents: z0 (B, Nmax, d_z) standardized, c (B, Nmax, d_c), mask."""
    z0: torch.Tensor
    c: torch.Tensor
    mask: torch.Tensor

    def __len__(self) -> int:
        return len(self.z0)


def build_latent_dataset(scenarios: Sequence[Scenario], codec: SceneCodec) -> LatentDataset:
    """Posterior means (standardized) and prior conditioning for each scene's non-ego agents."""
    from .codec import _future_array
    zs, cs = [], []
    with torch.no_grad():
        for s in scenarios:
            ids = tuple(a.id for a in s.non_ego)
            f = scene_features(s, ids, codec.cfg.k_neighbors)
            ctx = codec.context(torch.as_tensor(f["base"]), torch.as_tensor(f["nbr"]),
                                torch.as_tensor(f["nbr_mask"]))
            fut = torch.as_tensor(_future_array(s, ids, None))
            mean, _ = codec.posterior_stats(ctx, fut)
            zs.append(codec.standardize(mean))
            cs.append(codec.prior_c(ctx))
    n = max(len(z) for z in zs)
    B = len(zs)
    Z = torch.zeros(B, n, codec.cfg.d_z, dtype=torch.float64)
    C = torch.zeros(B, n, codec.cfg.d_c, dtype=torch.float64)
    M = torch.zeros(B, n, dtype=torch.bool)
    for i, (z, c) in enumerate(zip(zs, cs)):
        Z[i, :len(z)] = z
        C[i, :len(c)] = c
        M[i, :len(z)] = True
    return LatentDataset(Z, C, M)


def denoiser_loss(net: Denoiser, data: LatentDataset, idx: torch.Tensor, schedule: NoiseSchedule,
                  gen: torch.Generator) -> torch.Tensor:
    """Per-scene sum of squared noise-prediction errors, averaged over scenes."""
    z0, c, m = data.z0[idx], data.c[idx], data.mask[idx]
    B = len(idx)
    if schedule.continuous:
        u = 1.0 - torch.rand(B, generator=gen, dtype=z0.dtype)   # (0, 1]
    else:
        u = torch.randint(1, schedule.K + 1, (B,), generator=gen).to(z0.dtype) / schedule.K
    ab = schedule.alpha_bar_at(u).view(B, 1, 1)
    eps = torch.randn(z0.shape, generator=gen, dtype=z0.dtype)
    zk = ab.sqrt() * z0 + (1 - ab).sqrt() * eps
    pred = net(zk, u, c, m)
    err = ((pred - eps) ** 2).sum(-1) * m
    return err.sum(-1).mean()


@dataclass
class DiffusionLog:
    losses: list = field(default_factory=list)
    init_loss: float = float("nan")
    seconds: float = 0.0


def train_denoiser(data: LatentDataset, schedule: NoiseSchedule,
                   cfg: DenoiserConfig = DenoiserConfig(), log_every: int = 0) -> tuple:
    """Minimize the noise-prediction objective; returns ``(denoiser, DiffusionLog)``."""
    if len(data) == 0:
        raise WorldError("train_denoiser: empty dataset")
    if data.z0.shape[:2] != data.c.shape[:2]:
        raise WorldError("train_denoiser: latent and conditioning datasets are not aligned")
    t0 = time.perf_counter()
    with torch.random.fork_rng(devices=[]):
        torch.manual_seed(cfg.seed)
        net = Denoiser(cfg)
        gen = torch.Generator().manual_seed(cfg.seed)
        opt = torch.optim.Adam(net.parameters(), lr=cfg.lr)
        log = DiffusionLog()
        with torch.no_grad():
            log.init_loss = float(denoiser_loss(net, data, torch.arange(len(data)), schedule,
                                                torch.Generator().manual_seed(cfg.seed + 1)))
        n = len(data)
        for epoch in range(cfg.epochs):
            perm = torch.randperm(n, generator=gen)
            tot = 0.0
            for b in range(0, n, cfg.batch_scenes):
                idx = perm[b:b + cfg.batch_scenes]
                loss = denoiser_loss(net, data, idx, schedule, gen)
                if not torch.isfinite(loss):
                    raise ModelError(f"denoiser training diverged at epoch {epoch}")
                opt.zero_grad()
                loss.backward()
                opt.step()
                tot += loss.item() * len(idx) / n
            log.losses.append(tot)
            if log_every and (epoch + 1) % log_every == 0:
                print(f"denoiser epoch {epoch + 1}: loss {tot:.3f}")
    log.seconds = time.perf_counter() - t0
    return net.eval(), log


# --------------------------------------------------------------------------
# sampling


def estimate_clean(z_k: torch.Tensor, k: int, c: torch.Tensor, net: Denoiser,
                   schedule: NoiseSchedule, eps: Optional[torch.Tensor] = None) -> tuple:
    """Clean-latent estimate and the noise prediction used for it."""
    if not 1 <= k <= schedule.K:
        raise WorldError(f"estimate_clean: k={k} outside [1, {schedule.K}]")
    if eps is None:
        eps = net(z_k, schedule.u(k), c)
    ab = float(schedule.alpha_bar[k])
    return (z_k - math.sqrt(1 - ab) * eps) / math.sqrt(ab), eps


def ddim_compose(z0_hat: torch.Tensor, eps: torch.Tensor, k: int, schedule: NoiseSchedule) -> torch.Tensor:
    ab = float(schedule.alpha_bar[k - 1])
    if k == 1:
        return z0_hat.clone()
    return math.sqrt(ab) * z0_hat + math.sqrt(1 - ab) * eps


def clamp_clean(z_k: torch.Tensor, z0_hat: torch.Tensor, eps: torch.Tensor, k: int,
                schedule: NoiseSchedule, limit: Optional[float]) -> tuple:
    """Clamp the clean estimate to ``[-limit, limit]`` and re-derive the matching noise.

    Near k = K the estimate divides by a tiny sqrt(alpha_bar) and small noise
    errors explode; latents are standardized, so a bound of a few units is safe.
    """
    if limit is None:
        return z0_hat, eps
    ab = float(schedule.alpha_bar[k])
    z0c = z0_hat.clamp(-limit, limit)
    return z0c, (z_k - math.sqrt(ab) * z0c) / math.sqrt(1 - ab)


def ddim_step(z_k: torch.Tensor, k: int, c: torch.Tensor, net: Denoiser,
              schedule: NoiseSchedule, clip_clean: Optional[float] = None) -> torch.Tensor:
    """Deterministic (eta = 0) reverse step k -> k-1."""
    with torch.no_grad():
        z0_hat, eps = estimate_clean(z_k, k, c, net, schedule)
        z0_hat, eps = clamp_clean(z_k, z0_hat, eps, k, schedule, clip_clean)
        return ddim_compose(z0_hat, eps, k, schedule)


def ddim_sample(z_K: torch.Tensor, c: torch.Tensor, net: Denoiser, schedule: NoiseSchedule,
                clip_clean: Optional[float] = None) -> torch.Tensor:
    z = z_K
    for k in range(schedule.K, 0, -1):
        z = ddim_step(z, k, c, net, schedule, clip_clean)
    return z


# --------------------------------------------------------------------------
# guided sampling


class Routed(NamedTuple):
    """Objective split by gradient destination: the adversary latent or the others."""
    adv: torch.Tensor
    others: torch.Tensor

    @property
    def total(self) -> torch.Tensor:
        return self.adv + self.others


Objective = Callable[[torch.Tensor], Union[torch.Tensor, Routed]]


@dataclass(frozen=True)
class GuidedSampleConfig:
    guidance_scale: float = 0.03   # small enough that the level weights stay distinguishable
    grad_clip: float = 50.0        # above typical adversary gradient norms, so clipping rarely binds
    n_samples: int = 10
    iterations: int = 1
    seed: int = 0
    mode: str = "clean"   # "clean": perturb z0_hat; "mean": perturb the step output
    clip_clean: Optional[float] = 4.0

    def __post_init__(self):
        if self.guidance_scale < 0:
            raise WorldError("guidance_scale must be >= 0")
        if self.grad_clip <= 0:
            raise WorldError("grad_clip must be > 0")
        if self.n_samples < 1:
            raise WorldError("n_samples must be >= 1")
        if self.iterations < 1:
            raise WorldError("iterations must be >= 1")
        if self.mode not in ("clean", "mean"):
            raise WorldError(f"unknown guidance mode {self.mode!r}")


@dataclass
class GuidedResult:
    latents: LatentScene       # z: (S, N, d_z), standardized
    losses: torch.Tensor       # (S,)  final objective per sample (inf when failed)
    failed: torch.Tensor       # (S,) bool
    states: torch.Tensor       # (S, N, T+1, 4) decoded world states
    actions: torch.Tensor      # (S, N, T, 2)
    messages: list = field(default_factory=list)


def clip_per_agent(g: torch.Tensor, max_norm: float) -> torch.Tensor:
    n = g.norm(dim=-1, keepdim=True)
    return g * torch.clamp(max_norm / n.clamp(min=1e-12), max=1.0)


def initial_noise(shape, seed: int) -> torch.Tensor:
    return torch.randn(shape, generator=torch.Generator().manual_seed(int(seed)), dtype=torch.float64)


def _objective_grad(objective: Objective, z0_hat: torch.Tensor, cond: CondLatent, codec: SceneCodec,
                    adv_rows: torch.Tensor) -> tuple:
    """Routed gradient of the objective w.r.t. the clean latent, plus per-sample loss."""
    z = z0_hat.detach().requires_grad_(True)
    states, _ = decode_tensor(z, cond, codec)
    out = objective(states)
    if isinstance(out, Routed):
        loss = out.total.detach()
        g = torch.zeros_like(z)
        row = adv_rows.view(*([1] * (z.dim() - 2)), -1, 1).to(z.dtype)
        for part, keep in ((out.adv, row), (out.others, 1.0 - row)):
            if part.requires_grad:
                (gp,) = torch.autograd.grad(part.sum(), z, retain_graph=True, allow_unused=True)
                if gp is not None:
                    g = g + gp * keep
    else:
        loss = out.detach()
        g = torch.zeros_like(z)
        if out.requires_grad:
            (gp,) = torch.autograd.grad(out.sum(), z, allow_unused=True)
            if gp is not None:
                g = gp
    return loss, g


def guided_sample(cond: CondLatent, objective: Optional[Objective], net: Denoiser, codec: SceneCodec,
                  schedule: NoiseSchedule, cfg: GuidedSampleConfig = GuidedSampleConfig(),
                  z_K: Optional[torch.Tensor] = None) -> GuidedResult:
    """Draw ``cfg.n_samples`` guided DDIM chains in one batch.

    With ``objective=None`` or ``guidance_scale=0`` the chain is the plain DDIM
    chain from the same initial noise.
    """
    N = len(cond.agent_ids)
    S = cfg.n_samples
    if z_K is None:
        z_K = initial_noise((S, N, codec.cfg.d_z), cfg.seed)
    adv_rows = cond.adv_mask
    guide = objective is not None and cfg.guidance_scale > 0
    failed = torch.zeros(S, dtype=torch.bool)
    messages = []
    ab = schedule.alpha_bar
    z = z_K
    for k in range(schedule.K, 0, -1):
        with torch.no_grad():
            z0_hat, eps = estimate_clean(z, k, cond.c, net, schedule)
            z0_hat, eps = clamp_clean(z, z0_hat, eps, k, schedule, cfg.clip_clean)
        g_total = None
        if guide:
            step = cfg.guidance_scale * (1.0 - float(ab[k]))
            for _ in range(cfg.iterations):
                try:
                    _, g = _objective_grad(objective, z0_hat, cond, codec, adv_rows)
                except (ArithmeticError, ValueError) as e:
                    failed[:] = True
                    messages.append(f"step {k}: guidance evaluation failed: {e}")
                    raise ModelError(messages[-1]) from e
                bad = ~torch.isfinite(g).all(-1).all(-1)
                if bad.any():
                    failed |= bad
                    messages.append(f"step {k}: non-finite guidance gradient in samples "
                                    f"{bad.nonzero().flatten().tolist()}")
                g = torch.where(bad.view(-1, 1, 1), torch.zeros_like(g), g)
                g = clip_per_agent(g, cfg.grad_clip) * step
                if cfg.mode == "clean":
                    z0_hat = z0_hat - g
                else:
                    g_total = g if g_total is None else g_total + g
                    break
        with torch.no_grad():
            z = ddim_compose(z0_hat, eps, k, schedule)
            if g_total is not None:
                z = z - g_total
    with torch.no_grad():
        states, actions = decode_tensor(z, cond, codec)
    if objective is not None:
        with torch.no_grad():
            out = objective(states)
        losses = (out.total if isinstance(out, Routed) else out).detach().clone()
    else:
        losses = torch.zeros(S, dtype=torch.float64)
    failed |= ~torch.isfinite(losses)
    losses[failed] = float("inf")
    if failed.all():
        raise ModelError("guided_sample: every sample failed; " + "; ".join(messages[-3:]))
    latents = LatentScene(z, cond.agent_ids, cond.adv_mask, 0, standardized=True)
    return GuidedResult(latents, losses, failed, states, actions, messages)


# --------------------------------------------------------------------------
# selection


@dataclass(frozen=True)
class Feasibility:
    accel_max: float = 6.0
    yaw_rate_max: float = 1.0
    curvature_max: float = 0.2   # 1/m, i.e. 5 m minimum turning radius
    tol: float = 0.1


def feasible(actions: torch.Tensor, states: torch.Tensor, f: Feasibility = Feasibility()) -> torch.Tensor:
    """Per-sample feasibility of decoded rollouts: (S, N, T, 2), (S, N, T+1, 4) -> (S,)."""
    acc, yaw = actions[..., 0].abs(), actions[..., 1].abs()
    v = states[..., 1:, 3]
    ok = (acc <= f.accel_max + 1e-9) & (yaw <= f.yaw_rate_max + 1e-9) & (yaw <= f.curvature_max * v + f.tol)
    return ok.flatten(1).all(-1)


@dataclass
class Selection:
    index: int
    feasible: bool
    warning: Optional[str] = None


def select_best(losses: Sequence[float], feasible_mask: Sequence[bool],
                failed: Optional[Sequence[bool]] = None) -> Selection:
    """Lowest-loss feasible sample; falls back to the global argmin with a warning."""
    losses = np.asarray(losses, dtype=np.float64)
    if losses.size == 0:
        raise WorldError("select_best: no samples")
    feas = np.asarray(feasible_mask, dtype=bool)
    ok = np.ones_like(feas) if failed is None else ~np.asarray(failed, dtype=bool)
    if not ok.any():
        raise WorldError("select_best: every sample failed")
    cand = np.flatnonzero(feas & ok)
    if cand.size:
        return Selection(int(cand[np.argmin(losses[cand])]), True)
    live = np.flatnonzero(ok)
    idx = int(live[np.argmin(losses[live])])
    msg = "no feasible sample; returning the lowest-loss infeasible one"
    warnings.warn(msg, RuntimeWarning, stacklevel=2)
    return Selection(idx, False, msg)


# --------------------------------------------------------------------------
# persistence


def save_denoiser(net: Denoiser, schedule: NoiseSchedule, path) -> str:
    tensors = {k: v.detach().numpy() for k, v in net.state_dict().items()}
    return write_blob(path, DIFF_SCHEMA, tensors,
                      {"config": asdict(net.cfg), "schedule": schedule.to_dict()})


def load_denoiser(path) -> tuple:
    header, tensors = read_blob(path, DIFF_SCHEMA)
    net = Denoiser(DenoiserConfig(**header["config"]))
    net.load_state_dict({k: torch.as_tensor(v) for k, v in tensors.items()})
    return net.eval(), NoiseSchedule(**header["schedule"])
