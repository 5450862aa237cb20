"""Scene codec: past-context encoder, past+future posterior, and an autoregressive
decoder that emits bounded actions and integrates them through the bicycle model.

All features are expressed in each agent's current frame (origin at its current
position, x axis along its heading), so encodings are invariant to rigid motions
of the whole scene.
"""

from __future__ import annotations

import math
import time
from dataclasses import asdict, dataclass, field
from typing import Optional, Sequence

import numpy as np
import torch
from torch import nn

from .control import route_path
from .io import read_blob, write_blob
from .world import (
    ACCEL_MAX, TICK, V_MAX, YAW_RATE_MAX, AgentState, Scenario, Trajectory, WorldError,
    bicycle_step_t, normalize_angle, normalize_angle_t,
)

CODEC_SCHEMA = "codec.v1"

POS_SCALE = 10.0
SPEED_SCALE = 10.0
LOOKAHEAD_S = (0.0, 5.0, 10.0, 20.0, 30.0, 45.0, 60.0)
FIELD_FWD = (-5.0, 0.0, 5.0, 10.0, 20.0, 30.0)
FIELD_LAT = (-6.0, -3.0, 0.0, 3.0, 6.0)
FIELD_CAP = 6.0
NBR_DIM = 9


class ModelError(RuntimeError):
    """Training divergence or an unusable model state."""


@dataclass(frozen=True)
class CodecConfig:
    d_z: int = 32
    d_c: int = 32
    hidden: int = 128
    nbr_hidden: int = 64
    k_neighbors: int = 4
    beta_kl: float = 1e-3
    epochs: int = 200
    batch_size: int = 256
    lr: float = 1e-3
    seed: int = 0
    horizon: int = 12
    t_hist: int = 4
    tick: float = TICK
    accel_max: float = ACCEL_MAX
    yaw_rate_max: float = YAW_RATE_MAX
    v_max: float = V_MAX

    @property
    def own_dim(self) -> int:
        return 5 * (self.t_hist + 1)

    @property
    def lane_dim(self) -> int:
        return 3 + 2 * len(LOOKAHEAD_S) + len(FIELD_FWD) * len(FIELD_LAT)

    @property
    def base_dim(self) -> int:
        return self.own_dim + self.lane_dim

    @property
    def fut_dim(self) -> int:
        return 5 * self.horizon


@dataclass
class CondLatent:
    """Per-agent conditioning vectors ``c`` (non-ego agents, scenario order)."""
    c: torch.Tensor            # (N, d_c)
    agent_ids: tuple
    adv_mask: torch.Tensor     # (N,) bool
    start: torch.Tensor        # (N, 4) current world states
    base: torch.Tensor = None  # normalized features, kept for the posterior

    def __post_init__(self):
        if not torch.isfinite(self.c).all():
            raise ModelError("conditioning latent is not finite")


@dataclass
class LatentScene:
    """Per-agent scene latents; ``z`` may carry leading sample dims, ``(..., N, d_z)``."""
    z: torch.Tensor
    agent_ids: tuple
    adv_mask: torch.Tensor
    k: int = 0
    standardized: bool = True

    def __post_init__(self):
        if self.k < 0:
            raise ModelError(f"diffusion step must be >= 0, got {self.k}")
        if self.z.shape[-2] != len(self.agent_ids):
            raise ModelError("latent rows do not match agent ids")


@dataclass
class Decoded:
    states: torch.Tensor   # (..., N, T+1, 4) world frame, index 0 = current
    actions: torch.Tensor  # (..., N, T, 2)
    agent_ids: tuple
    tick: float

    def trajectories(self) -> dict:
        """Future trajectories (steps 1..T) per agent id; requires no sample dims."""
        arr = self.states.detach().cpu().numpy()
        if arr.ndim != 3:
            raise ModelError("trajectories() needs a single sample")
        return {aid: Trajectory.from_array(arr[i, 1:], self.tick)
                for i, aid in enumerate(self.agent_ids)}


# --------------------------------------------------------------------------
# features (numpy, not differentiated)


def _to_frame(pts: np.ndarray, origin: np.ndarray, heading: float) -> np.ndarray:
    c, s = math.cos(heading), math.sin(heading)
    d = np.asarray(pts, dtype=np.float64) - origin[:2]
    return np.stack([c * d[..., 0] + s * d[..., 1], -s * d[..., 0] + c * d[..., 1]], -1)


def _from_frame(pts: np.ndarray, origin, heading: float) -> np.ndarray:
    c, s = math.cos(heading), math.sin(heading)
    return np.stack([origin[0] + c * pts[..., 0] - s * pts[..., 1],
                     origin[1] + s * pts[..., 0] + c * pts[..., 1]], -1)


def _states_in_frame(states: np.ndarray, origin: np.ndarray) -> np.ndarray:
    """(n, 4) world states -> (n, 5) [x, y, cos dθ, sin dθ, v] in the origin frame."""
    xy = _to_frame(states[:, :2], origin, origin[2]) / POS_SCALE
    dth = states[:, 2] - origin[2]
    return np.column_stack([xy, np.cos(dth), np.sin(dth), states[:, 3] / SPEED_SCALE])


def _lane_features(scenario: Scenario, cur: np.ndarray) -> np.ndarray:
    map_ = scenario.map
    proj = map_.project(cur[0], cur[1], cur[2], max_heading_error=math.pi / 2)
    n_look = 2 * len(LOOKAHEAD_S)
    if proj is None:
        lane = np.zeros(3 + n_look)
    else:
        lane_id, s, lateral, lane_heading, _ = proj
        path = route_path(map_, [lane_id], min_length=s + LOOKAHEAD_S[-1] + 1.0)
        pts = np.stack([path.point_at(s + ds) for ds in LOOKAHEAD_S])
        local = _to_frame(pts, cur, cur[2]) / POS_SCALE
        herr = normalize_angle(cur[2] - lane_heading)
        lane = np.concatenate([[1.0, lateral, herr], local.ravel()])
    fwd, lat = np.meshgrid(FIELD_FWD, FIELD_LAT, indexing="ij")
    probe = _from_frame(np.stack([fwd.ravel(), lat.ravel()], -1), cur, cur[2])
    if map_.distance_field is None:
        dist = np.full(len(probe), FIELD_CAP)
    else:
        dist = np.minimum(map_.distance_at(probe), FIELD_CAP)
    return np.concatenate([lane, dist / FIELD_CAP])


def _neighbor_features(scenario: Scenario, agent_idx: int, cur_all: np.ndarray,
                       prev_all: np.ndarray, k: int) -> tuple:
    cur = cur_all[agent_idx]
    ids = scenario.agent_ids
    others = [j for j in range(len(ids)) if j != agent_idx]
    d = np.hypot(cur_all[others, 0] - cur[0], cur_all[others, 1] - cur[1])
    order = sorted(range(len(others)), key=lambda q: (d[q], ids[others[q]]))[:k]
    feats = np.zeros((k, NBR_DIM))
    mask = np.zeros(k, dtype=bool)
    for slot, q in enumerate(order):
        j = others[q]
        now = _states_in_frame(cur_all[j][None], cur)[0]
        prev = _to_frame(prev_all[j][None, :2], cur, cur[2])[0] / POS_SCALE
        feats[slot] = np.concatenate([now, prev, [d[q] / POS_SCALE,
                                                   float(ids[j] == scenario.ego_id)]])
        mask[slot] = True
    return feats, mask


def scene_features(scenario: Scenario, agent_ids: Optional[Sequence[int]] = None,
                   k: int = 4) -> dict:
    """Raw (unnormalized) per-agent features for the requested agents."""
    agent_ids = scenario.agent_ids if agent_ids is None else list(agent_ids)
    idx = {aid: i for i, aid in enumerate(scenario.agent_ids)}
    pasts = [a.past.as_array() for a in scenario.agents]
    if any(len(p) == 0 for p in pasts):
        raise WorldError("agent with empty past")
    cur_all = np.stack([p[-1] for p in pasts])
    prev_all = np.stack([p[-2] if len(p) > 1 else p[-1] for p in pasts])
    own, lane, nbr, nmask = [], [], [], []
    for aid in agent_ids:
        i = idx[aid]
        cur = cur_all[i]
        own.append(_states_in_frame(pasts[i], cur).ravel())
        lane.append(_lane_features(scenario, cur))
        f, m = _neighbor_features(scenario, i, cur_all, prev_all, k)
        nbr.append(f)
        nmask.append(m)
    return {
        "base": np.concatenate([np.stack(own), np.stack(lane)], axis=1),
        "nbr": np.stack(nbr),
        "nbr_mask": np.stack(nmask),
        "start": cur_all[[idx[a] for a in agent_ids]],
    }


def future_features(future: np.ndarray, cur: np.ndarray) -> np.ndarray:
    return _states_in_frame(future, cur).ravel()


# --------------------------------------------------------------------------
# networks


def _mlp(sizes: Sequence[int], final_act: bool = False) -> nn.Sequential:
    layers = []
    for i in range(len(sizes) - 1):
        layers.append(nn.Linear(sizes[i], sizes[i + 1]))
        if i < len(sizes) - 2 or final_act:
            layers.append(nn.Tanh())
    return nn.Sequential(*layers)


class SceneCodec(nn.Module):
    """Parameters of the prior encoder, posterior encoder and decoder, plus
    feature and latent normalization statistics."""

    def __init__(self, cfg: CodecConfig = CodecConfig()):
        super().__init__()
        self.cfg = cfg
        h = cfg.hidden
        self.nbr_net = _mlp([NBR_DIM, cfg.nbr_hidden, cfg.nbr_hidden], final_act=True)
        ctx = cfg.base_dim + 2 * cfg.nbr_hidden
        self.prior = _mlp([ctx, h, h, cfg.d_c])
        self.posterior = _mlp([ctx + cfg.fut_dim, h, h, 2 * cfg.d_z])
        self.decoder = _mlp([cfg.d_z + cfg.d_c + 6, h, h, 2])
        for name, dim in (("base", cfg.base_dim), ("nbr", NBR_DIM), ("fut", cfg.fut_dim),
                          ("z", cfg.d_z)):
            self.register_buffer(f"{name}_mean", torch.zeros(dim, dtype=torch.float64))
            self.register_buffer(f"{name}_std", torch.ones(dim, dtype=torch.float64))
        self.double()

    # ---- normalization
    def set_feature_stats(self, base: np.ndarray, nbr: np.ndarray, nbr_mask: np.ndarray,
                          fut: np.ndarray) -> None:
        valid = nbr[nbr_mask]
        for name, arr in (("base", base), ("nbr", valid if len(valid) else nbr.reshape(-1, NBR_DIM)),
                          ("fut", fut)):
            getattr(self, f"{name}_mean").copy_(torch.as_tensor(arr.mean(0)))
            getattr(self, f"{name}_std").copy_(torch.as_tensor(np.maximum(arr.std(0), 1e-3)))

    def standardize(self, z: torch.Tensor) -> torch.Tensor:
        return (z - self.z_mean) / self.z_std

    def unstandardize(self, z: torch.Tensor) -> torch.Tensor:
        return z * self.z_std + self.z_mean

    # ---- encoders
    def context(self, base: torch.Tensor, nbr: torch.Tensor, nbr_mask: torch.Tensor) -> torch.Tensor:
        b = (base - self.base_mean) / self.base_std
        e = self.nbr_net((nbr - self.nbr_mean) / self.nbr_std)
        m = nbr_mask.unsqueeze(-1).to(e.dtype)
        cnt = m.sum(-2).clamp(min=1.0)
        mean = (e * m).sum(-2) / cnt
        mx = torch.where(m.bool(), e, torch.full_like(e, -1.0)).max(-2).values
        mx = torch.where(m.sum(-2) > 0, mx, torch.zeros_like(mx))
        return torch.cat([b, mean, mx], -1)

    def prior_c(self, ctx: torch.Tensor) -> torch.Tensor:
        return self.prior(ctx)

    def posterior_stats(self, ctx: torch.Tensor, fut: torch.Tensor) -> tuple:
        f = (fut - self.fut_mean) / self.fut_std
        out = self.posterior(torch.cat([ctx, f], -1))
        mean, logvar = out.chunk(2, -1)
        return mean, logvar.clamp(-30.0, 10.0)

    # ---- decoder
    def decode_local(self, z: torch.Tensor, c: torch.Tensor, v0: torch.Tensor) -> tuple:
        """Roll out in each agent's own frame.

        ``z``: (..., N, d_z) raw latents; ``c``: (N, d_c); ``v0``: (N,) start speeds.
        Returns local states (..., N, T+1, 4) and actions (..., N, T, 2).
        """
        cfg = self.cfg
        lead = z.shape[:-1]
        c = c.expand(*lead, c.shape[-1])
        zero = torch.zeros(lead, dtype=z.dtype)
        state = torch.stack([zero, zero, zero, v0.expand(lead).to(z.dtype)], -1)
        bounds = torch.tensor([cfg.accel_max, cfg.yaw_rate_max], dtype=z.dtype)
        states, actions = [state], []
        for t in range(cfg.horizon):
            tt = torch.full(lead + (1,), t / cfg.horizon, dtype=z.dtype)
            feat = torch.cat([
                state[..., :2] / POS_SCALE, torch.cos(state[..., 2:3]), torch.sin(state[..., 2:3]),
                state[..., 3:4] / SPEED_SCALE, tt], -1)
            a = torch.tanh(self.decoder(torch.cat([z, c, feat], -1))) * bounds
            state = bicycle_step_t(state, a, cfg.tick, cfg.v_max)
            states.append(state)
            actions.append(a)
        return torch.stack(states, -2), torch.stack(actions, -2)


def local_to_world(local: torch.Tensor, start: torch.Tensor) -> torch.Tensor:
    """Transform (..., N, T+1, 4) local states by per-agent start poses (N, 4)."""
    x0, y0, h0 = (start[:, i].unsqueeze(-1) for i in range(3))
    c, s = torch.cos(h0), torch.sin(h0)
    lx, ly = local[..., 0], local[..., 1]
    return torch.stack([x0 + c * lx - s * ly, y0 + s * lx + c * ly,
                        normalize_angle_t(local[..., 2] + h0), local[..., 3]], -1)


# --------------------------------------------------------------------------
# public operations


def _agent_order(scenario: Scenario) -> tuple:
    return tuple(a.id for a in scenario.non_ego)


def _features_tensors(scenario: Scenario, codec: SceneCodec, ids) -> dict:
    f = scene_features(scenario, ids, codec.cfg.k_neighbors)
    return {k: torch.as_tensor(v) for k, v in f.items()}


def encode_prior(scenario: Scenario, codec: SceneCodec,
                 agent_ids: Optional[Sequence[int]] = None) -> CondLatent:
    """Conditioning latents for the non-ego agents (or ``agent_ids``)."""
    ids = _agent_order(scenario) if agent_ids is None else tuple(agent_ids)
    f = _features_tensors(scenario, codec, ids)
    with torch.no_grad():
        ctx = codec.context(f["base"], f["nbr"], f["nbr_mask"])
        c = codec.prior_c(ctx)
    adv = torch.tensor([aid == scenario.adv_id for aid in ids])
    return CondLatent(c, ids, adv, f["start"], ctx)


def _future_array(scenario: Scenario, ids, futures: Optional[dict]) -> np.ndarray:
    out = []
    for aid in ids:
        a = scenario.agent(aid)
        fut = futures[aid] if futures is not None else a.future
        if fut is None:
            raise WorldError(f"agent {aid} has no future")
        arr = fut.as_array() if isinstance(fut, Trajectory) else np.asarray(fut, dtype=np.float64)
        if len(arr) != scenario.horizon:
            raise WorldError(f"agent {aid}: future length {len(arr)} != horizon {scenario.horizon}")
        out.append(future_features(arr, a.current.as_array()))
    return np.stack(out)


def encode_posterior(scenario: Scenario, codec: SceneCodec, futures: Optional[dict] = None,
                     eps: Optional[torch.Tensor] = None, generator: Optional[torch.Generator] = None,
                     agent_ids: Optional[Sequence[int]] = None) -> tuple:
    """Posterior ``(mean, logvar, LatentScene)``; ``eps=0`` returns the mean.

    The sampled latent is in raw (unstandardized) units.
    """
    ids = _agent_order(scenario) if agent_ids is None else tuple(agent_ids)
    if len(scenario.agent(ids[0]).past) == 0:
        raise WorldError("agent with empty past")
    f = _features_tensors(scenario, codec, ids)
    fut = torch.as_tensor(_future_array(scenario, ids, futures))
    with torch.no_grad():
        ctx = codec.context(f["base"], f["nbr"], f["nbr_mask"])
        mean, logvar = codec.posterior_stats(ctx, fut)
    if eps is None:
        eps = torch.randn(mean.shape, generator=generator, dtype=mean.dtype)
    z = mean + torch.exp(0.5 * logvar) * eps
    adv = torch.tensor([aid == scenario.adv_id for aid in ids])
    return mean, logvar, LatentScene(z, ids, adv, 0, standardized=False)


def decode_tensor(z: torch.Tensor, cond: CondLatent, codec: SceneCodec,
                  standardized: bool = True) -> tuple:
    """Differentiable decode of ``z`` (..., N, d_z) -> world states, actions."""
    if not torch.isfinite(z).all():
        raise ModelError("decode: latent is not finite")
    zr = codec.unstandardize(z) if standardized else z
    local, actions = codec.decode_local(zr, cond.c, cond.start[:, 3])
    return local_to_world(local, cond.start), actions


def decode(latent: LatentScene, cond: CondLatent, codec: SceneCodec, tick: float = TICK) -> Decoded:
    if tuple(latent.agent_ids) != tuple(cond.agent_ids):
        raise ModelError("latent and conditioning agent order differ")
    states, actions = decode_tensor(latent.z, cond, codec, latent.standardized)
    return Decoded(states, actions, tuple(latent.agent_ids), tick)


# --------------------------------------------------------------------------
# training


@dataclass
class CodecDataset:
    base: torch.Tensor
    nbr: torch.Tensor
    nbr_mask: torch.Tensor
    fut: torch.Tensor
    target: torch.Tensor   # (M, T, 2) future positions in the agent frame (m)
    v0: torch.Tensor

    def __len__(self) -> int:
        return len(self.base)


def build_codec_dataset(scenarios: Sequence[Scenario], k: int = 4) -> CodecDataset:
    """Every agent of every scenario (ego included) becomes one training example."""
    base, nbr, nmask, fut, target, v0 = [], [], [], [], [], []
    for s in scenarios:
        f = scene_features(s, None, k)
        base.append(f["base"])
        nbr.append(f["nbr"])
        nmask.append(f["nbr_mask"])
        for a in s.agents:
            if a.future is None:
                raise WorldError("training scenarios need ground-truth futures")
            cur = a.current.as_array()
            arr = a.future.as_array()
            fut.append(future_features(arr, cur))
            target.append(_to_frame(arr[:, :2], cur, cur[2]))
            v0.append(cur[3])
    cat = lambda xs: torch.as_tensor(np.concatenate(xs))
    return CodecDataset(cat(base), cat(nbr), cat(nmask), torch.as_tensor(np.stack(fut)),
                        torch.as_tensor(np.stack(target)), torch.as_tensor(np.array(v0)))


def _safe_dist(a: torch.Tensor, b: torch.Tensor) -> torch.Tensor:
    return torch.sqrt(((a - b) ** 2).sum(-1) + 1e-12)


def kl_to_standard(mean: torch.Tensor, logvar: torch.Tensor) -> torch.Tensor:
    """KL(N(mean, exp(logvar)) || N(0, I)) per row."""
    return 0.5 * (mean ** 2 + logvar.exp() - 1.0 - logvar).sum(-1)


def codec_loss(codec: SceneCodec, data: CodecDataset, idx: torch.Tensor, beta: float,
               generator: Optional[torch.Generator] = None) -> tuple:
    ctx = codec.context(data.base[idx], data.nbr[idx], data.nbr_mask[idx])
    mean, logvar = codec.posterior_stats(ctx, data.fut[idx])
    if generator is None:
        z = mean
    else:
        z = mean + torch.exp(0.5 * logvar) * torch.randn(mean.shape, generator=generator, dtype=mean.dtype)
    c = codec.prior_c(ctx)
    local, _ = codec.decode_local(z, c, data.v0[idx])
    ade = _safe_dist(local[..., 1:, :2], data.target[idx]).mean()
    kl = kl_to_standard(mean, logvar).mean()
    loss = ade + beta * kl if beta > 0 else ade
    return loss, ade, kl


@dataclass
class TrainLog:
    losses: list = field(default_factory=list)
    ade: list = field(default_factory=list)
    kl: list = field(default_factory=list)
    seconds: float = 0.0


def train_codec(scenarios: Sequence[Scenario], cfg: CodecConfig = CodecConfig(),
                dataset: Optional[CodecDataset] = None, log_every: int = 0) -> tuple:
    """Fit the codec on ground-truth futures; returns ``(codec, TrainLog)``."""
    if dataset is None:
        if len(scenarios) < 100:
            raise WorldError(f"train_codec needs >= 100 scenarios, got {len(scenarios)}")
        dataset = build_codec_dataset(scenarios, cfg.k_neighbors)
    t0 = time.perf_counter()
    with torch.random.fork_rng(devices=[]):
        torch.manual_seed(cfg.seed)
        codec = SceneCodec(cfg)
        fut = dataset.fut.numpy()
        codec.set_feature_stats(dataset.base.numpy(), dataset.nbr.numpy(),
                                dataset.nbr_mask.numpy(), fut)
        gen = torch.Generator().manual_seed(cfg.seed)
        opt = torch.optim.Adam(codec.parameters(), lr=cfg.lr)
        sched = torch.optim.lr_scheduler.CosineAnnealingLR(opt, T_max=max(cfg.epochs, 1),
                                                           eta_min=cfg.lr * 0.05)
        log = TrainLog()
        n = len(dataset)
        for epoch in range(cfg.epochs):
            perm = torch.randperm(n, generator=gen)
            tot = [0.0, 0.0, 0.0]
            for b in range(0, n, cfg.batch_size):
                idx = perm[b:b + cfg.batch_size]
                loss, ade, kl = codec_loss(codec, dataset, idx, cfg.beta_kl, gen)
                if not torch.isfinite(loss):
                    raise ModelError(f"codec training diverged at epoch {epoch} (loss {loss.item()})")
                opt.zero_grad()
                loss.backward()
                nn.utils.clip_grad_norm_(codec.parameters(), 5.0)
                opt.step()
                w = len(idx) / n
                tot[0] += loss.item() * w
                tot[1] += ade.item() * w
                tot[2] += kl.item() * w
            sched.step()
            log.losses.append(tot[0])
            log.ade.append(tot[1])
            log.kl.append(tot[2])
            if log_every and (epoch + 1) % log_every == 0:
                print(f"codec epoch {epoch + 1}: loss {tot[0]:.4f} ade {tot[1]:.4f} kl {tot[2]:.2f}")
        fit_latent_stats(codec, dataset)
    log.seconds = time.perf_counter() - t0
    return codec.eval(), log


def fit_latent_stats(codec: SceneCodec, data: CodecDataset) -> None:
    with torch.no_grad():
        ctx = codec.context(data.base, data.nbr, data.nbr_mask)
        mean, _ = codec.posterior_stats(ctx, data.fut)
        codec.z_mean.copy_(mean.mean(0))
        codec.z_std.copy_(mean.std(0).clamp(min=1e-2))


def reconstruction_ade(codec: SceneCodec, scenarios: Sequence[Scenario]) -> float:
    """Mean displacement between ground-truth futures and decoded posterior means."""
    data = build_codec_dataset(scenarios, codec.cfg.k_neighbors)
    with torch.no_grad():
        _, ade, _ = codec_loss(codec, data, torch.arange(len(data)), 0.0)
    return float(ade)


# --------------------------------------------------------------------------
# persistence


def save_codec(codec: SceneCodec, path) -> str:
    tensors = {k: v.detach().numpy() for k, v in codec.state_dict().items()}
    return write_blob(path, CODEC_SCHEMA, tensors, {"config": asdict(codec.cfg)})


def load_codec(path) -> SceneCodec:
    header, tensors = read_blob(path, CODEC_SCHEMA)
    codec = SceneCodec(CodecConfig(**header["config"]))
    codec.load_state_dict({k: torch.as_tensor(v) for k, v in tensors.items()})
    return codec.eval()


def codec_state_hash(codec: SceneCodec) -> str:
    import hashlib
    h = hashlib.sha256()
    for k, v in sorted(codec.state_dict().items()):
        h.update(k.encode())
        h.update(v.detach().numpy().astype("<f8").tobytes())
    return h.hexdigest()
