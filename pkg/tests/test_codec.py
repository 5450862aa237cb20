import math

import numpy as np
import pytest
import torch
from hypothesis import given, settings, strategies as st

from advscene.codec import (
    CodecConfig, ModelError, SceneCodec, build_codec_dataset, codec_state_hash, decode,
    decode_tensor, encode_posterior, encode_prior, kl_to_standard, load_codec, local_to_world,
    save_codec, scene_features, train_codec,
)
from advscene.world import AgentRecord, Trajectory, WorldError, bicycle_step_t


def small_codec(seed=0):
    torch.manual_seed(seed)
    return SceneCodec(CodecConfig(hidden=32, nbr_hidden=16)).eval()


def rigid(scenario, angle, dx, dy):
    c, s = math.cos(angle), math.sin(angle)

    def move(arr):
        out = arr.copy()
        out[:, 0] = c * arr[:, 0] - s * arr[:, 1] + dx
        out[:, 1] = s * arr[:, 0] + c * arr[:, 1] + dy
        out[:, 2] = arr[:, 2] + angle
        return out

    agents = [AgentRecord(a.id, a.footprint, Trajectory.from_array(move(a.past.as_array())),
                          Trajectory.from_array(move(a.future.as_array())))
              for a in scenario.agents]
    return scenario.replace(agents=tuple(agents))


class TestFeatures:
    def test_shapes(self, straight_scenes):
        cfg = CodecConfig()
        s = straight_scenes[0]
        f = scene_features(s, k=cfg.k_neighbors)
        n = len(s.agents)
        assert f["base"].shape == (n, cfg.base_dim)
        assert f["nbr"].shape == (n, cfg.k_neighbors, 9)
        assert f["nbr_mask"].shape == (n, cfg.k_neighbors)
        assert np.isfinite(f["base"]).all()

    def test_own_history_is_in_own_frame(self, straight_scenes):
        s = straight_scenes[0]
        f = scene_features(s)
        own_now = f["base"][:, 20:25]
        # current state maps to the origin with zero relative heading
        assert np.allclose(own_now[:, :4], [[0, 0, 1, 0]] * len(s.agents), atol=1e-12)

    @settings(max_examples=15, deadline=None)
    @given(st.floats(-math.pi, math.pi), st.floats(-30, 30), st.floats(-30, 30))
    def test_agent_features_invariant_to_rigid_motion(self, straight_scenes, angle, dx, dy):
        s = straight_scenes[1]
        a, b = scene_features(s), scene_features(rigid(s, angle, dx, dy))
        assert np.allclose(a["base"][:, :25], b["base"][:, :25], atol=1e-9)
        assert np.allclose(a["nbr"], b["nbr"], atol=1e-9)
        assert (a["nbr_mask"] == b["nbr_mask"]).all()

    def test_neighbors_sorted_by_distance_then_id(self, straight_scenes):
        s = straight_scenes[2]
        f = scene_features(s)
        d = f["nbr"][..., 7]
        m = f["nbr_mask"]
        for row, mask in zip(d, m):
            vals = row[mask]
            assert (np.diff(vals) >= -1e-12).all()


class TestDecoder:
    def test_local_to_world_matches_rotation(self):
        local = torch.tensor([[[[1.0, 2.0, 0.3, 5.0]]]], dtype=torch.float64)
        start = torch.tensor([[10.0, -4.0, math.pi / 2, 5.0]], dtype=torch.float64)
        w = local_to_world(local, start)[0, 0, 0]
        assert torch.allclose(w, torch.tensor([10 - 2.0, -4 + 1.0, math.pi / 2 + 0.3, 5.0],
                                              dtype=torch.float64))

    def test_decoded_rollout_obeys_bicycle_model_and_bounds(self, straight_scenes):
        codec = small_codec()
        s = straight_scenes[0]
        cond = encode_prior(s, codec)
        z = torch.randn(3, len(cond.agent_ids), codec.cfg.d_z, dtype=torch.float64) * 3
        states, actions = decode_tensor(z, cond, codec)
        states, actions = states.detach(), actions.detach()
        assert states.shape == (3, len(cond.agent_ids), 13, 4)
        assert (actions[..., 0].abs() <= 6 + 1e-12).all()
        assert (actions[..., 1].abs() <= 1 + 1e-12).all()
        assert torch.allclose(states[..., 0, :], cond.start.expand(3, -1, -1))
        for t in range(12):
            nxt = bicycle_step_t(states[..., t, :], actions[..., t, :], 0.5)
            assert torch.allclose(nxt, states[..., t + 1, :], atol=1e-9)

    def test_decode_rejects_non_finite(self, straight_scenes):
        codec = small_codec()
        cond = encode_prior(straight_scenes[0], codec)
        z = torch.full((len(cond.agent_ids), codec.cfg.d_z), float("nan"), dtype=torch.float64)
        with pytest.raises(ModelError):
            decode_tensor(z, cond, codec)

    def test_decoder_chain_gradient_matches_finite_differences(self, straight_scenes):
        codec = small_codec(1)
        gen = torch.Generator().manual_seed(0)
        worst = 0.0
        for i in range(20):
            s = straight_scenes[i % len(straight_scenes)]
            cond = encode_prior(s, codec)
            z = torch.randn(len(cond.agent_ids), codec.cfg.d_z, generator=gen, dtype=torch.float64)
            w = torch.randn(len(cond.agent_ids), 13, 4, generator=gen, dtype=torch.float64)
            f = lambda zz: (decode_tensor(zz, cond, codec)[0] * w).sum()
            zz = z.clone().requires_grad_(True)
            (g,) = torch.autograd.grad(f(zz), zz)
            d = torch.randn(z.shape, generator=gen, dtype=torch.float64)
            h = 1e-6
            fd = (f(z + h * d) - f(z - h * d)).item() / (2 * h)
            an = (g * d).sum().item()
            worst = max(worst, abs(an - fd) / max(1.0, abs(fd)))
        assert worst < 1e-3


class TestLatents:
    def test_kl_matches_closed_form(self):
        mean = torch.tensor([[0.5, -1.0]], dtype=torch.float64)
        logvar = torch.tensor([[0.2, -0.7]], dtype=torch.float64)
        var = logvar.exp()
        expect = 0.5 * (var + mean ** 2 - 1 - logvar).sum()
        assert torch.allclose(kl_to_standard(mean, logvar).sum(), expect)

    def test_posterior_sampling_is_seeded(self, straight_scenes):
        codec = small_codec()
        s = straight_scenes[0]
        g1 = torch.Generator().manual_seed(3)
        g2 = torch.Generator().manual_seed(3)
        a = encode_posterior(s, codec, generator=g1)[2].z
        b = encode_posterior(s, codec, generator=g2)[2].z
        assert torch.equal(a, b)

    def test_decode_wrapper_returns_trajectories(self, straight_scenes):
        codec = small_codec()
        s = straight_scenes[0]
        cond = encode_prior(s, codec)
        _, _, latent = encode_posterior(s, codec, generator=torch.Generator().manual_seed(0))
        out = decode(latent, cond, codec)
        trajs = out.trajectories()
        assert set(trajs) == set(cond.agent_ids)
        assert all(len(t) == s.horizon for t in trajs.values())


class TestTraining:
    def test_needs_enough_scenarios(self, straight_scenes):
        with pytest.raises(WorldError):
            train_codec(straight_scenes, CodecConfig(epochs=1))

    def test_short_training_reduces_loss_and_round_trips(self, straight_scenes, tmp_path):
        data = build_codec_dataset(straight_scenes)
        cfg = CodecConfig(epochs=15, hidden=32, nbr_hidden=16, batch_size=16)
        codec, log = train_codec(straight_scenes, cfg, dataset=data)
        assert log.losses[-1] < log.losses[0]
        p = tmp_path / "codec.blob"
        save_codec(codec, p)
        back = load_codec(p)
        assert codec_state_hash(back) == codec_state_hash(codec)

    def test_trained_toy_codec_reconstructs_held_out(self, toy_models):
        from advscene.codec import reconstruction_ade
        from advscene.synth import synth_scenarios
        ade = reconstruction_ade(toy_models.codec, synth_scenarios(77, 20, "straight"))
        assert ade < 0.5
