"""Training and on-disk caching of the small codec + denoiser pair used for evaluation."""

from __future__ import annotations

import json
import time
from dataclasses import asdict, dataclass, field
from pathlib import Path
from typing import Optional

import torch

from .codec import CodecConfig, load_codec, save_codec, train_codec
from .diffusion import (
    DenoiserConfig, NoiseSchedule, build_latent_dataset, load_denoiser, save_denoiser, train_denoiser,
)
from .io import canonical_json, config_hash
from .sim import Models
from .synth import synth_mixture

DEFAULT_MIXTURE = {"straight": 150, "curve": 100, "merge": 150, "intersection": 100}


@dataclass(frozen=True)
class ToyModelConfig:
    data_seed: int = 1
    mixture: dict = field(default_factory=lambda: dict(DEFAULT_MIXTURE))
    codec: CodecConfig = CodecConfig()
    denoiser: DenoiserConfig = DenoiserConfig()
    steps: int = 20
    schedule: str = "cosine"

    def to_dict(self) -> dict:
        return {"data_seed": self.data_seed, "mixture": dict(sorted(self.mixture.items())),
                "codec": asdict(self.codec), "denoiser": asdict(self.denoiser),
                "steps": self.steps, "schedule": self.schedule}

    @property
    def key(self) -> str:
        return config_hash(self.to_dict())[:16]


def train_toy_models(cfg: ToyModelConfig = ToyModelConfig(), log=None) -> tuple:
    """Synthesize the training mixture, then train the codec and the denoiser.

    Returns ``(models, info)`` where ``info`` records losses and timings.
    """
    say = log or (lambda msg: None)
    t0 = time.perf_counter()
    scenarios = synth_mixture(cfg.data_seed, cfg.mixture)
    say(f"synthesized {len(scenarios)} scenarios in {time.perf_counter() - t0:.1f}s")
    codec, clog = train_codec(scenarios, cfg.codec)
    say(f"codec trained in {clog.seconds:.1f}s, final loss {clog.losses[-1]:.4f}")
    data = build_latent_dataset(scenarios, codec)
    schedule = NoiseSchedule(cfg.steps, cfg.schedule)
    net, dlog = train_denoiser(data, schedule, cfg.denoiser)
    say(f"denoiser trained in {dlog.seconds:.1f}s, final loss {dlog.losses[-1]:.4f}")
    info = {"codec_losses": list(clog.losses), "denoiser_losses": list(dlog.losses),
            "codec_seconds": clog.seconds, "denoiser_seconds": dlog.seconds}
    return Models(codec, net, schedule), info


def cached_toy_models(cache_dir, cfg: ToyModelConfig = ToyModelConfig(), log=None) -> Models:
    """Load the models for ``cfg`` from ``cache_dir``, training them on a miss.

    A fresh training run also writes ``info.json`` (losses and timings) next to the blobs.
    """
    d = Path(cache_dir) / cfg.key
    codec_p, diff_p = d / "codec.blob", d / "denoiser.blob"
    if codec_p.exists() and diff_p.exists() and (d / "info.json").exists():
        return Models(load_codec(codec_p), *load_denoiser(diff_p))
    threads = torch.get_num_threads()
    torch.set_num_threads(1)
    try:
        models, info = train_toy_models(cfg, log)
    finally:
        torch.set_num_threads(threads)
    d.mkdir(parents=True, exist_ok=True)
    save_codec(models.codec, codec_p)
    save_denoiser(models.net, models.schedule, diff_p)
    (d / "info.json").write_text(canonical_json(info) + "\n")
    return models


def toy_model_info(cache_dir, cfg: ToyModelConfig = ToyModelConfig()) -> dict:
    """Training losses and timings recorded when the cached models were trained."""
    return json.loads((Path(cache_dir) / cfg.key / "info.json").read_text())
