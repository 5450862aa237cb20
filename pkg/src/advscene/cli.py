"""Command-line entry point: synth, train, guide, run, dsl-check and report."""

from __future__ import annotations

import argparse
import csv
import io
import json
import sys
import time
from dataclasses import replace
from pathlib import Path
from typing import Optional

import torch

from .codec import ModelError, codec_state_hash, load_codec, save_codec, train_codec
from .config import CONFIG_SCHEMA, ConfigError, RunConfig, load_config
from .diffusion import (
    NoiseSchedule, build_latent_dataset, load_denoiser, save_denoiser, train_denoiser,
)
from .dsl import Diagnostic, DslError, GuidanceProgram, compile_source
from .guidance import canonical_source
from .io import canonical_json, file_sha256, load_scenario, save_scenario
from .llm import GuidanceFailure, ProviderError, fixture_context, make_provider, query_to_guidance
from .llm.pipeline import unit_test
from .metrics import compute_metrics, emit_report
from .sim import DiffusionGenerator, Models, RolloutRecord, SimConfig, run_batch
from .synth import synth_mixture, synth_scenarios
from .world import WorldError

MANIFEST_SCHEMA = "manifest.v1"
SWEEP_SAMPLES = (1, 5, 10)
SWEEP_STEPS = (10, 20, 50)
SWEEP_REPEATS = 3
SWEEP_COLUMNS = ("n_samples", "steps", "adv_ego_coll_pct", "adv_offroad_pct", "wall_time_s")

EXIT_OK, EXIT_USAGE, EXIT_FAILURE = 0, 1, 2


class UsageError(Exception):
    pass


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        raise UsageError(f"{self.prog}: {message}")


def _say(msg: str) -> None:
    print(msg, flush=True)


def _write_json(path: Path, obj) -> None:
    path.parent.mkdir(parents=True, exist_ok=True)
    path.write_text(canonical_json(obj) + "\n")


def _manifest(cfg: RunConfig, files: list, root: Path, **extra) -> dict:
    return {"schema": MANIFEST_SCHEMA, "config_hash": cfg.hash, "seed": cfg.seed,
            "files": [{"path": str(f.relative_to(root)), "sha256": file_sha256(f)} for f in files],
            **extra}


def _load_scenarios(cfg: RunConfig, directory: Optional[str] = None, limit: Optional[int] = None):
    root = Path(directory or cfg.paths.scenarios)
    man = root / "manifest.json"
    if not man.exists():
        raise WorldError(f"no scenario manifest at {man}; run `advscene synth` first")
    entries = json.loads(man.read_text())["files"]
    if limit is not None:
        entries = entries[:limit]
    return [load_scenario(root / e["path"]) for e in entries]


def _models(cfg: RunConfig, directory: Optional[str] = None) -> Models:
    root = Path(directory or cfg.paths.models)
    codec_p, diff_p = root / "codec.blob", root / "denoiser.blob"
    for p in (codec_p, diff_p):
        if not p.exists():
            raise WorldError(f"missing model blob {p}; run `advscene train` first")
    return Models.load(codec_p, diff_p)


# --------------------------------------------------------------------------
# commands


def cmd_synth(cfg: RunConfig, args) -> int:
    out = Path(args.out or cfg.paths.scenarios)
    s = cfg.synth
    if s.mixture:
        scenarios = synth_mixture(cfg.seed, s.mixture)
    else:
        scenarios = synth_scenarios(cfg.seed, s.count, s.template)
    out.mkdir(parents=True, exist_ok=True)
    files = []
    for i, sc in enumerate(scenarios):
        p = out / f"scenario_{i:05d}.json"
        save_scenario(sc, p)
        files.append(p)
    _write_json(out / "manifest.json", _manifest(cfg, files, out, kind="scenarios"))
    _say(f"wrote {len(files)} scenarios to {out}")
    return EXIT_OK


def _loss_csv(path: Path, losses: list) -> None:
    buf = io.StringIO()
    w = csv.writer(buf, lineterminator="\n")
    w.writerow(("epoch", "loss"))
    for i, v in enumerate(losses, 1):
        w.writerow((i, f"{v:.8f}"))
    path.write_text(buf.getvalue())


def _state_hash(module) -> str:
    return codec_state_hash(module)


def cmd_train(cfg: RunConfig, args) -> int:
    torch.set_num_threads(max(1, args.jobs))
    root = Path(args.models or cfg.paths.models)
    root.mkdir(parents=True, exist_ok=True)
    stage = args.stage
    blob = root / ("codec.blob" if stage == "codec" else "denoiser.blob")
    meta_p = root / f"{stage}.meta.json"
    section = (cfg.codec if stage == "codec" else {"denoiser": cfg.denoiser, "schedule": cfg.schedule})
    stage_hash = canonical_json({"stage": stage, "seed": cfg.seed, "section": repr(section),
                                 "scenarios": cfg.paths.scenarios})
    if args.resume and blob.exists() and meta_p.exists():
        meta = json.loads(meta_p.read_text())
        module = load_codec(blob) if stage == "codec" else load_denoiser(blob)[0]
        h = _state_hash(module)
        if meta.get("stage_key") != stage_hash:
            raise WorldError(f"{blob} was trained under a different configuration; drop --resume")
        if h != meta.get("state_hash"):
            raise ModelError(f"{blob} state hash {h} does not match its metadata")
        _say(f"resumed {stage} from {blob}; state hash {h}")
        return EXIT_OK
    scenarios = _load_scenarios(cfg, args.scenarios)
    if stage == "codec":
        codec, log = train_codec(scenarios, cfg.codec)
        save_codec(codec, blob)
        module, losses, seconds = codec, log.losses, log.seconds
    else:
        codec_p = root / "codec.blob"
        if not codec_p.exists():
            raise WorldError(f"missing {codec_p}; train the codec stage first")
        codec = load_codec(codec_p)
        data = build_latent_dataset(scenarios, codec)
        schedule = NoiseSchedule(cfg.schedule.steps, cfg.schedule.kind)
        net, log = train_denoiser(data, schedule, cfg.denoiser)
        save_denoiser(net, schedule, blob)
        module, losses, seconds = net, log.losses, log.seconds
    _loss_csv(root / f"{stage}_loss.csv", losses)
    h = _state_hash(module)
    _write_json(meta_p, {"schema": MANIFEST_SCHEMA, "config_hash": cfg.hash, "seed": cfg.seed,
                         "stage": stage, "stage_key": stage_hash, "state_hash": h,
                         "blob_sha256": file_sha256(blob)})
    _say(f"trained {stage} in {seconds:.1f}s; final loss {losses[-1]:.6f}; state hash {h}")
    return EXIT_OK


def _print_diagnostics(diags, source: str) -> None:
    lines = source.splitlines()
    for d in diags:
        print(str(d), file=sys.stderr)
        if d.phase != "provider" and 1 <= d.span.line <= len(lines):
            line = lines[d.span.line - 1]
            width = max(1, min(d.span.end - d.span.start, len(line) - d.span.col + 1))
            print(f"    {line}", file=sys.stderr)
            print(f"    {' ' * (d.span.col - 1)}{'^' * width}", file=sys.stderr)


def cmd_guide(cfg: RunConfig, args) -> int:
    out = Path(args.out or cfg.paths.out)
    out.mkdir(parents=True, exist_ok=True)
    fixture = fixture_context(cfg.seed)
    if args.dsl:
        source = Path(args.dsl).read_text()
        program, diags = unit_test(source, fixture)
        if program is None:
            _print_diagnostics(diags, source)
            return EXIT_FAILURE
        (out / "program.gdl").write_text(source)
        _say(f"program ok (level {program.level}, w_adv {program.w_adv}); wrote {out / 'program.gdl'}")
        return EXIT_OK
    if not args.query:
        raise UsageError("guide: give a query or --dsl FILE")
    provider = make_provider(cfg.provider)
    try:
        program, trace = query_to_guidance(args.query, provider, fixture, max_iters=args.max_iters)
    except GuidanceFailure as e:
        e.trace.save(out / "trace.json")
        print(f"guidance failed at the {e.stage} stage: {e}", file=sys.stderr)
        src = e.trace.sources[-1] if e.trace.sources else ""
        _print_diagnostics(e.trace.all_diagnostics(), src)
        return EXIT_FAILURE
    trace.save(out / "trace.json")
    (out / "program.gdl").write_text(program.source)
    _say(f"level {trace.level} ({trace.level_source}); attempts {trace.attempts}; "
         f"wrote {out / 'program.gdl'} and {out / 'trace.json'}")
    return EXIT_OK


def _program(cfg: RunConfig, args) -> Optional[GuidanceProgram]:
    if args.unguided:
        return None
    if args.program:
        return compile_source(Path(args.program).read_text())
    level = args.level or "medium"
    return compile_source(canonical_source(level, w_adv=cfg.levels[level]))


def _sim_config(cfg: RunConfig) -> SimConfig:
    return SimConfig(steps=cfg.sim.steps, replan_period=cfg.sim.replan_period, seed=cfg.seed,
                     planner=cfg.planner)


def _run_sweep(cfg: RunConfig, args, scenarios, models, program, out: Path) -> int:
    grid = [(n, k) for n in SWEEP_SAMPLES for k in SWEEP_STEPS]
    gens = {(n, k): DiffusionGenerator(models.with_steps(k), program,
                                       replace(cfg.sampling, n_samples=n)) for n, k in grid}
    # untimed warm-up so one-off initialization is not billed to the first grid cell
    run_batch(scenarios[:1], gens[grid[0]], _sim_config(cfg))
    # rollouts are deterministic; the grid is repeated in interleaved passes and each
    # cell keeps its fastest pass, so a slow spell on the machine hits every cell alike
    walls = {cell: [] for cell in grid}
    batches = {}
    for _ in range(SWEEP_REPEATS):
        for cell in grid:
            batch = run_batch(scenarios, gens[cell], _sim_config(cfg), jobs=args.jobs,
                              config_hash=cfg.hash)
            walls[cell].append(sum(r.timings["total"] for r in batch.records))
            batches[cell] = batch
    rows = []
    for n, k in grid:
        m = compute_metrics(batches[(n, k)].records)
        wall = min(walls[(n, k)])
        rows.append((n, k, f"{m.adv_ego_coll_pct:.2f}", f"{m.adv_offroad_pct:.2f}", f"{wall:.4f}"))
        _say(f"sweep n_samples={n} steps={k}: adv-ego {m.adv_ego_coll_pct:.2f}% "
             f"offroad {m.adv_offroad_pct:.2f}% time {wall:.2f}s")
    buf = io.StringIO()
    w = csv.writer(buf, lineterminator="\n")
    w.writerow(SWEEP_COLUMNS)
    w.writerows(rows)
    out.mkdir(parents=True, exist_ok=True)
    (out / "sweep.csv").write_text(buf.getvalue())
    _say(f"wrote {out / 'sweep.csv'}")
    return EXIT_OK


def cmd_run(cfg: RunConfig, args) -> int:
    torch.set_num_threads(1)
    out = Path(args.out or cfg.paths.out)
    scenarios = _load_scenarios(cfg, args.scenarios, args.limit)
    models = _models(cfg, args.models).with_steps(cfg.schedule.steps)
    program = _program(cfg, args)
    if args.sweep:
        return _run_sweep(cfg, args, scenarios, models, program, out)
    gen = DiffusionGenerator(models, program, cfg.sampling)
    batch = run_batch(scenarios, gen, _sim_config(cfg), jobs=args.jobs, config_hash=cfg.hash)
    rdir = out / "rollouts"
    rdir.mkdir(parents=True, exist_ok=True)
    files = []
    for i, r in enumerate(batch.records):
        p = rdir / f"rollout_{i:05d}.json"
        r.save(p)
        files.append(p)
    _write_json(rdir / "manifest.json", _manifest(cfg, files, rdir, kind="rollouts"))
    metrics = compute_metrics(batch.records)
    emit_report(metrics, batch.records, out / "report", cfg.hash, cfg.seed)
    _say(f"{len(files)} rollouts; adv-ego collisions {metrics.adv_ego_coll_pct:.2f}%; "
         f"adv offroad {metrics.adv_offroad_pct:.2f}%; report in {out / 'report'}")
    return EXIT_OK


def cmd_dsl_check(cfg: RunConfig, args) -> int:
    source = Path(args.file).read_text()
    program, diags = unit_test(source, fixture_context(cfg.seed))
    if program is None:
        _print_diagnostics(diags, source)
        return EXIT_FAILURE
    routes = ", ".join(f"{'+' if t.sign > 0 else '-'}{t.route}" for t in program.terms)
    _say(f"parse ok; typecheck ok (level {program.level}, w_adv {program.w_adv}); eval ok; "
         f"grad ok; routes: {routes}")
    return EXIT_OK


def cmd_report(cfg: RunConfig, args) -> int:
    rdir = Path(args.rollouts)
    man = rdir / "manifest.json"
    if not man.exists():
        raise WorldError(f"no rollout manifest at {man}")
    records = [RolloutRecord.load(rdir / e["path"]) for e in json.loads(man.read_text())["files"]]
    metrics = compute_metrics(records)
    out = Path(args.out)
    emit_report(metrics, records, out, cfg.hash, cfg.seed)
    _say(f"report for {len(records)} rollouts written to {out}")
    return EXIT_OK


# --------------------------------------------------------------------------
# argument parsing


def build_parser() -> argparse.ArgumentParser:
    p = _Parser(prog="advscene", description="Adversarial driving-scenario generation toolkit.")
    p.add_argument("--config", help=f"{CONFIG_SCHEMA} JSON file")
    p.add_argument("--set", action="append", default=[], metavar="KEY=VALUE",
                   help="override a config value, e.g. --set sampling.n_samples=5")
    p.add_argument("--seed", type=int, help="shorthand for --set seed=N")
    p.add_argument("--jobs", type=int, default=1, help="parallel worker processes")
    sub = p.add_subparsers(dest="command", parser_class=_Parser)

    s = sub.add_parser("synth", help="generate synthetic scenarios")
    s.add_argument("--template")
    s.add_argument("--count", type=int)
    s.add_argument("--out")

    s = sub.add_parser("train", help="train the codec or the denoiser")
    s.add_argument("--stage", choices=("codec", "diffusion"), required=True)
    s.add_argument("--scenarios")
    s.add_argument("--models")
    s.add_argument("--resume", action="store_true", help="reuse a matching trained blob")

    s = sub.add_parser("guide", help="turn a query or a DSL file into a checked program")
    s.add_argument("query", nargs="?")
    s.add_argument("--dsl")
    s.add_argument("--out")
    s.add_argument("--max-iters", type=int, default=3)

    s = sub.add_parser("run", help="closed-loop evaluation and report")
    g = s.add_mutually_exclusive_group()
    g.add_argument("--program", help="guidance program file")
    g.add_argument("--level", choices=("weak", "medium", "strong"),
                   help="use the stock program at this level")
    g.add_argument("--unguided", action="store_true")
    s.add_argument("--scenarios")
    s.add_argument("--models")
    s.add_argument("--limit", type=int)
    s.add_argument("--out")
    s.add_argument("--sweep", action="store_true",
                   help="sweep sample count x denoising steps and write sweep.csv")

    s = sub.add_parser("dsl-check", help="parse, typecheck, evaluate and gradient-check a program")
    s.add_argument("file")

    s = sub.add_parser("report", help="recompute metrics from saved rollouts")
    s.add_argument("--rollouts", required=True)
    s.add_argument("--out", required=True)
    return p


COMMANDS = {"synth": cmd_synth, "train": cmd_train, "guide": cmd_guide, "run": cmd_run,
            "dsl-check": cmd_dsl_check, "report": cmd_report}


def main(argv=None) -> int:
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
        if args.command is None:
            raise UsageError("advscene: a subcommand is required")
        overrides = list(args.set)
        if args.seed is not None:
            overrides.append(f"seed={args.seed}")
        if args.command == "synth":
            if args.template:
                overrides += [f"synth.template={args.template}", "synth.mixture=null"]
            if args.count is not None:
                overrides.append(f"synth.count={args.count}")
        if args.jobs < 1:
            raise UsageError("--jobs must be >= 1")
        cfg = load_config(args.config, overrides)
    except (UsageError, ConfigError) as e:
        print(f"error: {e}", file=sys.stderr)
        return EXIT_USAGE
    except SystemExit as e:        # --help
        return EXIT_OK if not e.code else EXIT_USAGE
    try:
        return COMMANDS[args.command](cfg, args)
    except UsageError as e:
        print(f"error: {e}", file=sys.stderr)
        return EXIT_USAGE
    except DslError as e:
        print(f"error: invalid guidance program", file=sys.stderr)
        for d in e.diagnostics:
            print(str(d), file=sys.stderr)
        return EXIT_FAILURE
    except (WorldError, ModelError, ProviderError, OSError, ValueError) as e:
        print(f"error: {e}", file=sys.stderr)
        return EXIT_FAILURE


if __name__ == "__main__":
    sys.exit(main())
