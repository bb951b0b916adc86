"""Command-line entry point: ``wirehallu <verb> [options]``.

Each verb reads and writes plain files under ``--out`` so the stages can be
chained by hand; ``sweep`` runs the whole grid in one process.
"""

from __future__ import annotations

import argparse
import dataclasses
import json
import logging
import sys
from pathlib import Path

import numpy as np
import torch

from . import channel_data as cd
from . import diffusion as dfn
from . import evaluation as ev
from . import gan_augment as gan
from . import moe_gate as moe
from . import validators as val
from .report import ReportError, emit_report

log = logging.getLogger("wirehallu")


def _config(args) -> ev.RunConfig:
    cfg = ev.RunConfig.load(args.config) if args.config else ev.RunConfig()
    if args.seed is not None:
        cfg = dataclasses.replace(cfg, seeds=(args.seed,))
    return cfg


def _seed(args, cfg: ev.RunConfig) -> int:
    return args.seed if args.seed is not None else cfg.seeds[0]


def _out(args, cfg: ev.RunConfig) -> Path:
    out = Path(args.out or cfg.out_dir)
    out.mkdir(parents=True, exist_ok=True)
    return out


# ---------------------------------------------------------------------------
# verbs


def cmd_gen_data(args, cfg):
    ds = cd.build_dataset(cfg.dataset, seed=_seed(args, cfg))
    path = cd.save_dataset(ds, _out(args, cfg) / "dataset")
    print(f"wrote {len(ds)} samples to {path} {json.dumps(ds.counts)}")
    return 0


def cmd_clean(args, cfg):
    ds = cd.load_dataset(args.data)
    cleaned, removed = cd.clean_dataset(ds, args.policy, args.threshold)
    path = cd.save_dataset(cleaned, _out(args, cfg) / "cleaned")
    print(f"removed {len(removed)} of {len(ds)} samples; wrote {path}")
    return 0


def cmd_train_gan(args, cfg):
    ds = cd.load_dataset(args.data)
    nlos = [s for s in ds if s.scenario.environment is cd.Environment.NLOS]
    g, d, hist = gan.train_gan(nlos, cfg.gan.config(_seed(args, cfg)))
    out = _out(args, cfg)
    gp, dp = gan.save_gan(out / "gan", g, d)
    with (out / "gan_loss.csv").open("w", encoding="utf-8") as fh:
        fh.write("epoch,g_loss,d_loss,diversity\n")
        for i, row in enumerate(zip(hist.g_loss, hist.d_loss, hist.diversity), start=1):
            fh.write(f"{i},{row[0]!r},{row[1]!r},{row[2]!r}\n")
    print(f"wrote {gp} and {dp}")
    return 0


def cmd_balance(args, cfg):
    ds = cd.load_dataset(args.data)
    balanced = gan.balance_dataset(ds, gan.load_generator(args.generator), _seed(args, cfg))
    path = cd.save_dataset(balanced, _out(args, cfg) / "balanced")
    env = balanced.env_counts()
    print(f"LoS {env[cd.Environment.LOS]} / NLoS {env[cd.Environment.NLOS]}; wrote {path}")
    return 0


def cmd_train_diffusion(args, cfg):
    ds = cd.load_dataset(args.data)
    registry = moe.default_registry()
    out = _out(args, cfg) / "experts"
    out.mkdir(parents=True, exist_ok=True)
    if args.expert == ev.SINGLE_EXPERT:
        groups = {ev.SINGLE_EXPERT: {s.key for s in cd.ALL_SCENARIOS}}
    elif args.expert:
        groups = {args.expert: {s.key for s in registry.get(args.expert).coverage}}
    else:
        groups = {e.id: {s.key for s in e.coverage} for e in registry.experts}
    checkpoints = {}
    for eid, keys in groups.items():
        subset = ds.filter(lambda s, keys=keys: s.scenario.key in keys)
        est, losses = dfn.train_denoiser(
            subset,
            cfg.diffusion.denoiser(not args.no_attention),
            cfg.diffusion.train(ev.derive_seed(_seed(args, cfg), "denoiser", eid)),
            dfn.PilotParams(spacing=cfg.pilot_spacing),
            cfg.diffusion.schedule(),
            coverage=tuple(sorted(keys)),
            data_consistency=not args.no_data_consistency,
        )
        checkpoints[eid] = str(est.save(out / f"{eid}.ckpt"))
        print(f"{eid}: {len(subset)} samples, final loss {losses[-1]:.5f}" if losses else f"{eid}: no epochs")
    if args.expert != ev.SINGLE_EXPERT:
        moe.default_registry(checkpoints).save(out / "registry.yaml")
    return 0


def cmd_gate(args, cfg):
    registry = moe.ExpertRegistry.load(args.registry) if args.registry else moe.default_registry()
    state = moe.UserState(args.environment, args.carrier_ghz, args.speed_kmh)
    if args.random:
        d = moe.random_gate(state, registry, _seed(args, cfg))
    else:
        client = moe.make_client(cfg.llm.endpoint, registry)
        d = moe.llm_gate(state, registry, client, cfg.llm.timeout_ms)
    print(json.dumps({"expert": d.expert_id, "source": d.source.value, "rationale": d.rationale}))
    return 0


def _load_experts(directory: Path) -> dict[str, dfn.DiffusionEstimator]:
    return {p.stem: dfn.DiffusionEstimator.load(p) for p in sorted(directory.glob("*.ckpt"))}


def cmd_estimate(args, cfg):
    ds = cd.load_dataset(args.data)
    experts = _load_experts(Path(args.experts))
    if not experts:
        print(f"no expert checkpoints in {args.experts}", file=sys.stderr)
        return 2
    registry = moe.default_registry()
    client = moe.make_client(cfg.llm.endpoint, registry)
    seed = _seed(args, cfg)
    samples = list(ds)[: args.n] if args.n else list(ds)
    obs = [
        cd.make_pilot_observation(s, cfg.pilot_spacing, args.snr_db, ev.derive_seed(seed, "obs", i))
        for i, s in enumerate(samples)
    ]
    if ev.SINGLE_EXPERT in experts:
        choices = [ev.SINGLE_EXPERT] * len(samples)
    else:
        choices = [
            moe.llm_gate(moe.UserState.from_scenario(s.scenario), registry, client, cfg.llm.timeout_ms).expert_id
            for s in samples
        ]
    models = {k: (v, []) for k, v in experts.items()}
    seeds = [ev.derive_seed(seed, "sample", i) for i in range(len(obs))]
    h_hat = ev._estimate_routed(obs, choices, models, seeds)
    h = np.stack([s.h for s in samples])
    path = _out(args, cfg) / "estimates.npz"
    np.savez(path, h_hat=h_hat, h=h, scenario=np.array([s.scenario.key for s in samples]), expert=np.array(choices))
    print(f"mean NMSE {float(np.mean(ev.batch_nmse(h_hat, h))):.4f} at {args.snr_db:g} dB; wrote {path}")
    return 0


def cmd_validate(args, cfg):
    data = np.load(args.estimates)
    disc = gan.load_discriminator(args.discriminator)
    if args.validator_config:
        vcfg = val.ValidatorConfig.load(args.validator_config)
    else:
        train = cd.load_dataset(args.calibration_data)
        heldout = ev.heldout_samples(_seed(args, cfg), cfg.n_calibration, "calibration")
        vcfg = val.calibrate(train.samples, heldout, disc)
    out = _out(args, cfg)
    vcfg.save(out / "validator.json")
    contexts = [cd.ScenarioClass.from_key(str(k)) for k in data["scenario"]]
    reports = val.validate_batch(data["h_hat"], contexts, disc, vcfg)
    val.write_report_log(out / "validation.jsonl", reports)
    summary = val.summarize(reports)
    print(json.dumps({"rate": summary.rate, **{t.value: r for t, r in summary.by_type.items()}}))
    return 0


def cmd_sweep(args, cfg):
    out = _out(args, cfg)
    cfg.save(out / "config.yaml")
    result = ev.sweep(cfg, out, figures=not args.no_figures)
    for sid, r in result.strategies.items():
        row = " ".join(f"{r.mean(s):.4f}" for s in result.snr_db if r.nmse.get(s))
        print(f"{sid.value:14s} {row}")
    for f in result.failures:
        print(f"FAILED {f}", file=sys.stderr)
    done = len(result.cells())
    print(f"{done}/{len(cfg.strategies) * len(cfg.snr_db)} cells completed; report in {out}")
    return 0 if result.complete and done == len(cfg.strategies) * len(cfg.snr_db) else 1


def cmd_report(args, cfg):
    result = ev.EvalResult.from_json(Path(args.result).read_text(encoding="utf-8"))
    files = emit_report(result, _out(args, cfg), figures=not args.no_figures)
    print("\n".join(str(p) for p in files.values()))
    return 0 if result.complete else 1


# ---------------------------------------------------------------------------


def build_parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(prog="wirehallu", description=__doc__.splitlines()[0])
    p.add_argument("--config", help="YAML run configuration")
    p.add_argument("--seed", type=int, help="overrides the config seeds with a single seed")
    p.add_argument("--out", help="output directory (default: config out_dir)")
    p.add_argument("-v", "--verbose", action="count", default=0)
    sub = p.add_subparsers(dest="verb", required=True)

    sub.add_parser("gen-data", help="simulate the imbalanced channel dataset").set_defaults(fn=cmd_gen_data)

    s = sub.add_parser("clean", help="drop outliers or duplicate samples")
    s.add_argument("--data", required=True)
    s.add_argument("--policy", choices=[c.value for c in cd.CleanPolicy], default="hash_dedup")
    s.add_argument("--threshold", type=float)
    s.set_defaults(fn=cmd_clean)

    s = sub.add_parser("train-gan", help="train the NLoS generator and discriminator")
    s.add_argument("--data", required=True)
    s.set_defaults(fn=cmd_train_gan)

    s = sub.add_parser("balance", help="append synthetic NLoS samples up to the LoS count")
    s.add_argument("--data", required=True)
    s.add_argument("--generator", required=True, help="*.gen.ckpt from train-gan")
    s.set_defaults(fn=cmd_balance)

    s = sub.add_parser("train-diffusion", help="train diffusion experts")
    s.add_argument("--data", required=True)
    s.add_argument("--expert", help=f"one expert id, or '{ev.SINGLE_EXPERT}' for a single model (default: all four)")
    s.add_argument("--no-attention", action="store_true")
    s.add_argument("--no-data-consistency", action="store_true")
    s.set_defaults(fn=cmd_train_diffusion)

    s = sub.add_parser("gate", help="pick an expert for one user state")
    s.add_argument("--environment", choices=[e.value for e in moe.UserEnvironment], required=True)
    s.add_argument("--carrier-ghz", type=float, required=True)
    s.add_argument("--speed-kmh", type=float, default=0.0)
    s.add_argument("--registry")
    s.add_argument("--random", action="store_true", help="uniform random expert")
    s.set_defaults(fn=cmd_gate)

    s = sub.add_parser("estimate", help="estimate channels of a dataset from noisy pilots")
    s.add_argument("--data", required=True)
    s.add_argument("--experts", required=True, help="directory of expert checkpoints")
    s.add_argument("--snr-db", type=float, default=0.0)
    s.add_argument("-n", type=int, default=200)
    s.set_defaults(fn=cmd_estimate)

    s = sub.add_parser("validate", help="run the hallucination checks on estimates")
    s.add_argument("--estimates", required=True, help="estimates.npz from estimate")
    s.add_argument("--discriminator", required=True)
    g = s.add_mutually_exclusive_group(required=True)
    g.add_argument("--validator-config", help="stored calibration JSON")
    g.add_argument("--calibration-data", help="training dataset for calibration")
    s.set_defaults(fn=cmd_validate)

    s = sub.add_parser("sweep", help="full strategy x SNR grid with report")
    s.add_argument("--no-figures", action="store_true")
    s.set_defaults(fn=cmd_sweep)

    s = sub.add_parser("report", help="re-render CSVs and figures from result.json")
    s.add_argument("--result", required=True)
    s.add_argument("--no-figures", action="store_true")
    s.set_defaults(fn=cmd_report)
    return p


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(
        level=logging.WARNING - 10 * min(args.verbose, 2), format="%(asctime)s %(name)s %(message)s"
    )
    torch.set_num_threads(1)
    try:
        cfg = _config(args)
        return args.fn(args, cfg)
    except (cd.DatasetFormatError, ReportError, FileNotFoundError, ValueError, ev.StrategyError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 2


if __name__ == "__main__":
    sys.exit(main())
