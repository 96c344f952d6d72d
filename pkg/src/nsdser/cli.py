"""Command-line surface: ``nsdser <command> ...``.

Sample files use the binary vector format from :mod:`nsdser.stego`;
configs, models and summaries use the key-value text format; tables are CSV
with 17-significant-digit numbers.
"""
from __future__ import annotations

import sys
from dataclasses import replace
from pathlib import Path

import click
import numpy as np

from . import kvformat as kv
from .analysis import spearman, tradeoff_sweep, write_sweep_csv
from .codecs import CodecParams, Key, Scheme
from .diffusion import GuidanceConfig, rng_for
from .ensemble import FldEnsemble, evaluate
from .features import extract_features, read_features_csv, write_features_csv
from .harness import (ScenarioConfig, ablate, evaluate_gates, run_scenario, write_report)
from .solvers import Direction, SolverConfig, integrate_array
from .stego import (ChannelConfig, builtin_backbones, embed_and_generate, gen_cover, read_samples, write_manifest,
                    write_samples)


class Ctx:
    def __init__(self, config_path, seed, out, jobs):
        self.config_path = config_path
        self.seed = seed
        self.out = Path(out)
        self.jobs = jobs

    def scenario(self, scenario_id: int, **overrides) -> ScenarioConfig:
        if self.config_path:
            cfg = ScenarioConfig.from_kv(Path(self.config_path).read_text())
            cfg = replace(cfg, id=scenario_id) if cfg.id != scenario_id else cfg
        else:
            cfg = ScenarioConfig.preset(scenario_id)
        overrides = {k: v for k, v in overrides.items() if v is not None}
        if self.seed is not None:
            overrides["seed"] = self.seed
        return replace(cfg, **overrides)

    def path(self, name: str) -> Path:
        self.out.mkdir(parents=True, exist_ok=True)
        return self.out / name


pass_ctx = click.make_pass_decorator(Ctx)


@click.group()
@click.option("--config", "config_path", type=click.Path(exists=True, dir_okay=False), default=None,
              help="Scenario config in key-value format.")
@click.option("--seed", type=click.IntRange(0, 2 ** 64 - 1), default=None, help="Master seed.")
@click.option("--out", type=click.Path(file_okay=False), default="out", show_default=True)
@click.option("--jobs", type=click.IntRange(1), default=1, show_default=True)
@click.pass_context
def main(ctx, config_path, seed, out, jobs):
    """Noise-space steganalysis of diffusion-generated samples."""
    ctx.obj = Ctx(config_path, seed, out, jobs)


def _backbone(name, dim, channels):
    backbones = builtin_backbones(dim, channels)
    if name not in backbones:
        raise click.BadParameter(f"unknown backbone {name!r}; choose from {sorted(backbones)}")
    return backbones[name]


backbone_opts = [
    click.option("--backbone", default="sd15", show_default=True),
    click.option("--dim", type=click.IntRange(4), default=256, show_default=True),
    click.option("--channels", type=click.IntRange(1), default=4, show_default=True),
]
solver_opts = [
    click.option("--solver", type=click.Choice(["euler1", "heun2", "dpm2"]), default="heun2", show_default=True),
    click.option("--steps", type=click.IntRange(1), default=20, show_default=True),
]


def _apply(opts):
    def deco(f):
        for o in reversed(opts):
            f = o(f)
        return f
    return deco


@main.command("gen-cover")
@_apply(backbone_opts + solver_opts)
@click.option("--n", "n", type=click.IntRange(1), default=1, show_default=True)
@click.option("--guidance-scale", type=float, default=0.0, show_default=True)
@click.option("--condition", type=int, default=None)
@click.option("--sde", is_flag=True, help="Euler-Maruyama reverse chain instead of the ODE.")
@click.option("--q", type=click.IntRange(0), default=256, show_default=True, help="0 disables quantization.")
@pass_ctx
def gen_cover_cmd(c, backbone, dim, channels, solver, steps, n, guidance_scale, condition, sde, q):
    """Generate cover samples from plain Gaussian noise."""
    bb = _backbone(backbone, dim, channels)
    cfg = SolverConfig(solver, steps, Direction.GENERATE, GuidanceConfig(guidance_scale, condition))
    seed = c.seed or 0
    X = np.stack([gen_cover(bb, cfg, int(rng_for(seed, i).integers(2 ** 62)), sde=sde).x for i in range(n)])
    X = ChannelConfig(q).apply(X)
    write_samples(c.path("covers.bin"), X)
    write_manifest(c.path("covers.manifest"), {"label": "cover", "backbone": backbone, "solver": solver,
                                               "steps": steps, "guidance_scale": guidance_scale,
                                               "sde": sde, "q": q, "seed": seed, "n": n})
    click.echo(str(c.path("covers.bin")))


@main.command("gen-stego")
@_apply(backbone_opts + solver_opts)
@click.option("--codec", type=click.Choice([s.value for s in Scheme]), required=True)
@click.option("--l", "l", type=click.IntRange(1, 8), default=1, show_default=True)
@click.option("--theta", type=float, default=None)
@click.option("--n", "n", type=click.IntRange(1), default=1, show_default=True)
@click.option("--bits", type=click.IntRange(1), default=None, help="Message length (default: capacity).")
@click.option("--guidance-scale", type=float, default=0.0, show_default=True)
@click.option("--condition", type=int, default=None)
@click.option("--q", type=click.IntRange(0), default=256, show_default=True)
@click.option("--extract-with", type=click.Choice(["euler1", "heun2", "dpm2"]), default=None,
              help="Also report extraction accuracy using this solver.")
@click.option("--extract-steps", type=click.IntRange(1), default=20, show_default=True)
@pass_ctx
def gen_stego_cmd(c, backbone, dim, channels, solver, steps, codec, l, theta, n, bits, guidance_scale, condition, q,
                  extract_with, extract_steps):
    """Embed random messages and generate stego samples.

    Message ``i`` uses the key derived from ``(seed, i)``.
    """
    from .stego import extract

    bb = _backbone(backbone, dim, channels)
    params = CodecParams(Scheme(codec), l, theta)
    cfg = SolverConfig(solver, steps, Direction.GENERATE, GuidanceConfig(guidance_scale, condition))
    seed = c.seed or 0
    n_bits = bits or dim * l
    X, correct = [], 0
    for i in range(n):
        msg = rng_for(seed, i, 0x6D7367).integers(0, 2, n_bits).astype(np.uint8)
        key = Key.from_seed(seed, i)
        sample, manifest = embed_and_generate(msg, key, params, bb, cfg, ChannelConfig(q), seed)
        X.append(sample.x)
        if extract_with:
            ext = SolverConfig(extract_with, extract_steps, guidance=cfg.guidance)
            correct += int(np.sum(extract(sample.x, key, params, bb, ext, n_bits) == msg))
    write_samples(c.path("stegos.bin"), np.stack(X))
    manifest["n"] = n
    write_manifest(c.path("stegos.manifest"), manifest)
    if extract_with:
        click.echo(f"extraction_accuracy = {kv.fmt_float(correct / (n * n_bits))}")
    click.echo(str(c.path("stegos.bin")))


@main.command("invert")
@click.argument("samples", type=click.Path(exists=True, dir_okay=False))
@_apply(backbone_opts + solver_opts)
@pass_ctx
def invert_cmd(c, samples, backbone, dim, channels, solver, steps):
    """Map samples back to noise with the condition-free PF-ODE."""
    X = read_samples(samples)
    bb = _backbone(backbone, X.shape[1], channels)
    x_T = integrate_array(X, bb.prior, bb.schedule, SolverConfig(solver, steps, Direction.INVERT))
    dest = c.path(Path(samples).stem + ".noise.bin")
    write_samples(dest, x_T)
    click.echo(str(dest))


@main.command("features")
@click.argument("noise", type=click.Path(exists=True, dir_okay=False))
@click.option("--label", type=click.Choice(["cover", "stego", "unknown"]), default="unknown", show_default=True)
@click.option("--channels", type=click.IntRange(1), default=4, show_default=True)
@pass_ctx
def features_cmd(c, noise, label, channels):
    """Ten noise-space statistics per sample."""
    X = read_samples(noise)
    F = extract_features(X, channels)
    dest = c.path(Path(noise).stem + ".features.csv")
    write_features_csv(dest, F, [label] * F.shape[0])
    click.echo(str(dest))


@main.command("train")
@click.argument("cover_features", type=click.Path(exists=True, dir_okay=False))
@click.argument("stego_features", type=click.Path(exists=True, dir_okay=False))
@click.option("--d-sub", type=click.IntRange(1), default=5, show_default=True)
@pass_ctx
def train_cmd(c, cover_features, stego_features, d_sub):
    """Fit the FLD ensemble (cover = 0, stego = 1)."""
    Fc, _ = read_features_csv(cover_features)
    Fs, _ = read_features_csv(stego_features)
    X = np.vstack([Fc, Fs])
    y = np.concatenate([np.zeros(len(Fc), dtype=int), np.ones(len(Fs), dtype=int)])
    model = FldEnsemble(d_sub=d_sub, random_state=c.seed or 0).fit(X, y)
    dest = c.path("model.kv")
    dest.write_text(model.to_kv())
    rep = model.report_
    click.echo(f"oob_error = {kv.fmt_float(rep.oob_error)}\nn_learners = {rep.n_learners}\nmodel = {dest}")


@main.command("detect")
@click.argument("model_path", type=click.Path(exists=True, dir_okay=False))
@click.argument("feature_files", nargs=-1, required=True, type=click.Path(exists=True, dir_okay=False))
@pass_ctx
def detect_cmd(c, model_path, feature_files):
    """Classify feature rows; reports accuracy when rows are labelled cover/stego."""
    model = FldEnsemble.from_kv(Path(model_path).read_text())
    F = np.vstack([read_features_csv(f)[0] for f in feature_files])
    labels = np.concatenate([read_features_csv(f)[1] for f in feature_files])
    pred = model.predict(F)
    dest = c.path("predictions.csv")
    with open(dest, "w") as fh:
        fh.write("row,label,prediction,stego_vote_fraction\n")
        for i, (lab, p, v) in enumerate(zip(labels, pred, model.decision_function(F))):
            fh.write(f"{i},{lab},{'stego' if p == 1 else 'cover'},{kv.fmt_float(v)}\n")
    known = np.isin(labels, ["cover", "stego"])
    if known.any() and {"cover", "stego"} <= set(labels[known]):
        rep = evaluate(model, F[labels == "cover"], F[labels == "stego"])
        click.echo(f"accuracy = {kv.fmt_float(rep.accuracy)}\np_fa = {kv.fmt_float(rep.p_fa)}\n"
                   f"p_md = {kv.fmt_float(rep.p_md)}\nadvantage = {kv.fmt_float(rep.advantage)}")
    click.echo(str(dest))


def _report_gates(gates) -> int:
    failed = [g for g in gates if not g.passed]
    for g in gates:
        click.echo(f"{'PASS' if g.passed else 'FAIL'} {g.name}: {g.detail}")
    return 1 if failed else 0


@main.command("scenario")
@click.argument("scenario_id", type=click.IntRange(1, 4))
@click.option("--n-train", type=click.IntRange(1), default=None)
@click.option("--n-test", type=click.IntRange(1), default=None)
@click.option("--codecs", default=None, help="Comma-separated subset of result columns.")
@click.option("--check", is_flag=True, help="Exit non-zero if an acceptance gate fails.")
@pass_ctx
def scenario_cmd(c, scenario_id, n_train, n_test, codecs, check):
    """Run one detection scenario and write its report."""
    cfg = c.scenario(scenario_id, n_train=n_train, n_test=n_test,
                     codecs=tuple(codecs.split(",")) if codecs else None)
    rows, manifest = run_scenario(cfg, jobs=c.jobs)
    gates = evaluate_gates(cfg, rows)
    for p in write_report(c.out, cfg, rows, manifest, gates):
        click.echo(str(p))
    if check:
        sys.exit(_report_gates(gates))


@main.command("check")
@click.option("--n-train", type=click.IntRange(1), default=None)
@click.option("--n-test", type=click.IntRange(1), default=None)
@pass_ctx
def check_cmd(c, n_train, n_test):
    """Run scenarios 1 and 3 and evaluate every detection gate."""
    gates = []
    for sid in (1, 3):
        cfg = c.scenario(sid, n_train=n_train, n_test=n_test)
        rows, manifest = run_scenario(cfg, jobs=c.jobs)
        g = evaluate_gates(cfg, rows)
        write_report(c.out, cfg, rows, manifest, g)
        gates += g
    sys.exit(_report_gates(gates))


@main.command("sweep")
@click.option("--scheme", type=click.Choice(["truncated", "hamming-ball"]), default="truncated", show_default=True)
@click.option("--thetas", default="0.1,0.2,0.3,0.4,0.5,0.6,0.7,0.8,0.9,1.0", show_default=True)
@click.option("--l", "l", type=click.IntRange(1, 8), default=4, show_default=True)
@click.option("--n-messages", type=click.IntRange(1), default=50, show_default=True)
@click.option("--q", type=click.IntRange(0), default=256, show_default=True)
@click.option("--detect/--no-detect", default=True, show_default=True)
@_apply(backbone_opts + solver_opts)
@pass_ctx
def sweep_cmd(c, scheme, thetas, l, n_messages, q, detect, backbone, dim, channels, solver, steps):
    """Extraction accuracy vs. codec divergence vs. detectability over theta."""
    thetas = [float(t) for t in thetas.split(",")]
    if scheme == "hamming-ball" and max(thetas) >= 1:
        raise click.BadParameter("hamming-ball needs theta < 1")
    backbones = builtin_backbones(dim, channels)
    rows = tradeoff_sweep(scheme, thetas, ChannelConfig(q), backbones[backbone], SolverConfig(solver, steps),
                          n_messages=n_messages, l=l, detector_backbone=backbones["sd21"], seed=c.seed or 0,
                          detect=detect)
    dest = c.path(f"sweep_{scheme}.csv")
    write_sweep_csv(dest, rows)
    click.echo(f"spearman_accuracy_kl = {kv.fmt_float(spearman([r.extraction_acc for r in rows], [r.kl for r in rows]))}")
    click.echo(str(dest))


@main.command("ablate")
@click.argument("axis", type=click.Choice(["steps", "guidance"]))
@click.option("--scenario", "scenario_id", type=click.IntRange(1, 4), default=1, show_default=True)
@click.option("--n-train", type=click.IntRange(1), default=None)
@click.option("--n-test", type=click.IntRange(1), default=None)
@click.option("--codecs", default=None)
@pass_ctx
def ablate_cmd(c, axis, scenario_id, n_train, n_test, codecs):
    """Vary inversion steps (15/20/25) or guidance (off/on) and report the spread."""
    cfg = c.scenario(scenario_id, n_train=n_train, n_test=n_test,
                     codecs=tuple(codecs.split(",")) if codecs else None)
    rows, spread = ablate(cfg, axis, jobs=c.jobs)
    dest = c.path(f"ablation_s{scenario_id}_{axis}.csv")
    with open(dest, "w") as fh:
        fh.write("column,axis,value,accuracy\n")
        for r in rows:
            fh.write(f"{r.column},{r.axis},{r.value},{kv.fmt_float(r.accuracy)}\n")
    for col, s in spread.items():
        click.echo(f"spread.{col} = {kv.fmt_float(s)}")
    click.echo(str(dest))


if __name__ == "__main__":
    main()
