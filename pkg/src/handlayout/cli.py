"""Command-line surface: data generation, training, sampling, guided demos,
evaluation and self-checks.

Every subcommand takes --config/--seed/--out plus its own flags; flags
override config-file values, which override defaults. The resolved
configuration and seed are echoed to run.txt in the output directory, and
fixed seeds reproduce output files byte for byte.

Exit codes: 0 success, 1 usage error, 2 runtime failure.
"""

from __future__ import annotations

import argparse
import math
import sys
from pathlib import Path

import numpy as np

from . import data as D
from . import demos, render, training
from .denoiser import DenoiserConfig, LossConfig, load_checkpoint, save_checkpoint
from .diffusion import GuidanceSpec, build_schedule, sample_layout, schedule_table
from .geometry import Layout, TemplateSpec, splat_jacobian, splat_values
from .kernels import backend_name

__all__ = ["main"]


class _UsageError(Exception):
    pass


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        raise _UsageError(message)


def _to_bool(text: str) -> bool:
    low = str(text).lower()
    if low in ("1", "true", "yes", "on"):
        return True
    if low in ("0", "false", "no", "off"):
        return False
    raise ValueError(f"expected a boolean, got {text!r}")


# option tables: name -> (converter, default, help)
_SHARED = {
    "seed": (int, 0, "master random seed"),
    "out": (str, None, "output directory (required)"),
}

_OPTIONS = {
    "gen-data": {
        "n-scenes": (int, 640, "number of scenes"),
        "n-instances": (int, 20, "number of object instances"),
        "size": (int, 32, "scene grid size in pixels"),
        "held-out": (int, 5, "instances held out for the test split"),
    },
    "train": {
        "data": (str, None, "dataset root from gen-data"),
        "manifest": (str, "manifest-train.txt", "training manifest file"),
        "steps": (int, 5000, "optimizer steps"),
        "batch": (int, 32, "batch size"),
        "lr": (float, 1e-3, "learning rate"),
        "init": (str, "", "warm-start checkpoint path"),
        "T": (int, 100, "diffusion steps"),
        "family": (str, "linear", "schedule family (linear|cosine)"),
        "lam": (float, 10.0, "parameter-loss weight"),
        "mask-res": (int, 32, "mask-loss resolution"),
        "splat-condition": (_to_bool, True, "condition on the splatted context stack"),
        "hidden": (int, 128, "trunk width"),
        "conv1": (int, 16, "encoder channels, stage 1"),
        "conv2": (int, 32, "encoder channels, stage 2"),
        "time-dim": (int, 16, "time embedding dimension"),
    },
    "sample": {
        "ckpt": (str, None, "checkpoint path"),
        "scene": (str, None, "scene sample directory"),
        "n": (int, 4, "number of layouts"),
        "sampler": (str, "ddim", "reverse sampler (ddpm|ddim)"),
        "eta": (float, 0.0, "ddim noise scale in [0,1]"),
    },
    "guide": {
        "ckpt": (str, None, "checkpoint path"),
        "scene": (str, None, "scene sample directory"),
        "fix": (str, None, "constraints, e.g. x=0.1,y=-0.2,a=0.3"),
        "n": (int, 4, "number of layouts"),
        "sampler": (str, "ddim", "reverse sampler (ddpm|ddim)"),
        "eta": (float, 0.0, "ddim noise scale in [0,1]"),
    },
    "interpolate": {
        "la": (str, None, "start layout as 'a x y b1 b2'"),
        "lb": (str, None, "end layout as 'a x y b1 b2'"),
        "k-steps": (int, 8, "number of interpolation steps"),
        "scene": (str, "", "scene sample directory (generated if empty)"),
        "size": (int, 32, "generated demo scene size"),
    },
    "heatmap": {
        "ckpt": (str, None, "checkpoint path"),
        "scene": (str, "", "scene sample directory (generated if empty)"),
        "sigma": (float, 0.25, "heatmap bump width"),
        "n": (int, 8, "number of drawn contact points"),
        "sampler": (str, "ddim", "reverse sampler (ddpm|ddim)"),
        "eta": (float, 0.0, "ddim noise scale in [0,1]"),
    },
    "scene": {
        "ckpt": (str, None, "checkpoint path"),
        "crop-widths": (str, "0.5,0.8,1.2", "comma list of crop widths"),
        "hand-size": (float, 0.18, "shared absolute hand size"),
        "sampler": (str, "ddim", "reverse sampler (ddpm|ddim)"),
        "eta": (float, 0.0, "ddim noise scale in [0,1]"),
    },
    "eval": {
        "ckpt": (str, None, "checkpoint path"),
        "data": (str, None, "dataset root"),
        "split": (str, "test", "split to evaluate (train|test|all)"),
        "n": (int, 0, "cap on evaluated scenes (0 = all)"),
        "sampler": (str, "ddim", "reverse sampler (ddpm|ddim)"),
        "eta": (float, 0.0, "ddim noise scale in [0,1]"),
    },
    "ablate": {
        "data": (str, None, "dataset root"),
        "steps": (int, 1500, "optimizer steps per variant"),
        "batch": (int, 32, "batch size"),
        "lr": (float, 1e-3, "learning rate"),
        "max-eval": (int, 100, "held-out scenes used for recall"),
    },
    "check-grad": {
        "layouts": (int, 100, "random layouts for the splat check"),
        "size": (int, 64, "splat grid size"),
        "fd-step": (float, 1e-4, "finite-difference step"),
    },
    "oracle-check": {
        "chains": (int, 10000, "Monte-Carlo chains"),
        "T": (int, 100, "diffusion steps"),
        "family": (str, "linear", "schedule family (linear|cosine)"),
        "mu": (float, 3.0, "target mean"),
        "sigma": (float, 0.5, "target std"),
    },
}

_SYNOPSIS = "usage: handlayout <subcommand> [--config FILE] [--seed N] --out DIR [options]\nsubcommands: " + " ".join(sorted(_OPTIONS))


def _load_config_file(path: str) -> dict:
    values = {}
    for lineno, raw in enumerate(Path(path).read_text().splitlines(), 1):
        line = raw.split("#", 1)[0].strip()
        if not line:
            continue
        if "=" not in line:
            raise _UsageError(f"{path}:{lineno}: expected 'key = value'")
        key, val = (part.strip() for part in line.split("=", 1))
        values[key] = val
    return values


def _resolve(cmd: str, args: argparse.Namespace) -> dict:
    table = dict(_OPTIONS[cmd], **_SHARED)
    resolved = {name: default for name, (_, default, _h) in table.items()}
    if args.config:
        for key, val in _load_config_file(args.config).items():
            if key not in table:
                raise _UsageError(f"unknown config key {key!r} for {cmd}")
            conv = table[key][0]
            try:
                resolved[key] = conv(val)
            except ValueError as exc:
                raise _UsageError(f"bad config value for {key}: {exc}") from exc
    for name in table:
        given = getattr(args, name.replace("-", "_"))
        if given is not None:
            conv = table[name][0]
            try:
                resolved[name] = conv(given)
            except ValueError as exc:
                raise _UsageError(f"bad value for --{name}: {exc}") from exc
    for name, value in resolved.items():
        if value is None:
            raise _UsageError(f"--{name} is required for {cmd}")
    return resolved


def _write_run_echo(cmd: str, opts: dict) -> Path:
    out = Path(opts["out"])
    out.mkdir(parents=True, exist_ok=True)
    lines = [f"subcommand = {cmd}"]
    lines += [f"{k} = {opts[k]}" for k in sorted(opts)]
    (out / "run.txt").write_text("\n".join(lines) + "\n")
    return out


def _parse_fix(text: str) -> GuidanceSpec:
    fixed = {}
    for part in text.split(","):
        part = part.strip()
        if not part:
            continue
        if "=" not in part:
            raise _UsageError(f"bad constraint {part!r}; expected name=value")
        name, val = part.split("=", 1)
        try:
            fixed[name.strip()] = float(val)
        except ValueError as exc:
            raise _UsageError(f"bad constraint value in {part!r}") from exc
    if not fixed:
        raise _UsageError("--fix lists no constraints")
    try:
        return GuidanceSpec.from_fixed(fixed)
    except ValueError as exc:
        raise _UsageError(str(exc)) from exc


def _demo_scene(seed: int, size: int) -> D.SceneSample:
    cfg = D.GeneratorConfig(size=size, n_instances=1, seed=seed)
    return D.generate_scene(np.random.default_rng([seed, 0xDE20]), cfg, instance_id=0)


def _load_scene(opts, seed_key=0xDE20) -> D.SceneSample:
    if opts.get("scene"):
        return D.read_sample(opts["scene"])
    return _demo_scene(opts["seed"], opts.get("size", 32))


def _sampling_context(opts):
    """Load a checkpoint plus the run settings stored alongside it."""
    params, net_cfg, extra = load_checkpoint(opts["ckpt"])
    sched = build_schedule(int(extra.get("T", 100)), extra.get("family", "linear"))
    splat_condition = extra.get("splat_condition", "1") == "1"
    return params, net_cfg, sched, splat_condition, TemplateSpec()


def _write_layout_outputs(out: Path, scene, layouts, spec: TemplateSpec) -> None:
    size = scene.object_grid.shape[0]
    for i, layout in enumerate(layouts):
        (out / f"layout_{i:03d}.txt").write_text(layout.to_line() + "\n")
        render.render_mask(splat_values(layout, size, size, spec), out / f"mask_{i:03d}.pgm")
    overlay = render.compose_overlay(scene.object_grid, layouts, spec)
    render.render_mask(overlay, out / "overlay.pgm")


# ---------------------------------------------------------------------------
# subcommand bodies


def _cmd_gen_data(opts) -> int:
    out = Path(opts["out"])
    gcfg = D.GeneratorConfig(size=opts["size"], n_instances=opts["n-instances"], seed=opts["seed"])
    samples = D.generate_dataset(gcfg, opts["n-scenes"], seed=opts["seed"])
    manifest = D.write_dataset(samples, out)
    rng = np.random.default_rng([opts["seed"], 0x5B117])
    train_man, test_man = D.split_by_instance(manifest, opts["held-out"], rng)
    D.save_manifest(train_man, out / "manifest-train.txt")
    D.save_manifest(test_man, out / "manifest-test.txt")
    print(f"wrote {manifest.count} scenes to {out} "
          f"(train {train_man.count} / test {test_man.count})")
    return 0


def _train_config(opts) -> training.TrainConfig:
    samples = D.read_dataset(opts["data"], opts.get("manifest", "manifest-train.txt"))
    grid = samples[0].object_grid.shape[0]
    net = DenoiserConfig(grid=grid, conv1=opts.get("conv1", 16), conv2=opts.get("conv2", 32),
                         time_dim=opts.get("time-dim", 16), hidden=opts.get("hidden", 128))
    loss = LossConfig(lam=opts.get("lam", 10.0), mask_res=opts.get("mask-res", 32))
    return training.TrainConfig(
        data_root=opts["data"], manifest=opts.get("manifest", "manifest-train.txt"),
        steps=opts["steps"], batch=opts["batch"], lr=opts["lr"],
        seed=opts["seed"], T=opts.get("T", 100), family=opts.get("family", "linear"),
        net=net, loss=loss, splat_condition=opts.get("splat-condition", True),
        init_checkpoint=opts.get("init") or None,
    )


def _ckpt_extra(cfg: training.TrainConfig) -> dict:
    return {
        "T": str(cfg.T), "family": cfg.family,
        "splat_condition": "1" if cfg.splat_condition else "0",
        "lam": repr(cfg.loss.lam), "mask_res": str(cfg.loss.mask_res),
    }


def _cmd_train(opts) -> int:
    cfg = _train_config(opts)
    out = Path(opts["out"])
    params, report = training.train(cfg)
    save_checkpoint(out / "ckpt.bin", params, cfg.net, _ckpt_extra(cfg))
    (out / "report.txt").write_text(report.to_text())
    (out / "schedule.txt").write_text(schedule_table(build_schedule(cfg.T, cfg.family)))
    print(f"trained {cfg.steps} steps; final loss {report.metrics['loss_final']:.4f}; "
          f"checkpoint {out / 'ckpt.bin'}")
    return 0


def _cmd_sample(opts) -> int:
    params, net_cfg, sched, splat_cond, spec = _sampling_context(opts)
    scene = D.read_sample(opts["scene"])
    out = Path(opts["out"])
    layouts = training.evaluate_layouts(
        params, net_cfg, [scene] * opts["n"], sched, spec, splat_condition=splat_cond,
        sampler=opts["sampler"], eta=opts["eta"], seed=opts["seed"],
    )
    _write_layout_outputs(out, scene, layouts, spec)
    print(f"sampled {len(layouts)} layouts into {out}")
    return 0


def _cmd_guide(opts) -> int:
    guidance = _parse_fix(opts["fix"])
    params, net_cfg, sched, splat_cond, spec = _sampling_context(opts)
    scene = D.read_sample(opts["scene"])
    out = Path(opts["out"])
    layouts = training.evaluate_layouts(
        params, net_cfg, [scene] * opts["n"], sched, spec, splat_condition=splat_cond,
        sampler=opts["sampler"], eta=opts["eta"], seed=opts["seed"],
        guidance_fn=lambda i, s: guidance,
    )
    _write_layout_outputs(out, scene, layouts, spec)
    mae, counts = training.constraint_error(layouts, [guidance] * len(layouts))
    names = ("a", "x", "y", "b1", "b2")
    lines = [f"constraint_mae_{n} = {mae[i]!r}" for i, n in enumerate(names) if counts[i] > 0]
    (out / "constraints.txt").write_text("\n".join(lines) + "\n")
    print("\n".join(lines))
    return 0


def _cmd_interpolate(opts) -> int:
    l_a = Layout.from_line(opts["la"])
    l_b = Layout.from_line(opts["lb"])
    scene = _load_scene(opts)
    out = Path(opts["out"])
    frames = demos.interpolate_demo(l_a, l_b, opts["k-steps"], scene.object_grid)
    for i, frame in enumerate(frames):
        render.render_mask(frame, out / f"frame_{i:02d}.pgm")
    print(f"wrote {len(frames)} frames to {out}")
    return 0


def _cmd_heatmap(opts) -> int:
    params, net_cfg, sched, splat_cond, spec = _sampling_context(opts)
    scene = _load_scene(opts)
    if scene.object_grid.shape[0] != net_cfg.grid:
        raise ValueError("scene size does not match the checkpoint's grid")
    out = Path(opts["out"])
    heatmap = D.heatmap_for_scene(scene, opts["sigma"])
    rng = np.random.default_rng([opts["seed"], 0x8EA7])
    layouts, points = demos.heatmap_guided_sample(
        params, net_cfg, scene, heatmap, opts["n"], rng, spec, splat_cond, sched,
        sampler=opts["sampler"], eta=opts["eta"],
    )
    _write_layout_outputs(out, scene, layouts, spec)
    render.render_mask(heatmap / heatmap.max(), out / "heatmap.pgm")
    (out / "points.txt").write_text(
        "\n".join(f"{p[0]:.12g} {p[1]:.12g}" for p in points) + "\n")
    print(f"sampled {len(layouts)} heatmap-guided layouts into {out}")
    return 0


def _cmd_scene(opts) -> int:
    params, net_cfg, sched, splat_cond, spec = _sampling_context(opts)
    try:
        widths = [float(w) for w in opts["crop-widths"].split(",") if w.strip()]
    except ValueError as exc:
        raise _UsageError(f"bad --crop-widths: {exc}") from exc
    if not widths:
        raise _UsageError("--crop-widths lists no crops")
    out = Path(opts["out"])
    crops = []
    for i, width in enumerate(widths):
        cfg = D.GeneratorConfig(size=net_cfg.grid, n_instances=1, seed=opts["seed"] + i)
        crops.append((D.generate_scene(np.random.default_rng([opts["seed"], 0xC209, i]), cfg, 0), width))
    rng = np.random.default_rng([opts["seed"], 0x5CEE])
    layouts, rows = demos.scene_consistent_sample(
        params, net_cfg, crops, opts["hand-size"], rng, spec, splat_cond, sched,
        sampler=opts["sampler"], eta=opts["eta"],
    )
    lines = []
    for i, ((scene, _w), layout, row) in enumerate(zip(crops, layouts, rows)):
        overlay = render.compose_overlay(scene.object_grid, [layout], spec)
        render.render_mask(overlay, out / f"crop_{i:02d}.pgm")
        (out / f"layout_{i:03d}.txt").write_text(layout.to_line() + "\n")
        lines.append(f"crop {i} width {row['crop_width']!r} relative {row['relative_size']!r} "
                     f"absolute {row['absolute_size']!r}")
    (out / "sizes.txt").write_text("\n".join(lines) + "\n")
    print("\n".join(lines))
    return 0


def _cmd_eval(opts) -> int:
    params, net_cfg, sched, splat_cond, spec = _sampling_context(opts)
    manifest_name = {"train": "manifest-train.txt", "test": "manifest-test.txt",
                     "all": "manifest.txt"}.get(opts["split"])
    if manifest_name is None:
        raise _UsageError(f"unknown split {opts['split']!r}")
    scenes = D.read_dataset(opts["data"], manifest_name)
    if opts["n"]:
        scenes = scenes[: opts["n"]]
    out = Path(opts["out"])
    layouts = training.evaluate_layouts(
        params, net_cfg, scenes, sched, spec, splat_condition=splat_cond,
        sampler=opts["sampler"], eta=opts["eta"], seed=opts["seed"],
    )
    recall = training.contact_recall(layouts, scenes)
    report = training.MetricsReport(
        metrics={"contact_recall": recall, "sample_count": len(scenes)},
    )
    (out / "report.txt").write_text(report.to_text())
    print(f"contact_recall = {recall:.4f} over {len(scenes)} scenes")
    return 0


def _cmd_ablate(opts) -> int:
    base = training.TrainConfig(
        data_root=opts["data"], steps=opts["steps"], batch=opts["batch"],
        lr=opts["lr"], seed=opts["seed"],
        net=DenoiserConfig(grid=D.read_dataset(opts["data"], "manifest-test.txt")[0].object_grid.shape[0]),
    )
    out = Path(opts["out"])
    rows, table, notes = training.ablation_suite(base, max_eval=opts["max-eval"],
                                                 eval_seed=opts["seed"])
    text = table + "\n".join(notes) + "\n"
    (out / "ablation.txt").write_text(text)
    print(text, end="")
    return 0


def _cmd_check_grad(opts) -> int:
    out = Path(opts["out"])
    rng = np.random.default_rng(opts["seed"])
    spec = TemplateSpec()
    size = opts["size"]
    h = opts["fd-step"]
    worst = 0.0
    for _ in range(opts["layouts"]):
        a = rng.uniform(0.3, 0.75) * rng.choice([-1.0, 1.0])
        x, y = rng.uniform(-0.6, 0.6, 2)
        ang = rng.uniform(0.0, 2.0 * math.pi)
        scale = rng.uniform(0.5, 2.0)
        layout = Layout(a, x, y, scale * math.cos(ang), scale * math.sin(ang))
        analytic = splat_jacobian(layout, size, size, spec)
        fd = np.zeros_like(analytic)
        base = layout.vector()
        for k in range(5):
            plus, minus = base.copy(), base.copy()
            plus[k] += h
            minus[k] -= h
            fd[:, :, k] = (splat_values(Layout(*plus), size, size, spec)
                           - splat_values(Layout(*minus), size, size, spec)) / (2.0 * h)
        scale_ref = max(np.abs(fd).max(), 1e-12)
        worst = max(worst, float(np.abs(analytic - fd).max() / scale_ref))
    line = f"splat jacobian max relative error = {worst!r} over {opts['layouts']} layouts"
    print(line)
    (out / "check.txt").write_text(line + "\n")
    return 0 if worst < 1e-3 else 2


def _cmd_oracle_check(opts) -> int:
    out = Path(opts["out"])
    sched = build_schedule(opts["T"], opts["family"])
    lines = []
    all_ok = True
    for sampler, eta in (("ddpm", 1.0), ("ddim", 1.0)):
        rng = np.random.default_rng([opts["seed"], 0x0AC1E, 1 if sampler == "ddpm" else 2])
        rep = training.sampler_moment_check(sched, sampler, opts["mu"], opts["sigma"],
                                            opts["chains"], rng, eta=eta)
        lines.append(f"{sampler}(eta={eta}): mean = {rep['mean']!r} std = {rep['std']!r} "
                     f"passed = {rep['passed']}")
        all_ok = all_ok and rep["passed"]
    (out / "oracle.txt").write_text("\n".join(lines) + "\n")
    (out / "schedule.txt").write_text(schedule_table(sched))
    print("\n".join(lines))
    return 0 if all_ok else 2


_COMMANDS = {
    "gen-data": _cmd_gen_data,
    "train": _cmd_train,
    "sample": _cmd_sample,
    "guide": _cmd_guide,
    "interpolate": _cmd_interpolate,
    "heatmap": _cmd_heatmap,
    "scene": _cmd_scene,
    "eval": _cmd_eval,
    "ablate": _cmd_ablate,
    "check-grad": _cmd_check_grad,
    "oracle-check": _cmd_oracle_check,
}


def _build_parser() -> _Parser:
    parser = _Parser(prog="handlayout", description=__doc__, add_help=True)
    sub = parser.add_subparsers(dest="command", parser_class=_Parser)
    for cmd, table in _OPTIONS.items():
        p = sub.add_parser(cmd)
        p.add_argument("--config", default=None, help="key = value config file")
        for name, (_conv, _default, help_text) in dict(table, **_SHARED).items():
            p.add_argument(f"--{name}", default=None, help=help_text)
    return parser


def main(argv=None) -> int:
    argv = list(sys.argv[1:] if argv is None else argv)
    parser = _build_parser()
    try:
        if not argv:
            raise _UsageError("no subcommand given")
        args = parser.parse_args(argv)
        if args.command is None:
            raise _UsageError("no subcommand given")
        opts = _resolve(args.command, args)
        _write_run_echo(args.command, opts)
    except _UsageError as exc:
        print(_SYNOPSIS, file=sys.stderr)
        print(f"error: {exc}", file=sys.stderr)
        return 1
    except SystemExit as exc:  # argparse --help
        return 0 if exc.code in (0, None) else 1
    try:
        return _COMMANDS[args.command](opts)
    except Exception as exc:  # runtime failure contract: exit 2
        print(f"handlayout {args.command} failed: {exc}", file=sys.stderr)
        return 2
