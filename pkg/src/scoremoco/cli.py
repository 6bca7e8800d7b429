"""Command-line pipeline: simulate, train, compensate, evaluate, report.

Every subcommand reads and writes files only (``.f32raw`` + ``.json`` arrays,
JSON motion splines, JSON-lines traces) and leaves a manifest recording the
configuration hash, seeds and SHA-256 hashes of its inputs and outputs.
``scoremoco rerun <manifest>`` re-executes a recorded command and checks that
every output hash is reproduced.

Exit codes: 0 success, 1 unexpected failure, 2 configuration or argument
error, 3 I/O or file-format error, 4 numerical divergence, 5 rerun mismatch.
"""

from __future__ import annotations

import argparse
import hashlib
import json
import logging
import os
import sys
import tempfile
from concurrent.futures import ThreadPoolExecutor
from pathlib import Path

import numpy as np

from . import __version__
from . import experiments as ex
from .config import ExperimentConfig, load_config
from .ctrecon import FBPOperator, fbp_reconstruct, forward_project, read_sinogram, shepp_logan, write_sinogram
from .errors import ConfigError, DivergenceError, FormatError, IncompatibleWeightsError, ResourceError
from .grid import Image, export_png, read_image, write_image
from .metrics import EvalReport, FIELDS, write_quantiles_json, write_report_csv
from .motion import MotionSpline, load_motion, save_motion
from .optimizer import compensate as run_compensation
from .pfode import log_likelihood
from .scorenet import load_weights, save_weights, train

log = logging.getLogger("scoremoco")

EXIT_OK, EXIT_FAIL, EXIT_CONFIG, EXIT_IO, EXIT_DIVERGENCE, EXIT_MISMATCH = 0, 1, 2, 3, 4, 5

# file names inside a case directory
PHANTOM = "phantom"
MOTION_GT = "motion_gt.json"
SINOGRAM = "sinogram"
SINOGRAM_CLEAN = "sinogram_clean"
REFERENCE = "reference"
INIT = "init"
COMPENSATED = "compensated"
EVAL = "eval.json"


class _Usage(Exception):
    pass


# -- helpers ----------------------------------------------------------------

def _file_hash(path: Path) -> str:
    return hashlib.sha256(Path(path).read_bytes()).hexdigest()


def _array_files(stem: Path) -> list[Path]:
    return [stem.with_name(stem.name + ".f32raw"), stem.with_name(stem.name + ".json")]


def _expand(paths) -> list[Path]:
    out = []
    for p in paths:
        p = Path(p)
        if p.suffix in ("", ".f32raw") and not p.is_file():
            out += [f for f in _array_files(p.with_suffix("") if p.suffix else p) if f.exists()]
        elif p.exists():
            out.append(p)
    return sorted(set(out))


def _hashes(paths) -> dict[str, str]:
    return {str(p): _file_hash(p) for p in _expand(paths)}


def write_manifest(out_dir: Path, command: str, args: argparse.Namespace, cfg: ExperimentConfig,
                   inputs, outputs, extra: dict | None = None) -> Path:
    argv = getattr(args, "_argv", [])
    manifest = {
        "command": command,
        "argv": argv,
        "cwd": os.getcwd(),
        "version": __version__,
        "config": cfg.to_dict(),
        "config_hash": cfg.hash(),
        "seed": getattr(args, "seed", None),
        "inputs": _hashes(inputs),
        "outputs": _hashes(outputs),
    }
    manifest.update(extra or {})
    out_dir.mkdir(parents=True, exist_ok=True)
    path = out_dir / f"manifest_{command}.json"
    path.write_text(json.dumps(manifest, indent=2, sort_keys=True))
    return path


def _png(image: Image | np.ndarray, stem: Path) -> None:
    export_png(getattr(image, "data", image), stem.with_name(stem.name + ".png"))


def _seed(args, cfg) -> int:
    return cfg.seeds.base if args.seed is None else args.seed


def _load_score(args, cfg):
    path = args.weights or cfg.paths.weights
    if not path:
        raise _Usage("the likelihood objective needs --weights (or paths.weights in the config)")
    net = load_weights(path)
    return net, path


def _config_for(args) -> ExperimentConfig:
    cfg = load_config(args.config)
    if getattr(args, "trace_mode", None):
        cfg = cfg.updated(trace={"mode": args.trace_mode})
    return cfg


# -- subcommands ------------------------------------------------------------

def cmd_phantom(args, cfg):
    out = Path(args.out_dir)
    seed = _seed(args, cfg)
    if args.kind == "shepp-logan":
        img = shepp_logan(cfg.image.size, cfg.image.spacing_mm)
    else:
        from .ctrecon import sample_phantom
        img = sample_phantom(ex.build_sampler(cfg), seed)
    stem = out / args.name
    write_image(img, stem)
    _png(img, stem)
    write_manifest(out, "phantom", args, cfg, [], [stem])
    print(f"phantom seed={seed} -> {stem}.f32raw")


def cmd_perturb(args, cfg):
    out = Path(args.out_dir)
    seed = _seed(args, cfg)
    changes = {}
    if args.amplitude_t is not None:
        changes["amplitude_t_mm"] = args.amplitude_t
    if args.amplitude_r is not None:
        changes["amplitude_r_deg"] = args.amplitude_r
    if changes:
        cfg = cfg.updated(perturbation=changes)
    spline, meta = ex.build_perturbation(cfg, seed)
    path = out / args.name
    save_motion(spline, path)
    meta_path = path.with_name(path.stem + ".meta.json")
    meta_path.write_text(json.dumps(meta, indent=2, sort_keys=True))
    write_manifest(out, "perturb", args, cfg, [], [path, meta_path])
    print(f"perturbation seed={seed} overshoot={meta['overshoot_factor']} -> {path}")


def _motion_or_none(path):
    return load_motion(path) if path else None


def cmd_project(args, cfg):
    out = Path(args.out_dir)
    image_path = Path(args.image) if args.image else out / PHANTOM
    img = read_image(image_path)
    motion = _motion_or_none(args.motion)
    geometry = ex.build_geometry(cfg)
    sino = forward_project(img, geometry, motion.per_view_radians() if motion else None)
    stem = out / args.name
    write_sinogram(sino, stem)
    inputs = [image_path] + ([Path(args.motion)] if args.motion else [])
    write_manifest(out, "project", args, cfg, inputs, [stem])
    print(f"sinogram {sino.data.shape} -> {stem}.f32raw")


def cmd_fbp(args, cfg):
    out = Path(args.out_dir)
    sino_path = Path(args.sinogram) if args.sinogram else out / SINOGRAM
    sino = read_sinogram(sino_path)
    motion = _motion_or_none(args.motion)
    img = fbp_reconstruct(sino, motion=motion.per_view_radians() if motion else None,
                          shape=(cfg.image.size, cfg.image.size), spacing=cfg.image.spacing_mm)
    stem = out / args.name
    write_image(img, stem)
    _png(img, stem)
    inputs = [sino_path] + ([Path(args.motion)] if args.motion else [])
    write_manifest(out, "fbp", args, cfg, inputs, [stem])
    print(f"reconstruction -> {stem}.f32raw")


def simulate_into(cfg: ExperimentConfig, seed: int, case_dir: Path) -> list[Path]:
    case = ex.simulate_case(cfg, seed)
    case_dir.mkdir(parents=True, exist_ok=True)
    outputs = []
    for name, img in ((PHANTOM, case.phantom), (REFERENCE, case.reference), (INIT, case.init)):
        write_image(img, case_dir / name)
        _png(img, case_dir / name)
        outputs.append(case_dir / name)
    write_sinogram(case.sinogram, case_dir / SINOGRAM)
    save_motion(case.gt_motion, case_dir / MOTION_GT)
    meta_path = case_dir / "motion_gt.meta.json"
    meta_path.write_text(json.dumps(case.perturbation_meta, indent=2, sort_keys=True))
    return outputs + [case_dir / SINOGRAM, case_dir / MOTION_GT, meta_path]


def cmd_simulate(args, cfg):
    out = Path(args.out_dir)
    seeds = [args.seed] if args.seed is not None else cfg.seeds.case_seeds()
    dirs = [out / f"case_{s:04d}" for s in seeds]
    with ThreadPoolExecutor(max_workers=max(args.jobs, 1)) as pool:
        produced = list(pool.map(lambda sd: simulate_into(cfg, sd[0], sd[1]), zip(seeds, dirs)))
    for s, d, outputs in zip(seeds, dirs, produced):
        args.seed = s
        write_manifest(d, "simulate", args, cfg, [], outputs, {"case_seed": s})
        print(f"case seed={s} -> {d}")


def cmd_train_score(args, cfg):
    out = Path(args.out_dir)
    if args.steps is not None:
        cfg = cfg.updated(train={"steps": args.steps})
    if args.seed is not None:
        cfg = cfg.updated(seeds={"train": args.seed})
    net = ex.build_net(cfg)
    sampler = ex.build_training_sampler(cfg)
    every = max(cfg.train.steps // 20, 1)

    def progress(step, loss):
        if step % every == 0:
            log.info("step %d loss %.4f", step, loss)

    res = train(net, sampler, ex.build_train_config(cfg), progress)
    stem = out / args.name
    save_weights(net, stem, {"train": cfg.train.model_dump(mode="json"), "train_seed": cfg.seeds.train,
                             "image": cfg.image.model_dump(mode="json")})
    curve = out / "loss_curve.json"
    curve.write_text(json.dumps({"loss": res.losses, "smoothed": res.smoothed().tolist()}))
    write_manifest(out, "train-score", args, cfg, [], [stem, curve])
    if res.losses:
        sm = res.smoothed()
        print(f"trained {cfg.train.steps} steps: smoothed loss {sm[0]:.4f} -> {sm[-1]:.4f}")
    else:
        print("trained 0 steps: weights unchanged")


def cmd_likelihood(args, cfg):
    out = Path(args.out_dir)
    net, wpath = _load_score(args, cfg)
    img = read_image(args.image)
    seed = _seed(args, cfg)
    res = log_likelihood(net, net.schedule, ex.build_ode(cfg), ex.build_trace(cfg, seed), img.data,
                         want_gradient=args.gradient)
    payload = {"logp": res.logp, "prior_logp": res.prior_logp, "divergence_integral": res.divergence_integral,
               "trace_mode": cfg.trace.mode, "seed": seed}
    path = out / args.name
    path.parent.mkdir(parents=True, exist_ok=True)
    path.write_text(json.dumps(payload, indent=2, sort_keys=True))
    outputs = [path]
    if args.gradient:
        write_image(Image(res.gradient, img.spacing), out / "logp_gradient")
        outputs.append(out / "logp_gradient")
    write_manifest(out, "likelihood", args, cfg, [Path(args.image), Path(wpath)], outputs)
    print(f"logp = {res.logp:.6f} nats")


def _compensate_case(case_dir: Path, args, cfg, net):
    seed = args.seed if args.seed is not None else _case_seed(case_dir, cfg)
    sino = read_sinogram(case_dir / SINOGRAM)
    shape = (cfg.image.size, cfg.image.size)
    reference = read_image(case_dir / REFERENCE) if args.objective == "mse-oracle" else None
    objective = ex.make_objective(cfg, args.objective, reference, net, stream=seed)
    res = run_compensation(sino, objective, ex.build_optimizer(cfg, seed), shape, cfg.image.spacing_mm)
    out = case_dir / COMPENSATED
    out.mkdir(parents=True, exist_ok=True)
    save_motion(res.spline, out / "motion_est.json")
    write_image(res.image, out / "recon")
    _png(res.image, out / "recon")
    res.trace.write_jsonl(out / "trace.jsonl")
    res.trace.write_jsonl(out / "trace_timing.jsonl", wall_time=True)
    inputs = [case_dir / SINOGRAM] + ([case_dir / REFERENCE] if reference is not None else [])
    if net is not None:
        inputs.append(Path(args.weights or cfg.paths.weights))
    opt = cfg.optimizer
    extra = {"case_seed": seed, "objective": args.objective, "status": res.status,
             "optimizer": {"iterations": opt.iterations, "r0": opt.r0, "q": opt.q,
                           "calibrate_step": opt.calibrate_step, "r0_effective": res.r0_effective}}
    write_manifest(out, "compensate", args, cfg, inputs,
                   [out / "motion_est.json", out / "recon", out / "trace.jsonl"], extra)
    return case_dir, res


def _case_seed(case_dir: Path, cfg) -> int:
    for name in ("manifest_simulate.json",):
        p = case_dir / name
        if p.exists():
            return int(json.loads(p.read_text()).get("case_seed", cfg.seeds.base))
    return cfg.seeds.base


def _case_dirs(args) -> list[Path]:
    dirs = [Path(d) for d in args.cases] if args.cases else [Path(args.out_dir)]
    for d in dirs:
        if not d.is_dir():
            raise FileNotFoundError(f"case directory {d} does not exist")
    return dirs


def cmd_compensate(args, cfg):
    net = _load_score(args, cfg)[0] if args.objective == "likelihood" else None
    dirs = _case_dirs(args)
    with ThreadPoolExecutor(max_workers=max(args.jobs, 1)) as pool:
        results = list(pool.map(lambda d: _compensate_case(d, args, cfg, net), dirs))
    for d, res in results:
        v = res.trace.values
        print(f"{d}: {args.objective} objective {v[0]:.6g} -> {v[-1]:.6g} ({res.status})")
    if any(res.status != "ok" for _, res in results):
        raise DivergenceError("compensation degraded in at least one case; best-so-far results were written")


def _eval_case(case_dir: Path, cfg) -> dict:
    geometry = ex.build_geometry(cfg)
    reference = read_image(case_dir / REFERENCE)
    gt = load_motion(case_dir / MOTION_GT)
    n_nodes = cfg.spline.nodes
    init_img = read_image(case_dir / INIT)
    from .metrics import evaluate_case
    zero = MotionSpline.zeros(n_nodes, geometry.n_views)
    if gt.n_views != geometry.n_views:
        raise FormatError(f"{case_dir / MOTION_GT}: view count does not match the geometry")
    report = {"init": evaluate_case(init_img, reference, gt, zero, geometry, cfg.image.data_range).to_dict()}
    comp = case_dir / COMPENSATED
    if (comp / "motion_est.json").exists():
        est = load_motion(comp / "motion_est.json")
        img = read_image(comp / "recon")
        report["compensated"] = evaluate_case(img, reference, gt, est, geometry, cfg.image.data_range).to_dict()
    (case_dir / EVAL).write_text(json.dumps(report, indent=2, sort_keys=True))
    return report


def cmd_eval(args, cfg):
    dirs = _case_dirs(args)
    with ThreadPoolExecutor(max_workers=max(args.jobs, 1)) as pool:
        reports = list(pool.map(lambda d: _eval_case(d, cfg), dirs))
    for d, rep in zip(dirs, reports):
        inputs = [d / REFERENCE, d / MOTION_GT, d / INIT]
        if "compensated" in rep:
            inputs += [d / COMPENSATED / "motion_est.json", d / COMPENSATED / "recon"]
        write_manifest(d, "eval", args, cfg, inputs, [d / EVAL])
        line = " ".join(f"{k}: rmse={v['rmse']:.4f} ssim={v['ssim']:.4f} rpe={v['rpe_mm']:.3f}mm"
                        for k, v in rep.items())
        print(f"{d}: {line}")


def _panel(rows: list[list[np.ndarray]], gap: int = 2) -> np.ndarray:
    h, w = rows[0][0].shape
    ncol = max(len(r) for r in rows)
    canvas = np.ones((len(rows) * (h + gap) - gap, ncol * (w + gap) - gap))
    for i, row in enumerate(rows):
        for j, img in enumerate(row):
            canvas[i * (h + gap):i * (h + gap) + h, j * (w + gap):j * (w + gap) + w] = img
    return canvas


def cmd_report(args, cfg):
    out = Path(args.out_dir)
    dirs = [Path(d) for d in args.cases]
    if not dirs:
        dirs = sorted(p for p in out.glob("case_*") if p.is_dir())
    if not dirs:
        raise FileNotFoundError("no case directories to report on")
    rows: dict[str, list[EvalReport]] = {}
    panels = []
    for d in dirs:
        if not (d / EVAL).exists():
            raise FileNotFoundError(f"{d / EVAL} missing; run `scoremoco eval` first")
        rep = json.loads((d / EVAL).read_text())
        for method, values in rep.items():
            rows.setdefault(method, []).append(EvalReport(**{f: values[f] for f in FIELDS}))
        row = [read_image(d / REFERENCE).data, read_image(d / INIT).data]
        if (d / COMPENSATED / "recon.json").exists():
            row.append(read_image(d / COMPENSATED / "recon").data)
        panels.append(row)
    rows = {k: rows[k] for k in sorted(rows, key=lambda k: (k != "init", k))}
    out.mkdir(parents=True, exist_ok=True)
    write_report_csv(rows, out / "report.csv")
    write_quantiles_json(rows, out / "quantiles.json")
    export_png(_panel(panels[: args.max_panels]), out / "panels.png")
    inputs = [d / EVAL for d in dirs]
    write_manifest(out, "report", args, cfg, inputs, [out / "report.csv", out / "quantiles.json"])
    print((out / "report.csv").read_text().rstrip())


def cmd_rerun(args, _cfg):
    manifest_path = Path(args.manifest)
    manifest = json.loads(manifest_path.read_text())
    with tempfile.TemporaryDirectory() as tmp:
        cfg_path = Path(tmp) / "config.json"
        cfg_path.write_text(json.dumps(manifest["config"]))
        argv = [manifest["command"], *manifest["argv"], "--config", str(cfg_path)]
        prev = os.getcwd()
        os.chdir(manifest.get("cwd", prev))
        try:
            code = main(argv)
            fresh = {p: _file_hash(Path(p)) if Path(p).exists() else None for p in manifest["outputs"]}
        finally:
            os.chdir(prev)
    if code != EXIT_OK:
        return code
    bad = [p for p, h in manifest["outputs"].items() if fresh[p] != h]
    if ExperimentConfig.model_validate(manifest["config"]).hash() != manifest["config_hash"]:
        bad.append("config_hash")
    for p in bad:
        print(f"mismatch: {p}", file=sys.stderr)
    print("rerun reproduced all output hashes" if not bad else f"rerun: {len(bad)} mismatches")
    return EXIT_MISMATCH if bad else EXIT_OK


# -- argument parsing -------------------------------------------------------

def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="scoremoco", description=__doc__.splitlines()[0])
    parser.add_argument("--version", action="version", version=__version__)
    parser.add_argument("-v", "--verbose", action="store_true", help="log progress to stderr")
    sub = parser.add_subparsers(dest="command", required=True)

    def add(name, func, help_text, cases=False):
        p = sub.add_parser(name, help=help_text)
        p.add_argument("--config", help="experiment config JSON (defaults when omitted)")
        p.add_argument("--seed", type=int, help="case seed (overrides config)")
        p.add_argument("--out-dir", default=".", help="output directory")
        p.add_argument("--jobs", type=int, default=1, help="worker threads over independent cases")
        if cases:
            p.add_argument("cases", nargs="*", help="case directories (default: --out-dir)")
        p.set_defaults(func=func)
        return p

    p = add("phantom", cmd_phantom, "generate a phantom image")
    p.add_argument("--kind", choices=("random", "shepp-logan"), default="random")
    p.add_argument("--name", default=PHANTOM)

    p = add("perturb", cmd_perturb, "draw a ground-truth motion spline")
    p.add_argument("--amplitude-t", type=float, help="translation amplitude in mm")
    p.add_argument("--amplitude-r", type=float, help="rotation amplitude in degrees")
    p.add_argument("--name", default=MOTION_GT)

    p = add("project", cmd_project, "fan-beam forward projection")
    p.add_argument("--image", help=f"input image stem (default <out-dir>/{PHANTOM})")
    p.add_argument("--motion", help="motion spline JSON applied to the geometry")
    p.add_argument("--name", default=SINOGRAM)

    p = add("fbp", cmd_fbp, "filtered backprojection along a trajectory")
    p.add_argument("--sinogram", help=f"sinogram stem (default <out-dir>/{SINOGRAM})")
    p.add_argument("--motion", help="motion spline JSON")
    p.add_argument("--name", default=INIT)

    add("simulate", cmd_simulate, "phantom + perturbation + sinogram + reference/init reconstructions per case")

    p = add("train-score", cmd_train_score, "train the toy score network with denoising score matching")
    p.add_argument("--steps", type=int, help="override train.steps")
    p.add_argument("--name", default="weights")

    p = add("likelihood", cmd_likelihood, "probability-flow log-likelihood of an image")
    p.add_argument("--image", required=True)
    p.add_argument("--weights")
    p.add_argument("--trace-mode", choices=("hutchinson", "exact"))
    p.add_argument("--gradient", action="store_true", help="also write d logp / d image")
    p.add_argument("--name", default="likelihood.json")

    p = add("compensate", cmd_compensate, "motion compensation on case directories", cases=True)
    p.add_argument("--objective", choices=ex.OBJECTIVES, default="likelihood")
    p.add_argument("--weights")
    p.add_argument("--trace-mode", choices=("hutchinson", "exact"))

    add("eval", cmd_eval, "metrics for init and compensated reconstructions", cases=True)

    p = add("report", cmd_report, "CSV/JSON summaries and PNG panels over cases", cases=True)
    p.add_argument("--max-panels", type=int, default=8)

    p = sub.add_parser("rerun", help="re-execute a manifest and verify output hashes")
    p.add_argument("manifest")
    p.set_defaults(func=cmd_rerun, config=None)
    return parser


def _recorded_argv(argv: list[str]) -> list[str]:
    """Arguments after the subcommand, without --config (the manifest embeds the config)."""
    rest, skip = [], False
    for a in argv[1:]:
        if skip:
            skip = False
            continue
        if a == "--config":
            skip = True
            continue
        if a.startswith("--config="):
            continue
        rest.append(a)
    return rest


def main(argv: list[str] | None = None) -> int:
    argv = list(sys.argv[1:] if argv is None else argv)
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except SystemExit as exc:
        return int(exc.code or 0)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s")
    cmd_index = next(i for i, a in enumerate(argv) if a == args.command)
    args._argv = _recorded_argv(argv[cmd_index:])
    stage = args.command
    try:
        cfg = _config_for(args) if args.command != "rerun" else None
        code = args.func(args, cfg)
        return EXIT_OK if code is None else code
    except DivergenceError as exc:
        print(f"scoremoco {stage}: numerical divergence: {exc}", file=sys.stderr)
        return EXIT_DIVERGENCE
    except (FormatError, IncompatibleWeightsError, OSError, KeyError, json.JSONDecodeError) as exc:
        print(f"scoremoco {stage}: I/O error: {exc}", file=sys.stderr)
        return EXIT_IO
    except (ConfigError, ResourceError, _Usage, ValueError) as exc:
        print(f"scoremoco {stage}: configuration error: {exc}", file=sys.stderr)
        return EXIT_CONFIG


if __name__ == "__main__":
    sys.exit(main())
