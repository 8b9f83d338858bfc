"""Command-line interface: ``scatternet {gen,solve,train,eval,ablate,finetune}``.

Every command is a pure function of its JSON config (or arguments) and input
files. Every CSV written starts with a ``# config_hash=<hex>`` line and every
JSON output carries a ``config_hash`` key.

Exit codes: 0 ok, 2 config/usage error, 3 solver failure, 4 training
divergence, 5 checkpoint/config/dataset mismatch.
"""
from __future__ import annotations

import argparse
import csv
import hashlib
import json
import logging
import sys
from dataclasses import dataclass, field, fields
from pathlib import Path

import numpy as np

from .emoracle import (
    AngleCut,
    IncidentWave,
    NonConvergenceError,
    SingularSystemError,
    assemble_system,
    bistatic_rcs,
    mie_reference,
    physical_optics_currents,
    solve_currents,
    write_currents_csv,
)
from .geometry import MeshError, load_mesh, write_off
from .training import (
    ABLATIONS,
    CompatibilityError,
    DatasetError,
    DivergenceError,
    ShapeSpec,
    TrainConfig,
    angle_grid,
    arm_configs,
    evaluate,
    finetune_protocol,
    generate_dataset,
    load_model,
    save_model,
    split_by_angle,
    timing_comparison,
    train,
)
from .upinet import ConfigError, UPINetConfig

log = logging.getLogger("scatternet")

EXIT_OK, EXIT_CONFIG, EXIT_SOLVER, EXIT_DIVERGENCE, EXIT_MISMATCH = 0, 2, 3, 4, 5
MANIFEST = "manifest.json"


class CLIError(Exception):
    def __init__(self, message: str, code: int):
        super().__init__(message)
        self.code = code


# --------------------------------------------------------------------------
# Run configuration

_SECTIONS = {
    "seed", "output_dir", "wave", "shapes", "hierarchy", "model", "train", "eval", "finetune",
}
_WAVE_KEYS = {"frequency", "amplitude", "theta_start", "theta_stop", "theta_step", "phis"}
_SHAPE_KEYS = {"name", "kind", "params", "edge_fraction"}
_HIER_KEYS = {"max_levels"}
_EVAL_KEYS = {"cut_step", "timing", "timing_shape", "timing_repeats"}
_FT_KEYS = {"shapes", "steps"}


def _reject_unknown(d: dict, allowed: set, where: str) -> None:
    if not isinstance(d, dict):
        raise CLIError(f"config section {where!r} must be an object", EXIT_CONFIG)
    unknown = sorted(set(d) - allowed)
    if unknown:
        raise CLIError(f"unknown config key(s) in {where}: {', '.join(unknown)}", EXIT_CONFIG)


def _shape(d: dict, where: str) -> ShapeSpec:
    _reject_unknown(d, _SHAPE_KEYS, where)
    missing = sorted({"name", "kind"} - set(d))
    if missing:
        raise CLIError(f"{where}: missing key(s) {', '.join(missing)}", EXIT_CONFIG)
    return ShapeSpec(str(d["name"]), str(d["kind"]), dict(d.get("params", {})), float(d.get("edge_fraction", 0.1)))


@dataclass
class RunConfig:
    """Resolved run configuration; see README for the schema."""

    seed: int
    output_dir: Path
    wave: dict
    shapes: list[ShapeSpec]
    max_levels: int
    model: UPINetConfig
    train: TrainConfig
    eval: dict
    finetune_shapes: list[ShapeSpec]
    raw: dict = field(repr=False, default_factory=dict)

    @classmethod
    def from_dict(cls, d: dict, base: Path = Path(".")) -> RunConfig:
        _reject_unknown(d, _SECTIONS, "<root>")
        seed = int(d.get("seed", 0))
        wave = {"frequency": 1e9, "amplitude": 1.0, "theta_start": 0.0, "theta_stop": 180.0,
                "theta_step": 10.0, "phis": [0.0]}
        w = d.get("wave", {})
        _reject_unknown(w, _WAVE_KEYS, "wave")
        wave.update(w)
        shapes_raw = d.get("shapes")
        if not shapes_raw:
            raise CLIError("config needs a non-empty 'shapes' list", EXIT_CONFIG)
        shapes = [_shape(s, f"shapes[{i}]") for i, s in enumerate(shapes_raw)]
        if len({s.name for s in shapes}) != len(shapes):
            raise CLIError("shape names must be unique", EXIT_CONFIG)
        hier = d.get("hierarchy", {})
        _reject_unknown(hier, _HIER_KEYS, "hierarchy")
        m = dict(d.get("model", {}))
        _reject_unknown(m, {f.name for f in fields(UPINetConfig)}, "model")
        m.setdefault("seed", seed)
        m.setdefault("levels", int(hier.get("max_levels", 3)))
        t = dict(d.get("train", {}))
        _reject_unknown(t, {f.name for f in fields(TrainConfig)}, "train")
        t.setdefault("seed", seed)
        ev = {"cut_step": 5.0, "timing": False, "timing_shape": None, "timing_repeats": 7}
        e = d.get("eval", {})
        _reject_unknown(e, _EVAL_KEYS, "eval")
        ev.update(e)
        if ev["timing_shape"] is not None:
            _shape(ev["timing_shape"], "eval.timing_shape")
        ft = d.get("finetune", {})
        _reject_unknown(ft, _FT_KEYS, "finetune")
        ft_shapes = [_shape(s, f"finetune.shapes[{i}]") for i, s in enumerate(ft.get("shapes", []))]
        if "steps" in ft:
            t.setdefault("finetune_steps", int(ft["steps"]))
        try:
            model = UPINetConfig(**m)
            tcfg = TrainConfig(**t)
            IncidentWave(float(wave["frequency"]), float(wave["amplitude"]))
        except (ConfigError, ValueError, TypeError) as exc:
            raise CLIError(f"invalid config: {exc}", EXIT_CONFIG) from exc
        out = Path(d.get("output_dir", "run"))
        out = out if out.is_absolute() else (base / out)
        raw = {
            "seed": seed, "wave": wave, "shapes": [_shape_dict(s) for s in shapes],
            "hierarchy": {"max_levels": model.levels}, "model": model.to_dict(), "train": tcfg.to_dict(),
            "eval": ev, "finetune": {"shapes": [_shape_dict(s) for s in ft_shapes]},
        }
        return cls(seed, out.resolve(), wave, shapes, model.levels, model, tcfg, ev, ft_shapes, raw)

    @classmethod
    def load(cls, path) -> RunConfig:
        path = Path(path)
        try:
            d = json.loads(path.read_text())
        except FileNotFoundError as exc:
            raise CLIError(f"config file not found: {path}", EXIT_CONFIG) from exc
        except json.JSONDecodeError as exc:
            raise CLIError(f"{path}: invalid JSON: {exc}", EXIT_CONFIG) from exc
        return cls.from_dict(d, path.resolve().parent)

    @property
    def hash(self) -> str:
        """Digest of the resolved settings (the output directory is not part of it)."""
        return hashlib.sha256(json.dumps(self.raw, sort_keys=True).encode()).hexdigest()[:16]

    @property
    def dataset_hash(self) -> str:
        """Digest of the settings that determine the generated dataset."""
        keys = ("wave", "shapes", "hierarchy")
        return hashlib.sha256(json.dumps({k: self.raw[k] for k in keys}, sort_keys=True).encode()).hexdigest()[:16]

    @property
    def tag(self) -> str:
        return f"config_hash={self.hash}"

    def template(self) -> IncidentWave:
        return IncidentWave(float(self.wave["frequency"]), float(self.wave["amplitude"]))

    def angles(self) -> list[tuple[float, float]]:
        w = self.wave
        return angle_grid(float(w["theta_start"]), float(w["theta_stop"]), float(w["theta_step"]),
                          [float(p) for p in w["phis"]])


def _shape_dict(s: ShapeSpec) -> dict:
    return {"name": s.name, "kind": s.kind, "params": dict(s.params), "edge_fraction": s.edge_fraction}


def _sha256(path: Path) -> str:
    return hashlib.sha256(path.read_bytes()).hexdigest()


def _write_json(path: Path, doc: dict) -> None:
    path.write_text(json.dumps(doc, indent=2, sort_keys=True) + "\n")


# --------------------------------------------------------------------------
# Shared helpers


def _dataset(cfg: RunConfig, shapes=None, cache_dir=None):
    try:
        return generate_dataset(shapes or cfg.shapes, cfg.angles(), cfg.template(), cache_dir, cfg.max_levels,
                                cfg.tag)
    except DatasetError as exc:
        raise CLIError(str(exc), EXIT_SOLVER) from exc
    except (MeshError, ValueError) as exc:
        raise CLIError(f"dataset generation failed: {exc}", EXIT_CONFIG) from exc


def _require_manifest(cfg: RunConfig) -> dict:
    path = cfg.output_dir / MANIFEST
    if not path.exists():
        raise CLIError(f"no dataset manifest at {path}; run 'scatternet gen' first", EXIT_MISMATCH)
    man = json.loads(path.read_text())
    if man.get("dataset_hash") != cfg.dataset_hash:
        raise CLIError(f"manifest {path} was generated with dataset_hash={man.get('dataset_hash')}, "
                       f"this config gives {cfg.dataset_hash}", EXIT_MISMATCH)
    return man


def _train_run(cfg: RunConfig, samples, run_dir: Path, model_cfg: UPINetConfig, train_cfg: TrainConfig,
               extra: dict | None = None):
    run_dir.mkdir(parents=True, exist_ok=True)
    tr, te = split_by_angle(samples, train_cfg.test_fraction, train_cfg.seed)
    try:
        res = train([samples[i] for i in tr], train_cfg, model_cfg)
    except DivergenceError as exc:
        raise CLIError(str(exc), EXIT_DIVERGENCE) from exc
    meta = {"config_hash": cfg.hash, "train": train_cfg.to_dict(), **(extra or {})}
    save_model(run_dir / "model.snck", res.model, meta)
    res.write_history(run_dir / "history.csv", cfg.tag)
    _write_json(run_dir / "train_report.json", {
        "config_hash": cfg.hash, "initial_loss": res.initial_loss, "final_loss": res.final_loss,
        "steps": train_cfg.steps, "wall_seconds": res.wall_seconds,
        "train_samples": [samples[i].sample_id for i in tr], "test_samples": [samples[i].sample_id for i in te],
    })
    return res, te


def _write_eval(cfg: RunConfig, report, run_dir: Path) -> None:
    report.write_json(run_dir / "metrics.json", cfg.hash)
    report.write_cdf(run_dir / "cdf.csv", cfg.tag)
    report.write_boxplot(run_dir / "boxplot.csv", cfg.tag)
    report.write_overlay(run_dir / "rcs_overlay.csv", cfg.tag)


def _load_checkpoint(cfg: RunConfig, path: Path, expected: UPINetConfig | None = None):
    if not path.exists():
        raise CLIError(f"checkpoint not found: {path}", EXIT_MISMATCH)
    try:
        model, meta = load_model(path, expected)
    except (CompatibilityError, ValueError) as exc:
        raise CLIError(f"incompatible checkpoint: {exc}", EXIT_MISMATCH) from exc
    if meta.get("config_hash") != cfg.hash:
        raise CLIError(f"checkpoint {path} has config_hash={meta.get('config_hash')}, config is {cfg.hash}",
                       EXIT_MISMATCH)
    return model, meta


# --------------------------------------------------------------------------
# Commands


def cmd_gen(args) -> int:
    cfg = RunConfig.load(args.config)
    out = cfg.output_dir
    for sub in ("meshes", "labels", "hierarchy", "graphs"):
        (out / sub).mkdir(parents=True, exist_ok=True)
    samples = _dataset(cfg, cache_dir=out / "labels")
    files: list[Path] = []
    seen = set()
    for s in samples:
        if s.shape in seen:
            continue
        seen.add(s.shape)
        mp = out / "meshes" / f"{s.shape}.off"
        write_off(s.mesh, mp, cfg.tag)
        hp = out / "hierarchy" / f"{s.shape}.json"
        s.context.hierarchy.save(hp, {"config_hash": cfg.hash})
        files += [mp, hp]
        for l, g in enumerate(s.context.graphs):
            ep, np_ = out / "graphs" / f"{s.shape}_L{l}_edges.csv", out / "graphs" / f"{s.shape}_L{l}_nodes.csv"
            g.write_csv(ep, np_, cfg.tag)
            files += [ep, np_]
    files += [out / "labels" / f"{s.sample_id}.csv" for s in samples]
    manifest = {
        "config_hash": cfg.hash,
        "dataset_hash": cfg.dataset_hash,
        "config": cfg.raw,
        "meshes": sorted({f"meshes/{s.shape}.off" for s in samples}),
        "samples": [{"id": s.sample_id, "shape": s.shape, "theta": s.wave.theta_inc, "phi": s.wave.phi_inc,
                     "faces": s.n_faces, "label": f"labels/{s.sample_id}.csv", "residual": s.label.residual}
                    for s in samples],
        "files": {str(p.relative_to(out)): _sha256(p) for p in sorted(files)},
    }
    _write_json(out / MANIFEST, manifest)
    print(f"wrote {len(samples)} samples for {len(seen)} shape(s) to {out}")
    print(f"manifest sha256={_sha256(out / MANIFEST)} {cfg.tag}")
    return EXIT_OK


def cmd_solve(args) -> int:
    try:
        mesh = load_mesh(args.mesh)
    except (OSError, MeshError) as exc:
        raise CLIError(f"cannot read mesh {args.mesh}: {exc}", EXIT_CONFIG) from exc
    try:
        wave = IncidentWave(args.frequency, args.amplitude, args.theta, args.phi)
    except ValueError as exc:
        raise CLIError(str(exc), EXIT_CONFIG) from exc
    settings = {"mesh_sha256": _sha256(Path(args.mesh)), "frequency": args.frequency, "amplitude": args.amplitude,
                "theta": args.theta, "phi": args.phi, "po": args.po, "mie": args.mie, "cut_step": args.cut_step}
    h = hashlib.sha256(json.dumps(settings, sort_keys=True).encode()).hexdigest()[:16]
    tag = f"config_hash={h}"
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    if args.po:
        J = physical_optics_currents(mesh, wave)
        print("physical-optics currents (no solve)")
    else:
        try:
            system = assemble_system(mesh, wave)
            J = solve_currents(system, mesh)
        except (NonConvergenceError, SingularSystemError) as exc:
            raise CLIError(f"solver failure: {exc}", EXIT_SOLVER) from exc
        print(f"residual={J.residual:.3e}")
    cut = AngleCut.phi_cut(wave.phi_inc, 0.0, 180.0, args.cut_step)
    write_currents_csv(J, out / "currents.csv", tag)
    bistatic_rcs(J, mesh, wave, cut).to_csv(out / "rcs.csv", tag)
    if args.mie is not None:
        try:
            mie_reference(args.mie, wave, cut).to_csv(out / "mie.csv", tag)
        except (ValueError, NonConvergenceError) as exc:
            raise CLIError(f"Mie reference failed: {exc}", EXIT_SOLVER) from exc
    print(f"wrote {out} {tag}")
    return EXIT_OK


def cmd_train(args) -> int:
    cfg = RunConfig.load(args.config)
    _require_manifest(cfg)
    samples = _dataset(cfg)
    mc, tc = cfg.model, cfg.train
    name = "train"
    if args.ablation:
        mc, tc = arm_configs(cfg.model, cfg.train)[args.ablation]
        name = f"train_{args.ablation}"
    res, _ = _train_run(cfg, samples, cfg.output_dir / name, mc, tc, {"arm": args.ablation or "full"})
    print(f"loss {res.initial_loss:.6g} -> {res.final_loss:.6g} in {len(res.history)} steps; "
          f"checkpoint {cfg.output_dir / name / 'model.snck'}")
    return EXIT_OK


def cmd_eval(args) -> int:
    cfg = RunConfig.load(args.config)
    _require_manifest(cfg)
    ckpt = Path(args.checkpoint) if args.checkpoint else cfg.output_dir / "train" / "model.snck"
    model, meta = _load_checkpoint(cfg, ckpt)
    if meta.get("arm", "full") == "full" and model.config != cfg.model:
        raise CLIError("checkpoint model config differs from the run config", EXIT_MISMATCH)
    samples = _dataset(cfg)
    tc = TrainConfig.from_dict(meta.get("train", cfg.train.to_dict()))
    _, te = split_by_angle(samples, tc.test_fraction, tc.seed)
    test = [samples[i] for i in te] or samples
    report = evaluate(model, test, cut_step=float(cfg.eval["cut_step"]))
    if cfg.eval["timing"] or args.timing:
        spec = _shape(cfg.eval["timing_shape"], "eval.timing_shape") if cfg.eval["timing_shape"] else cfg.shapes[0]
        wave = cfg.template().with_angles(*cfg.angles()[0])
        mesh = spec.mesh(wave.wavelength)
        report.timing = timing_comparison(model, mesh, wave, int(cfg.eval["timing_repeats"]))
    run_dir = ckpt.parent / "eval"
    run_dir.mkdir(parents=True, exist_ok=True)
    _write_eval(cfg, report, run_dir)
    s = report.summary()
    print(f"RMSE={s['rmse']:.6g} R2={s['r2']:.6g} MAE={s['mae']:.6g} MSE={s['mse']:.6g}")
    if report.timing:
        t = report.timing
        print(f"inference {t['inference_seconds']:.4f}s vs oracle {t['oracle_seconds']:.3f}s "
              f"({t['speedup']:.1f}x, {t['n_faces']} faces)")
    print(f"wrote {run_dir}")
    return EXIT_OK


def cmd_ablate(args) -> int:
    cfg = RunConfig.load(args.config)
    _require_manifest(cfg)
    samples = _dataset(cfg)
    root = cfg.output_dir / "ablation"
    rows = []
    for arm, (mc, tc) in arm_configs(cfg.model, cfg.train).items():
        res, te = _train_run(cfg, samples, root / arm, mc, tc, {"arm": arm})
        test = [samples[i] for i in te] or samples
        rep = evaluate(res.model, test, cut_step=float(cfg.eval["cut_step"]))
        _write_eval(cfg, rep, root / arm)
        rows.append([arm, rep.rmse, rep.r2, rep.mae, rep.mse, float(np.mean(rep.residuals)),
                     float(np.median(rep.residuals)), res.final_loss])
        print(f"{arm:13s} RMSE={rep.rmse:.4g} R2={rep.r2:.4g} residual(mean)={np.mean(rep.residuals):.4g}")
    with open(root / "summary.csv", "w", newline="") as fh:
        fh.write(f"# {cfg.tag}\n")
        w = csv.writer(fh)
        w.writerow(["arm", "rmse", "r2", "mae", "mse", "residual_mean", "residual_median", "final_train_loss"])
        for r in rows:
            w.writerow([r[0]] + [repr(float(v)) for v in r[1:]])
    return EXIT_OK


def cmd_finetune(args) -> int:
    cfg = RunConfig.load(args.config)
    _require_manifest(cfg)
    ckpt = Path(args.checkpoint) if args.checkpoint else cfg.output_dir / "train" / "model.snck"
    model, _ = _load_checkpoint(cfg, ckpt, cfg.model)
    samples = _dataset(cfg, cfg.finetune_shapes or None)
    try:
        report, res = finetune_protocol(model, samples, args.fraction, cfg.train)
    except DivergenceError as exc:
        raise CLIError(str(exc), EXIT_DIVERGENCE) from exc
    except ValueError as exc:
        raise CLIError(str(exc), EXIT_CONFIG) from exc
    run_dir = cfg.output_dir / f"finetune_{args.fraction:g}"
    run_dir.mkdir(parents=True, exist_ok=True)
    _write_eval(cfg, report, run_dir)
    res.write_history(run_dir / "history.csv", cfg.tag)
    print(f"fine-tuned on {len(res.train_ids)} samples; median AE={np.median(report.abs_error):.4g}; wrote {run_dir}")
    return EXIT_OK


# --------------------------------------------------------------------------
# Entry point


def build_parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(prog="scatternet", description=__doc__.split("\n")[0])
    p.add_argument("-v", "--verbose", action="store_true")
    sub = p.add_subparsers(dest="command", required=True)

    g = sub.add_parser("gen", help="mesh shapes, solve labels, write hierarchy/graphs and a manifest")
    g.add_argument("config")
    g.set_defaults(func=cmd_gen)

    s = sub.add_parser("solve", help="oracle (or PO) currents and a bistatic RCS cut for one mesh")
    s.add_argument("mesh", help="OFF or OBJ triangle mesh")
    s.add_argument("--frequency", type=float, default=1e9)
    s.add_argument("--amplitude", type=float, default=1.0)
    s.add_argument("--theta", type=float, default=0.0, help="incidence theta, degrees")
    s.add_argument("--phi", type=float, default=0.0, help="incidence phi, degrees")
    s.add_argument("--cut-step", type=float, default=1.0, help="RCS cut step, degrees")
    s.add_argument("--po", action="store_true", help="physical-optics currents instead of the solver")
    s.add_argument("--mie", type=float, metavar="RADIUS", help="also write the Mie reference for this radius")
    s.add_argument("--out", default="solve_out")
    s.set_defaults(func=cmd_solve)

    t = sub.add_parser("train", help="train on the generated dataset")
    t.add_argument("config")
    t.add_argument("--ablation", choices=ABLATIONS)
    t.set_defaults(func=cmd_train)

    e = sub.add_parser("eval", help="metrics, CDF, boxplot and RCS-overlay CSVs for a checkpoint")
    e.add_argument("config")
    e.add_argument("--checkpoint")
    e.add_argument("--timing", action="store_true", help="add the inference-vs-oracle timing")
    e.set_defaults(func=cmd_eval)

    a = sub.add_parser("ablate", help="train and evaluate the full model and the three ablations")
    a.add_argument("config")
    a.set_defaults(func=cmd_ablate)

    f = sub.add_parser("finetune", help="fine-tune a checkpoint on a fraction of a dataset")
    f.add_argument("config")
    f.add_argument("--fraction", type=float, required=True)
    f.add_argument("--checkpoint")
    f.set_defaults(func=cmd_finetune)
    return p


def main(argv=None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    logging.basicConfig(level=logging.DEBUG if args.verbose else logging.WARNING, format="%(levelname)s %(message)s")
    try:
        return args.func(args)
    except CLIError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return exc.code


if __name__ == "__main__":
    sys.exit(main())
