"""Datasets, physics-constrained training, metrics and experiment protocols.

Labels come from the collocation solver, and the physics loss reuses the very
same impedance matrix, so the loss has an exact minimum at the label.
"""
from __future__ import annotations

import copy
import csv
import json
import logging
import math
import time
from dataclasses import asdict, dataclass, field, fields, replace
from pathlib import Path
from typing import Mapping, Sequence

import numpy as np

from .emoracle import (
    AngleCut,
    ImpedanceSystem,
    IncidentWave,
    NonConvergenceError,
    SingularSystemError,
    SurfaceCurrentField,
    assemble_system,
    bistatic_rcs,
    excitation_vector,
    solve_currents,
    solve_many,
    write_currents_csv,
)
from .geometry import TriangleMesh, generate_shape
from .nn import Adam, ParameterStore, load_checkpoint, no_grad, save_checkpoint
from .nn import tensor as T
from .nn.tensor import Tensor
from .upinet import MeshContext, UPINet, UPINetConfig, prepare_mesh

log = logging.getLogger(__name__)

MAX_ORACLE_FACES = 4000  # dense complex Z of 3K x 3K: ~2.3 GB at this size
LOSS_MODES = ("physics", "mse")
ABLATIONS = ("physics-loss", "edge", "skip")
DIVERGENCE_LIMIT = 1e12


class DatasetError(RuntimeError):
    """Oracle failure while labelling one sample."""

    def __init__(self, sample_id: str, cause: Exception):
        super().__init__(f"sample {sample_id}: {cause}")
        self.sample_id = sample_id
        self.cause = cause


class DivergenceError(RuntimeError):
    def __init__(self, step: int, loss: float, detail: str = ""):
        super().__init__(f"training diverged at step {step}: loss={loss:.6g} {detail}".rstrip())
        self.step = step
        self.loss = loss


class CompatibilityError(ValueError):
    """Checkpoint and configuration disagree."""


# --------------------------------------------------------------------------
# Dataset


@dataclass(frozen=True)
class ShapeSpec:
    name: str
    kind: str
    params: Mapping
    edge_fraction: float = 0.1  # target edge length as a fraction of the wavelength

    def mesh(self, wavelength: float) -> TriangleMesh:
        return generate_shape(self.kind, dict(self.params), self.edge_fraction * wavelength)


@dataclass(eq=False)
class ScatteringSample:
    sample_id: str
    shape: str
    mesh: TriangleMesh
    wave: IncidentWave
    label: SurfaceCurrentField
    context: MeshContext
    Z: np.ndarray  # shared by every sample of one shape
    V: np.ndarray

    @property
    def n_faces(self) -> int:
        return self.mesh.n_faces

    @property
    def system(self) -> ImpedanceSystem:
        return ImpedanceSystem(self.Z, self.V, self.mesh.normals)


def sample_id(shape: str, wave: IncidentWave) -> str:
    return f"{shape}_t{wave.theta_inc:07.3f}_p{wave.phi_inc:07.3f}"


def angle_grid(theta_start: float = 0.0, theta_stop: float = 180.0, theta_step: float = 10.0,
               phis: Sequence[float] = (0.0,)) -> list[tuple[float, float]]:
    n = int(round((theta_stop - theta_start) / theta_step)) + 1
    thetas = np.linspace(theta_start, theta_stop, n)
    return [(float(t), float(p)) for p in phis for t in thetas]


def generate_dataset(shapes: Sequence[ShapeSpec], angles: Sequence[tuple[float, float]],
                     template: IncidentWave = IncidentWave(), cache_dir=None, levels: int = 3,
                     header_comment: str | None = None) -> list[ScatteringSample]:
    """One oracle-labelled sample per (shape, incidence angle), in input order.

    With ``cache_dir`` every label is also written to ``<cache_dir>/<id>.csv``;
    identical inputs give byte-identical files.
    """
    lam = template.wavelength
    out: list[ScatteringSample] = []
    for spec in shapes:
        mesh = spec.mesh(lam)
        if mesh.n_faces > MAX_ORACLE_FACES:
            raise ValueError(f"shape {spec.name}: {mesh.n_faces} faces exceed the oracle limit {MAX_ORACLE_FACES}")
        waves = [template.with_angles(t, p) for t, p in angles]
        try:
            Z, labels = solve_many(mesh, waves)
        except (NonConvergenceError, SingularSystemError) as exc:
            raise DatasetError(f"{spec.name}[*]", exc) from exc
        ctx = prepare_mesh(mesh, lam, levels)
        for wave, label in zip(waves, labels):
            sid = sample_id(spec.name, wave)
            if label.residual is None or label.residual > 1e-8:
                raise DatasetError(sid, NonConvergenceError(label.residual or float("nan")))
            out.append(ScatteringSample(sid, spec.name, mesh, wave, label, ctx, Z, excitation_vector(mesh, wave)))
    if cache_dir is not None:
        write_label_cache(out, cache_dir, header_comment)
    return out


def write_label_cache(samples: Sequence[ScatteringSample], cache_dir, header_comment: str | None = None) -> list[Path]:
    d = Path(cache_dir)
    d.mkdir(parents=True, exist_ok=True)
    paths = []
    for s in samples:
        p = d / f"{s.sample_id}.csv"
        write_currents_csv(s.label, p, header_comment)
        paths.append(p)
    return paths


def split_by_angle(samples: Sequence[ScatteringSample], test_fraction: float = 0.2,
                   seed: int = 0) -> tuple[list[int], list[int]]:
    """Seeded per-shape split of sample indices; every shape with >= 2 samples gets a test sample."""
    if not 0.0 <= test_fraction < 1.0:
        raise ValueError("test_fraction must lie in [0, 1)")
    rng = np.random.default_rng(seed)
    train, test = [], []
    for shape in dict.fromkeys(s.shape for s in samples):
        idx = [i for i, s in enumerate(samples) if s.shape == shape]
        perm = [idx[j] for j in rng.permutation(len(idx))]
        n_test = 0 if len(idx) < 2 or test_fraction == 0 else max(1, int(round(test_fraction * len(idx))))
        test += sorted(perm[:n_test])
        train += sorted(perm[n_test:])
    return sorted(train), sorted(test)


# --------------------------------------------------------------------------
# Losses


def _check_aligned(pred: Tensor, sample: ScatteringSample) -> None:
    if pred.shape != (sample.n_faces, 6):
        raise ValueError(f"prediction shape {pred.shape} does not match {sample.sample_id} ({sample.n_faces} faces)")


def physics_loss(predictions: Sequence, samples: Sequence[ScatteringSample], normalize: bool = True) -> Tensor:
    """``(1/B) sum_u ||Z J_u - V_u||^2``, each term divided by the face count when ``normalize``."""
    if len(predictions) != len(samples) or not samples:
        raise ValueError("need one prediction per sample")
    total = None
    for pred, s in zip(predictions, samples):
        pred = T.as_tensor(pred)
        _check_aligned(pred, s)
        term = T.complex_quadratic(pred, s.Z, s.V)
        if normalize:
            term = term * (1.0 / s.n_faces)
        total = term if total is None else total + term
    return total * (1.0 / len(samples))


def mse_loss(predictions: Sequence, labels: Sequence) -> Tensor:
    """Mean squared error over all six real channels of all faces, averaged over the batch."""
    if len(predictions) != len(labels) or not labels:
        raise ValueError("need one prediction per label")
    total = None
    for pred, lab in zip(predictions, labels):
        pred = T.as_tensor(pred)
        lab = lab.to_channels() if isinstance(lab, SurfaceCurrentField) else np.asarray(lab, dtype=float)
        if pred.shape != lab.shape:
            raise ValueError(f"prediction shape {pred.shape} does not match label shape {lab.shape}")
        term = T.mean(T.square(pred - lab))
        total = term if total is None else total + term
    return total * (1.0 / len(labels))


# --------------------------------------------------------------------------
# Training


@dataclass(frozen=True)
class TrainConfig:
    batch_size: int = 64
    steps: int = 300
    learning_rate: float = 5e-4
    seed: int = 0
    loss_mode: str = "physics"
    normalize_loss: bool = True
    test_fraction: float = 0.2
    finetune_fraction: float = 1.0
    finetune_steps: int = 50

    def __post_init__(self):
        if self.batch_size < 1:
            raise ValueError("batch_size must be >= 1")
        if not self.learning_rate >= 0:
            raise ValueError("learning_rate must be non-negative")
        if self.steps < 0 or self.finetune_steps < 0:
            raise ValueError("step counts must be non-negative")
        if self.loss_mode not in LOSS_MODES:
            raise ValueError(f"loss_mode must be one of {LOSS_MODES}")
        if not 0.0 < self.finetune_fraction <= 1.0:
            raise ValueError("finetune_fraction must lie in (0, 1]")

    def to_dict(self) -> dict:
        return asdict(self)

    @classmethod
    def from_dict(cls, d: Mapping) -> TrainConfig:
        unknown = set(d) - {f.name for f in fields(cls)}
        if unknown:
            raise ValueError(f"unknown train config keys: {sorted(unknown)}")
        return cls(**d)


@dataclass
class TrainResult:
    model: UPINet
    history: list[tuple[int, int, float]]  # (step, epoch, batch loss)
    initial_loss: float
    final_loss: float
    train_ids: list[str]
    wall_seconds: float = 0.0

    def epoch_history(self) -> list[tuple[int, float]]:
        """Mean batch loss per epoch."""
        out: dict[int, list[float]] = {}
        for _, ep, loss in self.history:
            out.setdefault(ep, []).append(loss)
        return [(ep, float(np.mean(v))) for ep, v in sorted(out.items())]

    def write_history(self, path, header_comment: str | None = None) -> None:
        with open(path, "w", newline="") as fh:
            if header_comment:
                fh.write(f"# {header_comment}\n")
            w = csv.writer(fh)
            w.writerow(["epoch", "loss"])
            for ep, loss in self.epoch_history():
                w.writerow([ep, repr(loss)])


def _forward(model: UPINet, sample: ScatteringSample) -> Tensor:
    return model.channels(sample.context, sample.wave)


def _batch_loss(model: UPINet, batch: Sequence[ScatteringSample], cfg: TrainConfig) -> Tensor:
    preds = [_forward(model, s) for s in batch]
    if cfg.loss_mode == "physics":
        return physics_loss(preds, batch, cfg.normalize_loss)
    return mse_loss(preds, [s.label for s in batch])


def dataset_loss(model: UPINet, samples: Sequence[ScatteringSample], cfg: TrainConfig,
                 training_mode: bool = True) -> float:
    """Training objective over ``samples`` without touching parameters or running statistics."""
    saved = copy.deepcopy(model.store.buffers)
    was = model.training
    model.train(training_mode)
    try:
        with no_grad():
            return float(_batch_loss(model, samples, cfg).data)
    finally:
        model.train(was)
        for k, v in saved.items():
            model.store.buffers[k][...] = v


def train(samples: Sequence[ScatteringSample], config: TrainConfig,
          model_config: UPINetConfig = UPINetConfig(), model: UPINet | None = None) -> TrainResult:
    """Adam on the chosen loss. Batches are drawn from seeded per-epoch permutations."""
    if not samples:
        raise ValueError("training set is empty")
    t0 = time.perf_counter()
    model = model or UPINet(model_config)
    model.train()
    opt = Adam(model.store, lr=config.learning_rate)
    rng = np.random.default_rng(config.seed)
    B = min(config.batch_size, len(samples))
    initial = dataset_loss(model, samples, config)
    history: list[tuple[int, int, float]] = []
    order: list[int] = []
    epoch = -1
    for step in range(config.steps):
        if len(order) < B:
            order = order + rng.permutation(len(samples)).tolist()
            epoch += 1
        batch = [samples[i] for i in order[:B]]
        order = order[B:]
        model.store.zero_grad()
        loss = _batch_loss(model, batch, config)
        value = float(loss.data)
        if not math.isfinite(value) or value > DIVERGENCE_LIMIT:
            raise DivergenceError(step, value, f"(batch {[s.sample_id for s in batch]}, lr {config.learning_rate})")
        loss.backward()
        opt.step()
        history.append((step, epoch, value))
        if step % 50 == 0:
            log.debug("step %d epoch %d loss %.6g", step, epoch, value)
    final = dataset_loss(model, samples, config)
    if not math.isfinite(final) or final > DIVERGENCE_LIMIT:
        raise DivergenceError(config.steps, final, "(final evaluation)")
    model.eval()
    return TrainResult(model, history, initial, final, [s.sample_id for s in samples], time.perf_counter() - t0)


# --------------------------------------------------------------------------
# Checkpoints


def save_model(path, model: UPINet, extra: Mapping | None = None) -> None:
    cfg = {"model": model.config.to_dict()}
    if extra:
        cfg.update(extra)
    save_checkpoint(path, model.store.state(), cfg)


def load_model(path, expected: UPINetConfig | None = None) -> tuple[UPINet, dict]:
    tensors, cfg = load_checkpoint(path)
    try:
        mcfg = UPINetConfig.from_dict(cfg["model"])
    except (KeyError, TypeError, ValueError) as exc:
        raise CompatibilityError(f"{path}: unusable model config: {exc}") from exc
    if expected is not None and mcfg != expected:
        diff = sorted(k for k, v in expected.to_dict().items() if mcfg.to_dict().get(k) != v)
        raise CompatibilityError(f"{path}: checkpoint config differs in {diff}")
    model = UPINet(mcfg)
    try:
        model.store.load_state(tensors)
    except (KeyError, ValueError) as exc:
        raise CompatibilityError(f"{path}: {exc}") from exc
    return model.eval(), cfg


# --------------------------------------------------------------------------
# Evaluation


@dataclass
class MetricsReport:
    rmse: float
    r2: float
    mae: float
    mse: float
    abs_error: np.ndarray  # per face, samples concatenated
    rcs_error_db: np.ndarray  # |pred - label| over every cut angle of every sample
    residuals: np.ndarray  # per-sample relative EFIE residual of the prediction
    sample_ids: list[str]
    rcs_overlays: dict = field(default_factory=dict)  # sample id -> (angles, label dBsm, pred dBsm)
    timing: dict = field(default_factory=dict)

    def cdf(self) -> tuple[np.ndarray, np.ndarray]:
        x = np.sort(self.abs_error)
        return x, np.arange(1, len(x) + 1) / len(x)

    def summary(self) -> dict:
        out = {"rmse": self.rmse, "r2": self.r2, "mae": self.mae, "mse": self.mse,
               "n_samples": len(self.sample_ids), "n_faces": int(len(self.abs_error))}
        for name, arr in (("rcs_error_db", self.rcs_error_db), ("residual", self.residuals),
                          ("abs_error", self.abs_error)):
            if len(arr):
                out[name] = {"mean": float(np.mean(arr)), "median": float(np.median(arr)),
                             "max": float(np.max(arr)), "q25": float(np.quantile(arr, 0.25)),
                             "q75": float(np.quantile(arr, 0.75))}
        out.update(self.timing)
        return out

    def write_json(self, path, config_hash: str | None = None) -> None:
        doc = self.summary()
        if config_hash:
            doc["config_hash"] = config_hash
        Path(path).write_text(json.dumps(doc, indent=2, sort_keys=True) + "\n")

    def write_cdf(self, path, header_comment: str | None = None) -> None:
        x, f = self.cdf()
        with open(path, "w", newline="") as fh:
            if header_comment:
                fh.write(f"# {header_comment}\n")
            w = csv.writer(fh)
            w.writerow(["error_value", "cumulative_fraction"])
            for a, b in zip(x, f):
                w.writerow([repr(float(a)), repr(float(b))])

    def write_boxplot(self, path, header_comment: str | None = None) -> None:
        """Per-sample absolute-error quartiles."""
        with open(path, "w", newline="") as fh:
            if header_comment:
                fh.write(f"# {header_comment}\n")
            w = csv.writer(fh)
            w.writerow(["sample", "min", "q25", "median", "q75", "max"])
            for sid, ae in self._per_sample_errors().items():
                q = np.quantile(ae, [0.0, 0.25, 0.5, 0.75, 1.0])
                w.writerow([sid] + [repr(float(v)) for v in q])

    def write_overlay(self, path, header_comment: str | None = None) -> None:
        with open(path, "w", newline="") as fh:
            if header_comment:
                fh.write(f"# {header_comment}\n")
            w = csv.writer(fh)
            w.writerow(["sample", "angle", "label_dbsm", "pred_dbsm"])
            for sid, (ang, lab, pre) in self.rcs_overlays.items():
                for a, l, p in zip(ang, lab, pre):
                    w.writerow([sid, repr(float(a)), repr(float(l)), repr(float(p))])

    _offsets: list[int] = field(default_factory=list, repr=False)

    def _per_sample_errors(self) -> dict:
        bounds = np.concatenate([[0], np.cumsum(self._offsets)]) if self._offsets else [0, len(self.abs_error)]
        return {sid: self.abs_error[bounds[i] : bounds[i + 1]] for i, sid in enumerate(self.sample_ids)}


def regression_metrics(pred: np.ndarray, label: np.ndarray) -> tuple[float, float, float, float]:
    """(RMSE, R^2, MAE, MSE) of two real arrays."""
    pred, label = np.asarray(pred, float).ravel(), np.asarray(label, float).ravel()
    err = pred - label
    mse = float(np.mean(err**2))
    ss_tot = float(np.sum((label - label.mean()) ** 2))
    ss_res = float(np.sum(err**2))
    r2 = 1.0 - ss_res / ss_tot if ss_tot > 0 else (1.0 if ss_res == 0 else 0.0)
    return math.sqrt(mse), r2, float(np.mean(np.abs(err))), mse


def evaluate(model: UPINet, samples: Sequence[ScatteringSample], cut: AngleCut | None = None,
             predictions: Sequence[SurfaceCurrentField] | None = None, cut_step: float = 5.0) -> MetricsReport:
    """Metrics on per-face |J|, RCS error along ``cut`` (default: each sample's incidence
    plane in ``cut_step`` degree steps) and the EFIE residual of each prediction."""
    if not samples:
        raise ValueError("nothing to evaluate")
    model.eval()
    preds = list(predictions) if predictions is not None else [model.predict(s.context, s.wave) for s in samples]
    mag_p = np.concatenate([p.magnitude() for p in preds])
    mag_l = np.concatenate([s.label.magnitude() for s in samples])
    rmse, r2, mae, mse = regression_metrics(mag_p, mag_l)
    rcs_err, overlays, residuals = [], {}, []
    for s, p in zip(samples, preds):
        c = cut or AngleCut.phi_cut(s.wave.phi_inc, 0.0, 180.0, cut_step)
        lab = bistatic_rcs(s.label, s.mesh, s.wave, c)
        pre = bistatic_rcs(p, s.mesh, s.wave, c)
        rcs_err.append(np.abs(pre.sigma_dbsm - lab.sigma_dbsm))
        overlays[s.sample_id] = (lab.angles[:, 0], lab.sigma_dbsm, pre.sigma_dbsm)
        residuals.append(s.system.residual(p.currents))
    rep = MetricsReport(rmse, r2, mae, mse, np.abs(mag_p - mag_l), np.concatenate(rcs_err), np.array(residuals),
                        [s.sample_id for s in samples], overlays)
    rep._offsets = [s.n_faces for s in samples]
    return rep


def timing_comparison(model: UPINet, mesh: TriangleMesh, wave: IncidentWave, repeats: int = 7,
                      context: MeshContext | None = None) -> dict:
    """Median model inference time vs one fresh oracle assemble+solve on ``mesh``.

    Geometry preprocessing (hierarchy, graphs) is shared by every incidence
    angle and is reported separately, as the oracle's angle-independent
    matrix is not amortised in the comparison.
    """
    model.eval()
    t = time.perf_counter()
    ctx = context or prepare_mesh(mesh, wave.wavelength, model.config.levels)
    prep = time.perf_counter() - t
    model.predict(ctx, wave)  # warm-up
    runs = []
    for _ in range(repeats):
        t = time.perf_counter()
        model.predict(ctx, wave)
        runs.append(time.perf_counter() - t)
    t = time.perf_counter()
    solve_currents(assemble_system(mesh, wave), mesh)
    oracle = time.perf_counter() - t
    infer = float(np.median(runs))
    return {"inference_seconds": infer, "oracle_seconds": oracle, "speedup": oracle / infer,
            "preprocess_seconds": prep, "n_faces": mesh.n_faces}


# --------------------------------------------------------------------------
# Protocols


def clone_model(model: UPINet, config: UPINetConfig | None = None) -> UPINet:
    new = UPINet(config or model.config, ParameterStore((config or model.config).seed))
    new.store.load_state(model.store.state())
    return new


def finetune_protocol(model: UPINet, samples: Sequence[ScatteringSample], fraction: float,
                      config: TrainConfig = TrainConfig()) -> tuple[MetricsReport, TrainResult]:
    """Fine-tune a copy of ``model`` on a seeded ``fraction`` of ``samples``; evaluate on the rest.

    ``fraction == 1`` falls back to the ordinary train/test split.
    """
    if not 0.0 < fraction <= 1.0:
        raise ValueError("fraction must lie in (0, 1]")
    if fraction == 1.0:
        tr, te = split_by_angle(samples, config.test_fraction, config.seed)
    else:
        rng = np.random.default_rng(config.seed)
        n = int(math.ceil(fraction * len(samples)))
        chosen = np.sort(rng.permutation(len(samples))[:n])
        tr = chosen.tolist()
        te = sorted(set(range(len(samples))) - set(tr))
    if len(tr) < 2:
        raise ValueError(f"fine-tune subset has {len(tr)} sample(s); need at least 2")
    if not te:
        raise ValueError("no samples left for evaluation")
    tuned = clone_model(model)
    res = train([samples[i] for i in tr], replace(config, steps=config.finetune_steps), model=tuned)
    return evaluate(res.model, [samples[i] for i in te]), res


def arm_configs(model_config: UPINetConfig, train_config: TrainConfig) -> dict[str, tuple[UPINetConfig, TrainConfig]]:
    """The full model and one single-flag ablation per arm."""
    return {
        "full": (model_config, train_config),
        "physics-loss": (model_config, replace(train_config, loss_mode="mse")),
        "edge": (replace(model_config, edge_constraint=False), train_config),
        "skip": (replace(model_config, skip_connections=False), train_config),
    }


def flat_config(model_config: UPINetConfig, train_config: TrainConfig) -> dict:
    d = {f"model.{k}": v for k, v in model_config.to_dict().items()}
    d.update({f"train.{k}": v for k, v in train_config.to_dict().items()})
    return d


@dataclass
class ArmResult:
    name: str
    model_config: UPINetConfig
    train_config: TrainConfig
    result: TrainResult
    report: MetricsReport


def ablation_suite(samples: Sequence[ScatteringSample], model_config: UPINetConfig = UPINetConfig(),
                   train_config: TrainConfig = TrainConfig(), arms: Sequence[str] | None = None) -> dict[str, ArmResult]:
    """Train every arm on the same seeded split and evaluate on the held-out samples."""
    tr, te = split_by_angle(samples, train_config.test_fraction, train_config.seed)
    train_set = [samples[i] for i in tr]
    test_set = [samples[i] for i in te] or train_set
    out = {}
    for name, (mc, tc) in arm_configs(model_config, train_config).items():
        if arms is not None and name not in arms:
            continue
        res = train(train_set, tc, mc)
        out[name] = ArmResult(name, mc, tc, res, evaluate(res.model, test_set))
    return out


__all__ = [
    "ABLATIONS", "ArmResult", "CompatibilityError", "DatasetError", "DivergenceError", "MetricsReport",
    "ScatteringSample", "ShapeSpec", "TrainConfig", "TrainResult", "ablation_suite", "angle_grid", "arm_configs",
    "clone_model", "dataset_loss", "evaluate", "finetune_protocol", "flat_config", "generate_dataset",
    "load_model", "mse_loss", "physics_loss", "regression_metrics", "sample_id", "save_model",
    "split_by_angle", "timing_comparison", "train", "write_label_cache",
]
