# training_harness.py
"""
Dataset generation and storage, min-max normalization, the composite loss, the
Adam loop with its step schedule, evaluation and checkpoints.

On-disk formats
- Dataset directory: manifest.json (sorted keys, no timestamps) plus one raw
  little-endian float64 blob per field per sample, C order, shapes and sha256
  checksums declared in the manifest.
- Checkpoint directory: checkpoint.json plus params.f64 (parameters concatenated
  in the declared order) and, once training has started, adam_m.f64 / adam_v.f64.
- Loss history: CSV with epoch, lr, train_L_dat, train_L_div, test_L_dat, test_L_div.
"""
import csv
import hashlib
import json
import logging
import threading
from concurrent.futures import ThreadPoolExecutor
from dataclasses import asdict, dataclass, field
from pathlib import Path
from typing import Any, Dict, List, Optional, Sequence, Tuple

import numpy as np

from divfree.common import (
    ConfigError,
    DataIOError,
    DatasetConfig,
    FnoConfig,
    GridConfig,
    LossConfig,
    MicrostructureConfig,
    NonFiniteLossError,
    PLANE_ACTIVE,
    PreconditionError,
    SolverConfig,
    SolverDivergenceError,
    TrainConfig,
)
from divfree.equilibrium_solver import LoadCase, equilibrium_residual, solve_equilibrium
from divfree.microstructure import Microstructure, grain_boundaries, distance_to_mask, make_rng, voronoi_tessellate
from divfree.neural_operator import (
    FnoModel,
    ForwardTape,
    backward,
    divergence_output,
    divergence_output_adjoint,
    encode_input,
    fno_forward,
    init_model,
    output_transform,
    param_shapes,
)

logger = logging.getLogger(__name__)

DATASET_FORMAT = "divfree-dataset"
CHECKPOINT_FORMAT = "divfree-checkpoint"
FORMAT_VERSION = 1
HISTORY_COLUMNS = ("epoch", "lr", "train_L_dat", "train_L_div", "test_L_dat", "test_L_div")


# =========================
#   Dataset
# =========================
@dataclass
class Sample:
    index: int
    grain_id: np.ndarray
    E: np.ndarray
    nu: np.ndarray
    F_bar: np.ndarray
    P: np.ndarray
    iterations: int
    residual: float
    recheck_residual: float


@dataclass
class Dataset:
    samples: List[Sample]
    config: DatasetConfig
    grid: GridConfig
    microstructure: MicrostructureConfig
    solver: SolverConfig

    @property
    def n_dat(self) -> int:
        return len(self.samples)

    @property
    def train(self) -> List[Sample]:
        return self.samples[:self.config.n_tra]

    @property
    def test(self) -> List[Sample]:
        return self.samples[self.config.n_tra:]


def _solve_sample(index: int, seq: np.random.SeedSequence, cfg: DatasetConfig, res_grid: GridConfig,
                  grid: GridConfig, micro_cfg: MicrostructureConfig, solver_cfg: SolverConfig) -> Sample:
    rng = make_rng(seq)
    micro = voronoi_tessellate(micro_cfg, res_grid, rng)
    f22 = cfg.f22[int(rng.integers(len(cfg.f22)))]
    load = LoadCase.uniaxial(f22)
    try:
        result = solve_equilibrium(micro, load, res_grid, solver_cfg)
    except SolverDivergenceError as e:
        raise SolverDivergenceError(f"sample {index}: {str(e)}", e.iterations, e.residual) from e

    stride = res_grid.n_dis // grid.n_dis
    coarse = micro.subsample(stride)
    P = np.ascontiguousarray(result.P[::stride, ::stride])
    recheck = equilibrium_residual(P, grid)
    if recheck > 10.0 * solver_cfg.tol_div:
        logger.warning(f"Sample {index}: residual {recheck:.3e} at n_dis={grid.n_dis} "
                       f"exceeds 10 * tol_div after subsampling")
    logger.info(f"Sample {index}: F22={f22}, {result.iterations} iterations, residual {result.residual:.3e}")
    return Sample(index, coarse.grain_id.copy(), coarse.E_field.copy(), coarse.nu_field.copy(),
                  load.F_bar.copy(), P, result.iterations, result.residual, recheck)


def generate_dataset(cfg: DatasetConfig, grid: GridConfig, micro_cfg: MicrostructureConfig,
                     solver_cfg: SolverConfig, threads: int = 1, stream: int = 0) -> Dataset:
    """
    Solve cfg.n_dat independent microstructures at n_res and subsample to grid.n_dis.
    Sample a uses the a-th child of SeedSequence(cfg.seed), or of
    SeedSequence([cfg.seed, stream]) for stream > 0; the result does not
    depend on the number of worker threads.
    """
    if cfg.n_res < grid.n_dis or cfg.n_res % grid.n_dis:
        raise ConfigError(f"n_res={cfg.n_res} must be a multiple of n_dis={grid.n_dis}")
    res_grid = GridConfig(cfg.n_res, grid.ell_U, grid.spatial_dims)
    entropy = cfg.seed if stream == 0 else [cfg.seed, stream]
    children = np.random.SeedSequence(entropy).spawn(cfg.n_dat)
    logger.info(f"Generating {cfg.n_dat} samples at n_res={cfg.n_res}, n_dis={grid.n_dis} "
                f"with {threads} thread(s)")

    def _job(a):
        return _solve_sample(a, children[a], cfg, res_grid, grid, micro_cfg, solver_cfg)

    with ThreadPoolExecutor(max_workers=max(1, threads)) as pool:
        samples = list(pool.map(_job, range(cfg.n_dat)))
    return Dataset(samples, cfg, grid, micro_cfg, solver_cfg)


# =========================
#   Blob storage
# =========================
def _sha256(data: bytes) -> str:
    return hashlib.sha256(data).hexdigest()


def write_blob(path: Path, arr: np.ndarray) -> Dict[str, Any]:
    data = np.ascontiguousarray(arr, dtype="<f8").tobytes(order="C")
    path.write_bytes(data)
    return {"file": path.name, "shape": list(np.shape(arr)), "sha256": _sha256(data)}


def read_blob(directory: Path, entry: Dict[str, Any], verify: bool = True) -> np.ndarray:
    path = directory / entry["file"]
    try:
        data = path.read_bytes()
    except OSError as e:
        raise DataIOError(f"cannot read {path}: {str(e)}") from e
    if verify and _sha256(data) != entry["sha256"]:
        raise DataIOError(f"checksum mismatch for {path}")
    arr = np.frombuffer(data, dtype="<f8")
    shape = tuple(entry["shape"])
    if arr.size != int(np.prod(shape)):
        raise DataIOError(f"{path} holds {arr.size} values, manifest declares shape {shape}")
    return arr.reshape(shape).astype(float)


def ensure_dir(path: Path) -> Path:
    try:
        path.mkdir(parents=True, exist_ok=True)
    except OSError as e:
        raise DataIOError(f"cannot create directory {path}: {str(e)}") from e
    return path


def write_json(path: Path, payload: Dict[str, Any]) -> None:
    try:
        path.write_text(json.dumps(payload, sort_keys=True, indent=2) + "\n", encoding="utf-8")
    except OSError as e:
        raise DataIOError(f"cannot write {path}: {str(e)}") from e


def read_json(path: Path) -> Dict[str, Any]:
    try:
        return json.loads(path.read_text(encoding="utf-8"))
    except OSError as e:
        raise DataIOError(f"cannot read {path}: {str(e)}") from e
    except json.JSONDecodeError as e:
        raise DataIOError(f"malformed JSON in {path}: {str(e)}") from e


_SAMPLE_FIELDS = ("grain_id", "E", "nu", "P")


def save_dataset(ds: Dataset, path) -> Path:
    """Write ds as manifest.json plus raw blobs. Returns the manifest path."""
    root = ensure_dir(Path(path))
    entries = []
    try:
        for s in ds.samples:
            files = {name: write_blob(root / f"sample_{s.index:05d}_{name}.f64", getattr(s, name))
                     for name in _SAMPLE_FIELDS}
            entries.append({
                "index": s.index,
                "F_bar": s.F_bar.tolist(),
                "iterations": s.iterations,
                "residual": s.residual,
                "recheck_residual": s.recheck_residual,
                "fields": files,
            })
    except OSError as e:
        raise DataIOError(f"cannot write dataset blobs to {root}: {str(e)}") from e

    manifest = {
        "format": DATASET_FORMAT,
        "version": FORMAT_VERSION,
        "n_dat": ds.n_dat,
        "n_tra": ds.config.n_tra,
        "n_tes": ds.n_dat - ds.config.n_tra,
        "n_res": ds.config.n_res,
        "n_dis": ds.grid.n_dis,
        "ell_U": ds.grid.ell_U,
        "seed": ds.config.seed,
        "dataset": asdict(ds.config),
        "microstructure": asdict(ds.microstructure),
        "solver": asdict(ds.solver),
        "samples": entries,
    }
    manifest_path = root / "manifest.json"
    write_json(manifest_path, manifest)
    logger.info(f"Wrote dataset with {ds.n_dat} samples to {root}")
    return manifest_path


def load_dataset(path, verify: bool = True) -> Dataset:
    root = Path(path)
    manifest = read_json(root / "manifest.json")
    if manifest.get("format") != DATASET_FORMAT:
        raise DataIOError(f"{root} is not a dataset directory")
    cfg_raw = dict(manifest["dataset"])
    cfg_raw["f22"] = tuple(cfg_raw["f22"])
    cfg = DatasetConfig(**cfg_raw)
    micro_raw = dict(manifest["microstructure"])
    micro_raw["E_range"] = tuple(micro_raw["E_range"])
    micro_raw["nu_range"] = tuple(micro_raw["nu_range"])
    grid = GridConfig(int(manifest["n_dis"]), float(manifest["ell_U"]))

    samples = []
    for entry in manifest["samples"]:
        arrays = {name: read_blob(root, entry["fields"][name], verify) for name in _SAMPLE_FIELDS}
        samples.append(Sample(
            index=int(entry["index"]),
            grain_id=arrays["grain_id"].astype(np.int64),
            E=arrays["E"],
            nu=arrays["nu"],
            F_bar=np.asarray(entry["F_bar"], dtype=float),
            P=arrays["P"],
            iterations=int(entry["iterations"]),
            residual=float(entry["residual"]),
            recheck_residual=float(entry["recheck_residual"]),
        ))
    return Dataset(samples, cfg, grid, MicrostructureConfig(**micro_raw), SolverConfig(**manifest["solver"]))


def verify_dataset(path) -> int:
    """Recompute every blob checksum; returns the number of blobs checked."""
    root = Path(path)
    manifest = read_json(root / "manifest.json")
    count = 0
    for entry in manifest["samples"]:
        for name in _SAMPLE_FIELDS:
            read_blob(root, entry["fields"][name], verify=True)
            count += 1
    return count


# =========================
#   Normalization
# =========================
@dataclass
class NormalizationStats:
    E_min: float
    E_max: float
    P_min: np.ndarray           # [3, 3]
    P_max: np.ndarray           # [3, 3]
    p_mode: str = "component"

    @property
    def P_scale(self) -> np.ndarray:
        return self.P_max - self.P_min

    def normalize_E(self, E: np.ndarray) -> np.ndarray:
        return (np.asarray(E) - self.E_min) / (self.E_max - self.E_min)

    def denormalize_E(self, E_norm: np.ndarray) -> np.ndarray:
        return np.asarray(E_norm) * (self.E_max - self.E_min) + self.E_min

    def normalize_P(self, P: np.ndarray) -> np.ndarray:
        return (np.asarray(P) - self.P_min) / self.P_scale

    def denormalize_P(self, P_norm: np.ndarray) -> np.ndarray:
        return np.asarray(P_norm) * self.P_scale + self.P_min

    def stress_weights(self) -> np.ndarray:
        """w_ij = scale_ij / max_j scale_ij over the active entries of row i."""
        scale = self.P_scale
        w = np.ones((3, 3))
        active = _active_3x3()
        for i in range(3):
            row = scale[i][active[i]]
            if row.size:
                w[i, active[i]] = scale[i, active[i]] / row.max()
        return w

    def to_dict(self) -> Dict[str, Any]:
        return {"E_min": self.E_min, "E_max": self.E_max, "P_min": self.P_min.tolist(),
                "P_max": self.P_max.tolist(), "p_mode": self.p_mode}

    @classmethod
    def from_dict(cls, raw: Dict[str, Any]) -> "NormalizationStats":
        return cls(float(raw["E_min"]), float(raw["E_max"]), np.asarray(raw["P_min"], dtype=float),
                   np.asarray(raw["P_max"], dtype=float), str(raw.get("p_mode", "component")))


def _active_3x3() -> np.ndarray:
    mask = np.zeros(9, dtype=bool)
    mask[list(PLANE_ACTIVE)] = True
    return mask.reshape(3, 3)


def compute_stats(train: Sequence[Sample], p_mode: str = "component") -> NormalizationStats:
    """Min-max statistics from training samples only: global for E, per component for P."""
    if not train:
        raise PreconditionError("normalization needs at least one training sample")
    E = np.stack([s.E for s in train])
    P = np.stack([s.P for s in train])
    e_min, e_max = float(E.min()), float(E.max())
    if not e_max > e_min:
        raise PreconditionError("degenerate channel E: max equals min on the training split")

    active = _active_3x3()
    p_min = np.where(active, P.min(axis=(0, 1, 2)), 0.0)
    p_max = np.where(active, P.max(axis=(0, 1, 2)), 1.0)
    for i, j in zip(*np.nonzero(active)):
        if not p_max[i, j] > p_min[i, j]:
            raise PreconditionError(f"degenerate channel P{i + 1}{j + 1}: max equals min on the training split")
    if p_mode == "shared":
        common = float(np.max((p_max - p_min)[active]))
        p_max = np.where(active, p_min + common, 1.0)
    elif p_mode != "component":
        raise ConfigError(f"unknown p_mode {p_mode!r}")
    return NormalizationStats(e_min, e_max, p_min, p_max, p_mode)


@dataclass
class TensorData:
    x_train: np.ndarray
    y_train: np.ndarray
    x_test: np.ndarray
    y_test: np.ndarray
    grid: GridConfig

    @property
    def n_tra(self) -> int:
        return int(self.x_train.shape[0])

    @property
    def n_tes(self) -> int:
        return int(self.x_test.shape[0])


def _encode(samples: Sequence[Sample], stats: NormalizationStats, grid: GridConfig):
    n = grid.n_dis
    if not samples:
        return np.zeros((0, n, n, 11)), np.zeros((0, n, n, 3, 3))
    x = np.stack([encode_input(stats.normalize_E(s.E), s.nu, s.F_bar) for s in samples])
    y = np.stack([stats.normalize_P(s.P) for s in samples])
    return x, y


def normalize_with(ds: Dataset, stats: NormalizationStats) -> TensorData:
    x_tr, y_tr = _encode(ds.train, stats, ds.grid)
    x_te, y_te = _encode(ds.test, stats, ds.grid)
    return TensorData(x_tr, y_tr, x_te, y_te, ds.grid)


def normalize(ds: Dataset, p_mode: Optional[str] = None) -> Tuple[TensorData, NormalizationStats]:
    stats = compute_stats(ds.train, p_mode or ds.config.p_mode)
    return normalize_with(ds, stats), stats


def denormalize(P_norm: np.ndarray, stats: NormalizationStats) -> np.ndarray:
    return stats.denormalize_P(P_norm)


def prepare_model(cfg: FnoConfig, grid: GridConfig, stats: NormalizationStats, seed: int = 0) -> FnoModel:
    """Fresh model carrying the stress weights of the data normalization."""
    model = init_model(cfg, grid, seed)
    model.stress_weights = stats.stress_weights()
    return model


# =========================
#   Loss
# =========================
@dataclass(frozen=True)
class LossReport:
    L_dat: float
    L_div: float
    L_total: float


def loss(p_out, p_dat, d_out, cfg: LossConfig, ell_U: float = 1.0) -> LossReport:
    """
    L_dat = sqrt(sum |P_out - P_dat|^2 / sum |P_dat|^2)
    L_div = sqrt(eps + sum |ell_U d_out|^2)
    L = L_dat + c_div L_div for pi, L_dat otherwise.
    """
    p_out, p_dat, d_out = np.asarray(p_out, float), np.asarray(p_dat, float), np.asarray(d_out, float)
    denom = float(np.sum(p_dat * p_dat))
    if denom == 0.0:
        raise PreconditionError("L_dat is undefined for an all-zero data field")
    L_dat = float(np.sqrt(np.sum((p_out - p_dat) ** 2) / denom))
    L_div = float(np.sqrt(cfg.epsilon + np.sum((ell_U * d_out) ** 2)))
    total = L_dat + cfg.c_div * L_div if cfg.variant == "pi" else L_dat
    return LossReport(L_dat, L_div, total)


def loss_gradient(p_out, p_dat, d_out, report: LossReport, cfg: LossConfig,
                  ell_U: float = 1.0) -> Tuple[np.ndarray, Optional[np.ndarray]]:
    """Gradients of L_total w.r.t. p_out and d_out (None when d_out does not enter)."""
    denom = float(np.sum(np.asarray(p_dat) ** 2))
    if report.L_dat > 0.0:
        grad_p = (p_out - p_dat) / (report.L_dat * denom)
    else:
        grad_p = np.zeros_like(p_out)
    if cfg.variant != "pi" or cfg.c_div == 0.0:
        return grad_p, None
    return grad_p, cfg.c_div * ell_U * ell_U * d_out / report.L_div


def _check_variant(model: FnoModel, cfg: LossConfig) -> None:
    if model.variant != cfg.variant:
        raise ConfigError(f"model variant {model.variant!r} does not match loss variant {cfg.variant!r}")


def model_loss(model: FnoModel, x: np.ndarray, y: np.ndarray, cfg: LossConfig) -> LossReport:
    _check_variant(model, cfg)
    p_out = output_transform(model, fno_forward(model, x))
    return loss(p_out, y, divergence_output(model, p_out), cfg, model.grid.ell_U)


def loss_and_grad(model: FnoModel, x: np.ndarray, y: np.ndarray,
                  cfg: LossConfig) -> Tuple[LossReport, Dict[str, np.ndarray]]:
    _check_variant(model, cfg)
    tape = ForwardTape()
    p_out = output_transform(model, fno_forward(model, x, tape))
    d_out = divergence_output(model, p_out)
    report = loss(p_out, y, d_out, cfg, model.grid.ell_U)
    grad_p, grad_d = loss_gradient(p_out, y, d_out, report, cfg, model.grid.ell_U)
    if grad_d is not None:
        grad_p = grad_p + divergence_output_adjoint(model, grad_d)
    return report, backward(model, tape, grad_p)


# =========================
#   Optimizer
# =========================
class Adam:
    def __init__(self, lr: float = 1e-3, beta1: float = 0.9, beta2: float = 0.999, epsilon: float = 1e-8):
        self.lr = lr
        self.beta1 = beta1
        self.beta2 = beta2
        self.epsilon = epsilon
        self.m: Dict[str, np.ndarray] = {}
        self.v: Dict[str, np.ndarray] = {}
        self.t = 0

    def step(self, params: Dict[str, np.ndarray], grads: Dict[str, np.ndarray]) -> None:
        self.t += 1
        bc1 = 1.0 - self.beta1 ** self.t
        bc2 = 1.0 - self.beta2 ** self.t
        step_size = self.lr / bc1

        for k in params:
            g = grads[k]
            if k not in self.m:
                self.m[k] = np.zeros_like(params[k])
                self.v[k] = np.zeros_like(params[k])

            self.m[k] *= self.beta1
            self.m[k] += (1.0 - self.beta1) * g
            self.v[k] *= self.beta2
            self.v[k] += (1.0 - self.beta2) * (g * g)

            denom = np.sqrt(self.v[k] * (1.0 / bc2)) + self.epsilon
            params[k] -= step_size * self.m[k] / denom


def lr_at(epoch: int, epochs: int, lr0: float) -> float:
    """Halve every max(1, epochs // 5) epochs."""
    return lr0 * 0.5 ** (epoch // max(1, epochs // 5))


# =========================
#   Training
# =========================
@dataclass
class TrainResult:
    model: FnoModel
    history: List[Dict[str, float]]
    optimizer: Adam
    epoch: int
    interrupted: bool = False


def _batches(n: int, cfg: TrainConfig, epoch: int) -> List[np.ndarray]:
    if cfg.batch_size <= 0 or cfg.batch_size >= n:
        return [np.arange(n)]
    order = make_rng(np.random.SeedSequence([cfg.seed, epoch])).permutation(n)
    return [order[i:i + cfg.batch_size] for i in range(0, n, cfg.batch_size)]


def train(model: FnoModel, data: TensorData, loss_cfg: LossConfig, cfg: TrainConfig,
          optimizer: Optional[Adam] = None, start_epoch: int = 0,
          history: Optional[List[Dict[str, float]]] = None,
          stop_event: Optional[threading.Event] = None) -> TrainResult:
    """
    Adam on the variant's loss for epochs start_epoch .. cfg.epochs - 1.
    Each history row holds the losses after that epoch's update.
    Raises NonFiniteLossError with the epoch index on NaN/inf loss.
    """
    _check_variant(model, loss_cfg)
    if data.n_tra == 0:
        raise PreconditionError("training needs at least one training sample")
    optimizer = optimizer or Adam(cfg.lr0, cfg.beta1, cfg.beta2, cfg.adam_eps)
    history = list(history or [])
    epoch = start_epoch
    interrupted = False

    while epoch < cfg.epochs:
        optimizer.lr = lr_at(epoch, cfg.epochs, cfg.lr0)
        for idx in _batches(data.n_tra, cfg, epoch):
            report, grads = loss_and_grad(model, data.x_train[idx], data.y_train[idx], loss_cfg)
            if not np.isfinite(report.L_total):
                raise NonFiniteLossError(epoch)
            optimizer.step(model.params, grads)

        train_report = model_loss(model, data.x_train, data.y_train, loss_cfg)
        if not np.isfinite(train_report.L_total):
            raise NonFiniteLossError(epoch)
        if data.n_tes:
            test_report = model_loss(model, data.x_test, data.y_test, loss_cfg)
        else:
            test_report = LossReport(float("nan"), float("nan"), float("nan"))
        history.append({
            "epoch": epoch,
            "lr": optimizer.lr,
            "train_L_dat": train_report.L_dat,
            "train_L_div": train_report.L_div,
            "test_L_dat": test_report.L_dat,
            "test_L_div": test_report.L_div,
        })
        if cfg.log_every and (epoch % cfg.log_every == 0 or epoch == cfg.epochs - 1):
            logger.info(f"[{model.variant}] epoch {epoch}: lr={optimizer.lr:.2e} "
                        f"L_dat={train_report.L_dat:.4e} L_div={train_report.L_div:.4e} "
                        f"test L_dat={test_report.L_dat:.4e}")
        epoch += 1
        if stop_event is not None and stop_event.is_set():
            logger.warning(f"Stop requested, leaving training after epoch {epoch - 1}")
            interrupted = True
            break

    return TrainResult(model, history, optimizer, epoch, interrupted)


def write_history(path, history: Sequence[Dict[str, float]]) -> Path:
    path = Path(path)
    try:
        with path.open("w", newline="", encoding="utf-8") as f:
            writer = csv.DictWriter(f, fieldnames=HISTORY_COLUMNS)
            writer.writeheader()
            for row in history:
                writer.writerow({k: repr(row[k]) if isinstance(row[k], float) else row[k]
                                 for k in HISTORY_COLUMNS})
    except OSError as e:
        raise DataIOError(f"cannot write {path}: {str(e)}") from e
    return path


def read_history(path) -> List[Dict[str, float]]:
    try:
        with Path(path).open("r", newline="", encoding="utf-8") as f:
            rows = list(csv.DictReader(f))
    except OSError as e:
        raise DataIOError(f"cannot read {path}: {str(e)}") from e
    return [{k: (int(r[k]) if k == "epoch" else float(r[k])) for k in HISTORY_COLUMNS} for r in rows]


# =========================
#   Evaluation
# =========================
@dataclass
class Evaluation:
    metrics: Dict[str, float]
    error_map: np.ndarray       # |P_out - P_dat| per pixel, [B, n, n]
    div_map: np.ndarray         # |d_out| per pixel, [B, n, n]
    p_out: np.ndarray
    p_dat: np.ndarray


def evaluate(model: FnoModel, x: np.ndarray, y: np.ndarray, loss_cfg: LossConfig) -> Evaluation:
    """Error and divergence maps plus summary statistics, in normalized units."""
    _check_variant(model, loss_cfg)
    p_out = output_transform(model, fno_forward(model, x))
    d_out = divergence_output(model, p_out)
    report = loss(p_out, y, d_out, loss_cfg, model.grid.ell_U)
    error_map = np.sqrt(np.sum((p_out - y) ** 2, axis=(-2, -1)))
    div_map = np.sqrt(np.sum(d_out ** 2, axis=-1))
    norm_p = float(np.linalg.norm(p_out))
    rel_div = model.grid.ell_U * float(np.linalg.norm(d_out)) / norm_p if norm_p else 0.0
    metrics = {
        "L_dat": report.L_dat,
        "L_div": report.L_div,
        "L_total": report.L_total,
        "max_error": float(error_map.max()),
        "median_error": float(np.median(error_map)),
        "rel_l2_error": report.L_dat,
        "rel_div_norm": rel_div,
        "max_div": float(div_map.max()),
    }
    return Evaluation(metrics, error_map, div_map, p_out, y)


def componentwise_peak(P: np.ndarray) -> Tuple[int, int]:
    """(i, j) of the stress component with the largest absolute value."""
    peaks = np.abs(P).reshape(-1, 3, 3).max(axis=0)
    i, j = np.unravel_index(int(np.argmax(peaks)), (3, 3))
    return int(i), int(j)


def error_peak_boundary_distance(error_map: np.ndarray, grain_id: np.ndarray) -> float:
    """Pixel distance from the error maximum to the nearest grain-boundary pixel."""
    dist = distance_to_mask(grain_boundaries(grain_id))
    return float(dist.flat[int(np.argmax(error_map))])


# =========================
#   Checkpoints
# =========================
@dataclass
class Checkpoint:
    model: FnoModel
    stats: Optional[NormalizationStats]
    epoch: int
    optimizer: Adam
    loss: LossConfig
    training: TrainConfig
    meta: Dict[str, Any] = field(default_factory=dict)


def save_checkpoint(path, model: FnoModel, stats: Optional[NormalizationStats], epoch: int,
                    optimizer: Adam, loss_cfg: LossConfig, train_cfg: TrainConfig,
                    meta: Optional[Dict[str, Any]] = None) -> Path:
    root = ensure_dir(Path(path))
    names = model.param_names()
    try:
        blobs = {"params": write_blob(root / "params.f64", model.flatten())}
        if optimizer.t > 0:
            blobs["adam_m"] = write_blob(root / "adam_m.f64",
                                          np.concatenate([optimizer.m[k].ravel() for k in names]))
            blobs["adam_v"] = write_blob(root / "adam_v.f64",
                                          np.concatenate([optimizer.v[k].ravel() for k in names]))
    except OSError as e:
        raise DataIOError(f"cannot write checkpoint blobs to {root}: {str(e)}") from e

    payload = {
        "format": CHECKPOINT_FORMAT,
        "version": FORMAT_VERSION,
        "config": asdict(model.config),
        "grid": asdict(model.grid),
        "variant": model.variant,
        "seed": train_cfg.seed,
        "epoch": epoch,
        "loss": asdict(loss_cfg),
        "training": asdict(train_cfg),
        "normalization": stats.to_dict() if stats is not None else None,
        "stress_weights": model.stress_weights.tolist(),
        "param_order": [{"name": k, "shape": list(model.params[k].shape)} for k in names],
        "adam": {"t": optimizer.t, "lr": optimizer.lr},
        "blobs": blobs,
        "meta": meta or {},
    }
    write_json(root / "checkpoint.json", payload)
    logger.info(f"Wrote checkpoint ({model.variant}, epoch {epoch}) to {root}")
    return root


def load_checkpoint(path) -> Checkpoint:
    root = Path(path)
    raw = read_json(root / "checkpoint.json")
    if raw.get("format") != CHECKPOINT_FORMAT:
        raise DataIOError(f"{root} is not a checkpoint directory")
    try:
        cfg = FnoConfig(**raw["config"])
        grid = GridConfig(**raw["grid"])
        loss_cfg = LossConfig(**raw["loss"])
        train_cfg = TrainConfig(**raw["training"])
    except TypeError as e:
        raise ConfigError(f"checkpoint metadata does not match this version: {str(e)}") from e

    shapes = param_shapes(cfg)
    declared = {p["name"]: tuple(p["shape"]) for p in raw["param_order"]}
    if declared != shapes:
        raise ConfigError("checkpoint parameter shapes do not match its configuration")

    model = FnoModel(cfg, grid, {k: np.zeros(s) for k, s in shapes.items()},
                     np.asarray(raw["stress_weights"], dtype=float))
    model.load_flat(read_blob(root, raw["blobs"]["params"]))

    adam = Adam(train_cfg.lr0, train_cfg.beta1, train_cfg.beta2, train_cfg.adam_eps)
    adam.t = int(raw["adam"]["t"])
    adam.lr = float(raw["adam"]["lr"])
    if adam.t > 0:
        for key, store in (("adam_m", adam.m), ("adam_v", adam.v)):
            flat = read_blob(root, raw["blobs"][key])
            offset = 0
            for k in model.param_names():
                size = model.params[k].size
                store[k] = flat[offset:offset + size].reshape(model.params[k].shape).copy()
                offset += size

    stats = NormalizationStats.from_dict(raw["normalization"]) if raw.get("normalization") else None
    return Checkpoint(model, stats, int(raw["epoch"]), adam, loss_cfg, train_cfg, raw.get("meta", {}))
