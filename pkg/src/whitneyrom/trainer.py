"""Training loop for the coarse-complex model.

One training step runs the full pipeline on a single conditioned sample:
shape-matrix evaluation -> coarsening -> Newton forward solve -> adjoint
solve -> one-tape parameter gradient -> optimizer update.  A Newton failure
skips the step (counted in the metrics) rather than killing the run.

Everything is deterministic given the RNG state carried in ``TrainState``:
the RNG is consumed only for dropout masks here and for epoch shuffling in
``fit``, so two runs restored from the same checkpoint produce bit-identical
metric streams.

Checkpoints use a self-describing little-endian container (format tag
``whitney-ckpt-1``): length-prefixed named entries followed by a SHA-256
checksum over everything before it.  Round trips are bit-exact, including
optimizer moments and the RNG state.
"""

from __future__ import annotations

import csv
import dataclasses
import hashlib
import json
import logging
import struct
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np
from numpy.typing import NDArray

from . import nets
from .complexes import conservation_report, evaluate_shape_matrix
from .nets import ModelConfig, ModelParams
from .solver import (
    SolverError,
    _nn_value,
    adjoint_solve,
    build_system,
    newton_solve,
    parameter_gradient,
)

log = logging.getLogger(__name__)

CHECKPOINT_MAGIC = b"whitney-ckpt-1\n"

ADAM_DEFAULTS = {"lr": 1e-3, "beta1": 0.9, "beta2": 0.999, "eps": 1e-8}
SHAMPOO_DEFAULTS = {"lr": 0.1, "precondition_every": 1, "reg": 1e-6}
SGD_DEFAULTS = {"lr": 1e-3}


class TrainerError(RuntimeError):
    pass


# ---------------------------------------------------------------------------
# data containers
# ---------------------------------------------------------------------------


@dataclass
class TrainingSample:
    """One conditioned target: where to fit and how to drive the system."""

    z: tuple
    points: NDArray  # (D, dim) observation coordinates
    targets: NDArray  # (D, F) observed values
    lift: object = None  # dict label -> value, or (m_bnd, F) array
    rhs: NDArray | None = None  # (m_int, F) fixed source projection
    rhs_fn: object = None  # callable(tape, w_tensor) -> (m_int, F) tensor

    def __post_init__(self):
        self.z = tuple(np.asarray(self.z, dtype=np.float64).ravel())
        self.points = np.atleast_2d(np.asarray(self.points, dtype=np.float64))
        self.targets = np.asarray(self.targets, dtype=np.float64)
        if self.targets.ndim == 1:
            self.targets = self.targets[:, None]
        if len(self.points) == 0:
            raise TrainerError("training sample has no target points")
        if len(self.points) != len(self.targets):
            raise TrainerError(
                f"{len(self.points)} target points but {len(self.targets)} values"
            )


@dataclass
class EvalCase:
    """Dense-field evaluation request: target given on every fine node."""

    z: tuple
    u_target: NDArray  # (N, F) fine-node values
    lift: object = None
    rhs: NDArray | None = None
    rhs_fn: object = None


@dataclass
class TrainingProblem:
    """The fixed geometry/discretization a training run happens on."""

    mesh: object
    fine: object
    layout: object
    n_fields: int = 1
    newton_tol: float = 1e-10
    newton_max_iter: int = 50


@dataclass
class TrainState:
    params: ModelParams
    moments: dict = field(default_factory=dict)
    epoch: int = 0
    step: int = 0
    rng: np.random.Generator = None
    dropout_rate: float = 0.0
    optimizer: str = "adam"
    opt_config: dict = field(default_factory=dict)
    problem: TrainingProblem | None = None  # attached, never serialized

    def __post_init__(self):
        if self.rng is None:
            self.rng = np.random.default_rng(0)
        if not 0.0 <= self.dropout_rate <= 0.1:
            raise TrainerError(
                f"dropout rate {self.dropout_rate} outside [0, 0.1]"
            )
        for key, arr in self.moments.items():
            _, _, pname = key.partition(":")
            if pname and pname in self.params.arrays:
                want = self.params.arrays[pname]
                if _moment_shape_mismatch(key, arr, want):
                    raise TrainerError(
                        f"moment {key!r} shape {arr.shape} incompatible with "
                        f"parameter shape {want.shape}"
                    )


def _moment_shape_mismatch(key: str, arr: NDArray, param: NDArray) -> bool:
    kind = key.split(":", 1)[0]
    if kind in ("m", "v"):
        return arr.shape != param.shape
    if kind in ("L", "pL"):
        n = param.shape[0]
        return arr.shape != (n, n)
    if kind in ("R", "pR"):
        n = param.shape[1] if param.ndim == 2 else 1
        return arr.shape != (n, n)
    return False


def initial_state(
    seed: int,
    config: ModelConfig,
    optimizer: str = "adam",
    opt_config: dict | None = None,
    problem: TrainingProblem | None = None,
) -> TrainState:
    params = nets.init_params(seed, config)
    return TrainState(
        params=params,
        moments={"t": np.zeros((), dtype=np.int64)},
        rng=np.random.default_rng(seed),
        optimizer=optimizer,
        opt_config=dict(opt_config or {}),
        problem=problem,
    )


# ---------------------------------------------------------------------------
# schedules and optimizers
# ---------------------------------------------------------------------------


def dropout_schedule(epoch: int, config: dict) -> float:
    """0.1 flat, then linear to zero over ``decay_len`` epochs."""
    start = config.get("start_rate", 0.1)
    begin = config["decay_begin"]
    length = config["decay_len"]
    if length < 1:
        raise TrainerError(f"decay_len must be >= 1, got {length}")
    if epoch < begin:
        return start
    if epoch >= begin + length:
        return 0.0
    return start * (1.0 - (epoch - begin) / length)


def _inv_fourth_root(mat: NDArray, reg: float) -> NDArray:
    vals, vecs = np.linalg.eigh(mat + reg * np.eye(len(mat)))
    vals = np.maximum(vals, 1e-12)
    return (vecs * vals ** -0.25) @ vecs.T


def apply_gradient(
    arrays: dict, grads: dict, moments: dict, optimizer: str, config: dict
) -> tuple[dict, dict]:
    """Pure update rule on plain dicts; returns fresh (arrays, moments)."""
    new_arrays = {k: v.copy() for k, v in arrays.items()}
    mom = {k: np.array(v, copy=True) for k, v in moments.items()}
    t = int(mom.get("t", 0)) + 1
    mom["t"] = np.asarray(t, dtype=np.int64)

    if optimizer == "sgd":
        cfg = {**SGD_DEFAULTS, **config}
        for k, g in grads.items():
            new_arrays[k] = new_arrays[k] - cfg["lr"] * g
    elif optimizer == "adam":
        cfg = {**ADAM_DEFAULTS, **config}
        b1, b2 = cfg["beta1"], cfg["beta2"]
        for k, g in grads.items():
            m = mom.get(f"m:{k}", np.zeros_like(g))
            v = mom.get(f"v:{k}", np.zeros_like(g))
            m = b1 * m + (1 - b1) * g
            v = b2 * v + (1 - b2) * g * g
            mom[f"m:{k}"], mom[f"v:{k}"] = m, v
            m_hat = m / (1 - b1**t)
            v_hat = v / (1 - b2**t)
            new_arrays[k] = new_arrays[k] - cfg["lr"] * m_hat / (
                np.sqrt(v_hat) + cfg["eps"]
            )
    elif optimizer == "shampoo":
        cfg = {**SHAMPOO_DEFAULTS, **config}
        every = max(1, int(cfg["precondition_every"]))
        for k, g in grads.items():
            gm = g if g.ndim == 2 else g.reshape(-1, 1)
            left = mom.get(f"L:{k}", np.zeros((gm.shape[0], gm.shape[0])))
            right = mom.get(f"R:{k}", np.zeros((gm.shape[1], gm.shape[1])))
            left = left + gm @ gm.T
            right = right + gm.T @ gm
            mom[f"L:{k}"], mom[f"R:{k}"] = left, right
            if t % every == 0 or f"pL:{k}" not in mom:
                mom[f"pL:{k}"] = _inv_fourth_root(left, cfg["reg"])
                mom[f"pR:{k}"] = _inv_fourth_root(right, cfg["reg"])
            step = cfg["lr"] * (mom[f"pL:{k}"] @ gm @ mom[f"pR:{k}"])
            new_arrays[k] = new_arrays[k] - step.reshape(g.shape)
    else:
        raise TrainerError(f"unknown optimizer {optimizer!r}")
    return new_arrays, mom


def optimizer_update(state: TrainState, grads: dict, config: dict | None = None) -> TrainState:
    cfg = dict(state.opt_config)
    if config:
        cfg.update(config)
    arrays, moments = apply_gradient(
        state.params.arrays, grads, state.moments, state.optimizer, cfg
    )
    params = ModelParams(
        config=state.params.config,
        arrays=arrays,
        constant_names=state.params.constant_names,
    )
    return dataclasses.replace(state, params=params, moments=moments)


# ---------------------------------------------------------------------------
# one training step
# ---------------------------------------------------------------------------


def _sample_dropout_masks(rng, rate: float, cfg: ModelConfig, n_tokens: int):
    if rate <= 0.0:
        return None
    keep = 1.0 - rate
    return [
        (rng.random((n_tokens, cfg.ffn_dim)) < keep).astype(np.float64) / keep
        for _ in range(cfg.shape_blocks)
    ]


def _system_for(problem: TrainingProblem, params: ModelParams, sample, masks=None):
    comb = evaluate_shape_matrix(
        params, problem.mesh, sample.z, problem.layout, dropout_masks=masks
    )
    return build_system(
        problem.mesh,
        problem.fine,
        comb,
        params,
        sample.z,
        sample.lift if sample.lift is not None else {},
        rhs=sample.rhs,
        rhs_fn=sample.rhs_fn,
        n_fields=problem.n_fields,
    )


def train_step(state: TrainState, sample: TrainingSample, u0=None):
    """One forward/adjoint/update pass.  Returns (new_state, metrics)."""
    problem = state.problem
    if problem is None:
        raise TrainerError("TrainState has no TrainingProblem attached")
    problem.mesh.locate(sample.points)  # raises if any point is outside

    masks = _sample_dropout_masks(
        state.rng, state.dropout_rate, state.params.config,
        len(problem.layout.interior_nodes),
    )
    metrics = {
        "loss": float("nan"),
        "newton_iters": 0,
        "grad_norm": float("nan"),
        "newton_failed": False,
        "dropout_rate": state.dropout_rate,
    }
    system = _system_for(problem, state.params, sample, masks)
    try:
        result = newton_solve(
            system, u0=u0, tol=problem.newton_tol, max_iter=problem.newton_max_iter
        )
    except SolverError as err:
        log.warning("newton failed, step %d skipped: %s", state.step, err)
        metrics["newton_failed"] = True
        if err.trace is not None:
            metrics["newton_iters"] = err.trace.iterations
        return dataclasses.replace(state, step=state.step + 1), metrics

    data = (sample.points, sample.targets)
    lam = adjoint_solve(system, result, data)
    loss, grads = parameter_gradient(system, result, lam, data, dropout_masks=masks)

    metrics["loss"] = loss
    metrics["newton_iters"] = result.trace.iterations
    metrics["grad_norm"] = float(
        np.sqrt(sum(float(np.sum(g * g)) for g in grads.values()))
    )
    new_state = optimizer_update(state, grads)
    new_state = dataclasses.replace(new_state, step=state.step + 1)
    return new_state, metrics


# ---------------------------------------------------------------------------
# full fit loop
# ---------------------------------------------------------------------------


@dataclass
class FitResult:
    state: TrainState
    log_path: Path
    final_checkpoint: Path
    epochs_run: int
    newton_failures: int


def fit(
    config: dict,
    dataset: list,
    problem: TrainingProblem,
    initial: TrainState | None = None,
) -> FitResult:
    """Shuffled-epoch training with scheduled dropout, CSV log, checkpoints."""
    if not dataset:
        raise TrainerError("empty dataset")
    epochs = int(config.get("epochs", 0))
    out_dir = Path(config.get("out_dir", "."))
    out_dir.mkdir(parents=True, exist_ok=True)
    seed = int(config.get("seed", 0))
    optimizer = str(config.get("optimizer", "adam"))
    opt_config = {}
    if "lr" in config:
        opt_config["lr"] = float(config["lr"])
    sched = {
        "start_rate": float(config.get("start_rate", 0.1)),
        "decay_begin": int(config.get("decay_begin", max(1, epochs // 2))),
        "decay_len": int(config.get("decay_len", max(1, epochs // 4))),
    }
    checkpoint_every = int(config.get("checkpoint_every", max(1, epochs // 5 or 1)))

    state = initial or initial_state(
        seed, _model_config_from(config, problem), optimizer, opt_config
    )
    state = dataclasses.replace(state, problem=problem)

    log.info(
        "run header: optimizer=%s lr=%s epochs=%d samples=%d "
        "(default adam lr=1e-3 is a deliberate deviation from the shampoo "
        "lr=0.1 reference setting)",
        state.optimizer,
        state.opt_config.get("lr", ADAM_DEFAULTS["lr"]),
        epochs,
        len(dataset),
    )

    log_path = out_dir / "training_log.csv"
    final_path = out_dir / "ckpt-final.bin"
    total_failures = 0
    with open(log_path, "w", newline="") as fh:
        writer = csv.writer(fh)
        writer.writerow(
            ["epoch", "sample", "loss", "newton_iters", "grad_norm", "dropout_rate"]
        )
        for epoch in range(epochs):
            rate = dropout_schedule(epoch, sched)
            state = dataclasses.replace(state, dropout_rate=rate, epoch=epoch)
            order = state.rng.permutation(len(dataset))
            failures = 0
            for idx in order:
                state, met = train_step(state, dataset[int(idx)])
                failures += int(met["newton_failed"])
                writer.writerow(
                    [
                        epoch,
                        int(idx),
                        repr(met["loss"]),
                        met["newton_iters"],
                        repr(met["grad_norm"]),
                        repr(rate),
                    ]
                )
            fh.flush()
            total_failures += failures
            if failures * 2 > len(dataset):
                save_checkpoint(state, out_dir / "ckpt-aborted.bin")
                raise TrainerError(
                    f"epoch {epoch}: {failures}/{len(dataset)} newton solves "
                    f"failed (>50%); aborting — last state saved to "
                    f"{out_dir / 'ckpt-aborted.bin'}"
                )
            if (epoch + 1) % checkpoint_every == 0:
                save_checkpoint(state, out_dir / f"ckpt-{epoch + 1:06d}.bin")
    save_checkpoint(state, final_path)
    return FitResult(
        state=state,
        log_path=log_path,
        final_checkpoint=final_path,
        epochs_run=epochs,
        newton_failures=total_failures,
    )


def _model_config_from(config: dict, problem: TrainingProblem) -> ModelConfig:
    kw = {
        "in_dim": problem.mesh.dim,
        "z_dim": int(config["z_dim"]),
        "m_int": problem.layout.m_int,
        "n_fields": problem.n_fields,
    }
    for key in (
        "embed_dim", "n_heads", "ffn_factor", "shape_blocks", "flux_blocks",
        "m_bnd_head", "bnd_blocks", "fourier_features",
    ):
        if key in config:
            kw[key] = int(config[key])
    for key in ("shape_head_init", "head_mode"):
        if key in config:
            kw[key] = str(config[key])
    if "with_flux" in config:
        kw["with_flux"] = str(config["with_flux"]).lower() not in ("0", "false", "no")
    return ModelConfig(**kw)


def knee_statistic(log_path, decay_begin: int, window: int = 500):
    """Mean per-epoch loss over the ``window`` epochs before/after the
    dropout schedule starts; used to check for the training-curve knee."""
    per_epoch: dict[int, list[float]] = {}
    with open(log_path, newline="") as fh:
        for row in csv.DictReader(fh):
            loss = float(row["loss"])
            if np.isfinite(loss):
                per_epoch.setdefault(int(row["epoch"]), []).append(loss)
    means = {e: float(np.mean(v)) for e, v in per_epoch.items()}
    before = [means[e] for e in range(decay_begin - window, decay_begin) if e in means]
    after = [means[e] for e in range(decay_begin, decay_begin + window) if e in means]
    if not before or not after:
        raise TrainerError("log does not cover the requested knee window")
    return float(np.mean(before)), float(np.mean(after))


# ---------------------------------------------------------------------------
# checkpoints
# ---------------------------------------------------------------------------


def _pack_entry(name: str, arr: NDArray) -> bytes:
    arr = np.asarray(arr)  # keeps 0-d shapes; tobytes() is C-order regardless
    nb = name.encode("utf-8")
    dt = arr.dtype.str.encode("ascii")
    head = struct.pack("<I", len(nb)) + nb
    head += struct.pack("<I", len(dt)) + dt
    head += struct.pack("<B", arr.ndim)
    head += struct.pack(f"<{arr.ndim}Q", *arr.shape) if arr.ndim else b""
    data = arr.tobytes()
    head += struct.pack("<Q", len(data))
    return head + data


def _json_entry(obj) -> NDArray:
    return np.frombuffer(
        json.dumps(obj, sort_keys=True, separators=(",", ":")).encode("utf-8"),
        dtype=np.uint8,
    )


def save_checkpoint(state: TrainState, path) -> Path:
    entries: dict[str, NDArray] = {}
    for k, v in state.params.arrays.items():
        entries[f"param:{k}"] = v
    for k, v in state.moments.items():
        entries[f"moment:{k}"] = np.asarray(v)
    entries["meta:epoch"] = np.asarray(state.epoch, dtype=np.int64)
    entries["meta:step"] = np.asarray(state.step, dtype=np.int64)
    entries["meta:dropout_rate"] = np.asarray(state.dropout_rate, dtype=np.float64)
    entries["meta:optimizer"] = np.frombuffer(
        state.optimizer.encode("utf-8"), dtype=np.uint8
    )
    entries["meta:opt_config"] = _json_entry(state.opt_config)
    entries["meta:rng_state"] = _json_entry(state.rng.bit_generator.state)
    entries["meta:model_config"] = _json_entry(dataclasses.asdict(state.params.config))
    entries["meta:constant_names"] = _json_entry(sorted(state.params.constant_names))

    body = CHECKPOINT_MAGIC + struct.pack("<Q", len(entries))
    for name in sorted(entries):
        body += _pack_entry(name, entries[name])
    body += hashlib.sha256(body).digest()
    path = Path(path)
    path.write_bytes(body)
    return path


def _read_exact(buf: memoryview, pos: int, n: int, path) -> tuple[memoryview, int]:
    if pos + n > len(buf):
        raise TrainerError(f"checkpoint {path} is truncated or corrupt")
    return buf[pos : pos + n], pos + n


def load_checkpoint(path, expected_config: ModelConfig | None = None) -> TrainState:
    raw = Path(path).read_bytes()
    if not raw.startswith(CHECKPOINT_MAGIC):
        got = raw[:16].split(b"\n", 1)[0]
        raise TrainerError(
            f"unsupported checkpoint version: expected "
            f"{CHECKPOINT_MAGIC.strip().decode()}, file starts with {got!r}"
        )
    if len(raw) < len(CHECKPOINT_MAGIC) + 8 + 32:
        raise TrainerError(f"checkpoint {path} is truncated or corrupt")
    body, digest = raw[:-32], raw[-32:]
    if hashlib.sha256(body).digest() != digest:
        raise TrainerError(f"checkpoint {path} failed its checksum")

    buf = memoryview(body)
    pos = len(CHECKPOINT_MAGIC)
    chunk, pos = _read_exact(buf, pos, 8, path)
    (n_entries,) = struct.unpack("<Q", chunk)
    entries: dict[str, NDArray] = {}
    for _ in range(n_entries):
        chunk, pos = _read_exact(buf, pos, 4, path)
        (nlen,) = struct.unpack("<I", chunk)
        chunk, pos = _read_exact(buf, pos, nlen, path)
        name = bytes(chunk).decode("utf-8")
        chunk, pos = _read_exact(buf, pos, 4, path)
        (dlen,) = struct.unpack("<I", chunk)
        chunk, pos = _read_exact(buf, pos, dlen, path)
        dtype = np.dtype(bytes(chunk).decode("ascii"))
        chunk, pos = _read_exact(buf, pos, 1, path)
        ndim = chunk[0]
        shape = ()
        if ndim:
            chunk, pos = _read_exact(buf, pos, 8 * ndim, path)
            shape = struct.unpack(f"<{ndim}Q", chunk)
        chunk, pos = _read_exact(buf, pos, 8, path)
        (nbytes,) = struct.unpack("<Q", chunk)
        chunk, pos = _read_exact(buf, pos, nbytes, path)
        entries[name] = np.frombuffer(bytes(chunk), dtype=dtype).reshape(shape)

    def meta_json(key):
        return json.loads(bytes(entries[f"meta:{key}"]).decode("utf-8"))

    stored_cfg = meta_json("model_config")
    if expected_config is not None:
        want = dataclasses.asdict(expected_config)
        diffs = [
            f"{k} expected {want[k]!r}, checkpoint has {stored_cfg.get(k)!r}"
            for k in want
            if stored_cfg.get(k) != want[k]
        ]
        if diffs:
            raise TrainerError(
                "checkpoint configuration mismatch: " + "; ".join(diffs)
            )
    config = ModelConfig(**stored_cfg)
    params = ModelParams(
        config=config,
        arrays={
            k.split(":", 1)[1]: v.copy()
            for k, v in entries.items()
            if k.startswith("param:")
        },
        constant_names=frozenset(meta_json("constant_names")),
    )
    moments = {
        k.split(":", 1)[1]: v.copy()
        for k, v in entries.items()
        if k.startswith("moment:")
    }
    rng = np.random.default_rng()
    rng.bit_generator.state = meta_json("rng_state")
    return TrainState(
        params=params,
        moments=moments,
        epoch=int(entries["meta:epoch"]),
        step=int(entries["meta:step"]),
        rng=rng,
        dropout_rate=float(entries["meta:dropout_rate"]),
        optimizer=bytes(entries["meta:optimizer"]).decode("utf-8"),
        opt_config=meta_json("opt_config"),
    )


# ---------------------------------------------------------------------------
# evaluation
# ---------------------------------------------------------------------------


def evaluate_errors(state: TrainState, cases: list, problem: TrainingProblem) -> list:
    """Fine-mesh mass-weighted relative L2 per field plus the conservation
    residual, one row per case.  Dropout is off; the state is not mutated."""
    mass0 = problem.fine.mass0
    rows = []
    for case in cases:
        row = {"z": tuple(np.asarray(case.z, dtype=np.float64).ravel()),
               "newton_failed": False, "newton_iters": 0,
               "rel_l2": None, "conservation_residual": None}
        sample = TrainingSample(
            z=case.z,
            points=problem.mesh.nodes[:1],
            targets=np.zeros((1, problem.n_fields)),
            lift=case.lift,
            rhs=case.rhs,
            rhs_fn=case.rhs_fn,
        )
        system = _system_for(problem, state.params, sample, masks=None)
        try:
            result = newton_solve(
                system, tol=problem.newton_tol, max_iter=problem.newton_max_iter
            )
        except SolverError as err:
            log.warning("evaluation solve failed for z=%s: %s", row["z"], err)
            row["newton_failed"] = True
            rows.append(row)
            continue
        row["newton_iters"] = result.trace.iterations

        u_model = system.comb.w.T @ result.u_hat  # (N, F)
        target = np.asarray(case.u_target, dtype=np.float64)
        if target.ndim == 1:
            target = target[:, None]
        err_vec = u_model - target
        rel = []
        for f_idx in range(target.shape[1]):
            e = err_vec[:, f_idx]
            t = target[:, f_idx]
            denom = float(np.sqrt(t @ (mass0 @ t)))
            num = float(np.sqrt(e @ (mass0 @ e)))
            rel.append(num / denom if denom > 0 else num)
        row["rel_l2"] = rel

        flux_total = system.epsilon()[None, :] * (
            system.complex.delta0 @ result.u_hat
        ) + _nn_value(system, result.u_hat)
        report = conservation_report(flux_total, system.complex)
        row["conservation_residual"] = report.interior_flux_antisymmetry_error
        rows.append(row)
    return rows
