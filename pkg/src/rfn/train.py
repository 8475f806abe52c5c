"""Training, checkpointing, forecasting and evaluation.

A run directory holds ``ckpt/`` (``params.npz`` + ``checkpoint.json``),
``loss.csv`` (epoch, train, valid), ``manifest.json`` and, after evaluation,
``report.json``. Every JSON file carries a ``schema`` string.
"""
from __future__ import annotations

import csv
import hashlib
import json
import logging
import math
from dataclasses import asdict, dataclass, field, fields
from pathlib import Path

import numpy as np

from .autodiff import Tape
from .cells import Batch, gather_events, make_cell, run_batch
from .data import Dataset, Instance, Standardization, fit_standardization, split, standardize
from .flow import BaseHead, FlowField, draw_base, tape_decode
from .metrics import DECILES, ForecastEnsemble, score_all
from .model import Model
from .ode import IntegrationSpec

logger = logging.getLogger(__name__)

CHECKPOINT_SCHEMA = "rfn.checkpoint/v1"
REPORT_SCHEMA = "rfn.report/v1"
MANIFEST_SCHEMA = "rfn.manifest/v1"
PROTOCOL = "one-step-ahead: each event forecast from the true history strictly before it"


class TrainingDiverged(FloatingPointError):
    def __init__(self, epoch: int, batch: int):
        super().__init__(f"loss became non-finite at epoch {epoch}, batch {batch}")
        self.epoch = epoch
        self.batch = batch


@dataclass
class RunConfig:
    cell: str = "gruode"
    joint: str = "cnf"
    mode: str = "syn"
    hidden: int = 64
    lr: float = 1e-3
    batch_size: int = 64
    epochs: int = 50
    patience: int = 10
    seed: int = 0
    grad_clip: float = 10.0
    flow_steps: int = 20
    solver: str = "rk4"
    max_step: float = 0.05
    standardize: bool = False
    full_cov: bool = True  # syn-mode flow base; the asyn base is always diagonal
    baseline_full_cov: bool = False
    mask_input: bool | None = None  # default: on for asyn
    held_input: bool = False
    split_fractions: tuple = (0.7, 0.15, 0.15)
    cs_levels: tuple = DECILES
    n_samples: int = 100

    def __post_init__(self):
        if self.cell not in ("gruode", "gru-d", "odernn", "odelstm"):
            raise ValueError(f"unknown cell {self.cell!r}")
        if self.joint not in ("cnf", "gaussian"):
            raise ValueError(f"unknown joint layer {self.joint!r}")
        if self.mode not in ("syn", "asyn"):
            raise ValueError(f"unknown mode {self.mode!r}")
        self.split_fractions = tuple(self.split_fractions)
        self.cs_levels = tuple(self.cs_levels)

    def to_json(self) -> dict:
        return asdict(self)

    @classmethod
    def from_json(cls, d: dict) -> "RunConfig":
        names = {f.name for f in fields(cls)}
        return cls(**{k: v for k, v in d.items() if k in names})

    @property
    def name(self) -> str:
        prefix = "RFN-" if self.joint == "cnf" else ""
        return f"{prefix}{self.cell.upper()}"


def build_model(config: RunConfig, dim: int, x_mean=None) -> Model:
    mask_input = config.mode == "asyn" if config.mask_input is None else config.mask_input
    kw = {"held_input": config.held_input} if config.cell == "gruode" else {}
    cell = make_cell(config.cell, dim, config.hidden, mask_input=mask_input,
                     max_step=config.max_step, method=config.solver,
                     seed=config.seed, x_mean=x_mean, **kw)
    if config.joint == "cnf":
        full = config.full_cov and config.mode == "syn"
        field_ = FlowField(dim, config.hidden, seed=config.seed + 1)
    else:
        full = config.baseline_full_cov and config.mode == "syn"
        field_ = None
    head = BaseHead(dim, config.hidden, full_cov=full, seed=config.seed + 2)
    spec = IntegrationSpec(0.0, 1.0, config.flow_steps, config.solver)
    return Model(cell, head, field_, config.mode, spec)


# optimizer ----------------------------------------------------------------------

class Adam:
    def __init__(self, params: dict[str, np.ndarray], lr: float = 1e-3, betas=(0.9, 0.999),
                 eps: float = 1e-8, clip: float | None = 10.0):
        self.lr, self.b1, self.b2, self.eps, self.clip = lr, betas[0], betas[1], eps, clip
        self.m = {k: np.zeros_like(v) for k, v in params.items()}
        self.v = {k: np.zeros_like(v) for k, v in params.items()}
        self.t = 0

    def step(self, params: dict[str, np.ndarray], grads: dict[str, np.ndarray]) -> float:
        names = sorted(params)
        norm = math.sqrt(sum(float(np.sum(grads[k] ** 2)) for k in names))
        scale = self.clip / norm if self.clip and norm > self.clip else 1.0
        self.t += 1
        for k in names:
            g = grads[k] * scale
            self.m[k] = self.b1 * self.m[k] + (1 - self.b1) * g
            self.v[k] = self.b2 * self.v[k] + (1 - self.b2) * g * g
            mhat = self.m[k] / (1 - self.b1 ** self.t)
            vhat = self.v[k] / (1 - self.b2 ** self.t)
            params[k] = params[k] - self.lr * mhat / (np.sqrt(vhat) + self.eps)
        return norm


# checkpoint -----------------------------------------------------------------------

@dataclass
class Checkpoint:
    model: Model
    config: RunConfig
    epoch: int = 0
    valid_loss: float = float("nan")
    standardization: Standardization | None = None
    rng_state: dict | None = None
    history: list = field(default_factory=list)  # (epoch, train, valid)

    def save(self, path) -> Path:
        path = Path(path)
        path.mkdir(parents=True, exist_ok=True)
        params = self.model.params
        np.savez(path / "params.npz", **params)
        meta = {
            "schema": CHECKPOINT_SCHEMA,
            "run_config": self.config.to_json(),
            "model": self.model.config(),
            "epoch": self.epoch,
            "valid_loss": self.valid_loss,
            "standardization": self.standardization.to_json() if self.standardization else None,
            "rng_state": self.rng_state,
            "param_shapes": {k: list(v.shape) for k, v in params.items()},
        }
        (path / "checkpoint.json").write_text(json.dumps(meta, indent=2))
        return path

    @classmethod
    def load(cls, path) -> "Checkpoint":
        path = Path(path)
        meta = json.loads((path / "checkpoint.json").read_text())
        if meta.get("schema") != CHECKPOINT_SCHEMA:
            raise ValueError(f"unsupported checkpoint schema {meta.get('schema')!r}")
        with np.load(path / "params.npz") as npz:
            params = {k: npz[k].astype(np.float64) for k in npz.files}
        model = Model.from_config(meta["model"], params)
        std = meta.get("standardization")
        return cls(model, RunConfig.from_json(meta["run_config"]), meta["epoch"],
                   meta["valid_loss"], Standardization.from_json(std) if std else None,
                   meta.get("rng_state"))


# training -------------------------------------------------------------------------

def _batches(instances: list[Instance], size: int):
    for i in range(0, len(instances), size):
        yield Batch.from_instances(instances[i:i + size])


def _loss_no_grad(model: Model, batch: Batch) -> float:
    tape = Tape(record=False)
    return float(model.loss(tape.params_from(model.params), batch, tape).data)


def dataset_loss(model: Model, instances: list[Instance], batch_size: int = 128) -> float:
    """Objective averaged over instances (batch means re-weighted by batch size)."""
    if not instances:
        return float("nan")
    total = 0.0
    for b in _batches(instances, batch_size):
        total += _loss_no_grad(model, b) * b.size
    return total / len(instances)


def prepare(config: RunConfig, dataset: Dataset) -> tuple[Dataset, Standardization | None]:
    """Split (if needed), check the mode pairing and standardize if requested."""
    if config.mode == "syn" and dataset.classify() != "syn":
        raise ValueError("syn mode needs a dataset whose every event is fully observed")
    if dataset.splits is None:
        dataset = split(dataset, config.split_fractions, config.seed)
    stats = None
    if config.standardize:
        stats = dataset.standardization or fit_standardization(dataset, "train")
        dataset = standardize(dataset, stats)
    return dataset, stats


def _x_mean(dataset: Dataset) -> np.ndarray:
    train = dataset.subset("train").instances
    vals = np.concatenate([i.values for i in train], axis=1)
    mask = np.concatenate([i.mask for i in train], axis=1)
    return (vals * mask).sum(axis=1) / np.maximum(mask.sum(axis=1), 1)


def train(config: RunConfig, dataset: Dataset, log_path=None) -> Checkpoint:
    """Minimize the negative per-instance-normalized log-likelihood with Adam,
    keeping the parameters of the best validation epoch."""
    dataset, stats = prepare(config, dataset)
    model = build_model(config, dataset.dim, _x_mean(dataset))
    train_set = dataset.subset("train").instances
    valid_set = dataset.subset("valid").instances
    rng = np.random.default_rng(config.seed)
    params = {k: v.copy() for k, v in model.params.items()}
    opt = Adam(params, config.lr, clip=config.grad_clip)
    best = (math.inf, 0, {k: v.copy() for k, v in params.items()})
    history = []
    stale = 0
    for epoch in range(1, config.epochs + 1):
        order = rng.permutation(len(train_set))
        shuffled = [train_set[i] for i in order]
        running, seen = 0.0, 0
        for bi, batch in enumerate(_batches(shuffled, config.batch_size)):
            tape = Tape()
            P = tape.params_from(params)
            loss = model.loss(P, batch, tape)
            value = float(loss.data)
            grads = tape.backward(loss)
            if not math.isfinite(value) or not all(np.all(np.isfinite(g)) for g in grads.values()):
                raise TrainingDiverged(epoch, bi)
            opt.step(params, grads)
            running += value * batch.size
            seen += batch.size
        model.set_params(params)
        train_loss = running / seen
        valid_loss = dataset_loss(model, valid_set) if valid_set else train_loss
        if not math.isfinite(valid_loss):
            raise TrainingDiverged(epoch, -1)
        history.append((epoch, train_loss, valid_loss))
        logger.info("epoch %d train %.6f valid %.6f", epoch, train_loss, valid_loss)
        if valid_loss < best[0]:
            best = (valid_loss, epoch, {k: v.copy() for k, v in params.items()})
            stale = 0
        else:
            stale += 1
            if stale >= config.patience:
                break
    model.set_params(best[2])
    ckpt = Checkpoint(model, config, best[1], best[0], stats,
                      rng.bit_generator.state, history)
    if log_path is not None:
        write_loss_csv(history, log_path)
    return ckpt


def write_loss_csv(history, path) -> None:
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(["epoch", "train", "valid"])
        for epoch, tr, va in history:
            w.writerow([epoch, format(tr, ".17g"), format(va, ".17g")])


# forecasting ------------------------------------------------------------------------

def _model_space(ckpt: Checkpoint, instances: list[Instance]) -> list[Instance]:
    if ckpt.standardization is None:
        return instances
    s = ckpt.standardization
    return [Instance(i.times, (i.values - s.mean[:, None]) / s.std[:, None], i.mask, i.instance_id)
            for i in instances]


def _to_data_space(ckpt: Checkpoint, x: np.ndarray) -> np.ndarray:
    return x if ckpt.standardization is None else ckpt.standardization.invert(x)


def one_step_samples(ckpt: Checkpoint, instances: list[Instance], n_samples: int,
                     rng: np.random.Generator, masked_decode: bool = True):
    """Forecast ensembles at every event of every instance, each conditioned on
    the true history strictly before the event.

    Returns ``(samples (N, n, D), observations (N, D), mask (N, D), index)`` in
    data units, rows ordered instance by instance; ``index`` lists (instance, k).
    """
    model = ckpt.model
    batch = Batch.from_instances(_model_space(ckpt, instances))
    tape = Tape(record=False)
    P = tape.params_from(model.params)
    h_pre, _ = run_batch(model.cell, P, batch, tape)
    H = gather_events(h_pre, batch).data
    rows, cols = np.nonzero(batch.active)
    M = batch.m[rows, cols]
    mu, cov = model.head.forward(P, tape.const(H))
    z = draw_base(mu.data, cov.data, n_samples, model.head.full_cov, rng)
    n_rows, _, d = z.shape
    x = z
    if model.field is not None:
        mask = None
        if model.mode == "asyn" and masked_decode:
            mask = np.repeat(M, n_samples, axis=0)
        x = tape_decode(model.field, P, tape.const(z.reshape(n_rows * n_samples, d)),
                        tape.const(np.repeat(H, n_samples, axis=0)), mask,
                        model.flow_spec).data.reshape(n_rows, n_samples, d)
    obs = np.stack([instances[r].values[:, c] for r, c in zip(rows, cols)])
    return _to_data_space(ckpt, x), obs, M, list(zip(rows.tolist(), cols.tolist()))


def forecast(ckpt: Checkpoint, instance: Instance, k: int, n_samples: int = 100,
             rng: np.random.Generator | None = None) -> ForecastEnsemble:
    """Ensemble for event ``k`` (0-based) of ``instance`` given the events before it."""
    if not 0 <= k < instance.n_events:
        raise IndexError(f"event index {k} out of range for {instance.n_events} events")
    rng = rng if rng is not None else np.random.default_rng(ckpt.config.seed)
    # the recurrence is causal, so truncating after k changes nothing before it
    head = Instance(instance.times[:k + 1], instance.values[:, :k + 1], instance.mask[:, :k + 1],
                    instance.instance_id)
    s, obs, m, _ = one_step_samples(ckpt, [head], n_samples, rng, masked_decode=False)
    return ForecastEnsemble(s[k], m[k], obs[k])


def rollout(ckpt: Checkpoint, instance: Instance, start: int, n_samples: int = 100,
            rng: np.random.Generator | None = None) -> np.ndarray:
    """Sample paths over events ``start..K-1`` of ``instance``.

    The state is built from the true events before ``start``; afterwards every
    path feeds its own sampled values back into the cell. Returns (n, K - start, D)
    in data units.
    """
    rng = rng if rng is not None else np.random.default_rng(ckpt.config.seed)
    model = ckpt.model
    inst = _model_space(ckpt, [instance])[0]
    K, d = inst.n_events, inst.dim
    if not 0 <= start < K:
        raise IndexError(f"start {start} out of range for {K} events")
    tape = Tape(record=False)
    P = tape.params_from(model.params)
    cell = model.cell
    state = cell.initial_state(tape, n_samples)
    t_prev = np.zeros(n_samples)
    out = np.zeros((n_samples, K - start, d))
    ones = np.ones((n_samples, d))
    for k in range(K):
        t_k = np.full(n_samples, inst.times[k])
        state = cell.evolve(P, state, t_prev, t_k)
        if k < start:
            x = np.tile(inst.values[:, k], (n_samples, 1))
            m = np.tile(inst.mask[:, k], (n_samples, 1))
        else:
            mu, cov = model.head.forward(P, state.h)
            z = draw_base(mu.data, cov.data, 1, model.head.full_cov, rng)[:, 0, :]
            x = z if model.field is None else tape_decode(
                model.field, P, tape.const(z), state.h, None, model.flow_spec).data
            out[:, k - start] = x
            m = ones
        state = cell.update(P, state, x, m, t_k)
        t_prev = t_k
    return _to_data_space(ckpt, out)


# evaluation ----------------------------------------------------------------------

def evaluate(ckpt: Checkpoint, dataset: Dataset, n_samples: int = 100, seed: int | None = None,
             label: str = "test", batch_size: int = 64, levels=None) -> dict:
    """CRPS, CRPS_sum and CS of one-step-ahead forecasts on one split."""
    insts = dataset.subset(label).instances if dataset.splits is not None else dataset.instances
    if not insts:
        raise ValueError(f"split {label!r} is empty")
    levels = tuple(levels or ckpt.config.cs_levels)
    rng = np.random.default_rng(ckpt.config.seed if seed is None else seed)
    S, X, M = [], [], []
    for i in range(0, len(insts), batch_size):
        s, x, m, _ = one_step_samples(ckpt, insts[i:i + batch_size], n_samples, rng)
        S.append(s)
        X.append(x)
        M.append(m)
    S, X, M = np.concatenate(S), np.concatenate(X), np.concatenate(M)
    scores = score_all(S, X, M, levels)
    return {"model": ckpt.config.name, "mode": ckpt.model.mode, **scores,
            "n_instances": len(insts), "n_events": int(X.shape[0]), "n_samples": n_samples}


def make_report(results: dict[str, list[dict]], levels=DECILES, extra: dict | None = None) -> dict:
    """Aggregate per-seed evaluation dicts into mean/std per model and metric."""
    models = {}
    for name, runs in results.items():
        entry = {}
        for metric in ("crps", "crps_sum", "cs"):
            vals = [float(r[metric]) for r in runs]
            entry[metric] = {"mean": float(np.mean(vals)),
                             "std": float(np.std(vals)) if len(vals) > 1 else 0.0,
                             "runs": vals}
        models[name] = entry
    report = {"schema": REPORT_SCHEMA, "protocol": PROTOCOL, "cs_levels": list(levels),
              "cs_levels_note": "decile levels chosen by default; not taken from a reference",
              "models": models}
    if extra:
        report.update(extra)
    return report


def write_json(obj: dict, path) -> Path:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    path.write_text(json.dumps(obj, indent=2, sort_keys=True))
    return path


def read_report(path) -> dict:
    report = json.loads(Path(path).read_text())
    if report.get("schema") != REPORT_SCHEMA:
        raise ValueError(f"unsupported report schema {report.get('schema')!r}")
    return report


def content_hash(*paths) -> str:
    h = hashlib.sha256()
    for p in paths:
        p = Path(p)
        files = sorted(p.rglob("*")) if p.is_dir() else [p]
        for f in files:
            if f.is_file():
                h.update(f.name.encode())
                h.update(f.read_bytes())
    return h.hexdigest()


def run_manifest(command: str, config: dict, inputs: list, seed: int | None = None) -> dict:
    return {"schema": MANIFEST_SCHEMA, "command": command, "config": config, "seed": seed,
            "inputs": {str(p): content_hash(p) for p in inputs}}


def repeat_runs(config: RunConfig, dataset: Dataset, seeds=(0, 1, 2, 3, 4),
                n_samples: int = 100) -> list[dict]:
    """Train and evaluate once per seed (model initialization and batching order)."""
    out = []
    for s in seeds:
        cfg = RunConfig.from_json(dict(config.to_json(), seed=s))
        ckpt = train(cfg, dataset)
        out.append(dict(evaluate(ckpt, _splits_for(dataset, cfg), n_samples), seed=s,
                        epoch=ckpt.epoch, valid_loss=ckpt.valid_loss))
    return out


def _splits_for(dataset: Dataset, cfg: RunConfig) -> Dataset:
    return dataset if dataset.splits is not None else split(dataset, cfg.split_fractions, cfg.seed)
