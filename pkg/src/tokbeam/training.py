"""Optimisation loop, uniform multi-task sampling, fine-tuning and checkpoints."""
from __future__ import annotations

import base64
import copy
import json
import logging
import math
import time
from dataclasses import asdict, dataclass, field, fields
from pathlib import Path

import numpy as np
import torch

from . import losses
from .bert import BertBeamformer, BertConfig, reconfigure_antennas
from .channel import TASK_ORDER, Utility, sample_rng
from .errors import CheckpointError, ConfigurationError
from .nn import checkpoint as ckpt_io
from .nn.beam import Batch, utility_t
from .ubert import UbertBeamformer, UbertConfig
from .utility import UtilityConfig, system_utility

log = logging.getLogger(__name__)

OBJECTIVES = ("pretrain", "unsupervised", "trace", "sumloss")


@dataclass
class TrainConfig:
    epochs: int = 100
    batch_size: int = 32
    lr: float = 2e-4
    cosine_decay: bool = True
    lambda1: float = 1.0
    lambda2: float = 0.1
    beta1: float = 0.9
    beta2: float = 0.999
    adam_eps: float = 1e-8
    clip_norm: float = 1.0
    loss_mode: str = "normalized"
    circuit_power: float = 0.5
    seed: int = 0
    deterministic: bool = True
    threads: int = 1
    dtype: str = "float32"

    def __post_init__(self):
        if self.lambda1 < 0 or self.lambda2 < 0:
            raise ConfigurationError("loss weights must be non-negative")
        if self.batch_size < 1 or self.epochs < 0:
            raise ConfigurationError("batch size must be >= 1 and epochs >= 0")
        if self.loss_mode not in losses.LOSS_MODES:
            raise ConfigurationError(f"unknown loss mode {self.loss_mode!r}")

    @property
    def torch_dtype(self):
        return {"float32": torch.float32, "float64": torch.float64}[self.dtype]

    @classmethod
    def from_dict(cls, d):
        names = {f.name for f in fields(cls)}
        return cls(**{k: v for k, v in d.items() if k in names})


# ---------------------------------------------------------------- sampling

class UniformTaskSampler:
    """Balanced multi-task batches.

    Every batch takes ``B // T`` samples from each of the T tasks; the
    ``B % T`` leftover slots go to tasks in rotation, so per-task quotas in
    one batch differ by at most one. Each task is drawn without replacement
    and reshuffled once exhausted. Fully determined by ``seed``.
    """

    def __init__(self, sizes, batch_size, seed=0):
        self.sizes = [int(n) for n in sizes]
        if not self.sizes:
            raise ConfigurationError("need at least one task")
        if any(n < 1 for n in self.sizes):
            raise ConfigurationError("every task dataset must be non-empty")
        if batch_size < len(self.sizes):
            raise ConfigurationError(
                f"batch size {batch_size} is smaller than the number of tasks {len(self.sizes)}")
        self.batch_size = batch_size
        self.rng = sample_rng(seed, "uniform-task-sampler")
        self._perm = [self.rng.permutation(n) for n in self.sizes]
        self._pos = [0] * len(self.sizes)
        self._count = 0

    @property
    def steps_per_epoch(self):
        return math.ceil(sum(self.sizes) / self.batch_size)

    def quotas(self, index):
        t = len(self.sizes)
        base, rem = divmod(self.batch_size, t)
        q = [base] * t
        for i in range(rem):
            q[(index + i) % t] += 1
        return q

    def _take(self, task, m):
        out = []
        while m > 0:
            if self._pos[task] == self.sizes[task]:
                self._perm[task] = self.rng.permutation(self.sizes[task])
                self._pos[task] = 0
            n = min(m, self.sizes[task] - self._pos[task])
            out.append(self._perm[task][self._pos[task]:self._pos[task] + n])
            self._pos[task] += n
            m -= n
        return np.concatenate(out) if out else np.zeros(0, dtype=np.int64)

    def next_batch(self):
        """List with one index array per task."""
        q = self.quotas(self._count)
        self._count += 1
        return [self._take(t, m) for t, m in enumerate(q)]

    def __iter__(self):
        while True:
            yield self.next_batch()


def uniform_task_batches(sizes, batch_size, seed=0):
    return iter(UniformTaskSampler(sizes, batch_size, seed))


# ------------------------------------------------------------- packed data

class TaskData:
    """Samples of one task packed into tensors, plus oracle utilities."""

    def __init__(self, utility, samples, dtype=torch.float32, circuit_power=0.5,
                 need_labels=False):
        if not samples:
            raise ConfigurationError(f"empty dataset for task {utility}")
        self.utility = Utility(utility)
        self.samples = list(samples)
        h = np.stack([s.h for s in samples])
        self.h_re = torch.as_tensor(h.real.copy(), dtype=dtype)
        self.h_im = torch.as_tensor(h.imag.copy(), dtype=dtype)
        self.noise = torch.as_tensor(np.stack([s.noise_power for s in samples]), dtype=dtype)
        self.p_max = torch.as_tensor([s.p_max for s in samples], dtype=dtype)
        name = self.utility.value
        self.has_labels = all(name in s.labels for s in samples)
        if need_labels and not self.has_labels:
            raise ConfigurationError(f"{name} training needs labels on every sample")
        self.label = None
        self.oracle = None
        if self.has_labels:
            w = np.stack([s.labels[name] for s in samples])
            self.label = (torch.as_tensor(w.real.copy(), dtype=dtype),
                          torch.as_tensor(w.imag.copy(), dtype=dtype))
            ucfg = UtilityConfig(self.utility, circuit_power)
            self.oracle = np.array([system_utility(s, s.labels[name], ucfg) for s in samples])

    def __len__(self):
        return len(self.samples)


def assemble(parts) -> Batch:
    """Concatenate (TaskData, indices) pieces into one mixed-task batch."""
    parts = [(td, torch.as_tensor(idx, dtype=torch.long)) for td, idx in parts if len(idx)]
    cat = lambda xs: torch.cat(xs, dim=0)
    h_re = cat([td.h_re[i] for td, i in parts])
    h_im = cat([td.h_im[i] for td, i in parts])
    task_ids = cat([torch.full((len(i),), td.utility.index, dtype=torch.long) for td, i in parts])
    labels = {}
    for util in {td.utility for td, _ in parts}:
        re, im = torch.zeros_like(h_re), torch.zeros_like(h_im)
        start = 0
        for td, i in parts:
            if td.utility is util and td.label is not None:
                re[start:start + len(i)] = td.label[0][i]
                im[start:start + len(i)] = td.label[1][i]
            start += len(i)
        labels[util.value] = (re, im)
    return Batch(h_re, h_im, cat([td.noise[i] for td, i in parts]),
                 cat([td.p_max[i] for td, i in parts]), task_ids, labels)


def compute_loss(objective, w, batch: Batch, cfg: TrainConfig):
    if objective == "trace":
        return losses.loss_multitask(w, batch, cfg.loss_mode)
    if objective == "sumloss":
        return losses.loss_sumloss(w, batch, cfg.circuit_power)
    total = w[0].new_zeros(())
    for util in TASK_ORDER:
        mask = batch.task_ids == util.index
        if not mask.any():
            continue
        wm = (w[0][mask], w[1][mask])
        sub = Batch(batch.h_re[mask], batch.h_im[mask], batch.noise[mask], batch.p_max[mask])
        if objective == "pretrain":
            lab = batch.labels[util.value]
            part = losses.loss_pretrain(wm, (lab[0][mask], lab[1][mask]), sub, util,
                                        cfg.lambda1, cfg.lambda2, cfg.circuit_power)
        elif objective == "unsupervised":
            part = losses.loss_finetune(wm, sub, util, cfg.circuit_power)
        else:
            raise ConfigurationError(f"unknown objective {objective!r}")
        total = total + part * mask.float().mean()
    return total


# ---------------------------------------------------------------- checkpoint

def build_model(kind, model_config: dict, seed=0, dtype=torch.float32):
    gen = torch.Generator().manual_seed(seed)
    if kind == "bert":
        return BertBeamformer(BertConfig(**model_config), generator=gen, dtype=dtype)
    if kind == "ubert":
        cfg = dict(model_config)
        cfg["tasks"] = tuple(cfg.get("tasks", [u.value for u in TASK_ORDER]))
        return UbertBeamformer(UbertConfig(**cfg), generator=gen, dtype=dtype)
    raise ConfigurationError(f"unknown model kind {kind!r}")


@dataclass
class Checkpoint:
    kind: str
    model_config: dict
    state: dict
    train_config: dict = field(default_factory=dict)
    task: str = "multi"
    dims: tuple = (0, 0)
    seed: int = 0
    epoch: int = 0
    history: list = field(default_factory=list)
    rng_state: str = ""

    @property
    def name(self):
        return f"{self.kind}-{self.task}-{self.dims[0]}x{self.dims[1]}-{self.seed}-{self.epoch}"

    def build(self, dtype=torch.float32):
        model = build_model(self.kind, self.model_config, self.seed, dtype)
        model.load_state_dict({k: v.to(dtype) for k, v in self.state.items()})
        return model

    def meta(self):
        return {
            "kind": self.kind,
            "model_config": self.model_config,
            "train_config": self.train_config,
            "task": self.task,
            "task_order": [u.value for u in TASK_ORDER],
            "dims": list(self.dims),
            "seed": self.seed,
            "epoch": self.epoch,
            "history": self.history,
            "rng_state": self.rng_state,
        }

    def save(self, directory_or_file) -> Path:
        path = Path(directory_or_file)
        if path.suffix != ".ckpt":
            path = path / f"{self.name}.ckpt"
        return ckpt_io.save(path, self.state, self.meta())

    @classmethod
    def load(cls, path) -> "Checkpoint":
        state, meta = ckpt_io.load(path)
        if meta.get("task_order") != [u.value for u in TASK_ORDER]:
            raise CheckpointError(f"checkpoint task order {meta.get('task_order')} is incompatible")
        return cls(meta["kind"], meta["model_config"], state, meta["train_config"], meta["task"],
                   tuple(meta["dims"]), meta["seed"], meta["epoch"], meta["history"],
                   meta.get("rng_state", ""))

    @classmethod
    def from_model(cls, model, **kw) -> "Checkpoint":
        state = {k: v.detach().clone() for k, v in model.state_dict().items()}
        return cls(model.kind, model.config.to_dict(), state, **kw)


# ---------------------------------------------------------------- training

@dataclass
class TrainResult:
    model: torch.nn.Module
    history: list
    best_epoch: int
    best_score: float


def configure_torch(cfg: TrainConfig):
    torch.set_num_threads(max(1, 1 if cfg.deterministic else cfg.threads))
    torch.use_deterministic_algorithms(cfg.deterministic)
    torch.manual_seed(cfg.seed)


def evaluate_tasks(model, data: dict, cfg: TrainConfig, objective: str, chunk=1024):
    """Validation loss and per-task utilities/ratios (no gradients)."""
    out = {"loss": 0.0, "ratio": {}, "utility": {}}
    n_total = sum(len(td) for td in data.values())
    with torch.no_grad():
        for util, td in data.items():
            utils = []
            for start in range(0, len(td), chunk):
                idx = np.arange(start, min(start + chunk, len(td)))
                batch = assemble([(td, idx)])
                w = model(batch)
                if objective in ("pretrain", "trace") and td.label is None:
                    loss = losses.loss_finetune(w, batch, util, cfg.circuit_power)
                else:
                    loss = compute_loss(objective, w, batch, cfg)
                out["loss"] += float(loss) * len(idx) / n_total
                utils.append(utility_t(util, batch, *w, cfg.circuit_power).double().numpy())
            u = np.concatenate(utils)
            out["utility"][util.value] = float(u.mean())
            if td.oracle is not None:
                out["ratio"][util.value] = float(100.0 * u.mean() / td.oracle.mean())
    return out


def fit(model, train: dict, val: dict, cfg: TrainConfig, objective="pretrain",
        trainable=None, log_path=None) -> TrainResult:
    """Train ``model`` on per-task sample lists; keeps the best-validation weights.

    ``train``/``val`` map a utility to a list of samples. The selection score
    is the mean validation ratio when every validation task has oracle
    labels, otherwise minus the validation loss.
    """
    if objective not in OBJECTIVES:
        raise ConfigurationError(f"unknown objective {objective!r}")
    configure_torch(cfg)
    dtype = cfg.torch_dtype
    model = model.to(dtype)
    need = objective in ("pretrain", "trace")
    train_data = {Utility(u): TaskData(u, s, dtype, cfg.circuit_power, need) for u, s in train.items()}
    val_data = {Utility(u): TaskData(u, s, dtype, cfg.circuit_power) for u, s in val.items()}
    order = list(train_data)
    sampler = UniformTaskSampler([len(train_data[u]) for u in order], cfg.batch_size, cfg.seed)

    params = list(model.parameters()) if trainable is None else list(trainable)
    train_ids = {id(p) for p in params}
    for p in model.parameters():
        p.requires_grad_(id(p) in train_ids)
    opt = torch.optim.Adam(params, lr=cfg.lr, betas=(cfg.beta1, cfg.beta2), eps=cfg.adam_eps)
    total_steps = max(1, cfg.epochs * sampler.steps_per_epoch)
    if cfg.cosine_decay:
        sched = torch.optim.lr_scheduler.LambdaLR(
            opt, lambda s: 0.5 * (1.0 + math.cos(math.pi * min(s, total_steps) / total_steps)))
    else:
        sched = None

    log_file = open(log_path, "a", encoding="utf-8") if log_path else None
    history = []
    ev = evaluate_tasks(model, val_data, cfg, objective)
    best_score = _score(ev)
    best_state = copy.deepcopy(model.state_dict())
    best_epoch = 0
    try:
        for epoch in range(1, cfg.epochs + 1):
            t0 = time.perf_counter()
            model.train()
            run_loss = 0.0
            for _ in range(sampler.steps_per_epoch):
                idx = sampler.next_batch()
                batch = assemble([(train_data[u], i) for u, i in zip(order, idx)])
                w = model(batch)
                loss = compute_loss(objective, w, batch, cfg)
                opt.zero_grad(set_to_none=True)
                loss.backward()
                if cfg.clip_norm:
                    torch.nn.utils.clip_grad_norm_(params, cfg.clip_norm)
                opt.step()
                if sched is not None:
                    sched.step()
                run_loss += loss.item()
            model.eval()
            ev = evaluate_tasks(model, val_data, cfg, objective)
            rec = {"epoch": epoch, "train_loss": run_loss / sampler.steps_per_epoch,
                   "val_loss": ev["loss"], "val_ratio": ev["ratio"],
                   "val_utility": ev["utility"], "wall_time": time.perf_counter() - t0}
            history.append(rec)
            if log_file:
                for split, loss_key in (("train", "train_loss"), ("val", "val_loss")):
                    log_file.write(json.dumps({
                        "epoch": epoch, "split": split, "loss": rec[loss_key],
                        "utility_ratio": ev["ratio"] if split == "val" else {},
                        "wall_time": rec["wall_time"]}, sort_keys=True) + "\n")
                log_file.flush()
            score = _score(ev)
            if score > best_score:
                best_score, best_epoch = score, epoch
                best_state = copy.deepcopy(model.state_dict())
            log.info("epoch %d loss %.5f val %.5f ratio %s", epoch, rec["train_loss"],
                     rec["val_loss"], {k: round(v, 2) for k, v in ev["ratio"].items()})
    finally:
        if log_file:
            log_file.close()
    for p in model.parameters():
        p.requires_grad_(True)
    model.load_state_dict(best_state)
    return TrainResult(model, history, best_epoch, best_score)


def _score(ev):
    if ev["ratio"] and len(ev["ratio"]) == len(ev["utility"]):
        return float(np.mean(list(ev["ratio"].values())))
    return -ev["loss"]


def _dims(samples_by_task):
    s = next(iter(samples_by_task.values()))[0]
    return s.k_users, s.n_antennas


def _rng_blob():
    return base64.b64encode(torch.get_rng_state().numpy().tobytes()).decode()


def pretrain(kind, train: dict, val: dict, cfg: TrainConfig, model_config: dict | None = None,
             objective=None, out_dir=None, log_path=None) -> Checkpoint:
    """Supervised pre-training from scratch; returns the best-validation checkpoint.

    BERT defaults to the cosine + utility loss on a single task, UBERT to
    the multi-task trace loss.
    """
    k, n = _dims(train)
    if kind == "bert":
        if len(train) != 1:
            raise ConfigurationError("BERT pre-training takes exactly one task")
        model_config = {"n_antennas": n, **(model_config or {})}
        objective = objective or "pretrain"
    else:
        model_config = dict(model_config or {})
        objective = objective or "trace"
    model = build_model(kind, model_config, cfg.seed, cfg.torch_dtype)
    res = fit(model, train, val, cfg, objective, log_path=log_path)
    task = Utility(next(iter(train))).value if len(train) == 1 else "multi"
    ck = Checkpoint.from_model(res.model, train_config={**asdict(cfg), "objective": objective},
                               task=task, dims=(k, n), seed=cfg.seed, epoch=res.best_epoch,
                               history=res.history, rng_state=_rng_blob())
    if out_dir:
        ck.save(out_dir)
    return ck


FINETUNE_MODES = ("full", "frozen_teb")


def finetune(checkpoint: Checkpoint, train: dict, val: dict, cfg: TrainConfig, mode="full",
             reinit_io=False, objective=None, out_dir=None, log_path=None) -> Checkpoint:
    """Warm-started training.

    ``mode="frozen_teb"`` trains only the embedding and output layers.
    For BERT, a different N_T needs ``reinit_io=True``, which keeps the
    encoder blocks and re-initialises embedding and output layers. BERT
    fine-tunes on the negative utility by default, UBERT on the trace loss.
    """
    if mode not in FINETUNE_MODES:
        raise ConfigurationError(f"unknown fine-tune mode {mode!r}")
    k, n = _dims(train)
    model = checkpoint.build(cfg.torch_dtype)
    if checkpoint.kind == "bert":
        if model.config.n_antennas != n:
            if not reinit_io:
                raise CheckpointError(
                    f"checkpoint has N_T={model.config.n_antennas}, data has N_T={n}; "
                    "pass reinit_io=True to re-initialise the embedding and output layers")
            model = reconfigure_antennas(model, n, torch.Generator().manual_seed(cfg.seed))
        objective = objective or "unsupervised"
    else:
        objective = objective or "trace"
    trainable = None
    if mode == "frozen_teb":
        if checkpoint.kind == "bert":
            trainable = model.embedding_parameters() + model.output_parameters()
        else:
            block_ids = {id(p) for p in model.blocks.parameters()}
            trainable = [p for p in model.parameters() if id(p) not in block_ids]
    res = fit(model, train, val, cfg, objective, trainable=trainable, log_path=log_path)
    task = Utility(next(iter(train))).value if len(train) == 1 else "multi"
    ck = Checkpoint.from_model(res.model, train_config={**asdict(cfg), "objective": objective,
                                                        "mode": mode},
                               task=task, dims=(k, n), seed=cfg.seed, epoch=res.best_epoch,
                               history=res.history, rng_state=_rng_blob())
    if out_dir:
        ck.save(out_dir)
    return ck


def predict(model, samples, utility, chunk=1024, dtype=torch.float64) -> np.ndarray:
    """Beamformers (n, K, N) complex for samples sharing one shape.

    Runs a float64 copy of the model so the power budget holds to
    double precision regardless of the training dtype.
    """
    from .nn.beam import make_batch, to_complex
    if next(model.parameters()).dtype != dtype:
        model = copy.deepcopy(model).to(dtype)
    outs = []
    with torch.no_grad():
        for start in range(0, len(samples), chunk):
            part = samples[start:start + chunk]
            batch = make_batch(part, tasks=[utility] * len(part), dtype=dtype)
            outs.append(to_complex(*model(batch)))
    return np.concatenate(outs)


@dataclass
class EvalReport:
    utility: str
    ids: list
    model_utility: np.ndarray
    oracle_utility: np.ndarray | None
    ratio: float | None
    max_violation: float  # max(power - p_max, 0) over samples

    @property
    def feasible(self):
        return self.max_violation <= 1e-9


def evaluate_beamformers(samples, beamformers, utility, circuit_power=0.5, truth=None) -> EvalReport:
    """Score given beamformers; ``truth`` optionally supplies the true channels.

    With imperfect CSI the beamformers are computed from ``samples`` but the
    utility is measured on ``truth`` (and compared with the labels on it).
    """
    from .utility import performance_ratio, power
    if not samples:
        raise ConfigurationError("cannot evaluate an empty dataset")
    truth = samples if truth is None else truth
    ucfg = UtilityConfig(Utility(utility), circuit_power)
    name = ucfg.kind.value
    u = np.array([system_utility(s, w, ucfg) for s, w in zip(truth, beamformers)])
    viol = max(max(power(w) - s.p_max, 0.0) for s, w in zip(truth, beamformers))
    oracle = ratio = None
    if all(name in s.labels for s in truth):
        oracle = np.array([system_utility(s, s.labels[name], ucfg) for s in truth])
        ratio = performance_ratio(u, oracle)
    return EvalReport(name, [s.id for s in truth], u, oracle, ratio, float(viol))


def evaluate(model, samples, utility, circuit_power=0.5, truth=None) -> EvalReport:
    """Run ``model`` on ``samples`` and score it against the stored oracle labels."""
    return evaluate_beamformers(samples, predict(model, samples, utility), utility,
                                circuit_power, truth)
