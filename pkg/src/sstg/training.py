"""Joint two-branch training with PCGrad on the shared encoder.

The classification loss and the self-supervised loss each produce a gradient
on the shared encoder parameters; the two are de-conflicted with PCGrad and
summed. Branch-private parameters (main decoder + classifier, SSL decoder +
reconstruction head) are updated from their own branch's loss only.
"""

from __future__ import annotations

import copy
import hashlib
import json
import logging
import math
import struct
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np
import torch

from .config import RunConfig, dump_config, parse_config
from .evalkit import compute_metrics
from .graph import TactileGraph
from .network import MaskSpec, build_model, mask_input
from .objectives import LossBundle, LossWeights, bce_loss, recon_loss, sparse_loss, total_objective

log = logging.getLogger(__name__)

HISTORY_COLUMNS = ("epoch", "lr", "train_ce", "ssl_rec", "ssl_sparse", "val_acc", "val_auc", "val_f1")
CKPT_MAGIC = b"SSTGCKPT"
CKPT_VERSION = 1


class TrainingError(RuntimeError):
    def __init__(self, msg, state=None):
        super().__init__(msg)
        self.state = state


def lr_schedule(epoch: int, cfg) -> float:
    """``lr0 * 2 ** -(epoch // halve_every)``; accepts a RunConfig or TrainingConfig."""
    t = getattr(cfg, "train", cfg)
    if epoch < 0:
        raise ValueError(f"epoch must be non-negative, got {epoch}")
    return t.lr0 * 2.0 ** (-(epoch // t.halve_every))


def pcgrad_project(task_grads, generator: torch.Generator | None = None):
    """Project each task gradient off the others it conflicts with.

    For task i, the other tasks are visited in a random order (drawn from
    ``generator``); whenever ``g_i . g_j < 0`` the component of ``g_i`` along
    the original ``g_j`` is removed. Zero-norm ``g_j`` are skipped.
    Returns the list of projected gradients as flat torch tensors.
    """
    grads = [torch.as_tensor(np.asarray(g) if not torch.is_tensor(g) else g).reshape(-1)
             for g in task_grads]
    if len(grads) < 2:
        raise ValueError("PCGrad needs at least two task gradients")
    if len({g.numel() for g in grads}) != 1:
        raise ValueError("task gradients must have equal length")
    for k, g in enumerate(grads):
        if not torch.isfinite(g).all():
            raise ValueError(f"task gradient {k} has non-finite entries")
    sq_norms = [torch.dot(g, g) for g in grads]
    projected = []
    for i, g_i in enumerate(grads):
        g = g_i.clone()
        others = [j for j in range(len(grads)) if j != i]
        order = torch.randperm(len(others), generator=generator).tolist()
        for k in order:
            j = others[k]
            if sq_norms[j] == 0:
                continue
            dot = torch.dot(g, grads[j])
            if dot < 0:
                g = g - (dot / sq_norms[j]) * grads[j]
        projected.append(g)
    return projected


def pcgrad_combine(task_grads, generator: torch.Generator | None = None):
    """Sum of :func:`pcgrad_project`; returns numpy for numpy input, torch otherwise."""
    as_numpy = not torch.is_tensor(task_grads[0])
    projected = pcgrad_project(task_grads, generator)
    total = projected[0]
    for g in projected[1:]:
        total = total + g
    return total.numpy() if as_numpy else total


def split_dataset(dataset, split=(0.6, 0.2, 0.2), seed: int = 0):
    """Shuffled (train, val, test) index arrays of sizes floor(0.6n), floor(0.2n), rest."""
    n = dataset if isinstance(dataset, (int, np.integer)) else len(dataset)
    if n < 5:
        raise ValueError(f"need at least 5 samples to split, got {n}")
    perm = np.random.default_rng(seed).permutation(n)
    n_train = math.floor(split[0] * n + 1e-9)
    n_val = math.floor(split[1] * n + 1e-9)
    return perm[:n_train], perm[n_train:n_train + n_val], perm[n_train + n_val:]


@dataclass
class TrainState:
    model: torch.nn.Module
    optimizer: torch.optim.Optimizer
    config: RunConfig
    epoch: int = 0
    step: int = 0
    generator: torch.Generator = field(default_factory=torch.Generator)

    @property
    def dtype(self):
        return getattr(torch, self.config.train.dtype)


def init_state(cfg: RunConfig, graph: TactileGraph) -> TrainState:
    cfg.validate()
    t = cfg.train
    dtype = getattr(torch, t.dtype)
    with torch.random.fork_rng(devices=[]):
        torch.manual_seed(t.seed)
        model = build_model(cfg.model, graph, ablate=t.ablate, topk_ratio=t.topk_ratio,
                            topk_on_ssl=cfg.ssl.topk_on_ssl)
    model = model.to(dtype)
    opt = torch.optim.Adam(model.parameters(), lr=t.lr0, betas=(t.beta1, t.beta2), eps=t.adam_eps)
    gen = torch.Generator().manual_seed(t.seed + 1)
    return TrainState(model, opt, cfg, 0, 0, gen)


def _grads(loss, params, retain=False):
    return torch.autograd.grad(loss, params, allow_unused=True, retain_graph=retain)


def _flatten(grads, params):
    return torch.cat([
        (g if g is not None else torch.zeros_like(p)).reshape(-1) for g, p in zip(grads, params)
    ])


def _assign(params, grads):
    for p, g in zip(params, grads):
        p.grad = None if g is None else g.detach().clone()


def _finite(*values):
    return all(v is None or bool(torch.isfinite(v).all()) for v in values)


def compute_losses(state: TrainState, x, y) -> LossBundle:
    cfg = state.config
    model = state.model
    weights = LossWeights(cfg.ssl.lam_rec, cfg.ssl.lam_sparse, cfg.ssl.lam_cos, cfg.ssl.lam_mse)
    scores, _ = model.forward_main(x)
    bundle = LossBundle(bce_loss(scores, y), weights=weights)
    if model.use_ssl:
        spec = MaskSpec(cfg.train.mask_rate, cfg.ssl.granularity, cfg.ssl.patch_len)
        x_masked, m = mask_input(x, spec, state.generator)
        x_hat, h_tilde = model.forward_ssl(x_masked)
        bundle.l_sparse, bundle.sparse_degenerate = sparse_loss(h_tilde, cfg.ssl.sparse_p, return_flag=True)
        target_mask = (1.0 - m) if cfg.ssl.masked_only else None
        bundle.l_rec = recon_loss(x_hat, x, weights, mask=target_mask)
    return bundle


def train_step(state: TrainState, batch, cfg: RunConfig | None = None):
    """One optimizer update; returns ``(state, LossBundle)``.

    A non-finite loss or gradient aborts the step: parameters and optimizer
    moments are left untouched and ``bundle.aborted`` is set.
    """
    cfg = cfg or state.config
    model = state.model
    x, y = batch
    x = torch.as_tensor(x).to(state.dtype)
    y = torch.as_tensor(y).to(state.dtype)
    model.train()
    if not _finite(x):
        log.warning("step %d aborted: non-finite input batch", state.step)
        return state, LossBundle(torch.tensor(math.nan), aborted=True)
    try:
        bundle = compute_losses(state, x, y)
    except ValueError as exc:  # NaN scores from diverged parameters
        log.warning("step %d aborted: %s", state.step, exc)
        return state, LossBundle(torch.tensor(math.nan), aborted=True)
    main_loss, ssl_loss = total_objective(bundle)
    if not _finite(bundle.l_ce, bundle.l_rec, bundle.l_sparse):
        log.warning("step %d aborted: non-finite loss %s", state.step, bundle.as_floats())
        bundle.aborted = True
        return state, bundle

    shared = model.shared_parameters()
    main_priv = model.main_parameters()
    ssl_priv = model.ssl_parameters()
    n_shared = len(shared)
    g_main = _grads(main_loss, shared + main_priv)

    if model.use_ssl:
        w = bundle.weights
        if cfg.train.pcgrad_tasks == 3:
            ssl_tasks = [w.lam_rec * bundle.l_rec, w.lam_sparse * bundle.l_sparse]
        else:
            ssl_tasks = [ssl_loss]
        g_ssl = [_grads(loss, shared + ssl_priv, retain=k < len(ssl_tasks) - 1)
                 for k, loss in enumerate(ssl_tasks)]
        flat = [_flatten(g[:n_shared], shared) for g in [g_main] + g_ssl]
        if not all(torch.isfinite(f).all() for f in flat):
            log.warning("step %d aborted: non-finite shared gradient", state.step)
            bundle.aborted = True
            return state, bundle
        combined = pcgrad_combine(flat, state.generator)
        offset = 0
        shared_grads = []
        for p in shared:
            shared_grads.append(combined[offset:offset + p.numel()].view_as(p))
            offset += p.numel()
        ssl_private = []
        for k in range(len(ssl_priv)):
            parts = [g[n_shared + k] for g in g_ssl if g[n_shared + k] is not None]
            ssl_private.append(sum(parts) if parts else None)
        _assign(shared, shared_grads)
        _assign(main_priv, g_main[n_shared:])
        _assign(ssl_priv, ssl_private)
    else:
        _assign(shared + main_priv, g_main)

    grads = [p.grad for p in model.parameters() if p.grad is not None]
    if not all(torch.isfinite(g).all() for g in grads):
        log.warning("step %d aborted: non-finite gradient", state.step)
        state.optimizer.zero_grad(set_to_none=True)
        bundle.aborted = True
        return state, bundle

    lr = lr_schedule(state.epoch, cfg)
    for group in state.optimizer.param_groups:
        group["lr"] = lr
    state.optimizer.step()
    state.optimizer.zero_grad(set_to_none=True)
    state.step += 1
    return state, bundle


@torch.no_grad()
def predict(model, x, batch_size: int = 64, with_embedding: bool = False):
    """Scores (S, N) and optionally embeddings (S, N, D) as numpy arrays."""
    model.eval()
    dtype = next(model.parameters()).dtype
    x = torch.as_tensor(np.asarray(x)).to(dtype)
    scores, embs = [], []
    for start in range(0, x.shape[0], batch_size):
        s, e = model.forward_main(x[start:start + batch_size])
        scores.append(s.double().numpy())
        if with_embedding:
            embs.append(e.double().numpy())
    scores = np.concatenate(scores) if scores else np.zeros((0,) + tuple(x.shape[1:2]))
    if with_embedding:
        return scores, np.concatenate(embs)
    return scores


def evaluate(model, x, y, threshold=0.5, batch_size=64):
    return compute_metrics(predict(model, x, batch_size), y, threshold)


@dataclass
class TrainResult:
    state: TrainState
    history: list
    best_state: dict | None
    best_epoch: int
    best_val_acc: float
    splits: tuple
    test_report: object = None

    def best_model(self):
        model = copy.deepcopy(self.state.model)
        if self.best_state is not None:
            model.load_state_dict(self.best_state)
        return model


def _batches(indices, batch_size):
    for start in range(0, len(indices), batch_size):
        yield indices[start:start + batch_size]


def train(dataset, cfg: RunConfig, out_dir=None, state: TrainState | None = None) -> TrainResult:
    """Epoch loop with per-epoch validation and best-validation-accuracy retention.

    ``dataset`` needs ``x`` (S, N, F, T), ``y`` (S, N) and ``graph``.
    Batch order for epoch e comes from a generator seeded by (seed, e), so a
    run resumed from a checkpoint replays the same batches.
    """
    cfg.validate()
    t = cfg.train
    state = state or init_state(cfg, dataset.graph)
    train_idx, val_idx, test_idx = split_dataset(len(dataset), t.split, t.seed)
    x_all = np.asarray(dataset.x)
    y_all = np.asarray(dataset.y)
    history = []
    best_state, best_epoch, best_acc = None, -1, -math.inf

    for epoch in range(state.epoch, t.epochs):
        state.epoch = epoch
        order = np.random.default_rng([t.seed, epoch]).permutation(train_idx)
        sums = {"l_ce": [], "l_rec": [], "l_sparse": []}
        for idx in _batches(order, t.batch_size):
            state, bundle = train_step(state, (x_all[idx], y_all[idx]), cfg)
            if bundle.aborted:
                continue
            for k, v in bundle.as_floats().items():
                if v is not None:
                    sums[k].append(v)
        report = evaluate(state.model, x_all[val_idx], y_all[val_idx], t.threshold, t.eval_batch_size)
        row = {
            "epoch": epoch,
            "lr": lr_schedule(epoch, cfg),
            "train_ce": float(np.mean(sums["l_ce"])) if sums["l_ce"] else math.nan,
            "ssl_rec": float(np.mean(sums["l_rec"])) if sums["l_rec"] else None,
            "ssl_sparse": float(np.mean(sums["l_sparse"])) if sums["l_sparse"] else None,
            "val_acc": report.accuracy,
            "val_auc": report.auc if report.auc_defined else None,
            "val_f1": report.f1,
        }
        history.append(row)
        log.info("epoch %d lr %.3g ce %.4f val_acc %.4f val_auc %s", epoch, row["lr"],
                 row["train_ce"], row["val_acc"], row["val_auc"])
        if report.accuracy > best_acc:
            best_acc, best_epoch = report.accuracy, epoch
            best_state = {k: v.detach().clone() for k, v in state.model.state_dict().items()}
        state.epoch = epoch + 1

    result = TrainResult(state, history, best_state, best_epoch, best_acc,
                         (train_idx, val_idx, test_idx))
    if len(test_idx):
        result.test_report = evaluate(result.best_model(), x_all[test_idx], y_all[test_idx],
                                      t.threshold, t.eval_batch_size)
    if out_dir is not None:
        _write_outputs(result, Path(out_dir))
    return result


def history_csv(history) -> str:
    lines = [",".join(HISTORY_COLUMNS)]
    for row in history:
        cells = []
        for c in HISTORY_COLUMNS:
            v = row[c]
            cells.append("" if v is None else (str(v) if c == "epoch" else repr(float(v))))
        lines.append(",".join(cells))
    return "\n".join(lines) + "\n"


def _write_outputs(result: TrainResult, out: Path):
    try:
        out.mkdir(parents=True, exist_ok=True)
        (out / "history.csv").write_text(history_csv(result.history))
        save_checkpoint(out / "final.ckpt", result.state)
        if result.best_state is not None:
            best = copy.copy(result.state)
            best.model = result.best_model()
            save_checkpoint(out / "best.ckpt", best, include_optimizer=False)
        if result.test_report is not None:
            (out / "test_report.json").write_text(
                json.dumps(result.test_report.to_dict(), indent=2, sort_keys=True) + "\n")
    except OSError as exc:
        raise TrainingError(f"failed to write training outputs to {out}: {exc}", result.state) from exc


# ---------------------------------------------------------------------------
# checkpoints


def write_param_table(path, named_arrays):
    """Binary table: magic, u32 version, u32 count, then per entry
    u32 name length, utf-8 name, u32 ndim, u32 dims, little-endian float64 data."""
    with open(path, "wb") as fh:
        fh.write(CKPT_MAGIC)
        fh.write(struct.pack("<II", CKPT_VERSION, len(named_arrays)))
        for name, arr in named_arrays.items():
            a = np.array(arr, dtype="<f8", order="C")
            encoded = name.encode("utf-8")
            fh.write(struct.pack("<I", len(encoded)))
            fh.write(encoded)
            fh.write(struct.pack("<I", a.ndim))
            fh.write(struct.pack(f"<{a.ndim}I", *a.shape))
            fh.write(a.tobytes())


def read_param_table(path) -> dict:
    raw = Path(path).read_bytes()
    if raw[:len(CKPT_MAGIC)] != CKPT_MAGIC:
        raise ValueError(f"{path}: not a checkpoint table")
    off = len(CKPT_MAGIC)
    version, count = struct.unpack_from("<II", raw, off)
    if version != CKPT_VERSION:
        raise ValueError(f"{path}: unsupported checkpoint version {version}")
    off += 8
    out = {}
    for _ in range(count):
        (nlen,) = struct.unpack_from("<I", raw, off)
        off += 4
        name = raw[off:off + nlen].decode("utf-8")
        off += nlen
        (ndim,) = struct.unpack_from("<I", raw, off)
        off += 4
        shape = struct.unpack_from(f"<{ndim}I", raw, off)
        off += 4 * ndim
        size = int(np.prod(shape)) if ndim else 1
        out[name] = np.frombuffer(raw, dtype="<f8", count=size, offset=off).reshape(shape).copy()
        off += 8 * size
    return out


def save_checkpoint(path, state: TrainState, include_optimizer: bool = True):
    """Parameters to ``path``; optimizer moments and RNG state to ``path.state``;
    config, epoch, step and graph to ``path.json``."""
    path = Path(path)
    params = {k: v.detach().double().numpy() for k, v in state.model.state_dict().items()}
    write_param_table(path, params)
    if include_optimizer:
        names = {id(p): n for n, p in state.model.named_parameters()}
        extra = {}
        for group in state.optimizer.param_groups:
            for p in group["params"]:
                st = state.optimizer.state.get(p)
                if not st:
                    continue
                n = names[id(p)]
                extra[f"adam.exp_avg.{n}"] = st["exp_avg"].double().numpy()
                extra[f"adam.exp_avg_sq.{n}"] = st["exp_avg_sq"].double().numpy()
                extra[f"adam.step.{n}"] = np.asarray(float(st["step"]))
        extra["rng.torch"] = state.generator.get_state().numpy().astype(np.float64)
        write_param_table(path.with_name(path.name + ".state"), extra)
    meta = {
        "format_version": CKPT_VERSION,
        "epoch": state.epoch,
        "step": state.step,
        "config": dump_config(state.config),
        "graph": state.model.graph.to_dict(),
        "has_optimizer_state": include_optimizer,
    }
    path.with_name(path.name + ".json").write_text(json.dumps(meta, indent=2, sort_keys=True) + "\n")


def load_checkpoint(path) -> TrainState:
    path = Path(path)
    side = path.with_name(path.name + ".json")
    if not path.exists() or not side.exists():
        raise FileNotFoundError(f"checkpoint {path} or its sidecar {side} is missing")
    meta = json.loads(side.read_text())
    cfg = parse_config(meta["config"])
    graph = TactileGraph.from_dict(meta["graph"])
    state = init_state(cfg, graph)
    table = read_param_table(path)
    sd = state.model.state_dict()
    if set(table) != set(sd):
        raise ValueError(f"{path}: parameter names differ from the configured model")
    for k, v in sd.items():
        if tuple(table[k].shape) != tuple(v.shape):
            raise ValueError(f"{path}: shape of {k} is {table[k].shape}, model expects {tuple(v.shape)}")
    state.model.load_state_dict({k: torch.from_numpy(table[k]).to(sd[k].dtype) for k in sd})
    state.epoch = int(meta["epoch"])
    state.step = int(meta["step"])
    state_file = path.with_name(path.name + ".state")
    if meta.get("has_optimizer_state") and state_file.exists():
        extra = read_param_table(state_file)
        for n, p in state.model.named_parameters():
            key = f"adam.exp_avg.{n}"
            if key in extra:
                state.optimizer.state[p] = {
                    "step": torch.tensor(float(extra[f"adam.step.{n}"])),
                    "exp_avg": torch.from_numpy(extra[key]).to(p.dtype),
                    "exp_avg_sq": torch.from_numpy(extra[f"adam.exp_avg_sq.{n}"]).to(p.dtype),
                }
        state.generator.set_state(torch.from_numpy(extra["rng.torch"].astype(np.uint8)))
    return state


def config_digest(cfg: RunConfig) -> str:
    return hashlib.sha256(dump_config(cfg).encode()).hexdigest()

