"""Training harness: AdamW, cosine schedule, metrics, checkpoints, ablation.

Everything here is deterministic given the seeds. The per-epoch shuffle
draws from ``SeedSequence([seed, 1000 + epoch])`` so training can resume
from an epoch-boundary checkpoint and continue bit-identically — there
is no RNG state to carry, only the epoch counter.
"""

from __future__ import annotations

import csv
import hashlib
import math
import time
from dataclasses import dataclass, fields as dc_fields, replace

import numpy as np

from . import tensor as T
from .errors import ContractError, NumericsError
from .fileio import Checkpoint, canonical_config_text
from .model import Model, ModelConfig, preset
from .tensor import Tensor


def cross_entropy(logits: Tensor, labels: np.ndarray,
                  label_smoothing: float = 0.0) -> Tensor:
    """Mean cross-entropy of (B, K) logits against integer labels.

    With smoothing s the target distribution is (1-s)*onehot + s/K.
    """
    b, k = logits.shape
    labels = np.asarray(labels)
    if labels.shape != (b,):
        raise ContractError(f"labels shape {labels.shape} != ({b},)")
    q = np.full((b, k), label_smoothing / k, dtype=logits.data.dtype)
    q[np.arange(b), labels] += 1.0 - label_smoothing
    logp = T.log_softmax(logits)
    return T.neg(T.tmean(T.tsum(T.mul(logp, Tensor(q)), axis=-1)))


def accuracy(logits: np.ndarray, labels: np.ndarray) -> float:
    return float(np.mean(np.argmax(logits, axis=-1) == labels))


def cosine_warmup_lr(step: int, total_steps: int, base_lr: float,
                     warmup_frac: float = 0.05) -> float:
    """Linear warmup for the first warmup_frac of steps, then cosine to 0."""
    if total_steps <= 0:
        raise ContractError("total_steps must be positive")
    warmup = int(math.ceil(total_steps * warmup_frac))
    if warmup > 0 and step < warmup:
        return base_lr * (step + 1) / warmup
    span = max(total_steps - warmup, 1)
    progress = min(max(step - warmup, 0), span) / span
    return base_lr * 0.5 * (1.0 + math.cos(math.pi * progress))


class AdamW:
    """Decoupled-weight-decay Adam over a named parameter dict.

    Updates assign fresh arrays (no aliasing with model state), and
    moments live under the parameter's name so they serialize cleanly.
    """

    def __init__(self, params: dict[str, Tensor], betas=(0.9, 0.999),
                 eps: float = 1e-8, weight_decay: float = 0.05):
        self.params = params
        self.beta1, self.beta2 = betas
        self.eps = eps
        self.weight_decay = weight_decay
        self.t = 0
        self.m = {k: np.zeros_like(p.data) for k, p in params.items()}
        self.v = {k: np.zeros_like(p.data) for k, p in params.items()}

    def step(self, lr: float):
        self.t += 1
        bc1 = 1.0 - self.beta1 ** self.t
        bc2 = 1.0 - self.beta2 ** self.t
        for name, p in self.params.items():
            if p.grad is None:
                continue
            g = p.grad.astype(p.data.dtype, copy=False)
            m = self.beta1 * self.m[name] + (1.0 - self.beta1) * g
            v = self.beta2 * self.v[name] + (1.0 - self.beta2) * g * g
            self.m[name], self.v[name] = m, v
            update = (m / bc1) / (np.sqrt(v / bc2) + self.eps)
            p.data = p.data - lr * (update + self.weight_decay * p.data)

    def state_tensors(self) -> dict[str, np.ndarray]:
        out = {f"opt.m.{k}": v for k, v in self.m.items()}
        out.update({f"opt.v.{k}": v for k, v in self.v.items()})
        return out

    def load_state(self, tensors: dict[str, np.ndarray], t: int):
        self.t = t
        for k in self.m:
            mk, vk = f"opt.m.{k}", f"opt.v.{k}"
            if mk not in tensors or vk not in tensors:
                raise ContractError(f"checkpoint missing optimizer state for {k!r}")
            self.m[k] = tensors[mk].copy()
            self.v[k] = tensors[vk].copy()


@dataclass
class TrainHyper:
    lr: float = 1e-3
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8
    weight_decay: float = 0.05
    label_smoothing: float = 0.1
    batch_size: int = 32
    epochs: int = 10
    warmup_frac: float = 0.05

    def as_dict(self) -> dict:
        return {f"hyper.{f.name}": getattr(self, f.name) for f in dc_fields(self)}

    @classmethod
    def from_dict(cls, d: dict) -> "TrainHyper":
        known = {f.name for f in dc_fields(cls)}
        kw = {k[6:]: v for k, v in d.items()
              if k.startswith("hyper.") and k[6:] in known}
        return cls(**kw)


def config_hash(config: dict) -> str:
    """sha256 of the canonical config text — stable run fingerprint."""
    return hashlib.sha256(canonical_config_text(config).encode()).hexdigest()


@dataclass
class TrainState:
    """Everything needed to continue training: weights, moments, position."""

    model: Model
    opt: AdamW
    hyper: TrainHyper
    seed: int
    epoch: int = 0
    opt_steps: int = 0
    best_accuracy: float = -1.0

    @classmethod
    def fresh(cls, config: ModelConfig, hyper: TrainHyper, seed: int,
              dtype=np.float32) -> "TrainState":
        model = Model(config, seed=seed, dtype=dtype)
        opt = AdamW(model.parameters(), betas=(hyper.beta1, hyper.beta2),
                    eps=hyper.eps, weight_decay=hyper.weight_decay)
        return cls(model=model, opt=opt, hyper=hyper, seed=seed)

    def full_config(self) -> dict:
        cfg = self.model.config.as_dict()
        cfg.update(self.hyper.as_dict())
        return cfg

    def save(self, path):
        tensors = self.model.state_tensors()
        tensors.update(self.opt.state_tensors())
        cfg = self.full_config()
        cfg["train.epoch"] = self.epoch
        cfg["train.opt_steps"] = self.opt_steps
        cfg["train.best_accuracy"] = self.best_accuracy
        Checkpoint(config=cfg, tensors=tensors, step=self.opt_steps,
                   seed=self.seed).save(path)

    @classmethod
    def load(cls, path, dtype=None) -> "TrainState":
        ckpt = Checkpoint.load(path)
        model = Model.from_checkpoint(ckpt, dtype=dtype)
        hyper = TrainHyper.from_dict(ckpt.config)
        opt = AdamW(model.parameters(), betas=(hyper.beta1, hyper.beta2),
                    eps=hyper.eps, weight_decay=hyper.weight_decay)
        opt.load_state(ckpt.tensors, t=int(ckpt.config.get("train.opt_steps",
                                                           ckpt.step)))
        return cls(model=model, opt=opt, hyper=hyper, seed=int(ckpt.seed),
                   epoch=int(ckpt.config.get("train.epoch", 0)),
                   opt_steps=int(ckpt.config.get("train.opt_steps", ckpt.step)),
                   best_accuracy=float(ckpt.config.get("train.best_accuracy",
                                                       -1.0)))


def evaluate(model: Model, images: np.ndarray, labels: np.ndarray,
             batch_size: int = 32) -> tuple[float, float]:
    """Mean loss and accuracy in inference mode (running BN statistics)."""
    losses, correct = [], 0
    with T.no_grad():
        for lo in range(0, len(images), batch_size):
            xb = images[lo:lo + batch_size]
            yb = labels[lo:lo + batch_size]
            logits = model.forward(xb, training=False)
            losses.append(float(cross_entropy(logits, yb).data) * len(xb))
            correct += int(np.sum(np.argmax(logits.data, axis=-1) == yb))
    return sum(losses) / len(images), correct / len(images)


def _grad_diagnostics(model: Model, top: int = 3) -> str:
    norms = sorted(((float(np.max(np.abs(p.grad))) if p.grad is not None
                     else 0.0, name) for name, p in model.params.items()),
                   reverse=True)
    return ", ".join(f"{name} max|g|={g:.3e}" for g, name in norms[:top])


def write_metrics(path, rows: list[dict]):
    with open(path, "w", newline="") as f:
        writer = csv.DictWriter(
            f, fieldnames=["step", "split", "loss", "accuracy", "lr"])
        writer.writeheader()
        writer.writerows(rows)


def train(state: TrainState, images: np.ndarray, labels: np.ndarray, *,
          eval_images: np.ndarray | None = None,
          eval_labels: np.ndarray | None = None,
          epochs: int | None = None, stop_epoch: int | None = None,
          budget_seconds: float | None = None,
          metrics_path=None, out_dir=None, log=None) -> list[dict]:
    """Run (the remainder of) a training schedule; return metric rows.

    Trains from ``state.epoch`` to ``epochs`` (default: hyper.epochs),
    logging one train row per epoch and one val row when eval data is
    given. ``stop_epoch`` pauses the run at an epoch boundary without
    shortening the schedule, so a later call (or a reload of the saved
    state) continues bit-identically. ``budget_seconds`` caps consumed
    CPU time (process time, so thread count does not distort the
    budget), checked at every step. When ``out_dir`` is set, writes
    ``last.dckp`` each epoch and ``best.dckp`` whenever val accuracy
    improves.

    A non-finite loss raises NumericsError naming the offending step and
    the largest gradient entries of the previous step.
    """
    hyper = state.hyper
    total_epochs = hyper.epochs if epochs is None else epochs
    n = len(images)
    if n == 0 or len(labels) != n:
        raise ContractError("empty dataset or mismatched labels")
    bs = hyper.batch_size
    steps_per_epoch = (n + bs - 1) // bs
    total_steps = total_epochs * steps_per_epoch
    start = time.process_time()
    rows: list[dict] = []
    out_of_budget = False
    last_epoch = total_epochs if stop_epoch is None \
        else min(stop_epoch, total_epochs)

    for epoch in range(state.epoch, last_epoch):
        rng = np.random.default_rng(
            np.random.SeedSequence([state.seed, 1000 + epoch]))
        perm = rng.permutation(n)
        epoch_loss = 0.0
        epoch_hits = 0
        seen = 0
        lr = 0.0
        for b in range(steps_per_epoch):
            idx = perm[b * bs:(b + 1) * bs]
            lr = cosine_warmup_lr(epoch * steps_per_epoch + b, total_steps,
                                  hyper.lr, hyper.warmup_frac)
            state.model.zero_grad()
            logits = state.model.forward(images[idx], training=True, rng=rng)
            loss = cross_entropy(logits, labels[idx], hyper.label_smoothing)
            if not np.isfinite(loss.data):
                raise NumericsError(
                    f"non-finite loss {float(loss.data)} at epoch {epoch} "
                    f"step {b} (lr={lr:.3e}); worst gradients last step: "
                    f"{_grad_diagnostics(state.model)}")
            loss.backward()
            state.opt.step(lr)
            state.opt_steps += 1
            epoch_loss += float(loss.data) * len(idx)
            epoch_hits += int(np.sum(np.argmax(logits.data, -1) == labels[idx]))
            seen += len(idx)
            if budget_seconds is not None and \
                    time.process_time() - start >= budget_seconds:
                out_of_budget = True
                break

        rows.append({"step": state.opt_steps, "split": "train",
                     "loss": round(epoch_loss / seen, 6),
                     "accuracy": round(epoch_hits / seen, 6),
                     "lr": f"{lr:.6e}"})
        if eval_images is not None:
            vloss, vacc = evaluate(state.model, eval_images, eval_labels, bs)
            rows.append({"step": state.opt_steps, "split": "val",
                         "loss": round(vloss, 6), "accuracy": round(vacc, 6),
                         "lr": f"{lr:.6e}"})
            if vacc > state.best_accuracy:
                state.best_accuracy = vacc
                if out_dir is not None:
                    state.save(f"{out_dir}/best.dckp")
        if not out_of_budget:
            state.epoch = epoch + 1
        if out_dir is not None:
            state.save(f"{out_dir}/last.dckp")
        if log is not None:
            log(f"epoch {epoch + 1}/{total_epochs}  " + "  ".join(
                f"{r['split']} loss {r['loss']:.4f} acc {r['accuracy']:.3f}"
                for r in rows[-2 if eval_images is not None else -1:]))
        if out_of_budget:
            break

    if metrics_path is not None:
        write_metrics(metrics_path, rows)
    return rows


# -- cumulative ablation ------------------------------------------------------

ABLATION_ARMS = (
    ("baseline", {"use_das": False, "use_convpos": False, "use_convffn": False}),
    ("+DAScan", {"use_das": True, "use_convpos": False, "use_convffn": False}),
    ("+Convpos", {"use_das": True, "use_convpos": True, "use_convffn": False}),
    ("+ConvFFN", {"use_das": True, "use_convpos": True, "use_convffn": True}),
)


def ablation_run(train_data, eval_data, budget_seconds: float,
                 seeds=(0, 1, 2), *, epochs: int = 8, preset_name: str = "micro",
                 num_classes: int = 4, hyper: TrainHyper | None = None,
                 out_dir=None, log=None) -> dict:
    """Train the four cumulative feature arms under identical budgets.

    Every arm/seed gets the same schedule horizon (``epochs``) and the
    same CPU-second cap, with weights initialized from the same seeds —
    shared layers start bit-identical across arms. Returns a report dict
    with per-seed accuracies, the median per arm, and each arm's config
    hash; optionally writes ``report.csv`` and ``report.txt``.
    """
    train_x, train_y = train_data
    eval_x, eval_y = eval_data
    hyper = hyper or TrainHyper(epochs=epochs)
    arms = []
    for arm_name, toggles in ABLATION_ARMS:
        config = preset(preset_name, num_classes=num_classes, **toggles)
        accs = []
        for seed in seeds:
            state = TrainState.fresh(config, replace(hyper), int(seed))
            train(state, train_x, train_y, eval_images=eval_x,
                  eval_labels=eval_y, epochs=epochs,
                  budget_seconds=budget_seconds)
            accs.append(state.best_accuracy)
            if log is not None:
                log(f"{arm_name:10s} seed {seed}: best val acc {accs[-1]:.4f}")
        arms.append({"arm": arm_name, "config_hash": config_hash(config.as_dict()),
                     "accuracies": accs, "median": float(np.median(accs))})
    report = {"arms": arms, "budget_seconds": budget_seconds,
              "seeds": list(int(s) for s in seeds)}
    if out_dir is not None:
        _write_ablation_report(report, out_dir)
    return report


def format_ablation_table(report: dict) -> str:
    lines = [f"{'arm':12s} {'median':>8s}  per-seed"]
    for arm in report["arms"]:
        accs = " ".join(f"{a:.4f}" for a in arm["accuracies"])
        lines.append(f"{arm['arm']:12s} {arm['median']:8.4f}  {accs}")
    return "\n".join(lines)


def _write_ablation_report(report: dict, out_dir):
    with open(f"{out_dir}/report.csv", "w", newline="") as f:
        writer = csv.writer(f)
        writer.writerow(["arm", "config_hash", "median"]
                        + [f"seed{s}" for s in report["seeds"]])
        for arm in report["arms"]:
            writer.writerow([arm["arm"], arm["config_hash"],
                             f"{arm['median']:.6f}"]
                            + [f"{a:.6f}" for a in arm["accuracies"]])
    with open(f"{out_dir}/report.txt", "w") as f:
        f.write(format_ablation_table(report) + "\n")
