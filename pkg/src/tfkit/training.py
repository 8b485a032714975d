"""Tensor Huber loss, evaluation metrics, naive baselines, gradients, and
the single-system-per-batch training loop.

Losses and metrics compare predicted vectors v_p against target vectors
v_t.  The loss is quadratic in |v_p - v_t| within delta of the target and
linear beyond, averaged over the atoms of a batch; metrics split the error
into tensor, magnitude, and angular parts plus the Pearson correlation of
magnitudes.  An order-0 model predicts the scalar magnitude instead, with
the same loss applied to the scalar difference.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field, fields
from typing import Sequence

import numpy as np
import torch

from .net import Model, PreparedSystem, build_model, forward_torch, prepare_system
from .systems import AtomSystem

EPS_ANGLE = 1e-9  # vectors shorter than this have no defined direction

HISTORY_COLUMNS = (
    "batch",
    "split",
    "loss",
    "magnitude_mae",
    "angle_mean",
    "tensor_mae",
    "pearson",
    "rel_tensor_err",
)


class DivergenceError(RuntimeError):
    """Raised when the training loss stops being finite."""


def huber_tensor_loss(v_p, v_t, delta: float):
    """Tensor Huber loss, averaged over the leading (atom) axis.

    Per atom, with d = |v_p - v_t|_2 taken over the trailing axis (or the
    absolute difference for scalar inputs):

        0.5 * d**2           if d <= delta
        (d - 0.5*delta)*delta  otherwise

    Accepts numpy arrays or torch tensors (gradients flow through torch).
    """
    if delta <= 0:
        raise ValueError("delta must be > 0")
    is_torch = isinstance(v_p, torch.Tensor) or isinstance(v_t, torch.Tensor)
    if is_torch:
        v_p = v_p if isinstance(v_p, torch.Tensor) else torch.as_tensor(v_p, dtype=torch.float64)
        v_t = v_t if isinstance(v_t, torch.Tensor) else torch.as_tensor(v_t, dtype=torch.float64)
        if v_p.shape != v_t.shape:
            raise ValueError(f"shape mismatch: {tuple(v_p.shape)} vs {tuple(v_t.shape)}")
        diff = v_p - v_t
        sumsq = diff * diff if diff.ndim == 1 else torch.sum(diff * diff, dim=-1)
        # Clamp keeps sqrt's gradient finite when both branches are traced.
        dist = torch.sqrt(torch.clamp(sumsq, min=1e-300))
        per_atom = torch.where(
            sumsq <= delta * delta, 0.5 * sumsq, (dist - 0.5 * delta) * delta
        )
        return per_atom.mean()
    v_p = np.asarray(v_p, dtype=float)
    v_t = np.asarray(v_t, dtype=float)
    if v_p.shape != v_t.shape:
        raise ValueError(f"shape mismatch: {v_p.shape} vs {v_t.shape}")
    diff = v_p - v_t
    sumsq = diff * diff if diff.ndim == 1 else np.sum(diff * diff, axis=-1)
    dist = np.sqrt(sumsq)
    per_atom = np.where(sumsq <= delta * delta, 0.5 * sumsq, (dist - 0.5 * delta) * delta)
    return float(np.mean(per_atom))


@dataclass
class MetricsReport:
    """Aggregate prediction-quality metrics over one set of atoms.

    Entries that are undefined for the prediction kind (e.g. angles for a
    scalar-magnitude model, Pearson for constant predictions) are NaN.
    """

    tensor_mae: float
    magnitude_mae: float
    angle_mean: float
    pearson_magnitude: float
    relative_tensor_error: float
    n_atoms: int
    n_angle_skipped: int = 0

    def as_dict(self) -> dict[str, float]:
        return {f.name: getattr(self, f.name) for f in fields(self)}


def _pearson(a: np.ndarray, b: np.ndarray) -> float:
    if len(a) < 2:
        return float("nan")
    sa, sb = np.std(a), np.std(b)
    if sa < 1e-300 or sb < 1e-300:
        return float("nan")
    return float(np.corrcoef(a, b)[0, 1])


def metric_suite(
    predictions: np.ndarray,
    targets: np.ndarray,
    mask: np.ndarray | None = None,
) -> MetricsReport:
    """Tensor / magnitude / angle errors, magnitude Pearson, relative error.

    ``predictions`` may be (N, 3) vectors or (N,) scalar magnitudes; scalar
    predictions are scored against target magnitudes and leave the vector
    metrics NaN.  Angle and relative-error means skip pairs involving a
    vector shorter than EPS_ANGLE (counted in ``n_angle_skipped``).
    """
    preds = np.asarray(predictions, dtype=float)
    targs = np.asarray(targets, dtype=float)
    if mask is not None:
        mask = np.asarray(mask, dtype=bool)
        preds = preds[mask]
        targs = targs[mask]
    if len(preds) != len(targs):
        raise ValueError(f"prediction/target count mismatch: {len(preds)} vs {len(targs)}")
    if len(preds) == 0:
        raise ValueError("no atoms selected for metrics")

    target_mags = np.linalg.norm(targs, axis=-1) if targs.ndim == 2 else np.abs(targs)

    if preds.ndim == 1:
        pred_mags = np.abs(preds)
        return MetricsReport(
            tensor_mae=float("nan"),
            magnitude_mae=float(np.mean(np.abs(preds - target_mags))),
            angle_mean=float("nan"),
            pearson_magnitude=_pearson(pred_mags, target_mags),
            relative_tensor_error=float("nan"),
            n_atoms=len(preds),
        )

    if preds.shape != targs.shape:
        raise ValueError(f"shape mismatch: {preds.shape} vs {targs.shape}")
    diff_norms = np.linalg.norm(preds - targs, axis=1)
    pred_mags = np.linalg.norm(preds, axis=1)

    defined = (pred_mags > EPS_ANGLE) & (target_mags > EPS_ANGLE)
    if defined.any():
        cosines = np.einsum("ij,ij->i", preds[defined], targs[defined])
        cosines /= pred_mags[defined] * target_mags[defined]
        angle_mean = float(np.degrees(np.arccos(np.clip(cosines, -1.0, 1.0))).mean())
    else:
        angle_mean = float("nan")

    nonzero_t = target_mags > EPS_ANGLE
    rel = (
        float(np.mean(diff_norms[nonzero_t] / target_mags[nonzero_t]))
        if nonzero_t.any()
        else float("nan")
    )
    return MetricsReport(
        tensor_mae=float(diff_norms.mean()),
        magnitude_mae=float(np.mean(np.abs(pred_mags - target_mags))),
        angle_mean=angle_mean,
        pearson_magnitude=_pearson(pred_mags, target_mags),
        relative_tensor_error=rel,
        n_atoms=len(preds),
        n_angle_skipped=int(len(preds) - defined.sum()),
    )


def naive_baselines(
    targets: np.ndarray,
    kind: str,
    seed: int = 0,
    reference_magnitude: float | None = None,
) -> MetricsReport:
    """Score a floor predictor against the given target vectors.

    * ``mean_magnitude`` predicts a constant magnitude (the training-set
      mean when supplied, else the mean of ``targets``): magnitude metric.
    * ``random_direction`` predicts uniform random unit vectors: angle
      metric.
    * ``zero`` predicts all zeros: tensor metric equals mean |v_t|.
    """
    targs = np.asarray(targets, dtype=float)
    if targs.ndim != 2 or targs.shape[1] != 3 or len(targs) == 0:
        raise ValueError("targets must be a nonempty (N, 3) array")
    if kind == "mean_magnitude":
        mags = np.linalg.norm(targs, axis=1)
        ref = float(mags.mean()) if reference_magnitude is None else reference_magnitude
        return metric_suite(np.full(len(targs), ref), targs)
    if kind == "random_direction":
        rng = np.random.default_rng(seed)
        dirs = rng.normal(size=targs.shape)
        dirs /= np.maximum(np.linalg.norm(dirs, axis=1, keepdims=True), 1e-300)
        return metric_suite(dirs, targs)
    if kind == "zero":
        return metric_suite(np.zeros_like(targs), targs)
    raise ValueError(f"unknown baseline kind {kind!r}")


# ---------------------------------------------------------------------------
# Training


@dataclass
class TrainConfig:
    """Optimization settings; delta is in task units (meV/A or A).

    ``learning_rate`` may be zero, which turns training into a no-op pass
    (useful as a determinism check)."""

    task: str = "forces"
    lmax: int = 1
    learning_rate: float = 0.1
    huber_delta: float = 10.0
    total_batches: int = 5000
    seed: int = 0
    optimizer: str = "sgd"
    val_every: int = 250

    def __post_init__(self) -> None:
        if self.task not in ("forces", "refinement", "gravity"):
            raise ValueError(f"unknown task {self.task!r}")
        if self.lmax not in (0, 1, 2):
            raise ValueError("lmax must be 0, 1 or 2")
        if self.learning_rate < 0:
            raise ValueError("learning_rate must be >= 0")
        if self.huber_delta <= 0:
            raise ValueError("huber_delta must be > 0")
        if self.total_batches < 1:
            raise ValueError("total_batches must be >= 1")
        if self.optimizer not in ("sgd", "adam"):
            raise ValueError(f"unknown optimizer {self.optimizer!r}")
        if self.val_every < 1:
            raise ValueError("val_every must be >= 1")


@dataclass
class HistoryRow:
    batch: int
    split: str
    loss: float
    magnitude_mae: float
    angle_mean: float
    tensor_mae: float
    pearson: float
    rel_tensor_err: float

    @classmethod
    def from_metrics(
        cls, batch: int, split: str, loss: float, m: MetricsReport
    ) -> "HistoryRow":
        return cls(
            batch,
            split,
            loss,
            m.magnitude_mae,
            m.angle_mean,
            m.tensor_mae,
            m.pearson_magnitude,
            m.relative_tensor_error,
        )


def history_to_csv(rows: Sequence[HistoryRow]) -> str:
    lines = [",".join(HISTORY_COLUMNS)]
    for r in rows:
        lines.append(
            f"{r.batch},{r.split},{r.loss:.17g},{r.magnitude_mae:.17g},"
            f"{r.angle_mean:.17g},{r.tensor_mae:.17g},{r.pearson:.17g},"
            f"{r.rel_tensor_err:.17g}"
        )
    return "\n".join(lines) + "\n"


@dataclass
class TrainResult:
    model: Model
    best_params: dict[str, torch.Tensor]
    best_val_loss: float
    best_batch: int
    history: list[HistoryRow]
    config: TrainConfig
    optimizer_state: dict[str, np.ndarray] = field(default_factory=dict)

    def best_model(self) -> Model:
        model = build_model(self.model.config)
        model.load_params(self.best_params)
        return model


def _masked_targets(system: AtomSystem, lmax: int) -> np.ndarray:
    if system.targets is None:
        raise ValueError(f"system {system.identifier!r} has no targets")
    targs = system.targets[system.predict_mask]
    if len(targs) == 0:
        raise ValueError(f"system {system.identifier!r} has no masked atoms")
    if lmax == 0:
        return np.linalg.norm(targs, axis=1)
    return targs


def suggest_output_scale(systems: Sequence[AtomSystem]) -> float:
    """Mean masked target magnitude: a sane fixed output gain for a model."""
    mags = np.concatenate(
        [np.linalg.norm(s.targets[s.predict_mask], axis=1) for s in systems]
    )
    scale = float(mags.mean())
    return scale if scale > 0 else 1.0


class _Optimizer:
    def __init__(self, config: TrainConfig, params: dict[str, torch.Tensor]):
        self.lr = config.learning_rate
        self.adam = config.optimizer == "adam"
        self.beta1, self.beta2, self.eps = 0.9, 0.999, 1e-8
        self.t = 0
        self.m = {k: torch.zeros_like(v) for k, v in params.items()} if self.adam else {}
        self.v = {k: torch.zeros_like(v) for k, v in params.items()} if self.adam else {}

    @torch.no_grad()
    def step(self, params: dict[str, torch.Tensor]) -> None:
        self.t += 1
        for k, p in params.items():
            g = p.grad
            if g is None:
                continue
            if self.adam:
                self.m[k].mul_(self.beta1).add_(g, alpha=1 - self.beta1)
                self.v[k].mul_(self.beta2).addcmul_(g, g, value=1 - self.beta2)
                mhat = self.m[k] / (1 - self.beta1**self.t)
                vhat = self.v[k] / (1 - self.beta2**self.t)
                p.sub_(self.lr * mhat / (torch.sqrt(vhat) + self.eps))
            else:
                p.sub_(g, alpha=self.lr)
            p.grad = None

    def state_arrays(self) -> dict[str, np.ndarray]:
        out = {"opt.t": np.array([float(self.t)])}
        for k, v in self.m.items():
            out[f"opt.m.{k}"] = v.numpy().copy()
        for k, v in self.v.items():
            out[f"opt.v.{k}"] = v.numpy().copy()
        return out

    def load_state_arrays(self, arrays: dict[str, np.ndarray]) -> None:
        if "opt.t" in arrays:
            self.t = int(arrays["opt.t"][0])
        for k in self.m:
            if f"opt.m.{k}" in arrays:
                self.m[k] = torch.as_tensor(arrays[f"opt.m.{k}"], dtype=torch.float64)
                self.v[k] = torch.as_tensor(arrays[f"opt.v.{k}"], dtype=torch.float64)


def evaluate(
    model: Model,
    preps: Sequence[PreparedSystem],
    delta: float,
) -> tuple[float, MetricsReport]:
    """Pooled loss and metrics over the masked atoms of several systems."""
    preds_all = []
    targs_all = []
    with torch.no_grad():
        for prep in preps:
            preds = forward_torch(model, prep).numpy()
            mask = prep.system.predict_mask
            preds_all.append(preds[mask])
            targs_all.append(_masked_targets(prep.system, model.config.lmax))
    preds = np.concatenate(preds_all)
    targs = np.concatenate(targs_all)
    loss = huber_tensor_loss(preds, targs, delta)
    return loss, metric_suite(preds, targs)


def _batch_schedule(rng: np.random.Generator, n_systems: int, start: int, total: int):
    """Yield system indices batch by batch, reshuffling each epoch.

    Epochs before ``start`` are replayed (draws only) so a resumed run
    continues the same stream.
    """
    produced = 0
    while produced < start + total:
        perm = rng.permutation(n_systems)
        for idx in perm:
            if produced >= start + total:
                return
            if produced >= start:
                yield int(idx)
            produced += 1


def train(
    model: Model,
    train_systems: Sequence[AtomSystem],
    val_systems: Sequence[AtomSystem],
    config: TrainConfig,
    start_batch: int = 0,
    optimizer_state: dict[str, np.ndarray] | None = None,
) -> TrainResult:
    """Train on one system per batch with periodic pooled validation.

    The best-validation parameter snapshot is retained alongside the final
    parameters.  A non-finite loss aborts with DivergenceError.  All
    randomness (batch order) derives from config.seed, so identical inputs
    reproduce identical histories; resuming from ``start_batch`` with the
    saved optimizer state continues the original trajectory exactly.
    """
    if len(train_systems) == 0:
        raise ValueError("empty training set")
    if model.config.lmax != config.lmax:
        raise ValueError("model lmax does not match training config")
    preps = [prepare_system(model.config, s) for s in train_systems]
    val_preps = [prepare_system(model.config, s) for s in val_systems]
    targets = [_masked_targets(s, config.lmax) for s in train_systems]

    model.set_requires_grad(True)
    optimizer = _Optimizer(config, model.params)
    if optimizer_state:
        optimizer.load_state_arrays(optimizer_state)
    order_rng = np.random.default_rng([config.seed, 101])
    schedule = _batch_schedule(order_rng, len(preps), start_batch, config.total_batches)

    history: list[HistoryRow] = []
    best_loss = math.inf
    best_params = model.clone_params()
    best_batch = -1
    try:
        for b, sys_idx in zip(range(start_batch, start_batch + config.total_batches), schedule):
            prep = preps[sys_idx]
            mask = torch.as_tensor(prep.system.predict_mask)
            preds = forward_torch(model, prep)[mask]
            targ = torch.as_tensor(targets[sys_idx], dtype=torch.float64)
            loss = huber_tensor_loss(preds, targ, config.huber_delta)
            loss_val = float(loss.detach())
            if not math.isfinite(loss_val):
                raise DivergenceError(f"non-finite loss at batch {b}")
            loss.backward()
            optimizer.step(model.params)
            history.append(
                HistoryRow.from_metrics(
                    b,
                    "train",
                    loss_val,
                    metric_suite(preds.detach().numpy(), targets[sys_idx]),
                )
            )
            last = b == start_batch + config.total_batches - 1
            if val_preps and ((b + 1) % config.val_every == 0 or last):
                val_loss, val_metrics = evaluate(model, val_preps, config.huber_delta)
                if not math.isfinite(val_loss):
                    raise DivergenceError(f"non-finite validation loss at batch {b}")
                history.append(HistoryRow.from_metrics(b, "val", val_loss, val_metrics))
                if val_loss < best_loss:
                    best_loss = val_loss
                    best_params = model.clone_params()
                    best_batch = b
    finally:
        model.set_requires_grad(False)
    if not val_preps:
        best_params = model.clone_params()
        best_loss = float("nan")
    return TrainResult(
        model, best_params, best_loss, best_batch, history, config,
        optimizer.state_arrays(),
    )


# ---------------------------------------------------------------------------
# Gradients


def batch_gradients(
    model: Model, system: AtomSystem, delta: float
) -> tuple[float, dict[str, np.ndarray]]:
    """Loss and exact reverse-mode gradients for one system batch."""
    prep = prepare_system(model.config, system)
    model.set_requires_grad(True)
    try:
        mask = torch.as_tensor(system.predict_mask)
        preds = forward_torch(model, prep)[mask]
        targ = torch.as_tensor(_masked_targets(system, model.config.lmax), dtype=torch.float64)
        loss = huber_tensor_loss(preds, targ, delta)
        if not math.isfinite(float(loss.detach())):
            raise DivergenceError("non-finite loss")
        loss.backward()
        grads = {}
        for k, p in model.params.items():
            grads[k] = (
                np.zeros(tuple(p.shape)) if p.grad is None else p.grad.numpy().copy()
            )
            p.grad = None
    finally:
        model.set_requires_grad(False)
    return float(loss.detach()), grads


@dataclass
class GradientCheckReport:
    max_rel_error: float
    n_sampled: int
    by_kind: dict[str, float] = field(default_factory=dict)


def gradient_check(
    model: Model,
    system: AtomSystem,
    delta: float,
    n_per_kind: int = 200,
    step: float = 1e-5,
    seed: int = 0,
) -> GradientCheckReport:
    """Compare analytic gradients with central finite differences.

    Samples up to ``n_per_kind`` parameters from every parameter-carrying
    layer kind.  The relative error denominator is floored at
    1e-6 * (1 + |loss|) so near-zero gradient pairs do not inflate the
    ratio beyond finite-difference resolution.
    """
    loss0, grads = batch_gradients(model, system, delta)
    prep = prepare_system(model.config, system)
    mask = torch.as_tensor(system.predict_mask)
    targ = torch.as_tensor(_masked_targets(system, model.config.lmax), dtype=torch.float64)

    def loss_at() -> float:
        with torch.no_grad():
            preds = forward_torch(model, prep)[mask]
            return float(huber_tensor_loss(preds, targ, delta))

    rng = np.random.default_rng(seed)
    floor = 1e-6 * (1.0 + abs(loss0))
    by_kind: dict[str, float] = {}
    n_sampled = 0
    kinds = sorted(set(model.param_kinds.values()))
    for kind in kinds:
        names = [k for k, kk in model.param_kinds.items() if kk == kind]
        entries = [(name, i) for name in names for i in range(model.params[name].numel())]
        take = min(n_per_kind, len(entries))
        chosen = rng.choice(len(entries), size=take, replace=False)
        worst = 0.0
        for ci in chosen:
            name, flat_idx = entries[int(ci)]
            p = model.params[name]
            with torch.no_grad():
                flat = p.view(-1)
                orig = float(flat[flat_idx])
                flat[flat_idx] = orig + step
                up = loss_at()
                flat[flat_idx] = orig - step
                down = loss_at()
                flat[flat_idx] = orig
            fd = (up - down) / (2.0 * step)
            an = float(grads[name].reshape(-1)[flat_idx])
            rel = abs(an - fd) / max(abs(an), abs(fd), floor)
            worst = max(worst, rel)
        by_kind[kind] = worst
        n_sampled += take
    return GradientCheckReport(max(by_kind.values()), n_sampled, by_kind)
