"""Training loop, optimizer, learning-rate schedule and evaluation metrics."""

from dataclasses import dataclass, field
import logging
import math

import numpy as np
from threadpoolctl import threadpool_limits

from . import preprocess as pp
from .errors import DegenerateInput, InvalidConfig, InvalidShape

log = logging.getLogger(__name__)

IMPROVEMENT = 1e-4
PATIENCE = 5
LR_DECAY = 0.1


@dataclass
class LossResult:
    loss: float
    mse: float
    penalty: float
    grads: dict
    estimates: np.ndarray


def _penalized(name):
    return name.endswith(".weight")


def loss_and_grad(net, x, targets, l2=1e-5, update_running=False):
    """Batch objective and its gradient with respect to every parameter.

    The objective is the mean squared error over batch items and targets
    plus ``l2`` times the sum of squared convolution and dense weights.
    Normalization uses batch statistics; running statistics change only
    when ``update_running`` is set.
    """
    targets = np.asarray(targets, dtype=np.float64)
    x = np.asarray(x)
    if x.ndim == 2:
        x = x[:, None, :]
    if targets.ndim == 1:
        targets = targets[:, None]
    if len(x) == 0 or targets.shape != (len(x), net.config.n_targets):
        raise InvalidShape(f"targets {targets.shape} do not match batch of {len(x)} x {net.config.n_targets}")
    if not np.all(np.isfinite(targets)):
        raise InvalidShape("targets must be finite")
    was_training = net.training
    net.train()
    try:
        est = net.train_forward(x, update_running=update_running).astype(np.float64)
        diff = est - targets
        mse = float(np.mean(diff * diff))
        grads = net.backward(2.0 * diff / diff.size)
    finally:
        net.release()
        net.train(was_training)
    penalty = 0.0
    params = net.named_parameters()
    out = {}
    for name, g in grads.items():
        g = np.asarray(g, dtype=np.float64)
        if l2 and _penalized(name):
            w = params[name].astype(np.float64)
            penalty += l2 * float(np.sum(w * w))
            g = g + 2.0 * l2 * w
        out[name] = g
    return LossResult(mse + penalty, mse, penalty, out, est)


class Adam:
    """Bias-corrected Adam with per-parameter first and second moments."""

    def __init__(self, lr=1e-4, beta1=0.9, beta2=0.999, eps=1e-8):
        self.lr, self.beta1, self.beta2, self.eps = lr, beta1, beta2, eps
        self.m, self.v = {}, {}
        self.t = 0

    def step(self, params, grads):
        self.t += 1
        bc1 = 1.0 - self.beta1 ** self.t
        bc2 = 1.0 - self.beta2 ** self.t
        for name, p in params.items():
            g = np.asarray(grads[name], dtype=np.float64)
            if name not in self.m:
                self.m[name] = np.zeros(p.shape)
                self.v[name] = np.zeros(p.shape)
            m, v = self.m[name], self.v[name]
            m *= self.beta1
            m += (1.0 - self.beta1) * g
            v *= self.beta2
            v += (1.0 - self.beta2) * (g * g)
            update = self.lr * (m / bc1) / (np.sqrt(v / bc2) + self.eps)
            p[...] = p - update


@dataclass
class EpochLog:
    epoch: int
    lr: float
    train_mse: float
    val_rmse: float
    val_rho: list


@dataclass
class TrainState:
    lr: float = 1e-4
    epoch: int = 0
    since_improvement: int = 0
    best: float = math.inf
    adam: Adam = None
    log: list = field(default_factory=list)

    def __post_init__(self):
        if self.adam is None:
            self.adam = Adam(self.lr)


def adam_step(state, net, grads):
    """One optimizer update at the state's current learning rate."""
    state.adam.lr = state.lr
    state.adam.step(net.named_parameters(), grads)
    return state


def schedule_update(state, val_rmse):
    """Track the best validation loss and decay the learning rate on plateaus.

    A drop of at least 1e-4 below the best so far (equality included) is an
    improvement.  After 5 consecutive epochs without one the learning rate
    is multiplied by 0.1 and the count restarts.
    """
    if state.best - val_rmse >= IMPROVEMENT - 1e-12:
        state.best = val_rmse
        state.since_improvement = 0
    else:
        state.since_improvement += 1
        if state.since_improvement >= PATIENCE:
            state.lr *= LR_DECAY
            state.since_improvement = 0
    return state


@dataclass
class FitConfig:
    epochs: int = 30
    batch: int = 60
    seed: int = 0
    augment_ipa: bool = True
    lr: float = 1e-4
    l2: float = 1e-5
    target_names: tuple = ("SEGSNR",)
    threads: int = 1


def _inputs(net, records, signs=None):
    x = np.stack([r.samples for r in records]).astype(net.dtype, copy=False)
    if signs is not None:
        x = x * np.asarray(signs, dtype=net.dtype)[:, None]
    return np.repeat(x[:, None, :], net.config.input_channels, axis=1)


def _targets(records, names):
    return np.array([[r.targets[n] for n in names] for r in records], dtype=np.float64)


def predict(net, records, chunk=16):
    """Eval-mode estimates (unit scale) for a list of segment records."""
    net.eval()
    out = []
    for i in range(0, len(records), chunk):
        out.append(np.atleast_2d(net.forward(_inputs(net, records[i:i + chunk]))))
    return np.concatenate(out) if out else np.zeros((0, net.config.n_targets))


def batches_per_epoch(n_train, batch, augment_ipa):
    n = n_train * (2 if augment_ipa else 1)
    return sum(1 for s in range(0, n, batch) if n - s >= 2)


def fit(net, train, val, config=None, state=None, on_epoch=None):
    """Train ``net`` in place and return ``(net, state)``.

    Batch order comes from a generator seeded by ``(seed, epoch)``, so two
    runs with one seed see identical batches.  With IPA every training
    segment also appears negated.  After each epoch the validation RMSE
    and per-segment correlation are logged and the schedule updated.
    ``on_epoch(state)`` may return True to stop early.  The final epoch's
    weights are returned.
    """
    config = config or FitConfig()
    if not train or not val:
        raise InvalidConfig("fit needs non-empty training and validation splits")
    if len(config.target_names) != net.config.n_targets:
        raise InvalidConfig(f"{len(config.target_names)} targets for a net with N_T={net.config.n_targets}")
    state = state or TrainState(lr=config.lr)
    items = [(i, 1.0) for i in range(len(train))]
    if config.augment_ipa:
        items += [(i, -1.0) for i in range(len(train))]
    t_all = _targets(train, config.target_names)
    t_val = _targets(val, config.target_names)
    with threadpool_limits(limits=config.threads):
        while state.epoch < config.epochs:
            rng = np.random.default_rng([config.seed, state.epoch])
            order = rng.permutation(len(items))
            sq, count = 0.0, 0
            for start in range(0, len(order), config.batch):
                chosen = [items[k] for k in order[start:start + config.batch]]
                if len(chosen) < 2:
                    continue
                idx = [i for i, _ in chosen]
                x = _inputs(net, [train[i] for i in idx], [s for _, s in chosen])
                res = loss_and_grad(net, x, t_all[idx], config.l2, update_running=True)
                adam_step(state, net, res.grads)
                sq += res.mse * len(idx)
                count += len(idx)
            est = predict(net, val)
            err = est - t_val
            val_rmse = float(np.sqrt(np.mean(err * err)))
            rho = [_pearson_or_nan(est[:, k], t_val[:, k]) for k in range(t_val.shape[1])]
            entry = EpochLog(state.epoch + 1, state.lr, sq / max(count, 1), val_rmse, rho)
            schedule_update(state, val_rmse)
            state.log.append(entry)
            state.epoch += 1
            log.info("epoch %d lr %.1e train_mse %.5f val_rmse %.5f rho %s",
                     entry.epoch, entry.lr, entry.train_mse, entry.val_rmse,
                     " ".join(f"{r:.4f}" for r in rho))
            if on_epoch is not None and on_epoch(state):
                break
    net.eval()
    return net, state


# --------------------------------------------------------------------------
# Metrics
# --------------------------------------------------------------------------

def pearson(a, b):
    a = np.asarray(a, dtype=np.float64)
    b = np.asarray(b, dtype=np.float64)
    if a.shape != b.shape or a.size < 2:
        raise DegenerateInput("correlation needs two equal-length vectors of >= 2 points")
    da, db = a - a.mean(), b - b.mean()
    den = math.sqrt(float(np.dot(da, da)) * float(np.dot(db, db)))
    if den == 0.0:
        raise DegenerateInput("correlation undefined for a constant vector")
    return float(np.clip(np.dot(da, db) / den, -1.0, 1.0))


def _pearson_or_nan(a, b):
    try:
        return pearson(a, b)
    except DegenerateInput:
        return float("nan")


@dataclass
class MetricReport:
    names: list
    rho: list
    rmse: list
    nrmse: list
    condition_rho: list = None
    condition_rmse: list = None
    condition_nrmse: list = None


def _condition_means(values, conditions):
    ids = sorted(set(conditions))
    conditions = np.asarray(conditions)
    return np.stack([values[conditions == c].mean(axis=0) for c in ids])


def metrics(estimates, targets, specs=None, conditions=None, strict=True):
    """Per-target Pearson correlation, RMSE and RMSE as percent of full scale.

    ``specs`` supplies full-scale widths (default: 2, the unit scale).
    With ``conditions``, estimates and targets are first averaged within
    each condition id for the per-condition figures.  An undefined
    correlation raises :class:`DegenerateInput`, or is reported as NaN
    when ``strict`` is false.
    """
    est = np.asarray(estimates, dtype=np.float64)
    tgt = np.asarray(targets, dtype=np.float64)
    if est.ndim == 1:
        est, tgt = est[:, None], tgt[:, None]
    if est.shape != tgt.shape or len(est) < 2:
        raise InvalidShape("estimates and targets need equal shapes and >= 2 points")
    k = est.shape[1]
    specs = list(specs) if specs is not None else [None] * k
    widths = [s.full_scale if s is not None else 2.0 for s in specs]
    names = [s.name if s is not None else f"target{i}" for i, s in enumerate(specs)]

    corr = pearson if strict else _pearson_or_nan

    def summary(e, t):
        rho = [corr(e[:, i], t[:, i]) for i in range(k)]
        rmse = [float(np.sqrt(np.mean((e[:, i] - t[:, i]) ** 2))) for i in range(k)]
        return rho, rmse, [100.0 * r / w for r, w in zip(rmse, widths)]

    report = MetricReport(names, *summary(est, tgt))
    if conditions is not None:
        if len(conditions) != len(est):
            raise InvalidShape("one condition id per estimate is required")
        ce, ct = _condition_means(est, conditions), _condition_means(tgt, conditions)
        report.condition_rho, report.condition_rmse, report.condition_nrmse = summary(ce, ct)
    return report


def to_native(values, names):
    """Map unit-scale columns back to each target's native range."""
    values = np.atleast_2d(np.asarray(values, dtype=np.float64))
    return np.stack([pp.TARGETS[n].from_unit(values[:, i]) for i, n in enumerate(names)], axis=1)
