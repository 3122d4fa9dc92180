"""Confidence-thresholded self-training (FixMatch-style) with the debiased
pseudo-labeling step, the DA / LA baselines, and the transductive zero-shot
bootstrap from a frozen, deliberately biased teacher."""
from __future__ import annotations

import json
import math
import time
from dataclasses import asdict, dataclass, field
from pathlib import Path

import numpy as np

from . import debias as dpl
from .data import Augmentor, Dataset, augment_strong, augment_weak, shift_domain
from .metrics import balanced_accuracy, accuracy, confusion, imbalance_ratio, write_confusion, write_rows
from .nn import (EmaTeacher, MlpParams, OptimState, backward, cosine_lr, ema_update, forward, forward_cache,
                 init_mlp, save_checkpoint, sgd_nesterov_step)
from .numkit import Stream, argmax_rows, cross_entropy_rows, make_rng, softmax_rows

METHODS = ("fixmatch", "debiaspl", "fixmatch+da", "fixmatch+la")


class DivergedError(FloatingPointError):
    def __init__(self, step: int, what: str = "loss"):
        super().__init__(f"diverged: non-finite {what} at step {step}")
        self.step = step


@dataclass
class TrainConfig:
    method: str = "debiaspl"
    batch_size: int = 16
    mu: int = 7
    tau: float = 0.95
    lambda_u: float = 1.0
    total_steps: int = 3000
    base_lr: float = 0.03
    nesterov_momentum: float = 0.9
    weight_decay: float = 5e-4
    ema_decay: float = 0.999
    eval_every: int = 100
    seed: int = 0
    hidden: tuple = (64, 64)
    # debiasing: lam drives both coefficients unless they are given explicitly
    lam: float = 0.5
    lambda_debias: float | None = None
    lambda_margin: float | None = None
    m: float = 0.999
    pseudo_from_ema: bool = False
    la_tau: float = 1.0
    da_target: str = "labeled"
    clip_fallback: bool = False

    def __post_init__(self):
        self.hidden = tuple(int(h) for h in self.hidden)
        errs = []
        if self.method not in METHODS:
            errs.append(f"method must be one of {METHODS}, got {self.method!r}")
        if self.mu < 1:
            errs.append("mu must be >= 1")
        if not 0.0 < self.tau <= 1.0:
            errs.append("tau must lie in (0, 1]")
        if self.lambda_u < 0:
            errs.append("lambda_u must be >= 0")
        if self.batch_size < 1 or self.total_steps < 0 or self.eval_every < 1:
            errs.append("batch_size and eval_every must be >= 1, total_steps >= 0")
        if self.da_target not in ("labeled", "uniform"):
            errs.append("da_target must be 'labeled' or 'uniform'")
        if errs:
            raise ValueError("; ".join(errs))

    @property
    def debias_coefficients(self) -> tuple[float, float]:
        """(lambda_debias, lambda_margin) actually used; both zero for non-debiaspl methods."""
        if self.method != "debiaspl":
            return 0.0, 0.0
        ld = self.lam if self.lambda_debias is None else self.lambda_debias
        lm = self.lam if self.lambda_margin is None else self.lambda_margin
        return ld, lm


@dataclass
class ZslConfig:
    tau_clip: float = 0.95
    source_gamma: float = 20.0
    source_n_max: int = 2000
    shift_angle: float = 0.3
    shift_scale: float = 1.5
    teacher_steps: int = 600
    teacher_lr: float = 0.03
    min_teacher_imbalance: float = 2.0
    # softmax temperature of the frozen teacher; below 1 it sharpens the
    # probabilities so more target rows clear tau_clip, tail classes included
    teacher_temperature: float = 0.5
    # extra weight on log(source class prior) added to the teacher's logits,
    # emulating a frequency bias inherited from pre-training data
    prior_bias: float = 4.5
    # "all": every target row feeds the unlabeled stream, accepted ones included;
    # "rest": only rows the teacher did not accept
    unlabeled_pool: str = "all"

    def __post_init__(self):
        if not 0.0 < self.tau_clip:
            raise ValueError("tau_clip must be positive")
        if self.teacher_temperature <= 0:
            raise ValueError("teacher_temperature must be positive")
        if self.unlabeled_pool not in ("all", "rest"):
            raise ValueError("unlabeled_pool must be 'all' or 'rest'")
        if self.source_gamma < 1 or self.teacher_steps < 1:
            raise ValueError("source_gamma must be >= 1 and teacher_steps >= 1")


@dataclass
class RunMetrics:
    rows: list = field(default_factory=list)
    p_hat_trace: list = field(default_factory=list)
    epoch_hist_accepted: list = field(default_factory=list)
    epoch_hist_all: list = field(default_factory=list)

    HEADER = ("step", "lr", "loss_s", "loss_u", "mask_rate", "train_acc", "test_acc",
              "balanced_test_acc", "imbalance_ratio")

    def write_csv(self, path) -> None:
        write_rows(path, self.HEADER, [[r[k] for k in self.HEADER] for r in self.rows])

    def write_p_hat(self, path) -> None:
        dpl.write_p_hat_trajectory(self.p_hat_trace, path)

    def write_epoch_hist(self, path) -> None:
        C = len(self.epoch_hist_all[0]) if self.epoch_hist_all else 0
        rows = []
        for e, (a, b) in enumerate(zip(self.epoch_hist_accepted, self.epoch_hist_all)):
            rows.append([e, "accepted"] + a.tolist())
            rows.append([e, "all"] + b.tolist())
        write_rows(path, ["epoch", "kind"] + [f"c{j}" for j in range(C)], rows)

    def epoch_imbalance(self, kind: str = "all") -> np.ndarray:
        hists = self.epoch_hist_all if kind == "all" else self.epoch_hist_accepted
        return np.array([imbalance_ratio(h) for h in hists])


class Cycler:
    """Endless minibatches over ``indices``, reshuffled at every pass."""

    def __init__(self, indices, rng: np.random.Generator):
        self.indices = np.asarray(indices)
        if self.indices.size == 0:
            raise ValueError("cannot draw batches from an empty index set")
        self.rng = rng
        self.epoch = 0
        self._perm = rng.permutation(self.indices)
        self._pos = 0

    def next(self, size: int) -> np.ndarray:
        out = []
        need = size
        while need:
            if self._pos == self._perm.size:
                self._perm = self.rng.permutation(self.indices)
                self._pos = 0
                self.epoch += 1
            take = min(need, self._perm.size - self._pos)
            out.append(self._perm[self._pos:self._pos + take])
            self._pos += take
            need -= take
        return np.concatenate(out)


@dataclass
class RunState:
    student: MlpParams
    opt: OptimState
    ema: EmaTeacher
    debias: dpl.DebiasState
    step: int = 0
    metrics: RunMetrics = field(default_factory=RunMetrics)


def init_run_state(cfg: TrainConfig, dim: int, num_classes: int) -> RunState:
    # zero output layer: the untrained student predicts exactly uniform probabilities
    student = init_mlp((dim, *cfg.hidden, num_classes), make_rng(cfg.seed, Stream.INIT), output_scale=0.0)
    ld, lm = cfg.debias_coefficients
    return RunState(
        student=student,
        opt=OptimState.for_params(student, momentum=cfg.nesterov_momentum,
                                  weight_decay=cfg.weight_decay, base_lr=cfg.base_lr),
        ema=EmaTeacher.from_student(student, cfg.ema_decay),
        debias=dpl.DebiasState.uniform(num_classes, cfg.m, lambda_debias=ld, lambda_margin=lm),
    )


def supervised_loss(params: MlpParams, x, y) -> tuple[float, MlpParams]:
    """Mean cross-entropy of the (already weakly augmented) labeled batch."""
    logits, cache = forward_cache(params, x)
    losses, g = cross_entropy_rows(logits, y)
    n = logits.shape[0]
    return float(losses.mean()), backward(params, x, g / n, cache)


@dataclass
class UnsupTerms:
    loss: float
    grad_strong: np.ndarray
    mask_rate: float
    pseudo_hist: np.ndarray
    all_hist: np.ndarray
    state: dpl.DebiasState


def unsupervised_terms(weak_logits, strong_logits, state: dpl.DebiasState, cfg: TrainConfig,
                       prior=None, fallback=None) -> UnsupTerms:
    """Unsupervised loss and its gradient on the strong-view logits.

    Order per batch: pseudo-label the weak view (debiased for ``debiaspl``),
    fold the batch probabilities into ``p_hat``, then score the strong view
    with margins taken from the updated ``p_hat``. The masked per-row losses
    are averaged over the whole batch width.

    ``fallback``, if given, is ``(labels, ok)`` for rows a frozen teacher is
    confident about; rejected rows with ``ok`` take the teacher's label.
    """
    n, C = weak_logits.shape
    if cfg.method == "fixmatch+da":
        raw = softmax_rows(weak_logits)
        target = np.full(C, 1.0 / C) if prior is None or cfg.da_target == "uniform" else prior
        probs = dpl.distribution_alignment(raw, target, state.p_hat)
        marginal_src = raw
    elif cfg.method == "fixmatch+la":
        probs = softmax_rows(dpl.logit_adjust(weak_logits, prior, cfg.la_tau))
        marginal_src = probs
    else:
        probs = dpl.debiased_probs(weak_logits, state)
        marginal_src = probs
    labels, mask = dpl.pseudo_label(probs, cfg.tau)
    all_hist = np.bincount(labels, minlength=C)
    if fallback is not None:
        fl, fok = fallback
        use = ~mask & fok
        labels = np.where(use, fl, labels)
        mask = mask | use
    new_state = dpl.update_p_hat(state, marginal_src)
    if cfg.method == "debiaspl":
        margins = dpl.adaptive_margins(new_state)
    else:
        margins = dpl.Margins(np.zeros(C))
    losses, grad = dpl.marginal_loss(strong_logits, labels, margins)
    w = mask.astype(np.float64) / n
    return UnsupTerms(
        loss=float((losses * w).sum()),
        grad_strong=grad * w[:, None],
        mask_rate=float(mask.mean()),
        pseudo_hist=np.bincount(labels[mask], minlength=C),
        all_hist=all_hist,
        state=new_state,
    )


def unsupervised_loss(params: MlpParams, u_weak, u_strong, state: dpl.DebiasState, cfg: TrainConfig,
                      prior=None, teacher_params: MlpParams | None = None):
    """Parameter-level unsupervised loss: ``(loss, grads, mask_rate, pseudo_hist, new_state)``.

    The weak view is a constant target (no gradient flows through it).
    """
    weak_logits = forward(teacher_params or params, u_weak)
    strong_logits, cache = forward_cache(params, u_strong)
    t = unsupervised_terms(weak_logits, strong_logits, state, cfg, prior)
    return t.loss, backward(params, u_strong, t.grad_strong, cache), t.mask_rate, t.pseudo_hist, t.state


@dataclass
class _Batches:
    x: np.ndarray
    y: np.ndarray
    u_weak: np.ndarray
    u_strong: np.ndarray
    u_idx: np.ndarray


def train_step(rs: RunState, batch: _Batches, cfg: TrainConfig, prior=None, fallback=None) -> dict:
    """One optimisation step; mutates ``rs`` and returns per-step scalars."""
    K = cfg.total_steps
    if rs.step >= K:
        raise ValueError(f"step {rs.step} is past total_steps {K}")
    B = batch.x.shape[0]
    stacked = np.vstack([batch.x, batch.u_strong])
    logits, cache = forward_cache(rs.student, stacked)
    l_x, l_us = logits[:B], logits[B:]
    l_uw = forward(rs.ema.shadow if cfg.pseudo_from_ema else rs.student, batch.u_weak)
    if not (np.isfinite(logits).all() and np.isfinite(l_uw).all()):
        raise DivergedError(rs.step, "logits")

    sup_losses, g_x = cross_entropy_rows(l_x, batch.y)
    loss_s = float(sup_losses.mean())
    fb = None
    if fallback is not None:
        fb = (fallback[0][batch.u_idx], fallback[1][batch.u_idx])
    ut = unsupervised_terms(l_uw, l_us, rs.debias, cfg, prior, fb)
    total = loss_s + cfg.lambda_u * ut.loss
    if not math.isfinite(total):
        raise DivergedError(rs.step)

    grad_logits = np.vstack([g_x / B, cfg.lambda_u * ut.grad_strong])
    grads = backward(rs.student, stacked, grad_logits, cache)
    lr = cosine_lr(rs.step, K, cfg.base_lr)
    try:
        sgd_nesterov_step(rs.student, grads, rs.opt, lr)
    except FloatingPointError:
        raise DivergedError(rs.step, "gradient") from None
    rs.debias = ut.state
    ema_update(rs.ema, rs.student)
    rs.step += 1
    return {"lr": lr, "loss_s": loss_s, "loss_u": ut.loss, "mask_rate": ut.mask_rate,
            "train_acc": float((argmax_rows(l_x) == batch.y).mean()),
            "pseudo_hist": ut.pseudo_hist, "all_hist": ut.all_hist}


@dataclass
class RunResult:
    state: RunState
    metrics: RunMetrics
    num_classes: int

    @property
    def student(self) -> MlpParams:
        return self.state.student

    @property
    def ema(self) -> MlpParams:
        return self.state.ema.shadow


def evaluate(params: MlpParams, ds: Dataset) -> dict:
    """Accuracy and balanced accuracy against ground truth (evaluation only)."""
    pred = argmax_rows(forward(params, ds.features))
    truth = ds.labels
    return {"acc": accuracy(pred, truth), "balanced_acc": balanced_accuracy(pred, truth, ds.num_classes),
            "pred": pred}


def labeled_prior(ds: Dataset) -> np.ndarray:
    counts = np.bincount(ds.labeled_targets(), minlength=ds.num_classes).astype(np.float64)
    return dpl.floor_simplex(counts / counts.sum())


def train_run(train_ds: Dataset, test_ds: Dataset | None, cfg: TrainConfig, aug: Augmentor = Augmentor(),
              fallback=None, record_p_hat: bool = True, unlabeled_idx=None) -> RunResult:
    """Full training run; evaluates the EMA weights every ``eval_every`` steps.

    ``fallback`` optionally gives per-row ``(labels, ok)`` arrays over
    ``train_ds`` (used only when ``cfg.clip_fallback`` is on).
    ``unlabeled_idx`` overrides the unlabeled stream, which by default is the
    rows outside the labeled mask.
    """
    lab = train_ds.labeled_indices()
    unl = train_ds.unlabeled_indices() if unlabeled_idx is None else np.asarray(unlabeled_idx, dtype=np.int64)
    if lab.size == 0:
        raise ValueError("training needs at least one labeled row")
    C = train_ds.num_classes
    rs = init_run_state(cfg, train_ds.dim, C)
    metrics = rs.metrics
    if cfg.total_steps == 0:
        return RunResult(rs, metrics, C)
    if unl.size == 0:
        unl = lab
    targets = np.full(len(train_ds), -1, dtype=np.int64)
    targets[lab] = train_ds.labeled_targets()
    prior = labeled_prior(train_ds)
    fb = fallback if cfg.clip_fallback else None

    lab_loader = Cycler(lab, make_rng(cfg.seed, Stream.LOADER, 0))
    unl_loader = Cycler(unl, make_rng(cfg.seed, Stream.LOADER, 1))
    aug_rng = make_rng(cfg.seed, Stream.AUGMENT)
    feats = train_ds.features
    mu_b = cfg.mu * cfg.batch_size

    acc = _Interval(C)
    ep_acc = np.zeros(C, dtype=np.int64)
    ep_all = np.zeros(C, dtype=np.int64)
    if record_p_hat:
        metrics.p_hat_trace.append((0, rs.debias.p_hat.copy()))
    while rs.step < cfg.total_steps:
        bi = lab_loader.next(cfg.batch_size)
        epoch_before = unl_loader.epoch
        ui = unl_loader.next(mu_b)
        if unl_loader.epoch != epoch_before and ep_all.sum():
            metrics.epoch_hist_accepted.append(ep_acc)
            metrics.epoch_hist_all.append(ep_all)
            ep_acc = np.zeros(C, dtype=np.int64)
            ep_all = np.zeros(C, dtype=np.int64)
        x = augment_weak(aug, feats[bi], aug_rng)
        u = feats[ui]
        u_s = augment_strong(aug, u, aug_rng)
        u_w = augment_weak(aug, u, aug_rng)
        out = train_step(rs, _Batches(x, targets[bi], u_w, u_s, ui), cfg, prior, fb)
        ep_acc += out["pseudo_hist"]
        ep_all += out["all_hist"]
        acc.add(out)
        if record_p_hat:
            metrics.p_hat_trace.append((rs.step, rs.debias.p_hat.copy()))
        if rs.step % cfg.eval_every == 0 or rs.step == cfg.total_steps:
            row = acc.flush(rs.step)
            if test_ds is not None:
                ev = evaluate(rs.ema.shadow, test_ds)
                row["test_acc"], row["balanced_test_acc"] = ev["acc"], ev["balanced_acc"]
            else:
                row["test_acc"] = row["balanced_test_acc"] = math.nan
            metrics.rows.append(row)
    if ep_all.sum():
        metrics.epoch_hist_accepted.append(ep_acc)
        metrics.epoch_hist_all.append(ep_all)
    return RunResult(rs, metrics, C)


class _Interval:
    """Averages per-step scalars between metric rows."""

    def __init__(self, C: int):
        self.C = C
        self._reset()

    def _reset(self):
        self.n = 0
        self.sums = {"loss_s": 0.0, "loss_u": 0.0, "mask_rate": 0.0, "train_acc": 0.0}
        self.hist = np.zeros(self.C, dtype=np.int64)
        self.lr = math.nan

    def add(self, out: dict):
        self.n += 1
        for k in self.sums:
            self.sums[k] += out[k]
        self.hist += out["all_hist"]
        self.lr = out["lr"]

    def flush(self, step: int) -> dict:
        row = {"step": step, "lr": self.lr}
        row.update({k: v / self.n for k, v in self.sums.items()})
        row["imbalance_ratio"] = imbalance_ratio(self.hist)
        self._reset()
        return row


@dataclass
class BiasedTeacher:
    """A frozen classifier whose arrays are marked read-only."""

    params: MlpParams
    temperature: float = 1.0
    logit_offset: np.ndarray | None = None

    def __post_init__(self):
        self.params = self.params.copy()
        C = self.params.dims[-1]
        off = np.zeros(C) if self.logit_offset is None else np.array(self.logit_offset, dtype=np.float64)
        if off.shape != (C,):
            raise ValueError("logit_offset must have one entry per class")
        self.logit_offset = off
        for a in (*self.params.arrays(), self.logit_offset):
            a.flags.writeable = False

    def logits(self, x) -> np.ndarray:
        return (forward(self.params, x) + self.logit_offset) / self.temperature

    def probs(self, x) -> np.ndarray:
        return softmax_rows(self.logits(x))


class TeacherCheckError(RuntimeError):
    pass


def make_biased_teacher(source_ds: Dataset, target_features, zcfg: ZslConfig, seed: int = 0,
                        hidden=(64, 64), translation=None, check: bool = True) -> BiasedTeacher:
    """Train a supervised classifier on a shifted, long-tailed source and freeze it.

    The source is rotated by ``zcfg.shift_angle`` and translated (by
    ``translation`` or a seeded random direction of length
    ``zcfg.shift_scale``) before training. With ``check`` on, the teacher's
    argmax predictions on ``target_features`` must have an imbalance ratio
    above ``zcfg.min_teacher_imbalance``.
    """
    if translation is None:
        d = make_rng(seed, Stream.SHIFT).standard_normal(source_ds.dim)
        translation = zcfg.shift_scale * d / np.linalg.norm(d)
    src = shift_domain(source_ds, zcfg.shift_angle, translation)
    C = src.num_classes
    params = init_mlp((src.dim, *hidden, C), make_rng(seed, Stream.TEACHER))
    opt = OptimState.for_params(params, momentum=0.9, weight_decay=5e-4, base_lr=zcfg.teacher_lr)
    rng = make_rng(seed, Stream.TEACHER, 1)
    y_all = src.labels
    loader = Cycler(np.arange(len(src)), rng)
    for k in range(zcfg.teacher_steps):
        idx = loader.next(64)
        _, grads = supervised_loss(params, src.features[idx], y_all[idx])
        sgd_nesterov_step(params, grads, opt, cosine_lr(k, zcfg.teacher_steps, zcfg.teacher_lr))
    prior = np.bincount(src.labels, minlength=C) / len(src)
    offset = zcfg.prior_bias * np.log(np.maximum(prior, 1.0 / len(src)))
    teacher = BiasedTeacher(params, zcfg.teacher_temperature, offset)
    if check:
        pred = argmax_rows(teacher.probs(target_features))
        ratio = imbalance_ratio(np.bincount(pred, minlength=C))
        if not ratio > zcfg.min_teacher_imbalance:
            raise TeacherCheckError(
                f"teacher prediction imbalance ratio {ratio:.3f} on the target is not above "
                f"{zcfg.min_teacher_imbalance}; increase zsl.source_gamma or the domain shift"
            )
    return teacher


def zsl_bootstrap(target_ds: Dataset, teacher: BiasedTeacher, tau_clip: float = 0.95) -> tuple[Dataset, np.ndarray]:
    """Rows the teacher is confident about (``> tau_clip``) become labeled with its argmax.

    Returns the relabeled dataset and the per-class counts of accepted rows.
    Ground-truth labels of the target are never read.
    """
    probs = teacher.probs(target_ds.features)
    conf = probs.max(axis=1)
    pred = argmax_rows(probs)
    accepted = conf > tau_clip
    if not accepted.any():
        raise ValueError(f"threshold too high: no target row has teacher confidence above {tau_clip}")
    targets = np.where(accepted, pred, -1)
    counts = np.bincount(pred[accepted], minlength=target_ds.num_classes)
    return target_ds.with_mask(accepted, targets), counts


def teacher_fallback(teacher: BiasedTeacher, ds: Dataset, tau_clip: float):
    probs = teacher.probs(ds.features)
    return argmax_rows(probs), probs.max(axis=1) > tau_clip


def zsl_run(target_ds: Dataset, test_ds: Dataset | None, teacher: BiasedTeacher, zcfg: ZslConfig,
            cfg: TrainConfig, aug: Augmentor = Augmentor()) -> tuple[RunResult, np.ndarray]:
    boot, counts = zsl_bootstrap(target_ds, teacher, zcfg.tau_clip)
    unl = np.arange(len(boot)) if zcfg.unlabeled_pool == "all" else None
    return train_run(boot, test_ds, cfg, aug, unlabeled_idx=unl), counts


def save_run(out_dir, result: RunResult, test_ds: Dataset | None, config_text: str, extra: dict | None = None,
             wall_time: float | None = None) -> dict:
    """Write the run directory: config snapshot, metrics, p_hat trace, confusion, summary, checkpoints."""
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    (out / "config.snapshot").write_text(config_text)
    m = result.metrics
    m.write_csv(out / "metrics.csv")
    m.write_p_hat(out / "p_hat.csv")
    m.write_epoch_hist(out / "pseudo_hist.csv")
    summary = {"steps": result.state.step, "p_hat_final": result.state.debias.p_hat.tolist()}
    if test_ds is not None:
        ev = evaluate(result.ema, test_ds)
        write_confusion(confusion(ev["pred"], test_ds.labels, result.num_classes), out / "confusion_final.csv")
        summary.update(test_acc=ev["acc"], balanced_test_acc=ev["balanced_acc"])
    if m.epoch_hist_all:
        summary["final_pseudo_label_imbalance"] = _json_float(imbalance_ratio(m.epoch_hist_all[-1]))
    save_checkpoint(result.student, out / "student.bin", {"role": "student"})
    save_checkpoint(result.ema, out / "ema.bin", {"role": "ema"})
    summary.update(extra or {})
    if wall_time is not None:
        summary["wall_time_s"] = wall_time
    (out / "summary.json").write_text(json.dumps(summary, indent=2, sort_keys=True) + "\n")
    return summary


def _json_float(v: float):
    return "inf" if math.isinf(v) else v


def timed(fn, *a, **kw):
    t0 = time.perf_counter()
    r = fn(*a, **kw)
    return r, time.perf_counter() - t0


def config_dict(cfg) -> dict:
    return asdict(cfg)
