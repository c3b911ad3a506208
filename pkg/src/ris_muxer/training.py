"""Unsupervised training of the phase network.

Phase 1 ascends the mean WSR with the MMSE precoder inside the
differentiated graph. Phase 2 freezes per-sample WMMSE precoders, refreshing
them every few epochs with a handful of warm-started iterations. The
discrete variant adds a growing penalty pulling phases onto a codebook.
"""

from __future__ import annotations

import csv
import logging
import time
from dataclasses import dataclass, field

import numpy as np
from pydantic import BaseModel, ConfigDict, Field, field_validator

from .channel import ChannelDataset, build_features_batch
from .fcn import FcnModel, GradientBundle, ObjectiveHead, SumHead, fcn_forward, fcn_gradient
from .precoding import (
    LinkBudget,
    check_weights,
    effective_channel_arrays,
    fixed_precoder_wsr_and_grad,
    mmse_precoder,
    mmse_wsr_and_grad,
    wmmse_precoder,
    wsr,
)
from .seeding import make_rng

log = logging.getLogger(__name__)


class TrainingError(RuntimeError):
    pass


class DiscretizationError(TrainingError):
    def __init__(self, kappa: float, penalty: float):
        self.kappa, self.penalty = kappa, penalty
        super().__init__(f"penalty weight reached {kappa:g} without meeting the threshold; final penalty {penalty:.6g}")


class TrainConfig(BaseModel):
    model_config = ConfigDict(extra="forbid")

    lr_phase1: float = Field(1e-4, gt=0)
    lr_phase2: float = Field(2e-6, gt=0)
    epochs_phase1: int = Field(4000, ge=0)
    epochs_phase2: int = Field(4000, ge=0)
    batch_size: int = Field(256, ge=1)
    wmmse_refresh_epochs: int = Field(10, ge=1)
    wmmse_inner_iters: int = Field(5, ge=1)
    weights: tuple[float, ...] = (0.5, 0.5)
    rho: float = Field(1e11, gt=0)
    e_tr: float = Field(1.0, gt=0)
    seed: int = 0
    adam_beta1: float = Field(0.9, ge=0, lt=1)
    adam_beta2: float = Field(0.999, ge=0, lt=1)
    adam_eps: float = Field(1e-8, gt=0)
    # stop a phase once the epoch-mean WSR plateaus (otherwise run the fixed budget)
    early_stop: bool = False
    plateau_window: int = Field(20, ge=1)
    plateau_tol: float = Field(1e-4, ge=0)
    # discretization
    codebook: tuple[float, ...] = (0.0, float(np.pi))
    kappa_step: float = Field(0.05, ge=0)
    kappa_cap: float = Field(5.0, gt=0)
    penalty_threshold: float = Field(1.0, gt=0)
    kappa_epochs_max: int = Field(200, ge=1)

    @field_validator("weights")
    @classmethod
    def _weights(cls, v):
        check_weights(v)
        return v

    @property
    def link(self) -> LinkBudget:
        return LinkBudget(self.rho, self.e_tr)

    @property
    def alpha(self) -> np.ndarray:
        return np.asarray(self.weights, dtype=np.float64)


# -- penalty ----------------------------------------------------------------

def _wrap(x):
    return np.mod(x + np.pi, 2.0 * np.pi) - np.pi


def _nearest(psi, codebook):
    cb = np.sort(np.asarray(codebook, dtype=np.float64))
    if cb.size == 0:
        raise TrainingError("codebook must not be empty")
    diff = _wrap(np.asarray(psi, dtype=np.float64)[..., None] - cb)
    dist = np.abs(diff)
    best = dist.min(axis=-1, keepdims=True)
    # ties go to the smaller codebook value (first along the sorted axis)
    idx = np.argmax(dist <= best + 1e-12, axis=-1)
    return cb, idx, np.take_along_axis(diff, idx[..., None], axis=-1)[..., 0]


def penalty(psi, codebook) -> float | np.ndarray:
    """Root of summed squared circular distances to the nearest codebook phase.

    A (H, W) field gives a float; a batch (B, H, W) gives (B,).
    """
    psi = np.asarray(psi, dtype=np.float64)
    _, _, delta = _nearest(psi, codebook)
    p = np.sqrt(np.sum(delta.reshape(delta.shape[:-2] + (-1,)) ** 2, axis=-1))
    return float(p) if p.ndim == 0 else p


def penalty_and_grad(psi_flat, codebook):
    _, _, delta = _nearest(psi_flat, codebook)
    p = np.sqrt(np.sum(delta ** 2, axis=-1))
    safe = np.where(p > 0, p, 1.0)
    grad = np.where((p > 0)[..., None], delta / safe[..., None], 0.0)
    return p, grad


def round_phases(psi, codebook) -> np.ndarray:
    cb, idx, _ = _nearest(psi, codebook)
    return cb[idx]


# -- objective heads --------------------------------------------------------

class MmseWsrHead(ObjectiveHead):
    def __init__(self, G, D, H, alpha, link: LinkBudget):
        self.G, self.D, self.H, self.alpha, self.link = G, D, H, alpha, link

    def value_and_grad(self, psi_flat):
        return mmse_wsr_and_grad(self.G, self.D, self.H, psi_flat, self.alpha, self.link)


class FixedPrecoderWsrHead(ObjectiveHead):
    def __init__(self, G, D, H, V, alpha, link: LinkBudget):
        if V is None:
            raise TrainingError("a frozen precoder is required for every batch sample")
        V = np.asarray(V)
        if V.shape[0] != G.shape[0]:
            raise TrainingError(f"frozen precoders for {V.shape[0]} samples, batch has {G.shape[0]}")
        self.G, self.D, self.H, self.V, self.alpha, self.link = G, D, H, V, alpha, link

    def value_and_grad(self, psi_flat):
        return fixed_precoder_wsr_and_grad(self.G, self.D, self.H, psi_flat, self.V, self.alpha, self.link)


class PenaltyHead(ObjectiveHead):
    """``-kappa * p`` per sample."""

    def __init__(self, codebook, kappa: float):
        self.codebook, self.kappa = codebook, kappa

    def value_and_grad(self, psi_flat):
        p, g = penalty_and_grad(psi_flat, self.codebook)
        return -self.kappa * p, -self.kappa * g


def objective_mmse(model: FcnModel, G, D, H, features, cfg: TrainConfig, seed=None, mode="train") -> GradientBundle:
    head = MmseWsrHead(G, D, H, cfg.alpha, cfg.link)
    return fcn_gradient(model, features, head, mode=mode, seed=seed)


def objective_wmmse(model: FcnModel, G, D, H, features, V_frozen, cfg: TrainConfig, seed=None, mode="train",
                    kappa: float = 0.0) -> GradientBundle:
    head: ObjectiveHead = FixedPrecoderWsrHead(G, D, H, V_frozen, cfg.alpha, cfg.link)
    if kappa > 0:
        head = SumHead(head, PenaltyHead(cfg.codebook, kappa))
    return fcn_gradient(model, features, head, mode=mode, seed=seed)


# -- Adam -------------------------------------------------------------------

@dataclass
class AdamState:
    m: list
    v: list
    step: int = 0

    @classmethod
    def zeros_like(cls, model: FcnModel) -> "AdamState":
        return cls([np.zeros_like(p) for p in model.params()], [np.zeros_like(p) for p in model.params()])


def adam_step(state: AdamState, model: FcnModel, grads, lr: float, cfg: TrainConfig | None = None) -> None:
    """Bias-corrected Adam ascent step, applied in place."""
    b1, b2, eps = (0.9, 0.999, 1e-8) if cfg is None else (cfg.adam_beta1, cfg.adam_beta2, cfg.adam_eps)
    params = model.params()
    if len(grads) != len(params):
        raise TrainingError(f"expected {len(params)} gradient arrays, got {len(grads)}")
    for p, g in zip(params, grads):
        if p.shape != np.shape(g):
            raise TrainingError(f"gradient shape {np.shape(g)} does not match parameter {p.shape}")
    state.step += 1
    t = state.step
    new = []
    for p, g, m, v in zip(params, grads, state.m, state.v):
        m *= b1
        m += (1 - b1) * g
        v *= b2
        v += (1 - b2) * g * g
        m_hat = m / (1 - b1 ** t)
        v_hat = v / (1 - b2 ** t)
        new.append(p + lr * m_hat / (np.sqrt(v_hat) + eps))
    model.set_params(new)


# -- trace ------------------------------------------------------------------

TRACE_COLUMNS = ("epoch", "phase", "objective", "wsr", "penalty", "kappa", "seconds")


@dataclass
class TraceRow:
    epoch: int
    phase: int
    objective: float
    wsr: float
    penalty: float
    kappa: float
    seconds: float


@dataclass
class RefreshEvent:
    epoch: int
    wsr_before: float
    wsr_after: float

    @property
    def delta(self) -> float:
        return self.wsr_after - self.wsr_before


@dataclass
class KappaEvent:
    kappa: float
    penalty_train: float
    penalty_test: float
    wsr_train: float


@dataclass
class TrainTrace:
    rows: list[TraceRow] = field(default_factory=list)
    refreshes: list[RefreshEvent] = field(default_factory=list)
    kappa_events: list[KappaEvent] = field(default_factory=list)

    def __len__(self):
        return len(self.rows)

    def column(self, name: str) -> np.ndarray:
        return np.array([getattr(r, name) for r in self.rows])

    def write_csv(self, path) -> None:
        with open(path, "w", newline="") as fh:
            w = csv.writer(fh)
            w.writerow(TRACE_COLUMNS)
            for r in self.rows:
                w.writerow([r.epoch, r.phase, repr(r.objective), repr(r.wsr), repr(r.penalty), repr(r.kappa),
                            f"{r.seconds:.3f}"])


# -- helpers ----------------------------------------------------------------

def fit_input_scale(model: FcnModel, features: np.ndarray) -> None:
    """Normalize amplitude maps by their training mean and phase maps by pi."""
    scale = np.empty(model.arch.in_maps)
    means = features.mean(axis=(0, 2, 3))
    for k in range(model.arch.in_maps):
        if k % 2 == 1:
            scale[k] = 1.0 / np.pi
        else:
            scale[k] = 1.0 / means[k] if means[k] > 0 else 1.0
    model.input_scale = scale
    model.lineage["input_scale_fitted"] = True


def predict_phases(model: FcnModel, features, chunk: int = 256) -> np.ndarray:
    """Eval-mode phases for a stack of features, (S, H, W)."""
    out = [fcn_forward(model, features[s:s + chunk], mode="eval")[0] for s in range(0, len(features), chunk)]
    return np.concatenate(out, axis=0)


def _batches(n, size, rng):
    perm = rng.permutation(n)
    return [perm[i:i + size] for i in range(0, n, size)]


def _plateaued(values, window, tol) -> bool:
    if len(values) <= window:
        return False
    old, new = values[-1 - window], values[-1]
    return (new - old) / max(abs(old), 1e-300) < tol


class _Trainer:
    def __init__(self, model: FcnModel, ds: ChannelDataset, cfg: TrainConfig):
        self.model, self.cfg = model, cfg
        self.train = ds.split("train")
        self.test = ds.split("test") if np.any(ds.splits == "test") else self.train
        if self.train.users != model.arch.users or self.train.ris_shape != tuple(model.arch.ris_shape):
            raise TrainingError("model architecture does not match the dataset geometry")
        check_weights(cfg.weights, self.train.users)
        self.H = self.train.H
        self.features = build_features_batch(self.train.G, self.train.D, self.H, self.train.ris_shape)
        if not model.lineage.get("input_scale_fitted"):
            fit_input_scale(model, self.features)
        model.lineage["train_seed"] = int(cfg.seed)
        self.adam = AdamState.zeros_like(model)
        self.shuffle_rng = make_rng(cfg.seed, "shuffle")
        self.dropout_rng = make_rng(cfg.seed, "dropout")
        self.trace = TrainTrace()
        self.epoch = 0
        self.V_frozen = None
        self.t0 = time.perf_counter()

    def _record(self, phase, obj, w, pen, kappa):
        self.trace.rows.append(TraceRow(self.epoch, phase, float(obj), float(w), float(pen), float(kappa),
                                        time.perf_counter() - self.t0))
        self.epoch += 1

    def mmse_epoch(self, lr):
        tr, cfg = self.train, self.cfg
        tot, n = 0.0, 0
        for b in _batches(len(tr), cfg.batch_size, self.shuffle_rng):
            bundle = objective_mmse(self.model, tr.G[b], tr.D[b], self.H, self.features[b], cfg, seed=self.dropout_rng)
            adam_step(self.adam, self.model, bundle.grads, lr, cfg)
            tot += bundle.value * len(b)
            n += len(b)
        self._record(1, tot / n, tot / n, np.nan, 0.0)

    def current_channels(self):
        psi = predict_phases(self.model, self.features)
        return psi, effective_channel_arrays(self.train.G, self.train.D, self.H, psi.reshape(len(psi), -1))

    def refresh(self):
        cfg = self.cfg
        _, C = self.current_channels()
        V0 = mmse_precoder(C, cfg.link) if self.V_frozen is None else self.V_frozen
        before = float(np.mean(wsr(C, V0, cfg.alpha, cfg.rho)))
        self.V_frozen = wmmse_precoder(C, cfg.alpha, cfg.link, V_init=V0, max_outer=cfg.wmmse_inner_iters,
                                       eps=np.finfo(np.float64).tiny)
        after = float(np.mean(wsr(C, self.V_frozen, cfg.alpha, cfg.rho)))
        self.trace.refreshes.append(RefreshEvent(self.epoch, before, after))

    def wmmse_epoch(self, lr, kappa=0.0, phase=2, since_refresh=0):
        tr, cfg = self.train, self.cfg
        if self.V_frozen is None or since_refresh % cfg.wmmse_refresh_epochs == 0:
            self.refresh()
        tot_obj = tot_w = tot_p = 0.0
        n = 0
        for b in _batches(len(tr), cfg.batch_size, self.shuffle_rng):
            bundle = objective_wmmse(self.model, tr.G[b], tr.D[b], self.H, self.features[b], self.V_frozen[b], cfg,
                                     seed=self.dropout_rng, kappa=kappa)
            adam_step(self.adam, self.model, bundle.grads, lr, cfg)
            tot_obj += bundle.value * len(b)
            n += len(b)
        psi, C = self.current_channels()
        w = float(np.mean(wsr(C, self.V_frozen, cfg.alpha, cfg.rho)))
        p = float(np.mean(penalty(psi, cfg.codebook))) if phase == 3 else np.nan
        self._record(phase, tot_obj / n, w, p, kappa)
        return w

    def run_phase1(self):
        cfg = self.cfg
        hist = []
        for _ in range(cfg.epochs_phase1):
            self.mmse_epoch(cfg.lr_phase1)
            hist.append(self.trace.rows[-1].wsr)
            if cfg.early_stop and _plateaued(hist, cfg.plateau_window, cfg.plateau_tol):
                break

    def run_phase2(self):
        cfg = self.cfg
        hist = []
        for e in range(cfg.epochs_phase2):
            hist.append(self.wmmse_epoch(cfg.lr_phase2, since_refresh=e))
            if cfg.early_stop and _plateaued(hist, cfg.plateau_window, cfg.plateau_tol):
                break

    def mean_penalty(self, split: ChannelDataset) -> float:
        feats = build_features_batch(split.G, split.D, split.H, split.ris_shape)
        return float(np.mean(penalty(predict_phases(self.model, feats), self.cfg.codebook)))


def train_two_phase(model: FcnModel, dataset: ChannelDataset, cfg: TrainConfig):
    """Two-phase training in place; returns ``(model, trace)``."""
    tr = _Trainer(model, dataset, cfg)
    tr.run_phase1()
    tr.run_phase2()
    return model, tr.trace


def train_discrete(model: FcnModel, dataset: ChannelDataset, cfg: TrainConfig, pretrained: bool = False):
    """Penalty-annealed training towards the phase codebook.

    Unless ``pretrained`` is set, MMSE pretraining runs first. Then for
    kappa = 0, step, 2 step, ... the network is trained with frozen WMMSE
    precoders on ``WSR - kappa * penalty`` until the WSR plateaus (or
    ``kappa_epochs_max``), until the mean test-split penalty drops below the
    threshold.
    """
    if not cfg.codebook:
        raise TrainingError("a non-empty codebook is required")
    tr = _Trainer(model, dataset, cfg)
    if not pretrained:
        tr.run_phase1()
    kappa = 0.0
    p_test = tr.mean_penalty(tr.test)
    p_train = tr.mean_penalty(tr.train)
    tr.trace.kappa_events.append(KappaEvent(kappa, p_train, p_test, np.nan))
    while p_test >= cfg.penalty_threshold:
        hist = []
        for e in range(cfg.kappa_epochs_max):
            hist.append(tr.wmmse_epoch(cfg.lr_phase2, kappa=kappa, phase=3, since_refresh=e))
            if _plateaued(hist, cfg.plateau_window, cfg.plateau_tol):
                break
        p_test = tr.mean_penalty(tr.test)
        p_train = tr.mean_penalty(tr.train)
        tr.trace.kappa_events.append(KappaEvent(kappa, p_train, p_test, hist[-1]))
        log.info("kappa %.3f: train penalty %.4f, test penalty %.4f, wsr %.4f", kappa, p_train, p_test, hist[-1])
        if p_test < cfg.penalty_threshold:
            break
        if cfg.kappa_step <= 0 or kappa + cfg.kappa_step > cfg.kappa_cap + 1e-12:
            raise DiscretizationError(kappa + cfg.kappa_step, p_test)
        kappa += cfg.kappa_step
    return model, tr.trace
