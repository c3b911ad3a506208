"""Evaluation protocol: per-sample rates under converged WMMSE precoding,
plus rate regions, TSNR / antenna sweeps, ECDFs and robustness curves.

Phases are chosen on the (possibly perturbed) channel estimate; the rates
are then measured on the true channel with a precoder designed on the
estimate.
"""

from __future__ import annotations

import csv
import hashlib
from dataclasses import dataclass, field
from typing import Mapping, Sequence

import numpy as np

from .channel import ChannelDataset, ChannelSet, build_features_batch, perturb_arrays
from .fcn import FcnModel
from .precoding import (
    LinkBudget,
    alternating_gradient_baseline,
    check_weights,
    effective_channel_arrays,
    mmse_precoder,
    random_phase_baseline,
    user_rates,
    wmmse_precoder,
    wsr,
)
from .seeding import derive_seed, make_rng
from .training import predict_phases, round_phases

# default TSNR grid: 1e11 ... 1e12 in steps of 1e11
DEFAULT_RHOS = tuple(float(k) * 1e11 for k in range(1, 11))
DEFAULT_WEIGHT_SET = ((0.0, 1.0), (0.25, 0.75), (0.5, 0.5), (0.75, 0.25), (1.0, 0.0))

SAMPLE_COLUMNS = ("sample_id", "user", "rate", "weight", "algorithm", "gamma", "rho")
SUMMARY_COLUMNS = ("algorithm", "axis", "axis_value", "gamma", "rho", "weights", "n_samples", "mean_wsr",
                   "mean_sum_rate", "mean_rates", "degradation")


class EvaluationError(ValueError):
    pass


@dataclass
class RandomPhases:
    seed: int = 0
    name: str = "random"

    def phases(self, G, D, H, ris_shape, sample_ids) -> np.ndarray:
        return np.stack([random_phase_baseline(self.seed, ris_shape, int(i)) for i in sample_ids])


@dataclass
class AlternatingGradient:
    weights: Sequence[float]
    link: LinkBudget
    steps: int = 200
    step_size: float = 0.1
    seed: int = 0
    name: str = "altgrad"

    def phases(self, G, D, H, ris_shape, sample_ids) -> np.ndarray:
        out = []
        for g, d, i in zip(G, D, sample_ids):
            cs = ChannelSet(H, g, d, tuple(ris_shape))
            out.append(alternating_gradient_baseline(cs, self.weights, self.link, self.steps, self.step_size,
                                                     seed=derive_seed(self.seed, "altgrad", int(i))))
        return np.stack(out)


@dataclass
class FcnPhases:
    model: FcnModel
    name: str = "fcn"

    def phases(self, G, D, H, ris_shape, sample_ids) -> np.ndarray:
        return predict_phases(self.model, build_features_batch(G, D, H, ris_shape))


def as_source(source):
    if isinstance(source, FcnModel):
        return FcnPhases(source)
    if not hasattr(source, "phases"):
        raise EvaluationError(f"cannot evaluate {type(source).__name__}; expected a model or a baseline")
    return source


@dataclass
class EvalResult:
    algorithm: str
    gamma: float
    rho: float
    weights: tuple
    sample_ids: np.ndarray
    rates: np.ndarray       # (S, U) per-user rates with WMMSE
    mmse_wsr: np.ndarray    # (S,) WSR with the MMSE precoder on the same phases
    axis: str = ""
    axis_value: float = float("nan")
    iterations: np.ndarray = None

    @property
    def wsr(self) -> np.ndarray:
        return self.rates @ np.asarray(self.weights, dtype=np.float64)

    @property
    def mean_wsr(self) -> float:
        return float(np.mean(self.wsr))

    @property
    def sum_rate(self) -> np.ndarray:
        return self.rates.sum(axis=1)

    @property
    def mean_sum_rate(self) -> float:
        return float(np.mean(self.sum_rate))

    @property
    def mean_rates(self) -> np.ndarray:
        return self.rates.mean(axis=0)


@dataclass
class EvalReport:
    results: list[EvalResult] = field(default_factory=list)
    metadata: dict = field(default_factory=dict)

    def __getitem__(self, i) -> EvalResult:
        return self.results[i]

    def __len__(self):
        return len(self.results)

    @property
    def mean_wsr(self) -> float:
        return self.results[0].mean_wsr

    def degradation(self) -> list[float]:
        """1 - mean WSR / mean WSR of the gamma = 0 entry (robustness reports)."""
        ref = [r for r in self.results if r.gamma == 0.0]
        if not ref:
            return [float("nan")] * len(self.results)
        base = ref[0].mean_wsr
        return [1.0 - r.mean_wsr / base if base > 0 else 0.0 for r in self.results]

    def region_points(self) -> list[tuple[float, float]]:
        return [tuple(float(x) for x in r.mean_rates[:2]) for r in self.results]

    def write_csv(self, path) -> None:
        with open(path, "w", newline="") as fh:
            w = csv.writer(fh)
            w.writerow(SAMPLE_COLUMNS)
            for r in self.results:
                for s, sid in enumerate(r.sample_ids):
                    for u in range(r.rates.shape[1]):
                        w.writerow([int(sid), u, repr(float(r.rates[s, u])), repr(float(r.weights[u])),
                                    r.algorithm, repr(r.gamma), repr(r.rho)])

    def write_summary_csv(self, path) -> None:
        deg = self.degradation()
        with open(path, "w", newline="") as fh:
            w = csv.writer(fh)
            w.writerow(SUMMARY_COLUMNS)
            for r, d in zip(self.results, deg):
                w.writerow([r.algorithm, r.axis, repr(r.axis_value), repr(r.gamma), repr(r.rho),
                            ";".join(repr(float(x)) for x in r.weights), len(r.sample_ids), repr(r.mean_wsr),
                            repr(r.mean_sum_rate), ";".join(repr(float(x)) for x in r.mean_rates), repr(d)])


def evaluate(source, dataset: ChannelDataset, weights, link: LinkBudget, *, gamma: float = 0.0, codebook=None,
             seed: int = 0, include_h: bool = False, max_outer: int = 100, eps: float = 1e-4,
             axis: str = "", axis_value: float = float("nan")) -> EvalReport:
    if len(dataset) == 0:
        raise EvaluationError("cannot evaluate an empty split")
    alpha = check_weights(weights, dataset.users)
    src = as_source(source)
    if isinstance(src, FcnPhases):
        arch = src.model.arch
        if arch.users != dataset.users or tuple(arch.ris_shape) != tuple(dataset.ris_shape):
            raise EvaluationError(f"model expects {arch.users} users on a {arch.ris_shape} grid; dataset has "
                                  f"{dataset.users} users on {dataset.ris_shape}")
    ids = np.arange(len(dataset))
    G, D, H = dataset.G, dataset.D, dataset.H
    if gamma > 0:
        Ge = np.empty_like(G)
        De = np.empty_like(D)
        He = np.broadcast_to(H, (len(dataset),) + H.shape).copy() if include_h else None
        for i in ids:
            rng = make_rng(seed, f"eval-perturb:{gamma!r}", int(i))
            g, d, h = perturb_arrays(G[i], D[i], gamma, rng, H if include_h else None)
            Ge[i], De[i] = g, d
            if include_h:
                He[i] = h
    else:
        Ge, De, He = G, D, None
    if He is None:
        psi = src.phases(Ge, De, H, dataset.ris_shape, ids)
    else:
        psi = np.stack([src.phases(Ge[i:i + 1], De[i:i + 1], He[i], dataset.ris_shape, ids[i:i + 1])[0] for i in ids])
    if codebook is not None:
        psi = round_phases(psi, codebook)
    flat = psi.reshape(len(dataset), -1)
    C_est = effective_channel_arrays(Ge, De, H if He is None else He, flat)
    V_mmse = mmse_precoder(C_est, link)
    V, info = wmmse_precoder(C_est, alpha, link, V_init=V_mmse, max_outer=max_outer, eps=eps, return_info=True)
    C_true = effective_channel_arrays(G, D, H, flat)
    result = EvalResult(
        algorithm=getattr(src, "name", type(src).__name__), gamma=float(gamma), rho=float(link.rho),
        weights=tuple(float(a) for a in alpha), sample_ids=ids, rates=user_rates(C_true, V, link.rho),
        mmse_wsr=wsr(C_true, V_mmse, alpha, link.rho), axis=axis, axis_value=float(axis_value),
        iterations=info.iterations,
    )
    meta = {"seed": int(seed), "algorithm": result.algorithm, "e_tr": link.e_tr, "codebook": codebook}
    return EvalReport([result], meta)


def _merge(reports: Sequence[EvalReport], meta: dict) -> EvalReport:
    return EvalReport([r for rep in reports for r in rep.results], meta)


def rate_region(models: Mapping[tuple, object], dataset: ChannelDataset, weight_list, link: LinkBudget,
                **kw) -> EvalReport:
    """One evaluation per weight vector using the source registered for it.

    ``models`` maps weight tuples to a model or baseline. A baseline may be
    registered under the key ``"*"`` to serve every weight vector.
    """
    weight_list = [tuple(float(x) for x in w) for w in (weight_list or DEFAULT_WEIGHT_SET)]
    keyed = {tuple(float(x) for x in k) if k != "*" else k: v for k, v in models.items()}
    reps = []
    for w in weight_list:
        src = keyed.get(w, keyed.get("*"))
        if src is None:
            avail = sorted(str(k) for k in keyed)
            raise EvaluationError(f"no model registered for weights {w}; available: {', '.join(avail)}")
        reps.append(evaluate(src, dataset, w, link, axis="weights", axis_value=w[0], **kw))
    return _merge(reps, {"kind": "rate_region"})


def tsnr_sweep(source, dataset: ChannelDataset, rho_list=None, weights=(0.5, 0.5), e_tr: float = 1.0,
               **kw) -> EvalReport:
    rho_list = list(DEFAULT_RHOS if rho_list is None else rho_list)
    if not rho_list or any(r <= 0 for r in rho_list):
        raise EvaluationError("rho list must be non-empty and positive")
    reps = [evaluate(source, dataset, weights, LinkBudget(r, e_tr), axis="rho", axis_value=r, **kw) for r in rho_list]
    return _merge(reps, {"kind": "tsnr_sweep"})


def robustness_curve(source, dataset: ChannelDataset, gamma_list, weights, link: LinkBudget, seed: int = 0,
                     **kw) -> EvalReport:
    gamma_list = list(gamma_list)
    if any(g < 0 for g in gamma_list):
        raise EvaluationError("gammas must be >= 0")
    if 0.0 not in gamma_list:
        gamma_list = [0.0] + gamma_list
    reps = [evaluate(source, dataset, weights, link, gamma=g, seed=derive_seed(seed, "robustness", k),
                     axis="gamma", axis_value=g, **kw) for k, g in enumerate(gamma_list)]
    return _merge(reps, {"kind": "robustness", "seed": int(seed)})


def antenna_sweep(entries: Mapping[int, tuple], weights, link: LinkBudget, **kw) -> EvalReport:
    """``entries`` maps an RIS element count to ``(source, dataset)``."""
    reps = [evaluate(src, ds, weights, link, axis="ris_elements", axis_value=n, **kw)
            for n, (src, ds) in sorted(entries.items())]
    return _merge(reps, {"kind": "antenna_sweep"})


def ecdf(values_or_report, which: int = 0) -> list[tuple[float, float]]:
    """Empirical CDF of per-sample sum rate as step points.

    The first point is the left limit at the smallest value (ordinate 0),
    then one point per distinct value with the CDF just after the step.
    """
    if isinstance(values_or_report, EvalReport):
        values = values_or_report.results[which].sum_rate
    elif isinstance(values_or_report, EvalResult):
        values = values_or_report.sum_rate
    else:
        values = np.asarray(values_or_report, dtype=np.float64)
    values = np.sort(np.asarray(values, dtype=np.float64).reshape(-1))
    if values.size == 0:
        raise EvaluationError("ECDF needs at least one sample")
    uniq, counts = np.unique(values, return_counts=True)
    cdf = np.cumsum(counts) / values.size
    pts = [(float(uniq[0]), 0.0)]
    pts += [(float(v), float(c)) for v, c in zip(uniq, cdf)]
    pts[-1] = (pts[-1][0], 1.0)
    return pts


def write_ecdf_csv(points, path) -> None:
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(("sum_rate", "cdf"))
        for x, y in points:
            w.writerow([repr(x), repr(y)])


def report_digest(report: EvalReport) -> str:
    h = hashlib.sha256()
    for r in report.results:
        h.update(np.ascontiguousarray(r.rates).tobytes())
    return h.hexdigest()
