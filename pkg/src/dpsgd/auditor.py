"""Empirical privacy auditing by membership inference on a single canary.

Many models are trained on D and on D' = D + {canary}, sharing the
initialization so that only the DP noise differs between models. The loss
of the canary under each model is the attack score. A threshold picked on
held-out models is evaluated on the rest, and Clopper-Pearson bounds on the
true/false positive rates turn the hypothesis test into an epsilon lower
bound that holds with the configured confidence.
"""

from __future__ import annotations

import csv
import io
import math
from dataclasses import dataclass, field, replace
from typing import List, Optional, Sequence, Tuple

import numpy as np
from scipy import special, stats

from dpsgd import accountant
from dpsgd.accountant import PrivacyBudget
from dpsgd.data import Dataset
from dpsgd.errors import ConfigurationError
from dpsgd.nn import models
from dpsgd.nn.models import ModelSpec
from dpsgd.privatizer import PrivatizationConfig
from dpsgd.rng import derive_seed, substream
from dpsgd.trainer import TrainConfig, train

STD_FLOOR = 1e-12

ARMS = ("out", "in")  # trained on D, trained on D'


# --- statistics -----------------------------------------------------------------


def tv_distance_gaussians(g1: Tuple[float, float], g2: Tuple[float, float]) -> float:
    """Total variation distance between N(m1, s1^2) and N(m2, s2^2), exactly.

    The densities cross at most twice; between consecutive crossings one
    density dominates, so TV is half the sum of |P(I) - Q(I)| over the
    intervals I between crossings.
    """
    (m1, s1), (m2, s2) = g1, g2
    if not (s1 > 0 and s2 > 0):
        raise ValueError("standard deviations must be positive")
    if m1 == m2 and s1 == s2:
        return 0.0
    # log p1 - log p2 = a x^2 + b x + c
    a = 1 / (2 * s2**2) - 1 / (2 * s1**2)
    b = m1 / s1**2 - m2 / s2**2
    c = m2**2 / (2 * s2**2) - m1**2 / (2 * s1**2) + math.log(s2 / s1)
    if a == 0:
        roots = [-c / b]
    else:
        disc = b * b - 4 * a * c
        if disc <= 0:
            roots = []
        else:
            sq = math.sqrt(disc)
            # Numerically stable pair of roots.
            qv = -0.5 * (b + math.copysign(sq, b))
            roots = sorted({qv / a, c / qv} if qv != 0 else {-b / (2 * a)})
    edges = [-math.inf, *roots, math.inf]
    total = 0.0
    for lo, hi in zip(edges[:-1], edges[1:]):
        p = stats.norm.cdf(hi, m1, s1) - stats.norm.cdf(lo, m1, s1)
        q = stats.norm.cdf(hi, m2, s2) - stats.norm.cdf(lo, m2, s2)
        total += abs(p - q)
    return min(max(0.5 * total, 0.0), 1.0)


def clopper_pearson(successes: int, trials: int, confidence: float) -> Tuple[float, float]:
    """Exact one-sided binomial bounds, each holding with probability ``confidence``.

    Returns (lower, upper) with lower = 0 when successes = 0 and upper = 1
    when successes = trials.
    """
    k, n = int(successes), int(trials)
    if n < 1 or not 0 <= k <= n:
        raise ValueError(f"need 0 <= successes <= trials and trials >= 1, got {k}/{n}")
    if not 0 < confidence < 1:
        raise ValueError("confidence must lie in (0, 1)")
    lower = 0.0 if k == 0 else float(special.betaincinv(k, n - k + 1, 1 - confidence))
    upper = 1.0 if k == n else float(special.betaincinv(k + 1, n - k, confidence))
    return lower, upper


def epsilon_lower_bound(tpr_lower: float, fpr_upper: float, delta: float) -> float:
    """``ln((TPR - delta) / FPR)`` when that exceeds zero, else 0."""
    if fpr_upper <= 0:
        return math.inf if tpr_lower > delta else 0.0
    ratio = (tpr_lower - delta) / fpr_upper
    return math.log(ratio) if ratio > 1 else 0.0


def advantage_upper_bound(epsilon: float, delta: float) -> float:
    """Largest membership advantage ``1 - beta - alpha`` an (eps, delta)-DP model allows."""
    if math.isinf(epsilon):
        return 1.0
    return min((math.expm1(epsilon) + 2 * delta) / (math.exp(epsilon) + 1), 1.0)


def minimum_eval_models(confidence: float, delta: float) -> int:
    """Fewest evaluation models per arm for which any attack could certify epsilon > 0.

    Even a perfect attack (TPR = 1, FPR = 0) yields Clopper-Pearson bounds
    a^(1/n) and 1 - a^(1/n), with a = (1 - confidence) / 2 per bound; the
    lower bound is positive only once a^(1/n) > (1 + delta) / 2.
    """
    a = (1 - confidence) / 2
    return math.floor(math.log(a) / math.log((1 + delta) / 2)) + 1


def fit_gaussian(samples) -> Tuple[float, float, bool]:
    """(mean, std, degenerate); the std is floored so degenerate samples stay usable."""
    x = np.asarray(samples, dtype=np.float64)
    std = float(x.std())
    return float(x.mean()), max(std, STD_FLOOR), std < STD_FLOOR


def membership_auc(in_losses, out_losses) -> float:
    """Probability a member's canary loss is below a non-member's (ties count half)."""
    in_losses = np.asarray(in_losses, dtype=np.float64)
    out_losses = np.asarray(out_losses, dtype=np.float64)
    ranks = stats.rankdata(np.concatenate([-in_losses, -out_losses]))
    n_in, n_out = len(in_losses), len(out_losses)
    u = ranks[:n_in].sum() - n_in * (n_in + 1) / 2
    return float(u / (n_in * n_out))


def select_threshold(in_losses, out_losses) -> float:
    """Threshold maximizing TPR / FPR for the test "member iff loss <= threshold".

    A zero false-positive count is scored as one false positive in ``len(out_losses)``
    so that the ratio stays finite.
    """
    in_losses = np.sort(np.asarray(in_losses, dtype=np.float64))
    out_losses = np.sort(np.asarray(out_losses, dtype=np.float64))
    candidates = np.unique(np.concatenate([in_losses, out_losses]))
    tpr = np.searchsorted(in_losses, candidates, side="right") / len(in_losses)
    fpr = np.searchsorted(out_losses, candidates, side="right") / len(out_losses)
    score = tpr / np.maximum(fpr, 1 / len(out_losses))
    return float(candidates[int(np.argmax(score))])


# --- audit ---------------------------------------------------------------------------


@dataclass(frozen=True)
class AuditConfig:
    """One membership-inference experiment.

    Every model trains full-batch on the |D| + 1 slots of D + {canary}; in the
    D arm the canary slot is masked to a zero contribution. The sampling ratio
    is therefore 1 and both arms use the same batch geometry.
    """

    base_dataset: Dataset
    canary_input: np.ndarray
    canary_label: int
    budget: PrivacyBudget
    model_spec: ModelSpec
    learning_rate: float = 1.0
    clip_norm: float = 1.0
    steps: int = 10
    models_per_arm: int = 1000
    holdout_fraction: float = 0.2
    confidence: float = 0.999
    insert_canary: bool = True
    noise_multiplier: Optional[float] = None
    seed: int = 0

    def __post_init__(self):
        if self.models_per_arm < 2:
            raise ConfigurationError("models_per_arm must be >= 2")
        if not 0 < self.holdout_fraction < 1:
            raise ConfigurationError("holdout_fraction must lie in (0, 1)")
        if not 0.5 < self.confidence < 1:
            raise ConfigurationError("confidence must lie in (0.5, 1)")
        if self.steps < 1:
            raise ConfigurationError("audits need at least one training step")

    @property
    def batch_size(self) -> int:
        return len(self.base_dataset) + 1

    def resolved_noise_multiplier(self) -> float:
        if self.noise_multiplier is not None:
            return float(self.noise_multiplier)
        if math.isinf(self.budget.epsilon):
            return 0.0
        return accountant.calibrate_sigma(self.budget, 1.0, self.steps)

    def split(self) -> Tuple[range, range]:
        """(holdout, evaluation) model indices, disjoint by construction."""
        h = int(round(self.holdout_fraction * self.models_per_arm))
        if h < 1 or h >= self.models_per_arm:
            raise ConfigurationError(
                f"holdout fraction {self.holdout_fraction} of {self.models_per_arm} models "
                "leaves an empty holdout or evaluation set"
            )
        need = minimum_eval_models(self.confidence, self.budget.delta)
        if self.models_per_arm - h < need:
            raise ConfigurationError(
                f"{self.models_per_arm - h} evaluation models per arm cannot certify any epsilon > 0 "
                f"at confidence {self.confidence}; need at least {need}"
            )
        return range(0, h), range(h, self.models_per_arm)


@dataclass
class LossHistogramPair:
    out_losses: np.ndarray
    in_losses: np.ndarray
    out_fit: Tuple[float, float] = field(init=False)
    in_fit: Tuple[float, float] = field(init=False)
    degenerate: bool = field(init=False)

    def __post_init__(self):
        mo, so, do = fit_gaussian(self.out_losses)
        mi, si, di = fit_gaussian(self.in_losses)
        self.out_fit, self.in_fit, self.degenerate = (mo, so), (mi, si), do or di

    @property
    def tv_distance(self) -> float:
        return tv_distance_gaussians(self.out_fit, self.in_fit)

    def to_csv(self, holdout: Optional[range] = None) -> str:
        buf = io.StringIO()
        writer = csv.writer(buf, lineterminator="\n")
        writer.writerow(["arm", "model_index", "split", "canary_loss"])
        for arm, losses in (("out", self.out_losses), ("in", self.in_losses)):
            for i, value in enumerate(losses):
                split = "holdout" if holdout is not None and i in holdout else "eval"
                writer.writerow([arm, i, split, repr(float(value))])
        return buf.getvalue()


@dataclass
class AuditOutcome:
    epsilon_lower_bound: float
    membership_auc: float
    membership_advantage: float
    advantage_upper_bound: float
    threshold: float
    confidence: float
    nominal_epsilon: float
    delta: float
    noise_multiplier: float
    tpr: float
    fpr: float
    tpr_lower: float
    fpr_upper: float
    true_positives: int
    false_positives: int
    eval_models_per_arm: int
    holdout_models_per_arm: int
    losses: Optional[LossHistogramPair] = field(default=None, repr=False)

    @property
    def violation(self) -> bool:
        return self.epsilon_lower_bound > self.nominal_epsilon

    def to_dict(self) -> dict:
        d = {k: v for k, v in self.__dict__.items() if k != "losses"}
        if self.losses is not None:
            d["out_fit"] = list(self.losses.out_fit)
            d["in_fit"] = list(self.losses.in_fit)
            d["degenerate_fit"] = self.losses.degenerate
        d["violation"] = self.violation
        return d


def _train_config(config: AuditConfig, sigma: float) -> TrainConfig:
    # An explicit noise multiplier may undershoot the nominal budget (that is
    # what an audit is for), so training is checked against what it spends.
    b = config.batch_size
    budget = None
    if sigma > 0:
        spent = accountant.epsilon_of(accountant.SamplingSpec(1.0, sigma, config.steps), config.budget.delta)[0]
        budget = PrivacyBudget(max(config.budget.epsilon, spent), config.budget.delta)
    return TrainConfig(
        learning_rate=config.learning_rate,
        privatization=PrivatizationConfig(
            clip_norm=config.clip_norm, noise_multiplier=sigma, total_batch=b, local_batch=b
        ),
        steps=config.steps,
        budget=budget,
        seed=config.seed,
    )


def canary_losses(config: AuditConfig, models_per_arm: Optional[int] = None) -> LossHistogramPair:
    """Canary loss of every model in both arms, indexed by model."""
    m = models_per_arm or config.models_per_arm
    sigma = config.resolved_noise_multiplier()
    train_config = _train_config(config, sigma)
    dataset = config.base_dataset.with_example(config.canary_input, config.canary_label)
    init = models.init_params(config.model_spec, substream(config.seed, "init"))
    z = np.asarray(config.canary_input, dtype=np.float64)[None]
    y = [config.canary_label]
    out = {}
    for arm_id, arm in enumerate(ARMS):
        active = np.ones(len(dataset), dtype=bool)
        active[-1] = arm == "in" and config.insert_canary
        losses = np.empty(m)
        for i in range(m):
            result = train(
                config.model_spec,
                dataset,
                train_config,
                init=init,
                active=active,
                noise_seed=derive_seed(config.seed, "noise", arm_id, i),
            )
            losses[i] = models.loss(result.params, z, y)[0]
        out[arm] = losses
    return LossHistogramPair(out["out"], out["in"])


def evaluate_losses(config: AuditConfig, pair: LossHistogramPair, noise_multiplier: float) -> AuditOutcome:
    """Threshold on holdout models, bounds on evaluation models."""
    holdout, evaluation = config.split()
    h, e = slice(holdout.start, holdout.stop), slice(evaluation.start, evaluation.stop)
    threshold = select_threshold(pair.in_losses[h], pair.out_losses[h])
    in_eval, out_eval = pair.in_losses[e], pair.out_losses[e]
    tp = int((in_eval <= threshold).sum())
    fp = int((out_eval <= threshold).sum())
    per_bound = 1 - (1 - config.confidence) / 2
    tpr_lower, _ = clopper_pearson(tp, len(in_eval), per_bound)
    _, fpr_upper = clopper_pearson(fp, len(out_eval), per_bound)
    tpr, fpr = tp / len(in_eval), fp / len(out_eval)
    return AuditOutcome(
        epsilon_lower_bound=epsilon_lower_bound(tpr_lower, fpr_upper, config.budget.delta),
        membership_auc=membership_auc(in_eval, out_eval),
        membership_advantage=tpr - fpr,
        advantage_upper_bound=advantage_upper_bound(config.budget.epsilon, config.budget.delta),
        threshold=threshold,
        confidence=config.confidence,
        nominal_epsilon=config.budget.epsilon,
        delta=config.budget.delta,
        noise_multiplier=noise_multiplier,
        tpr=tpr,
        fpr=fpr,
        tpr_lower=tpr_lower,
        fpr_upper=fpr_upper,
        true_positives=tp,
        false_positives=fp,
        eval_models_per_arm=len(evaluation),
        holdout_models_per_arm=len(holdout),
        losses=pair,
    )


def run_audit(config: AuditConfig) -> AuditOutcome:
    """Trains both arms and reports the epsilon lower bound with its statistics."""
    config.split()
    return evaluate_losses(config, canary_losses(config), config.resolved_noise_multiplier())


@dataclass
class Phase1Result:
    index: int
    config: AuditConfig
    tv_distance: float
    losses: LossHistogramPair

    @property
    def degenerate(self) -> bool:
        return self.losses.degenerate


def phase1_distinguishability(
    variants: Sequence[AuditConfig], models_per_arm: Optional[int] = None
) -> List[Phase1Result]:
    """Ranks audit variants by TV distance between fitted canary-loss Gaussians.

    The first entry is the most distinguishable variant; ties keep input order.
    """
    if not variants:
        raise ConfigurationError("phase I needs at least one variant")
    m = models_per_arm or min(v.models_per_arm for v in variants)
    if m < 2:
        raise ConfigurationError("phase I needs at least two models per arm")
    results = []
    for i, variant in enumerate(variants):
        pair = canary_losses(variant, m)
        results.append(Phase1Result(i, variant, pair.tv_distance, pair))
    return sorted(results, key=lambda r: -r.tv_distance)


def with_overrides(config: AuditConfig, **changes) -> AuditConfig:
    return replace(config, **changes)
