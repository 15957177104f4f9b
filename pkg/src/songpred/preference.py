"""Pairwise preference pipeline: features, naive rules, logistic regression, CV.

Each battle compares two score vectors over 10 dimensions (7 predicted
scores plus 3 combined ones). Per dimension f the features are the
difference f_a - f_b, the ratio f_a / (f_b + eps), and the difference
gated by the instrumental flag; one standalone instrumental indicator
closes the row: 10 * 3 + 1 = 31 features.
"""

from __future__ import annotations

import json
from dataclasses import dataclass
from pathlib import Path
from typing import Callable, Optional, Sequence

import numpy as np
from scipy.special import expit

from .errors import ManifestError
from .ioutil import atomic_write_text
from .metrics import auc, f1

BASE_DIMENSIONS = ("streams", "likes", "coherence", "musicality",
                   "memorability", "clarity", "naturalness")
COMBINED_DIMENSIONS = ("combined_popularity", "combined_songeval", "combined_overall")
ALL_DIMENSIONS = BASE_DIMENSIONS + COMBINED_DIMENSIONS
POPULARITY_DIMENSIONS = ("streams", "likes", "combined_popularity")
AESTHETIC_DIMENSIONS = ("coherence", "musicality", "memorability",
                        "clarity", "naturalness")

RATIO_EPSILON = 1e-9


def combined_scores(base: Sequence[float]) -> tuple[float, float, float]:
    """(combined popularity, combined aesthetics, combined overall).

    Popularity is the mean of the two [0,100] scores, aesthetics the mean
    of the five [1,5] scores, and overall the mean of all seven after
    normalizing each to [0,1].
    """
    if len(base) != 7:
        raise ValueError(f"expected 7 base scores, got {len(base)}")
    streams, likes = base[0], base[1]
    aes = np.asarray(base[2:], dtype=np.float64)
    for v in (streams, likes):
        if not (0.0 <= v <= 100.0):
            raise ValueError(f"popularity score {v} outside [0, 100]")
    if np.any(aes < 1.0) or np.any(aes > 5.0):
        raise ValueError("aesthetic scores must lie in [1, 5]")
    pop = (streams + likes) / 2.0
    songeval = float(aes.mean())
    normalized = np.concatenate([[streams / 100.0, likes / 100.0], (aes - 1.0) / 4.0])
    return pop, songeval, float(normalized.mean())


@dataclass(frozen=True)
class ScoreVector:
    streams: float
    likes: float
    coherence: float
    musicality: float
    memorability: float
    clarity: float
    naturalness: float

    @property
    def base(self) -> tuple[float, ...]:
        return (self.streams, self.likes, self.coherence, self.musicality,
                self.memorability, self.clarity, self.naturalness)

    def as_dict(self) -> dict[str, float]:
        pop, songeval, overall = combined_scores(self.base)
        values = dict(zip(BASE_DIMENSIONS, self.base))
        values.update(combined_popularity=pop, combined_songeval=songeval,
                      combined_overall=overall)
        return values


@dataclass(frozen=True)
class Battle:
    battle_id: str
    scores_a: ScoreVector
    scores_b: ScoreVector
    instrumental: int     # 1 for instrumental, 0 for vocal
    winner: str           # "A" or "B"; ties are excluded upstream

    def __post_init__(self):
        if self.winner not in ("A", "B"):
            raise ValueError(f"{self.battle_id}: winner must be 'A' or 'B'")
        if self.instrumental not in (0, 1):
            raise ValueError(f"{self.battle_id}: instrumental flag must be 0 or 1")


def battle_features(b: Battle, epsilon: float = RATIO_EPSILON,
                    dimensions: Sequence[str] = ALL_DIMENSIONS) -> np.ndarray:
    """Feature row, dimension-major: per dimension the difference, the
    ratio, the instrumental interaction; then the instrumental flag."""
    va = b.scores_a.as_dict()
    vb = b.scores_b.as_dict()
    row = np.empty(3 * len(dimensions) + 1)
    for i, name in enumerate(dimensions):
        fa, fb = va[name], vb[name]
        row[3 * i] = fa - fb
        row[3 * i + 1] = fa / (fb + epsilon)
        row[3 * i + 2] = (fa - fb) * b.instrumental
    row[-1] = b.instrumental
    return row


def feature_names(dimensions: Sequence[str] = ALL_DIMENSIONS) -> list[str]:
    names = []
    for name in dimensions:
        names.extend([f"delta_{name}", f"ratio_{name}", f"delta_{name}_x_instrumental"])
    names.append("instrumental")
    return names


def naive_rule(b: Battle, feature_set: Sequence[str]) -> tuple[str, bool]:
    """Predict the side with the larger sum over the selected dimensions.

    Exact ties predict A and are flagged so callers can count them.
    """
    if not feature_set:
        raise ValueError("naive rule needs a non-empty feature set")
    va = b.scores_a.as_dict()
    vb = b.scores_b.as_dict()
    unknown = [f for f in feature_set if f not in va]
    if unknown:
        raise ValueError(f"unknown dimension {unknown[0]!r}")
    sum_a = sum(va[f] for f in feature_set)
    sum_b = sum(vb[f] for f in feature_set)
    if sum_a == sum_b:
        return "A", True
    return ("A" if sum_a > sum_b else "B"), False


# ---------------------------------------------------------------------------
# Logistic regression (L2, full-batch gradient descent with backtracking)
# ---------------------------------------------------------------------------

def _logreg_objective(beta, intercept, x, y_signed, weights, c):
    margins = y_signed * (x @ beta + intercept)
    # log(1 + exp(-m)) computed stably for large |m|
    data_term = np.logaddexp(0.0, -margins)
    return 0.5 * float(beta @ beta) + c * float(weights @ data_term)


def _logreg_gradient(beta, intercept, x, y_signed, weights, c):
    margins = y_signed * (x @ beta + intercept)
    coef = weights * expit(-margins) * (-y_signed)
    grad_beta = beta + c * (x.T @ coef)
    grad_intercept = c * float(coef.sum())
    return grad_beta, grad_intercept


@dataclass
class LogregFit:
    beta: np.ndarray
    intercept: float
    converged: bool
    n_iter: int


def logreg_fit(x: np.ndarray, y: np.ndarray, c: float = 0.1,
               class_weights: str = "balanced", max_iter: int = 1000) -> LogregFit:
    """Minimize 0.5||beta||^2 + C sum_i w_i log(1 + exp(-y_i (x_i beta + b0))).

    The intercept is unpenalized; balanced class weights are n / (2 n_c).
    Full-batch gradient descent with Armijo backtracking, stopping when
    the gradient norm drops below 1e-6 or max_iter is reached.
    """
    x = np.asarray(x, dtype=np.float64)
    y = np.asarray(y)
    if x.ndim != 2 or x.shape[0] != y.shape[0] or x.shape[0] < 2:
        raise ValueError("need an (n, d) matrix and n labels with n >= 2")
    classes = np.unique(y)
    if classes.shape[0] != 2:
        raise ValueError("logistic regression requires both classes present")
    if class_weights not in ("balanced", "none"):
        raise ValueError(f"unknown class_weights {class_weights!r}")

    y_signed = np.where(y == 1, 1.0, -1.0)
    n = x.shape[0]
    if class_weights == "balanced":
        n_pos = int(np.sum(y == 1))
        w_pos = n / (2.0 * n_pos)
        w_neg = n / (2.0 * (n - n_pos))
        weights = np.where(y == 1, w_pos, w_neg)
    else:
        weights = np.ones(n)

    beta = np.zeros(x.shape[1])
    intercept = 0.0
    obj = _logreg_objective(beta, intercept, x, y_signed, weights, c)
    step = 1.0
    converged = False
    it = 0
    for it in range(1, max_iter + 1):
        gb, gi = _logreg_gradient(beta, intercept, x, y_signed, weights, c)
        gnorm_sq = float(gb @ gb) + gi * gi
        if np.sqrt(gnorm_sq) < 1e-6:
            converged = True
            break
        # Armijo backtracking from twice the last accepted step
        step = min(step * 2.0, 1e8)
        while step > 1e-16:
            nb = beta - step * gb
            ni = intercept - step * gi
            new_obj = _logreg_objective(nb, ni, x, y_signed, weights, c)
            if new_obj <= obj - 1e-4 * step * gnorm_sq:
                beta, intercept, obj = nb, ni, new_obj
                break
            step *= 0.5
        else:
            break  # no descent step found; numerically stuck
    return LogregFit(beta=beta, intercept=intercept, converged=converged, n_iter=it)


def logreg_predict(beta: np.ndarray, intercept: float, x: np.ndarray) -> np.ndarray:
    """Class-1 probabilities sigma(X beta + b0)."""
    x = np.asarray(x, dtype=np.float64)
    return expit(x @ np.asarray(beta, dtype=np.float64) + intercept)


# ---------------------------------------------------------------------------
# Stratified k-fold cross-validation
# ---------------------------------------------------------------------------

def stratified_kfold(y: np.ndarray, k: int = 10, seed: int = 0) -> np.ndarray:
    """Fold index per row: per-class seeded shuffle, then round-robin.

    Every fold's class counts are within one of exact proportionality.
    """
    y = np.asarray(y)
    folds = np.empty(y.shape[0], dtype=int)
    rng = np.random.default_rng(seed)
    for cls in np.unique(y):
        idx = np.flatnonzero(y == cls)
        if idx.shape[0] < k:
            raise ValueError(f"class {cls!r} has {idx.shape[0]} members, need >= {k}")
        shuffled = idx[rng.permutation(idx.shape[0])]
        folds[shuffled] = np.arange(shuffled.shape[0]) % k
    return folds


def standardize(train: np.ndarray, apply_to: np.ndarray,
                std_floor: float = 1e-12) -> tuple[np.ndarray, np.ndarray]:
    """Column-standardize both matrices with the training mean/std."""
    mean = train.mean(axis=0)
    std = np.maximum(train.std(axis=0), std_floor)
    return (train - mean) / std, (apply_to - mean) / std


NAIVE_RULE_SETS = {
    "likes": ("likes",),
    "streams": ("streams",),
    "aesthetics": AESTHETIC_DIMENSIONS,
    "all": BASE_DIMENSIONS,
}


def _strata_masks(instrumental: np.ndarray) -> dict[str, np.ndarray]:
    return {"overall": np.ones(instrumental.shape[0], dtype=bool),
            "instrumental": instrumental == 1,
            "vocal": instrumental == 0}


def _classification_metrics(scores: np.ndarray, preds: np.ndarray,
                            labels: np.ndarray) -> dict:
    out = {"auc": auc(scores, labels), "f1": f1(preds, labels),
           "macro_f1": 0.5 * (f1(preds, labels, positive_class=1)
                              + f1(preds, labels, positive_class=0)),
           "n": int(labels.shape[0])}
    return out


def cross_validate(battles: Sequence[Battle], k: int = 10, seed: int = 0,
                   dimensions: Sequence[str] = ALL_DIMENSIONS,
                   c: float = 0.1, class_weights: str = "balanced",
                   max_iter: int = 1000) -> dict:
    """Stratified k-fold logistic regression plus naive-rule baselines.

    Per fold, features are standardized with the training folds' mean and
    std, the model is fit on the training folds and scored on the held-out
    fold. Stratified (instrumental/vocal) metrics come from the pooled
    out-of-fold predictions; naive rules are evaluated on the full set.
    The positive class is "A wins".
    """
    x = np.stack([battle_features(b, dimensions=dimensions) for b in battles])
    y = np.array([1 if b.winner == "A" else 0 for b in battles])
    instrumental = np.array([b.instrumental for b in battles])
    folds = stratified_kfold(y, k=k, seed=seed)

    fold_rows = []
    oof_scores = np.empty(len(battles))
    warnings: list[str] = []
    for fold in range(k):
        held = folds == fold
        x_train, x_held = standardize(x[~held], x[held])
        fit = logreg_fit(x_train, y[~held], c=c, class_weights=class_weights,
                         max_iter=max_iter)
        if not fit.converged:
            warnings.append(f"fold {fold}: gradient descent hit max_iter={max_iter}")
        probs = logreg_predict(fit.beta, fit.intercept, x_held)
        oof_scores[held] = probs
        fold_rows.append({
            "fold": fold,
            "auc": auc(probs, y[held]),
            "f1": f1((probs >= 0.5).astype(int), y[held]),
            "n": int(held.sum()),
        })

    oof_preds = (oof_scores >= 0.5).astype(int)
    logreg_report = {
        "folds": fold_rows,
        "mean_auc": float(np.mean([r["auc"] for r in fold_rows])),
        "mean_f1": float(np.mean([r["f1"] for r in fold_rows])),
        "pooled": {name: _classification_metrics(oof_scores[mask], oof_preds[mask], y[mask])
                   for name, mask in _strata_masks(instrumental).items() if mask.any()},
        "warnings": warnings,
    }

    naive_report = {}
    for rule_name, dims in NAIVE_RULE_SETS.items():
        preds, ties = [], 0
        for b in battles:
            winner, tied = naive_rule(b, dims)
            preds.append(1 if winner == "A" else 0)
            ties += tied
        preds = np.array(preds)
        naive_report[rule_name] = {
            "ties": ties,
            **{name: _classification_metrics(preds[mask].astype(float),
                                             preds[mask], y[mask])
               for name, mask in _strata_masks(instrumental).items() if mask.any()},
        }

    return {
        "n_battles": len(battles),
        "k": k,
        "seed": seed,
        "dimensions": list(dimensions),
        "n_features": x.shape[1],
        "logreg": logreg_report,
        "naive_rules": naive_report,
    }


# ---------------------------------------------------------------------------
# Battles file I/O
# ---------------------------------------------------------------------------

def _score_vector_from_obj(obj: dict, where: str) -> ScoreVector:
    missing = [f for f in BASE_DIMENSIONS if f not in obj]
    if missing:
        raise ManifestError(f"{where}: missing score field {missing[0]}")
    return ScoreVector(**{f: float(obj[f]) for f in BASE_DIMENSIONS})


def load_battles(path) -> list[Battle]:
    battles = []
    with open(path, "r", encoding="utf-8") as fh:
        for lineno, line in enumerate(fh, start=1):
            if not line.strip():
                continue
            try:
                obj = json.loads(line)
            except json.JSONDecodeError as exc:
                raise ManifestError(f"line {lineno}: invalid JSON ({exc.msg})") from exc
            for name in ("battle_id", "scores_a", "scores_b", "instrumental", "winner"):
                if name not in obj:
                    raise ManifestError(f"line {lineno}: missing field {name}")
            try:
                battles.append(Battle(
                    battle_id=str(obj["battle_id"]),
                    scores_a=_score_vector_from_obj(obj["scores_a"], f"line {lineno} scores_a"),
                    scores_b=_score_vector_from_obj(obj["scores_b"], f"line {lineno} scores_b"),
                    instrumental=int(obj["instrumental"]),
                    winner=str(obj["winner"]),
                ))
            except ValueError as exc:
                raise ManifestError(f"line {lineno}: {exc}") from exc
    return battles


def battle_to_obj(b: Battle) -> dict:
    return {
        "battle_id": b.battle_id,
        "scores_a": dict(zip(BASE_DIMENSIONS, b.scores_a.base)),
        "scores_b": dict(zip(BASE_DIMENSIONS, b.scores_b.base)),
        "instrumental": b.instrumental,
        "winner": b.winner,
    }


def save_battles(battles: Sequence[Battle], path) -> None:
    lines = [json.dumps(battle_to_obj(b)) for b in battles]
    atomic_write_text(path, "".join(line + "\n" for line in lines))
