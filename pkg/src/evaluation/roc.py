import numpy as np
from django.core.exceptions import ValidationError
from scipy.stats import rankdata


def _scores(values, name: str) -> np.ndarray:
    values = np.asarray(values, dtype=np.float64).ravel()
    if values.size == 0:
        raise ValidationError(f"{name} scores are empty", code="empty_scores")
    if not np.all(np.isfinite(values)):
        raise ValidationError(f"{name} scores contain non-finite values", code="non_finite_score")
    return values


def auroc(id_scores, ood_scores) -> float:
    """
    Area under the ROC curve with OOD as the positive class.

    Mann-Whitney form on mid-ranks: the probability that a random OOD score
    exceeds a random ID score, ties counted one half.
    """
    id_scores = _scores(id_scores, "ID")
    ood_scores = _scores(ood_scores, "OOD")
    n_id, n_ood = id_scores.size, ood_scores.size
    ranks = rankdata(np.concatenate([ood_scores, id_scores]))
    u_statistic = ranks[:n_ood].sum() - n_ood * (n_ood + 1) / 2.0
    return float(u_statistic / (n_id * n_ood))
