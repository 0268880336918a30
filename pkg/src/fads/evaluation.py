"""ROC/AUC and the stratified k-fold protocol."""
from collections import defaultdict
from dataclasses import dataclass

import numpy as np

from .rng import SplitMix64


def _check_labels(labels):
    labels = np.asarray(labels)
    if not np.isin(labels, (0, 1)).all():
        raise ValueError("labels must be 0 (nominal) or 1 (anomaly)")
    n_pos = int(labels.sum())
    if n_pos == 0 or n_pos == labels.size:
        raise ValueError("AUC needs at least one nominal and one anomalous item")
    return labels.astype(bool)


def roc_auc(scores, labels):
    """Mann-Whitney AUC (ties count 1/2) and ROC points at every distinct threshold.

    Returns ``(auc, [(fpr, tpr), ...])``, the curve running from (0, 0) to (1, 1).
    """
    scores = np.asarray(scores, dtype=np.float64)
    pos = _check_labels(labels)
    if scores.shape != pos.shape:
        raise ValueError("scores and labels differ in length")
    if not np.isfinite(scores).all():
        raise ValueError("scores must be finite")
    n_pos, n_neg = int(pos.sum()), int((~pos).sum())

    uniq, inverse, counts = np.unique(scores, return_inverse=True, return_counts=True)
    starts = np.concatenate(([0], np.cumsum(counts)[:-1]))
    mid_rank = starts + (counts + 1) / 2.0  # 1-based average rank per distinct value
    rank_sum = mid_rank[inverse][pos].sum()
    auc = (rank_sum - n_pos * (n_pos + 1) / 2.0) / (n_pos * n_neg)

    pos_per_value = np.bincount(inverse, weights=pos, minlength=uniq.size)[::-1]
    neg_per_value = counts[::-1] - pos_per_value
    tpr = np.concatenate(([0.0], np.cumsum(pos_per_value) / n_pos))
    fpr = np.concatenate(([0.0], np.cumsum(neg_per_value) / n_neg))
    return float(auc), list(zip(fpr.tolist(), tpr.tolist()))


def pixel_roc_auc(maps, ground_truth):
    """AUC over all pixels of all images pooled together."""
    values, labels = [], []
    for m, gt in zip(maps, ground_truth, strict=True):
        m = np.asarray(getattr(m, "values", m))
        gt = np.asarray(gt)
        if m.shape != gt.shape:
            raise ValueError(f"saliency shape {m.shape} differs from ground truth {gt.shape}")
        values.append(m.ravel())
        labels.append((gt.ravel() > 0).astype(int))
    return roc_auc(np.concatenate(values), np.concatenate(labels))[0]


@dataclass(frozen=True)
class FoldPlan:
    folds: tuple  # ((train_ids, test_ids), ...)
    strata: dict

    @property
    def k(self):
        return len(self.folds)


def stratified_kfold(ids, strata, labels=None, k=7, seed=0):
    """Deal ids into ``k`` folds, stratum by stratum.

    Within each stratum (in sorted order) ids are shuffled with splitmix64
    and dealt round-robin, continuing the deal across strata. Anomalous ids
    (label 1) are dealt separately and only ever appear in test sets;
    training sets are the nominal ids outside the fold.
    """
    ids = list(ids)
    strata = list(strata)
    labels = [0] * len(ids) if labels is None else [0 if lab is None else int(lab) for lab in labels]
    if not len(ids) == len(strata) == len(labels):
        raise ValueError("ids, strata and labels differ in length")
    if len(set(ids)) != len(ids):
        raise ValueError("ids must be unique")
    if k < 2:
        raise ValueError("k must be at least 2")
    n_nominal = labels.count(0)
    if k > n_nominal:
        raise ValueError(f"k = {k} exceeds the number of nominal ids ({n_nominal})")

    groups = defaultdict(list)
    for i, s, lab in zip(ids, strata, labels):
        groups[(lab, s)].append(i)
    rng = SplitMix64(seed)
    test = [[] for _ in range(k)]
    for lab in (0, 1):
        cursor = 0
        for key in sorted(key for key in groups if key[0] == lab):
            for i in rng.shuffle(sorted(groups[key])):
                test[cursor % k].append(i)
                cursor += 1
    nominal = [i for i, lab in zip(ids, labels) if lab == 0]
    folds = []
    for f in range(k):
        held = set(test[f])
        folds.append((tuple(i for i in nominal if i not in held), tuple(i for i in ids if i in held)))
    return FoldPlan(tuple(folds), dict(zip(ids, strata)))


def per_part_score(scores_by_part):
    """Mean and population std of the scores of each part's views."""
    out = {}
    for part, scores in scores_by_part.items():
        scores = np.asarray(list(scores), dtype=np.float64)
        if scores.size == 0:
            raise ValueError(f"part {part!r} has no scores")
        out[part] = (float(scores.mean()), float(scores.std()))
    return out
