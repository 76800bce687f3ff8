"""Evaluation metrics: frame accuracy, unit error rate, label NMI."""

import numpy as np


def frame_accuracy(predicted, reference):
    """Fraction of frames whose state label matches the reference exactly."""
    predicted = np.asarray(predicted)
    reference = np.asarray(reference)
    if predicted.shape != reference.shape:
        raise ValueError(
            f"length mismatch: {predicted.shape} vs {reference.shape}"
        )
    if predicted.size == 0:
        raise ValueError("empty sequences")
    return float(np.mean(predicted == reference))


def levenshtein(a, b):
    """Edit distance between two sequences (substitution cost 1)."""
    a, b = list(a), list(b)
    if len(a) < len(b):
        a, b = b, a
    prev = list(range(len(b) + 1))
    for i, x in enumerate(a, start=1):
        cur = [i]
        for j, y in enumerate(b, start=1):
            cur.append(min(prev[j] + 1, cur[-1] + 1, prev[j - 1] + (x != y)))
        prev = cur
    return prev[-1]


def unit_error_rate(decoded, reference):
    """Levenshtein distance over the reference length.

    Can exceed 1.0 for insertion-heavy hypotheses; the companion accuracy
    1 - UER is clamped to [0, 1] where reported.
    """
    reference = list(reference)
    if not reference:
        raise ValueError("empty reference")
    return levenshtein(list(decoded), reference) / len(reference)


def unit_accuracy(decoded, reference):
    return max(0.0, 1.0 - unit_error_rate(decoded, reference))


def normalized_mutual_info(a, b):
    """NMI with arithmetic-mean normalization: I(a;b) / ((H(a)+H(b))/2)."""
    a = np.asarray(a)
    b = np.asarray(b)
    if a.shape != b.shape:
        raise ValueError("label arrays differ in length")
    _, ai = np.unique(a, return_inverse=True)
    _, bi = np.unique(b, return_inverse=True)
    joint = np.zeros((ai.max() + 1, bi.max() + 1))
    np.add.at(joint, (ai, bi), 1.0)
    joint /= joint.sum()
    pa = joint.sum(axis=1)
    pb = joint.sum(axis=0)
    nz = joint > 0
    mi = float(np.sum(joint[nz] * np.log(joint[nz] / np.outer(pa, pb)[nz])))
    ha = -float(np.sum(pa[pa > 0] * np.log(pa[pa > 0])))
    hb = -float(np.sum(pb[pb > 0] * np.log(pb[pb > 0])))
    if ha + hb == 0.0:
        return 1.0  # both labelings constant: identical partitions
    return 2.0 * mi / (ha + hb)
