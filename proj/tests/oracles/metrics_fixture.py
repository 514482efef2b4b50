"""Writes the metrics fixture and its expected report.

Independent of the C++ code: bins use exact rational edges, separability
comes from scikit-learn.
"""
import json
import math
from fractions import Fraction
from pathlib import Path

from sklearn.metrics import average_precision_score, roc_auc_score

OUT = Path(__file__).resolve().parent.parent / "fixtures"
BINS = 15

# (mean, label, mi); several confidences sit exactly on 15-bin edges or tie
# across correct and misclassified items.
TEST = [
    ([0.80, 0.15, 0.05], 0, 0.010),
    ([0.80, 0.10, 0.10], 1, 0.060),
    ([0.60, 0.30, 0.10], 0, 0.020),
    ([0.60, 0.20, 0.20], 2, 0.080),
    ([0.10, 0.85, 0.05], 1, 0.005),
    ([0.20, 0.70, 0.10], 1, 0.030),
    ([0.05, 0.05, 0.90], 2, 0.002),
    ([0.40, 0.35, 0.25], 0, 0.100),
    ([0.40, 0.30, 0.30], 1, 0.120),
    ([0.30, 0.30, 0.40], 2, 0.090),
    ([1.00, 0.00, 0.00], 0, 0.000),
    ([0.05, 0.95, 0.00], 0, 0.000),
    ([0.50, 0.45, 0.05], 1, 0.150),
    ([0.34, 0.33, 0.33], 0, 0.200),
    ([0.25, 0.50, 0.25], 1, 0.050),
    ([0.10, 0.20, 0.70], 2, 0.040),
    ([0.70, 0.20, 0.10], 2, 0.070),
    ([0.15, 0.80, 0.05], 1, 0.015),
    ([0.45, 0.10, 0.45], 2, 0.110),
    ([0.95, 0.03, 0.02], 0, 0.001),
]
OOD = [
    ([0.40, 0.30, 0.30], 0.250),
    ([0.50, 0.25, 0.25], 0.300),
    ([0.34, 0.33, 0.33], 0.400),
    ([0.80, 0.10, 0.10], 0.050),
    ([0.60, 0.35, 0.05], 0.180),
    ([0.35, 0.35, 0.30], 0.350),
]


def argmax(v):
    best = 0
    for i, x in enumerate(v):
        if x > v[best]:
            best = i
    return best


def entropy(v):
    return -sum(p * math.log(p) for p in v if p > 0)


def bin_of(x, bins, hi=1.0):
    t = Fraction(x) / Fraction(hi)
    if t <= 0:
        return 0
    if t >= 1:
        return bins - 1
    for b in range(bins):
        if t <= Fraction(b + 1, bins):
            return b
    return bins - 1


def calibration(confs, correct):
    n = len(confs)
    groups = {}
    for c, ok in zip(confs, correct):
        groups.setdefault(bin_of(c, BINS), []).append((c, ok))
    ece, mce = 0.0, 0.0
    for items in groups.values():
        acc = sum(1 for _, ok in items if ok) / len(items)
        conf = sum(c for c, _ in items) / len(items)
        gap = abs(acc - conf)
        ece += len(items) / n * gap
        mce = max(mce, gap)
    return ece, mce


def record(mean, y, mi):
    h = entropy(mean)
    return {"mean": mean, "conf": max(mean), "entropy": h, "mi": min(mi, h), "y": y}


def separability(pos, neg):
    labels = [1] * len(pos) + [0] * len(neg)
    scores = pos + neg
    return roc_auc_score(labels, scores), average_precision_score(labels, scores)


def main():
    test = [record(m, y, mi) for m, y, mi in TEST]
    ood = [record(m, None, mi) for m, mi in OOD]
    correct = [argmax(p["mean"]) == p["y"] for p in test]
    confs = [p["conf"] for p in test]
    ece, mce = calibration(confs, correct)
    ece_o, mce_o = calibration(confs + [p["conf"] for p in ood], correct + [False] * len(ood))
    nll = -sum(math.log(p["mean"][p["y"]]) for p in test)
    brier = sum(
        sum((q - (1.0 if k == p["y"] else 0.0)) ** 2 for k, q in enumerate(p["mean"])) for p in test
    ) / len(test)

    expected = {
        "bins": BINS,
        "accuracy": sum(correct) / len(test),
        "ece": ece,
        "mce": mce,
        "ece_with_ood": ece_o,
        "mce_with_ood": mce_o,
        "nll": nll / len(test),
        "brier": brier,
    }
    for name, key, sign in [("confidence", "conf", 1), ("entropy", "entropy", -1), ("mutual-information", "mi", -1)]:
        pos = [sign * p[key] for p, ok in zip(test, correct) if ok]
        neg = [sign * p[key] for p, ok in zip(test, correct) if not ok]
        a, b = separability(pos, neg)
        ia, ib = separability([sign * p[key] for p in test], [sign * p[key] for p in ood])
        expected[name] = {
            "auroc_misclassification": a,
            "aupr_misclassification": b,
            "auroc_ood": ia,
            "aupr_ood": ib,
        }
    hist = {"correct": [0] * BINS, "misclassified": [0] * BINS, "ood": [0] * BINS}
    for p, ok in zip(test, correct):
        hist["correct" if ok else "misclassified"][bin_of(p["conf"], BINS)] += 1
    for p in ood:
        hist["ood"][bin_of(p["conf"], BINS)] += 1
    expected["confidence_histogram"] = {k: [c / sum(v) for c in v] for k, v in hist.items()}

    OUT.mkdir(parents=True, exist_ok=True)
    (OUT / "metrics_test_preds.json").write_text(json.dumps(test, indent=2) + "\n")
    (OUT / "metrics_ood_preds.json").write_text(json.dumps(ood, indent=2) + "\n")
    (OUT / "metrics_expected.json").write_text(json.dumps(expected, indent=2) + "\n")


if __name__ == "__main__":
    main()
