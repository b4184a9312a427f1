"""Naive reference implementations: plain loops, no stabilisation."""
import math

import numpy as np


def supcon_naive(feats, labels, temperature):
    n = len(labels)
    z = []
    for f in feats:
        norm = math.sqrt(sum(v * v for v in f))
        z.append([v / norm for v in f])
    total = 0.0
    for i in range(n):
        denom = 0.0
        for a in range(n):
            if a != i:
                denom += math.exp(sum(z[i][d] * z[a][d] for d in range(len(z[i]))) / temperature)
        pos = [p for p in range(n) if p != i and labels[p] == labels[i]]
        acc = 0.0
        for p in pos:
            num = math.exp(sum(z[i][d] * z[p][d] for d in range(len(z[i]))) / temperature)
            acc += math.log(num / denom)
        total += -acc / len(pos)
    return total


def mmd_naive(real, virt):
    total = 0.0
    for r, v in zip(real, virt):
        d = len(r[0])
        mr = [sum(row[j] for row in r) / len(r) for j in range(d)]
        mv = [sum(row[j] for row in v) / len(v) for j in range(d)]
        total += sum((a - b) ** 2 for a, b in zip(mr, mv))
    return total


def random_supcon_instance(rng):
    """Pooled labels where every class appears at least twice; <= 16 samples, d <= 8."""
    k = int(rng.integers(1, 5))
    counts = rng.integers(2, 5, size=k)
    while counts.sum() > 16:
        counts[np.argmax(counts)] -= 1
    labels = np.repeat(np.arange(k), counts)
    rng.shuffle(labels)
    d = int(rng.integers(1, 9))
    feats = rng.standard_normal((labels.size, d)) * rng.uniform(0.1, 3.0)
    g = int(rng.integers(0, labels.size + 1))
    temperature = float(rng.uniform(0.05, 1.0))
    return feats, labels, g, temperature


def random_mmd_instance(rng):
    k = int(rng.integers(1, 5))
    d = int(rng.integers(1, 9))
    real = [rng.standard_normal((int(rng.integers(1, 17)), d)) for _ in range(k)]
    virt = [rng.standard_normal((int(rng.integers(1, 17)), d)) + rng.standard_normal(d) for _ in range(k)]
    return real, virt
