"""Scalar-loop reference implementations of every loss and metric formula.

Deliberately slow and independent of the package internals: plain Python
loops over floats, so the vectorized implementations can be checked against
them on small random inputs.
"""

import math


def presence_loss_ref(p, target_total):
    """p: nested list [B][K]."""
    b = len(p)
    k = len(p[0])
    first = 0.0
    for row in p:
        first += (sum(row) - target_total) ** 2
    first /= b
    second = 0.0
    for ki in range(k):
        col = sum(p[bi][ki] for bi in range(b))
        second += (col - target_total * b / k) ** 2
    second /= k
    return first + second


def concentration_loss_ref(v):
    """v: nested list [K][H][W]."""
    total = 0.0
    h = len(v[0])
    w = len(v[0][0])
    for vk in v:
        for i in range(h):
            for j in range(w):
                dist = math.sqrt((i - w / 2.0) ** 2 + (j - h / 2.0) ** 2)
                total += dist * vk[i][j]
    return total


def balance_loss_ref(v):
    """Population std of per-template visibility mass. v: [K][H][W]."""
    masses = [sum(sum(row) for row in vk) for vk in v]
    k = len(masses)
    if k < 2:
        return 0.0
    mean = sum(masses) / k
    return math.sqrt(sum((m - mean) ** 2 for m in masses) / k)


def classification_loss_ref(r, r_target, floor=1e-12):
    """r, r_target: [M][K]; target columns one-hot."""
    m = len(r)
    k = len(r[0])
    total = 0.0
    for ki in range(k):
        for mi in range(m):
            total -= r_target[mi][ki] * math.log(max(r[mi][ki], floor))
    return total / k


def silhouette_loss_ref(v_parts, v_mean):
    """v_parts, v_mean: [M][H][W]; L2 norm per part, averaged over parts."""
    m = len(v_parts)
    total = 0.0
    for mi in range(m):
        sq = 0.0
        for row_a, row_b in zip(v_parts[mi], v_mean[mi]):
            for a, b in zip(row_a, row_b):
                sq += (a - b) ** 2
        total += math.sqrt(sq)
    return total / m


def relation_entropy_ref(r, floor=1e-12):
    """r: [M][K], columns are distributions over parts."""
    m = len(r)
    k = len(r[0])
    total = 0.0
    for ki in range(k):
        ent = 0.0
        for mi in range(m):
            ent -= r[mi][ki] * math.log(max(r[mi][ki], floor))
        total += ent
    return total / k


def ncd_ref(labels, num_parts):
    """labels: [H][W] ints in {0..num_parts}, 0 = background."""
    h = len(labels)
    w = len(labels[0])
    per_part = []
    for n in range(1, num_parts + 1):
        pixels = [
            (i, j) for i in range(h) for j in range(w) if labels[i][j] == n
        ]
        if not pixels:
            continue
        z = float(len(pixels))
        ci = sum(i for i, _ in pixels) / z
        cj = sum(j for _, j in pixels) / z
        spread = sum(
            math.sqrt((i - ci) ** 2 + (j - cj) ** 2) for i, j in pixels
        ) / z
        per_part.append(spread)
    if not per_part:
        raise ValueError("empty segmentation")
    return sum(per_part) / len(per_part)


def nme_ref(pred, gt, interocular):
    """pred, gt: [N][2]; returns percent."""
    n = len(pred)
    total = 0.0
    for (px, py), (gx, gy) in zip(pred, gt):
        total += math.hypot(px - gx, py - gy) / interocular
    return 100.0 * total / n


def mixture_nll_ref(image, presence, vis, means, sigma, floor=1e-8):
    """Single-channel mixture NLL per the reconstruction objective.

    image: [H][W]; presence: [K]; vis, means: [K][H][W].
    """
    h = len(image)
    w = len(image[0])
    k = len(presence)
    total = 0.0
    for i in range(h):
        for j in range(w):
            raw = [presence[ki] * vis[ki][i][j] + floor for ki in range(k)]
            norm = sum(raw)
            acc = 0.0
            for ki in range(k):
                wgt = raw[ki] / norm
                diff = image[i][j] - means[ki][i][j]
                dens = math.exp(-0.5 * (diff / sigma) ** 2) / (
                    sigma * math.sqrt(2 * math.pi)
                )
                acc += wgt * dens
            total -= math.log(acc)
    return total / (h * w)
