"""Slow, obviously-correct reference implementations used only by tests."""
import itertools
from collections import deque

import numpy as np


def percentile_by_sort(values, q):
    v = sorted(float(x) for x in values)
    pos = (len(v) - 1) * q / 100.0
    lo = int(np.floor(pos))
    hi = min(lo + 1, len(v) - 1)
    return v[lo] + (v[hi] - v[lo]) * (pos - lo)


def median_filter_naive(vol, k=5):
    r = k // 2
    padded = np.pad(vol, r, mode="edge")
    out = np.empty_like(vol)
    X, Y, Z = vol.shape
    for i in range(X):
        for j in range(Y):
            for l in range(Z):
                block = sorted(padded[i:i + k, j:j + k, l:l + k].ravel().tolist())
                out[i, j, l] = block[len(block) // 2]
    return out


def erode_naive(mask, radius):
    offsets = [
        o for o in itertools.product(range(-radius, radius + 1), repeat=3)
        if sum(abs(c) for c in o) <= radius
    ]
    out = np.zeros_like(mask, dtype=bool)
    X, Y, Z = mask.shape
    for i, j, l in zip(*np.nonzero(mask)):
        ok = True
        for dx, dy, dz in offsets:
            a, b, c = i + dx, j + dy, l + dz
            if not (0 <= a < X and 0 <= b < Y and 0 <= c < Z) or not mask[a, b, c]:
                ok = False
                break
        out[i, j, l] = ok
    return out


def neighbours(connectivity):
    result = []
    for o in itertools.product((-1, 0, 1), repeat=3):
        nz = sum(c != 0 for c in o)
        if nz == 0:
            continue
        if connectivity == 6 and nz > 1:
            continue
        if connectivity == 18 and nz > 2:
            continue
        result.append(o)
    return result


def flood_fill_components(b, connectivity=26):
    """List of components, each a list of voxel index tuples."""
    seen = np.zeros_like(b, dtype=bool)
    comps = []
    offs = neighbours(connectivity)
    shape = b.shape
    for start in zip(*np.nonzero(b)):
        if seen[start]:
            continue
        comp = []
        q = deque([start])
        seen[start] = True
        while q:
            v = q.popleft()
            comp.append(v)
            for o in offs:
                w = tuple(v[d] + o[d] for d in range(3))
                if all(0 <= w[d] < shape[d] for d in range(3)) and b[w] and not seen[w]:
                    seen[w] = True
                    q.append(w)
        comps.append(comp)
    return comps


def prune_naive(b, min_voxels=8, connectivity=26):
    out = np.zeros_like(b, dtype=bool)
    for comp in flood_fill_components(b, connectivity):
        if len(comp) >= min_voxels:
            for v in comp:
                out[v] = True
    return out


def auprc_enumeration(scores, labels):
    """Step through every distinct threshold by brute force."""
    scores = list(map(float, scores))
    labels = list(map(bool, labels))
    n_pos = sum(labels)
    pts = []
    for t in sorted(set(scores), reverse=True):
        tp = sum(1 for s, y in zip(scores, labels) if s >= t and y)
        fp = sum(1 for s, y in zip(scores, labels) if s >= t and not y)
        pts.append((tp / n_pos, tp / (tp + fp)))
    area = 0.0
    prev_r, prev_p = 0.0, pts[0][1]
    for r, p in pts:
        area += (r - prev_r) * (p + prev_p) / 2.0
        prev_r, prev_p = r, p
    return area


def auroc_pairwise(scores, labels):
    pos = [s for s, y in zip(scores, labels) if y]
    neg = [s for s, y in zip(scores, labels) if not y]
    total = 0.0
    for p in pos:
        for n in neg:
            total += 1.0 if p > n else 0.5 if p == n else 0.0
    return total / (len(pos) * len(neg))


def dice_count(a, b):
    a = [bool(x) for x in np.ravel(a)]
    b = [bool(x) for x in np.ravel(b)]
    inter = sum(1 for x, y in zip(a, b) if x and y)
    size = sum(a) + sum(b)
    return 1.0 if size == 0 else 2.0 * inter / size


def prune_label(b, min_voxels=8, connectivity=26):
    """Component pruning via scipy labelling; checked against flood fill in tests."""
    from scipy import ndimage

    rank = {6: 1, 18: 2, 26: 3}[connectivity]
    labels, n = ndimage.label(b, structure=ndimage.generate_binary_structure(3, rank))
    out = np.zeros_like(b, dtype=bool)
    for k in range(1, n + 1):
        comp = labels == k
        if comp.sum() >= min_voxels:
            out |= comp
    return out


def best_dice_grid(scores_list, gt_list, min_voxels=8, connectivity=26, step=1,
                   prune=prune_label):
    """Exhaustive scan of thresholds j/1000, pooled DICE; first maximum wins."""
    best, best_t = -1.0, None
    n_gt = sum(int(g.sum()) for g in gt_list)
    for j in range(0, 1001, step):
        t = j / 1000
        inter = pred = 0
        for s, g in zip(scores_list, gt_list):
            p = prune(s > t, min_voxels, connectivity)
            inter += int((p & g).sum())
            pred += int(p.sum())
        d = 2.0 * inter / (pred + n_gt)
        if d > best:
            best, best_t = d, t
    return best, best_t


def chi_square_loop(p, q):
    total = 0.0
    for a, b in zip(p, q):
        if a + b > 0:
            total += (a - b) ** 2 / (a + b)
    return 0.5 * total


def pearson_definition(x, y):
    n = len(x)
    mx = sum(x) / n
    my = sum(y) / n
    cov = sum((a - mx) * (b - my) for a, b in zip(x, y))
    vx = sum((a - mx) ** 2 for a in x)
    vy = sum((b - my) ** 2 for b in y)
    return cov / (vx * vy) ** 0.5


def central_difference(f, x, index, h=1e-4):
    xp = x.copy()
    xm = x.copy()
    xp[index] += h
    xm[index] -= h
    return (f(xp) - f(xm)) / (2 * h)
