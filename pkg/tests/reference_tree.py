"""Slow, direct best-first regression tree used as a test oracle."""

import numpy as np


def best_split(X, r, idx, min_leaf):
    n = len(idx)
    if n < 2 * min_leaf:
        return None
    rr_all = r[idx]
    tot = rr_all.sum()
    sq = (rr_all ** 2).sum()
    base = tot * tot / n
    best = None
    for j in range(X.shape[1]):
        vals = X[idx, j]
        order = np.argsort(vals, kind="stable")
        v = vals[order]
        cs = np.cumsum(rr_all[order])
        for k in range(min_leaf, n - min_leaf + 1):
            if v[k - 1] == v[k]:
                continue
            left = cs[k - 1]
            gain = left * left / k + (tot - left) ** 2 / (n - k) - base
            if gain > 1e-12 * sq and (best is None or gain > best[0]):
                lo, hi = v[k - 1], v[k]
                thr = lo + (hi - lo) / 2.0
                if not thr < hi:
                    thr = lo
                best = (gain, j, thr)
    return best


def reference_tree(X, r, max_leaves, min_leaf):
    """Returns (leaf assignment function, list of (feature, threshold) splits in order)."""
    X = np.asarray(X, float)
    r = np.asarray(r, float)
    leaves = [(np.arange(len(r)), best_split(X, r, np.arange(len(r)), min_leaf), [])]
    splits = []
    while len(leaves) < max_leaves:
        pick = None
        for i, (_, b, _) in enumerate(leaves):
            if b is not None and (pick is None or b[0] > leaves[pick][1][0]):
                pick = i
        if pick is None:
            break
        idx, (g, j, thr), path = leaves[pick]
        splits.append((j, thr))
        li = idx[X[idx, j] <= thr]
        ri = idx[X[idx, j] > thr]
        leaves[pick] = (li, best_split(X, r, li, min_leaf), path + [(j, thr, True)])
        leaves.append((ri, best_split(X, r, ri, min_leaf), path + [(j, thr, False)]))
    pred = np.empty(len(r))
    for idx, _, _ in leaves:
        pred[idx] = r[idx].mean()
    return pred, splits, len(leaves)
