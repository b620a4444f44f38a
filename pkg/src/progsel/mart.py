"""Gradient-boosted regression trees (squared loss) with exact greedy splits."""

from __future__ import annotations

import json
import time
from dataclasses import dataclass, field
from typing import Optional

import numpy as np
from numba import njit

MODEL_FORMAT = "progsel-mart/1"


class TrainingError(ValueError):
    pass


@dataclass(frozen=True)
class MartParams:
    iterations: int = 200
    max_leaves: int = 30
    shrinkage: float = 0.1
    subsample: float = 0.7
    min_leaf: int = 5
    seed: int = 0

    def __post_init__(self):
        if self.iterations < 0:
            raise ValueError("iterations must be >= 0")
        if self.max_leaves < 1:
            raise ValueError("max_leaves must be >= 1")
        if not 0.0 < self.shrinkage <= 1.0:
            raise ValueError("shrinkage must be in (0, 1]")
        if not 0.0 < self.subsample <= 1.0:
            raise ValueError("subsample must be in (0, 1]")
        if self.min_leaf < 1:
            raise ValueError("min_leaf must be >= 1")

    def to_dict(self) -> dict:
        return {k: getattr(self, k) for k in ("iterations", "max_leaves", "shrinkage", "subsample", "min_leaf", "seed")}


@dataclass(frozen=True)
class RegressionTree:
    """Flattened binary tree; ``feature[i] == -1`` marks a leaf."""

    feature: np.ndarray
    threshold: np.ndarray
    left: np.ndarray
    right: np.ndarray
    value: np.ndarray

    @property
    def n_leaves(self) -> int:
        return int(np.sum(self.feature < 0))

    def predict(self, X: np.ndarray) -> np.ndarray:
        X = np.atleast_2d(np.asarray(X, dtype=np.float64))
        return _tree_predict(self.feature, self.threshold, self.left, self.right, self.value, X)

    def to_dict(self) -> dict:
        return {
            "feature": self.feature.tolist(),
            "threshold": self.threshold.tolist(),
            "left": self.left.tolist(),
            "right": self.right.tolist(),
            "value": self.value.tolist(),
        }

    @classmethod
    def from_dict(cls, d) -> "RegressionTree":
        return cls(
            np.asarray(d["feature"], dtype=np.int64),
            np.asarray(d["threshold"], dtype=np.float64),
            np.asarray(d["left"], dtype=np.int64),
            np.asarray(d["right"], dtype=np.int64),
            np.asarray(d["value"], dtype=np.float64),
        )

    @classmethod
    def leaf(cls, value: float) -> "RegressionTree":
        return cls(np.array([-1]), np.array([0.0]), np.array([-1]), np.array([-1]), np.array([float(value)]))


@njit(cache=True)
def _tree_predict(feature, threshold, left, right, value, X):
    out = np.empty(X.shape[0])
    for r in range(X.shape[0]):
        i = 0
        while feature[i] >= 0:
            if X[r, feature[i]] <= threshold[i]:
                i = left[i]
            else:
                i = right[i]
        out[r] = value[i]
    return out


HIST_MAX_BINS = 256
ROW_MASK = 0xFFFFFFFF


@njit(cache=True)
def _set_bit(bits, i, on):
    if on:
        bits[i >> 6] |= np.int64(1) << (i & 63)
    else:
        bits[i >> 6] &= ~(np.int64(1) << (i & 63))


@njit(cache=True)
def _better(gain, col, best_gain, best_col):
    # larger gain wins; equal gains go to the lower column index
    return gain > best_gain or (gain == best_gain and best_col >= 0 and col < best_col)


@njit(cache=True)
def _scan_sorted(keys, r, s, e, tot, inv, min_leaf):
    """Best split position of one presorted segment: (gain, last left position)."""
    n = e - s
    base = tot * tot * inv[n]
    acc = 0.0
    prev = -1
    best = 0.0
    pos = -1
    for q in range(s, e - min_leaf + 1):
        kk = keys[q]
        row = kk & ROW_MASK
        cd = kk >> 32
        k = q - s
        if k >= min_leaf and cd != prev:
            rest = tot - acc
            gain = acc * acc * inv[k] + rest * rest * inv[n - k] - base
            if gain > best:
                best = gain
                pos = q - 1
        acc += r[row]
        prev = cd
    return best, pos


@njit(cache=True)
def _scan_hist(hs, hc, nb, n, tot, inv, min_leaf):
    """Best split of one histogram: (gain, last left bin)."""
    base = tot * tot * inv[n]
    acc = 0.0
    k = 0
    best = 0.0
    pos = -1
    last = -1
    for b in range(nb):
        if hc[b] == 0:
            continue
        if last >= 0 and k >= min_leaf and n - k >= min_leaf:
            rest = tot - acc
            gain = acc * acc * inv[k] + rest * rest * inv[n - k] - base
            if gain > best:
                best = gain
                pos = last
        acc += hs[b]
        k += hc[b]
        last = b
    return best, pos


@njit(cache=True)
def _build_hist(codesH, r, rows, s, e, hs, hc):
    hs[:, :] = 0.0
    hc[:, :] = 0
    for c in range(codesH.shape[0]):
        code = codesH[c]
        for q in range(s, e):
            row = rows[q] & ROW_MASK
            b = code[row]
            hs[c, b] += r[row]
            hc[c, b] += 1


@njit(cache=True)
def _evaluate_hist(nbins, colH, n, tot, sq, hs, hc, inv, min_leaf, best, best_col, kind, slot, pos):
    if n < 2 * min_leaf:
        return best, best_col, kind, slot, pos
    tol = 1e-12 * sq
    for c in range(nbins.shape[0]):
        g, p = _scan_hist(hs[c], hc[c], nbins[c], n, tot, inv, min_leaf)
        if p >= 0 and g > tol and _better(g, colH[c], best, best_col):
            best, best_col, kind, slot, pos = g, colH[c], 1, c, p
    return best, best_col, kind, slot, pos


@njit(cache=True)
def _partition_scan(mS, colS, r, order, buf, bits, s, e, skip, nl, totL, sqL, totR, sqR, inv,
                    min_leaf, want_right):
    """Stable partition of every column order over [s, e), left rows first.

    Each sorted column is scanned for the best split of both sides right after
    it is partitioned, while the segment is still in cache. Column ``skip`` is
    already partitioned. Returns (gain, column, kind, slot, pos) for the left
    side followed by the same for the right side; kind is -1 when no split helps.
    """
    mid = s + nl
    nr = e - mid
    bl, bcl, kl, sll, pl = 0.0, -1, -1, -1, -1
    br, bcr, kr, slr, pr = 0.0, -1, -1, -1, -1
    tolL = 1e-12 * sqL
    tolR = 1e-12 * sqR
    do_l = nl >= 2 * min_leaf
    do_r = want_right and nr >= 2 * min_leaf
    for c in range(order.shape[0]):
        oc = order[c]
        if c != skip:
            a = s
            b = 0
            for q in range(s, e):
                kk = oc[q]
                row = kk & ROW_MASK
                g = (bits[row >> 6] >> (row & 63)) & 1
                oc[a] = kk
                buf[b] = kk
                a += g
                b += 1 - g
            for q in range(b):
                oc[a + q] = buf[q]
        if c >= mS:
            continue
        if do_l:
            g, p = _scan_sorted(oc, r, s, mid, totL, inv, min_leaf)
            if p >= 0 and g > tolL and _better(g, colS[c], bl, bcl):
                bl, bcl, kl, sll, pl = g, colS[c], 0, c, p
        if do_r:
            g, p = _scan_sorted(oc, r, mid, e, totR, inv, min_leaf)
            if p >= 0 and g > tolR and _better(g, colS[c], br, bcr):
                br, bcr, kr, slr, pr = g, colS[c], 0, c, p
    return bl, bcl, kl, sll, pl, br, bcr, kr, slr, pr


@njit(cache=True)
def _compact(src, dst, in_sample):
    """Copy the sampled rows of every column order from ``src`` into ``dst``."""
    for c in range(src.shape[0]):
        sc = src[c]
        dc = dst[c]
        a = 0
        for q in range(sc.shape[0]):
            kk = sc[q]
            if in_sample[kk & ROW_MASK]:
                dc[a] = kk
                a += 1


@njit(cache=True)
def _sums(r, keys, s, e):
    tot = 0.0
    sq = 0.0
    for q in range(s, e):
        v = r[keys[q] & ROW_MASK]
        tot += v
        sq += v * v
    return tot, sq


@njit(cache=True)
def _grow(valsS, colS, codesH, binvals, nbins, colH, r, order, max_leaves, min_leaf, inv):
    """Best-first growth over the rows listed in ``order``.

    ``order`` holds, per sorted column, every row as a ``rank << 32 | row``
    key in value order, plus a last row listing all rows; it is partitioned in
    place so each leaf owns one contiguous segment [s, e) in every row of it.
    """
    mS = valsS.shape[0]
    mH = codesH.shape[0]
    n = order.shape[1]
    rows = order[mS]
    cap = 2 * max_leaves
    feature = np.full(cap, -1, dtype=np.int64)
    threshold = np.zeros(cap)
    left = np.full(cap, -1, dtype=np.int64)
    right = np.full(cap, -1, dtype=np.int64)
    value = np.zeros(cap)

    leaf_node = np.empty(max_leaves, dtype=np.int64)
    leaf_s = np.empty(max_leaves, dtype=np.int64)
    leaf_e = np.empty(max_leaves, dtype=np.int64)
    leaf_gain = np.zeros(max_leaves)
    leaf_kind = np.full(max_leaves, -1, dtype=np.int64)
    leaf_slot = np.empty(max_leaves, dtype=np.int64)
    leaf_pos = np.empty(max_leaves, dtype=np.int64)
    nbmax = 1
    for c in range(mH):
        nbmax = max(nbmax, nbins[c])
    hist_s = np.zeros((max_leaves, mH, nbmax))
    hist_c = np.zeros((max_leaves, mH, nbmax), dtype=np.int64)
    tmp_s = np.zeros((mH, nbmax))
    tmp_c = np.zeros((mH, nbmax), dtype=np.int64)

    buf = np.empty(n, dtype=order.dtype)
    bits = np.zeros(r.shape[0] // 64 + 1, dtype=np.int64)
    n_in = n
    tot, sq = _sums(r, rows, 0, n)
    g, gc, kd, sl, ps = 0.0, -1, -1, -1, -1
    if n >= 2 * min_leaf:
        for c in range(mS):
            g2, p2 = _scan_sorted(order[c], r, 0, n, tot, inv, min_leaf)
            if p2 >= 0 and g2 > 1e-12 * sq and _better(g2, colS[c], g, gc):
                g, gc, kd, sl, ps = g2, colS[c], 0, c, p2
    _build_hist(codesH, r, rows, 0, n_in, hist_s[0], hist_c[0])
    g, gc, kd, sl, ps = _evaluate_hist(nbins, colH, n_in, tot, sq, hist_s[0], hist_c[0], inv, min_leaf,
                                       g, gc, kd, sl, ps)
    value[0] = tot / n_in
    leaf_node[0] = 0
    leaf_s[0] = 0
    leaf_e[0] = n_in
    leaf_gain[0] = g
    leaf_kind[0] = kd
    leaf_slot[0] = sl
    leaf_pos[0] = ps
    n_leaves = 1
    n_nodes = 1

    while n_leaves < max_leaves:
        pick = -1
        for li in range(n_leaves):
            if leaf_kind[li] >= 0 and (pick < 0 or leaf_gain[li] > leaf_gain[pick]):
                pick = li
        if pick < 0:
            break
        s = leaf_s[pick]
        e = leaf_e[pick]
        kd = leaf_kind[pick]
        sl = leaf_slot[pick]
        ps = leaf_pos[pick]
        skip = -1
        if kd == 0:
            oc = order[sl]
            for q in range(s, e):
                _set_bit(bits, oc[q] & ROW_MASK, q <= ps)
            lo = valsS[sl, oc[ps] & ROW_MASK]
            hi = valsS[sl, oc[ps + 1] & ROW_MASK]
            col = colS[sl]
            skip = sl
            mid = ps + 1
            totL, sqL = _sums(r, oc, s, mid)
            totR, sqR = _sums(r, oc, mid, e)
        else:
            code = codesH[sl]
            nxt = ps + 1
            while hist_c[pick, sl, nxt] == 0:
                nxt += 1
            lo = binvals[sl, ps]
            hi = binvals[sl, nxt]
            col = colH[sl]
            nl = 0
            totL, sqL, totR, sqR = 0.0, 0.0, 0.0, 0.0
            for q in range(s, e):
                row = rows[q] & ROW_MASK
                v = r[row]
                gl = code[row] <= ps
                _set_bit(bits, row, gl)
                if gl:
                    nl += 1
                    totL += v
                    sqL += v * v
                else:
                    totR += v
                    sqR += v * v
            mid = s + nl
        thr = lo + (hi - lo) / 2.0
        if not (thr < hi):
            thr = lo
        res = _partition_scan(mS, colS, r, order, buf, bits, s, e, skip, mid - s,
                              totL, sqL, totR, sqR, inv, min_leaf, True)

        # histograms: build the smaller child, derive the larger from the parent
        right_slot = n_leaves
        if mH > 0:
            if mid - s <= e - mid:
                _build_hist(codesH, r, rows, s, mid, tmp_s, tmp_c)
                hist_s[right_slot] = hist_s[pick] - tmp_s
                hist_c[right_slot] = hist_c[pick] - tmp_c
                hist_s[pick] = tmp_s
                hist_c[pick] = tmp_c
            else:
                _build_hist(codesH, r, rows, mid, e, tmp_s, tmp_c)
                hist_s[pick] = hist_s[pick] - tmp_s
                hist_c[pick] = hist_c[pick] - tmp_c
                hist_s[right_slot] = tmp_s
                hist_c[right_slot] = tmp_c

        node = leaf_node[pick]
        feature[node] = col
        threshold[node] = thr
        ln = n_nodes
        rn = n_nodes + 1
        n_nodes += 2
        left[node] = ln
        right[node] = rn
        value[ln] = totL / (mid - s)
        value[rn] = totR / (e - mid)

        g, gc, kd, sl, ps = _evaluate_hist(nbins, colH, mid - s, totL, sqL, hist_s[pick], hist_c[pick], inv,
                                           min_leaf, res[0], res[1], res[2], res[3], res[4])
        leaf_node[pick] = ln
        leaf_e[pick] = mid
        leaf_gain[pick] = g
        leaf_kind[pick] = kd
        leaf_slot[pick] = sl
        leaf_pos[pick] = ps
        g, gc, kd, sl, ps = _evaluate_hist(nbins, colH, e - mid, totR, sqR, hist_s[right_slot],
                                           hist_c[right_slot], inv, min_leaf, res[5], res[6], res[7], res[8],
                                           res[9])
        leaf_node[right_slot] = rn
        leaf_s[right_slot] = mid
        leaf_e[right_slot] = e
        leaf_gain[right_slot] = g
        leaf_kind[right_slot] = kd
        leaf_slot[right_slot] = sl
        leaf_pos[right_slot] = ps
        n_leaves += 1

    return feature[:n_nodes], threshold[:n_nodes], left[:n_nodes], right[:n_nodes], value[:n_nodes]


@dataclass
class _Prepared:
    """Distinct varying columns split into presorted and histogram groups."""

    colS: np.ndarray
    valsS: np.ndarray
    colH: np.ndarray
    codesH: np.ndarray
    binvals: np.ndarray
    nbins: np.ndarray
    order: np.ndarray
    inv: np.ndarray

    @classmethod
    def build(cls, X: np.ndarray, hist_max_bins: int = HIST_MAX_BINS) -> "_Prepared":
        n = X.shape[0]
        if n >= 2**31:
            raise TrainingError("too many rows")
        seen = set()
        colS, keys, valsS, colH, codesH, uniqH = [], [], [], [], [], []
        for j in range(X.shape[1]):
            col = np.ascontiguousarray(X[:, j])
            if n == 0 or np.all(col == col[0]):
                continue
            key = col.tobytes()
            if key in seen:
                # identical columns: the first one always wins ties
                continue
            seen.add(key)
            uniq, inv = np.unique(col, return_inverse=True)
            if len(uniq) <= hist_max_bins:
                colH.append(j)
                codesH.append(inv.astype(np.uint8))
                uniqH.append(uniq)
            else:
                srt = np.argsort(inv, kind="stable")
                colS.append(j)
                keys.append((inv[srt].astype(np.int64) << 32) | srt.astype(np.int64))
                valsS.append(col)
        mH = len(colH)
        binvals = np.zeros((mH, max([len(u) for u in uniqH], default=1)))
        for c, u in enumerate(uniqH):
            binvals[c, : len(u)] = u
        order = np.empty((len(colS) + 1, n), dtype=np.int64)
        for c, k in enumerate(keys):
            order[c] = k
        order[-1] = np.arange(n, dtype=np.int64)
        return cls(
            np.asarray(colS, dtype=np.int64),
            np.array(valsS, dtype=np.float64).reshape(len(colS), n),
            np.asarray(colH, dtype=np.int64),
            np.array(codesH, dtype=np.uint8).reshape(mH, n),
            binvals,
            np.array([len(u) for u in uniqH], dtype=np.int64),
            order,
            1.0 / np.maximum(np.arange(n + 1, dtype=np.float64), 1.0),
        )

    def grow(self, r, in_sample, max_leaves, min_leaf) -> RegressionTree:
        n_in = int(np.count_nonzero(in_sample))
        if n_in == 0:
            raise TrainingError("cannot fit a tree to zero examples")
        if n_in == self.order.shape[1]:
            order = self.order.copy()
        else:
            order = np.empty((self.order.shape[0], n_in), dtype=np.int64)
            _compact(self.order, order, in_sample)
        f, t, lft, rgt, v = _grow(self.valsS, self.colS, self.codesH, self.binvals, self.nbins, self.colH,
                                  r, order, max_leaves, min_leaf, self.inv)
        return RegressionTree(f.copy(), t.copy(), lft.copy(), rgt.copy(), v.copy())


def fit_tree(X, residuals, max_leaves: int = 30, min_leaf: int = 5) -> RegressionTree:
    """Grow one tree best-first on (X, residuals)."""
    X = np.ascontiguousarray(np.atleast_2d(np.asarray(X, dtype=np.float64)))
    r = np.ascontiguousarray(np.asarray(residuals, dtype=np.float64))
    if X.shape[0] == 0 or r.shape[0] == 0:
        raise TrainingError("cannot fit a tree to zero examples")
    if X.shape[0] != r.shape[0]:
        raise TrainingError("feature and residual row counts differ")
    return _Prepared.build(X).grow(r, np.ones(len(r), dtype=np.bool_), max_leaves, min_leaf)


@dataclass
class MartModel:
    base: float
    trees: list
    shrinkage: float
    params: MartParams = field(default_factory=MartParams)
    schema_version: str = ""
    n_features: int = 0
    train_mse: list = field(default_factory=list)
    train_seconds: float = 0.0

    def raw_sum(self, X: np.ndarray) -> np.ndarray:
        X = np.ascontiguousarray(np.atleast_2d(np.asarray(X, dtype=np.float64)))
        acc = np.zeros(X.shape[0])
        for tree in self.trees:
            acc += tree.predict(X)
        return acc

    def predict(self, X) -> np.ndarray:
        X = np.atleast_2d(np.asarray(X, dtype=np.float64))
        if self.n_features and X.shape[1] != self.n_features:
            raise TrainingError(f"expected {self.n_features} features, got {X.shape[1]}")
        return self.base + self.shrinkage * self.raw_sum(X)

    def to_dict(self) -> dict:
        return {
            "format": MODEL_FORMAT,
            "schema_version": self.schema_version,
            "n_features": self.n_features,
            "params": self.params.to_dict(),
            "base": self.base,
            "shrinkage": self.shrinkage,
            "trees": [t.to_dict() for t in self.trees],
        }

    @classmethod
    def from_dict(cls, d) -> "MartModel":
        if d.get("format") != MODEL_FORMAT:
            raise TrainingError(f"unsupported model format {d.get('format')!r}")
        return cls(
            base=float(d["base"]),
            trees=[RegressionTree.from_dict(t) for t in d["trees"]],
            shrinkage=float(d["shrinkage"]),
            params=MartParams(**d["params"]),
            schema_version=d.get("schema_version", ""),
            n_features=int(d.get("n_features", 0)),
        )

    def dumps(self) -> str:
        return json.dumps(self.to_dict(), sort_keys=True)

    @classmethod
    def loads(cls, text: str) -> "MartModel":
        return cls.from_dict(json.loads(text))


def train_mart(X, y, params: Optional[MartParams] = None, schema_version: str = "",
               track_mse: bool = False) -> MartModel:
    """Stochastic gradient boosting with squared loss.

    Each iteration fits a tree to ``y - F`` on a random subsample and adds it
    scaled by the shrinkage. ``F`` is recomputed as ``base + shrinkage * sum``
    so that training and ``predict`` agree bit for bit.
    """
    params = params or MartParams()
    X = np.ascontiguousarray(np.atleast_2d(np.asarray(X, dtype=np.float64)))
    y = np.asarray(y, dtype=np.float64)
    n = X.shape[0]
    if n == 0:
        raise TrainingError("empty training set")
    if y.shape != (n,):
        raise TrainingError("labels must be a vector matching the rows of X")
    if not np.all(np.isfinite(X)) or not np.all(np.isfinite(y)):
        raise TrainingError("non-finite training data")
    t0 = time.perf_counter()
    rng = np.random.default_rng(params.seed)
    base = float(np.mean(y))
    prep = _Prepared.build(X)
    n_sub = max(1, int(round(params.subsample * n)))
    acc = np.zeros(n)
    trees: list[RegressionTree] = []
    mse: list[float] = []
    pred = base + params.shrinkage * acc
    if track_mse:
        mse.append(float(np.mean((y - pred) ** 2)))
    for _ in range(params.iterations):
        resid = y - pred
        mask = np.zeros(n, dtype=np.bool_)
        if n_sub < n:
            mask[rng.choice(n, size=n_sub, replace=False)] = True
        else:
            mask[:] = True
        tree = prep.grow(resid, mask, params.max_leaves, params.min_leaf)
        trees.append(tree)
        acc += tree.predict(X)
        pred = base + params.shrinkage * acc
        if track_mse:
            mse.append(float(np.mean((y - pred) ** 2)))
    return MartModel(base, trees, params.shrinkage, params, schema_version, X.shape[1], mse,
                     time.perf_counter() - t0)
