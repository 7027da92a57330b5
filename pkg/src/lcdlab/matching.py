"""Sequence matching over latent-code (or SAD) difference matrices.

The pipeline is: all-pairs frame differences -> per-column local contrast
enhancement -> velocity-swept route search over a fixed look-back window.
A route anchored at reference index s with velocity V visits reference
round(s - V * (T - t)) at test time t, for t in [T - d_s, T]; s is the
reference frame matched to the newest test frame T. Routes leaving the
reference range are invalid rather than clamped.
"""

from __future__ import annotations

import math
import struct
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from .errors import InsufficientHistoryError, MalformedFileError

MATRIX_MAGIC = b"SDMX"
SAD_PATCH = 8          # patch-normalization tile, in downsampled pixels
SAD_STD_FLOOR = 1e-6
ENHANCE_STD_FLOOR = 1e-6


@dataclass
class SeqParams:
    """Sequence-matching knobs; the matching defaults follow the reference
    configuration (look-back 10, velocities 0.8..1.1 step 0.1)."""
    d_s: int = 10
    v_min: float = 0.8
    v_max: float = 1.1
    v_step: float = 0.1
    enhance_window: int = 10
    score_threshold: float = -1.0

    def __post_init__(self):
        if self.d_s < 0:
            raise ValueError("d_s must be nonnegative")
        if self.v_step <= 0 or self.v_min > self.v_max:
            raise ValueError("need v_min <= v_max and v_step > 0")
        if self.enhance_window < 1:
            raise ValueError("enhance_window must be >= 1")

    def velocities(self) -> list[float]:
        """Swept velocities, inclusive of v_max with a 1e-9 snap."""
        vs, k = [], 0
        while True:
            v = self.v_min + k * self.v_step
            if v > self.v_max + 1e-9:
                break
            vs.append(v)
            k += 1
        return vs


@dataclass
class DifferenceMatrix:
    """rows = reference frames, cols = test frames; entry (s, t) compares
    reference s against test t."""
    values: np.ndarray

    def __post_init__(self):
        self.values = np.asarray(self.values, dtype=np.float64)
        if self.values.ndim != 2:
            raise ValueError("difference matrix must be 2-D")

    @property
    def n_ref(self) -> int:
        return self.values.shape[0]

    @property
    def n_test(self) -> int:
        return self.values.shape[1]


@dataclass
class MatchResult:
    """Best route for one test index. s_star is the reference frame matched
    to the newest window frame T. score = +inf means no route was valid."""
    test_index: int
    s_star: int
    v_star: float
    score: float
    accepted: bool


def code_difference(v_i, v_j) -> float:
    """Squared Euclidean distance between two code vectors."""
    a = np.asarray(v_i, dtype=np.float64).reshape(-1)
    b = np.asarray(v_j, dtype=np.float64).reshape(-1)
    if a.size != b.size:
        raise ValueError(f"code dimension mismatch: {a.size} vs {b.size}")
    d = a - b
    return float(d @ d)


def sad_feature(image, down: int = 2) -> np.ndarray:
    """SeqSLAM-style feature: block-mean downsample by `down`, then normalize
    each 8x8 patch to zero mean and unit std (std floored). Constant patches
    normalize to zero."""
    px = image.pixels if hasattr(image, "pixels") else np.asarray(image)
    px = px.astype(np.float64)
    h, w = px.shape
    if h % down or w % down:
        raise ValueError(f"downsample factor {down} must divide image size {px.shape}")
    small = px.reshape(h // down, down, w // down, down).mean(axis=(1, 3))
    out = np.empty_like(small)
    sh, sw = small.shape
    for r0 in range(0, sh, SAD_PATCH):
        for c0 in range(0, sw, SAD_PATCH):
            patch = small[r0:r0 + SAD_PATCH, c0:c0 + SAD_PATCH]
            mu = patch.mean()
            sd = max(patch.std(), SAD_STD_FLOOR)
            out[r0:r0 + SAD_PATCH, c0:c0 + SAD_PATCH] = (patch - mu) / sd
    return out.reshape(-1)


def sad_difference(f1: np.ndarray, f2: np.ndarray) -> float:
    """Mean absolute elementwise difference between two SAD features."""
    a = np.asarray(f1, dtype=np.float64).reshape(-1)
    b = np.asarray(f2, dtype=np.float64).reshape(-1)
    if a.size != b.size:
        raise ValueError(f"feature size mismatch: {a.size} vs {b.size}")
    return float(np.mean(np.abs(a - b)))


METRICS = ("code", "sad")


def difference_matrix(ref_codes, test_codes, metric: str = "code") -> DifferenceMatrix:
    """All-pairs differences; metric "code" is the squared Euclidean distance,
    "sad" the mean absolute difference."""
    if metric not in METRICS:
        raise ValueError(f"unknown metric {metric!r}")
    ref = np.stack([np.asarray(c, dtype=np.float64).reshape(-1) for c in ref_codes])
    test = np.stack([np.asarray(c, dtype=np.float64).reshape(-1) for c in test_codes])
    if ref.shape[1] != test.shape[1]:
        raise ValueError("reference and test codes differ in dimension")
    if metric == "code":
        rr = np.sum(ref * ref, axis=1)[:, None]
        tt = np.sum(test * test, axis=1)[None, :]
        vals = rr + tt - 2.0 * ref @ test.T
        np.maximum(vals, 0.0, out=vals)
    else:
        vals = np.mean(np.abs(ref[:, None, :] - test[None, :, :]), axis=2)
    return DifferenceMatrix(values=vals)


def enhance_local(matrix: DifferenceMatrix, w_e: int = 10) -> DifferenceMatrix:
    """Standardize each entry against its within-column window: a length-w_e
    window centered on the entry, clipped at the column ends; population std,
    floored. A window covering the whole column standardizes the column
    exactly (zero mean, unit std, unless constant)."""
    if w_e < 1:
        raise ValueError("enhancement window must be >= 1")
    vals = matrix.values
    n = vals.shape[0]
    half_lo = (w_e - 1) // 2
    half_hi = w_e // 2
    # cumulative sums along each column give O(1) window moments per entry
    csum = np.cumsum(vals, axis=0)
    csum2 = np.cumsum(vals * vals, axis=0)
    lo = np.maximum(np.arange(n) - half_lo, 0)
    hi = np.minimum(np.arange(n) + half_hi, n - 1)
    counts = (hi - lo + 1).astype(np.float64)[:, None]
    s = csum[hi] - np.where(lo[:, None] > 0, csum[lo - 1], 0.0)
    s2 = csum2[hi] - np.where(lo[:, None] > 0, csum2[lo - 1], 0.0)
    mean = s / counts
    var = np.maximum(s2 / counts - mean * mean, 0.0)
    std = np.maximum(np.sqrt(var), ENHANCE_STD_FLOOR)
    out = (vals - mean) / std
    return DifferenceMatrix(values=out)


def sequence_score(matrix: DifferenceMatrix, t_idx: int, s: int, v: float,
                   d_s: int) -> float | None:
    """Normalized route score: sum of D(round(s - v*(T-t)), t) over the
    look-back window, divided by the window length d_s + 1. Returns None when
    any route index leaves [0, n_ref - 1]."""
    if t_idx < d_s:
        raise InsufficientHistoryError(
            f"test index {t_idx} has less than d_s={d_s} frames of history")
    vals = matrix.values
    n_ref = vals.shape[0]
    total = 0.0
    for back in range(d_s, -1, -1):
        k = _round_half_away(s - v * back)
        if k < 0 or k >= n_ref:
            return None
        total += vals[k, t_idx - back]
    return total / (d_s + 1)


def _round_half_away(x: float) -> int:
    return int(math.floor(x + 0.5)) if x >= 0 else -int(math.floor(-x + 0.5))


def best_match(matrix: DifferenceMatrix, t_idx: int, params: SeqParams) -> MatchResult:
    """Exhaustive sweep over anchors s in [0, n_ref) and the velocity set;
    lowest normalized score wins, ties broken by smallest s then smallest V.
    accepted iff the winning score is strictly below the threshold."""
    if t_idx < params.d_s:
        raise InsufficientHistoryError(
            f"test index {t_idx} has less than d_s={params.d_s} frames of history")
    vals = matrix.values
    n_ref = vals.shape[0]
    d_s = params.d_s
    cols = t_idx - np.arange(d_s, -1, -1)

    best_score, best_s, best_v = math.inf, -1, math.nan
    s_all = np.arange(n_ref)
    for v in params.velocities():
        # reference index per (anchor, window offset); summed window-first so
        # the float accumulation order matches a scalar re-implementation
        backs = np.arange(d_s, -1, -1, dtype=np.float64)
        raw = s_all[:, None] - v * backs[None, :]
        # round half away from zero, matching sequence_score
        k = np.where(raw >= 0, np.floor(raw + 0.5), -np.floor(-raw + 0.5)).astype(np.int64)
        valid = np.all((k >= 0) & (k < n_ref), axis=1)
        if not np.any(valid):
            continue
        kv = k[valid]
        scores = vals[kv[:, 0], cols[0]].copy()
        for u in range(1, d_s + 1):
            scores += vals[kv[:, u], cols[u]]
        scores /= (d_s + 1)
        idx = int(np.argmin(scores))   # argmin takes the first minimum: smallest s
        sc = float(scores[idx])
        if sc < best_score:            # strict: earlier (smaller) v wins ties
            best_score = sc
            best_s = int(s_all[valid][idx])
            best_v = v
    if best_s < 0:
        return MatchResult(test_index=t_idx, s_star=0, v_star=params.v_min,
                           score=math.inf, accepted=False)
    return MatchResult(test_index=t_idx, s_star=best_s, v_star=best_v,
                       score=best_score,
                       accepted=best_score < params.score_threshold)


def detect_loops(matrix: DifferenceMatrix, params: SeqParams) -> list[MatchResult]:
    """best_match at every eligible test index (T >= d_s)."""
    return [best_match(matrix, t, params) for t in range(params.d_s, matrix.n_test)]


# --- serialization ------------------------------------------------------------

def write_matrix(path, matrix: DifferenceMatrix) -> None:
    """Binary container: SDMX magic, u32 rows, u32 cols, float32 row-major."""
    with open(path, "wb") as fh:
        fh.write(MATRIX_MAGIC)
        fh.write(struct.pack("<II", matrix.n_ref, matrix.n_test))
        fh.write(matrix.values.astype("<f4").tobytes())


def read_matrix(path) -> DifferenceMatrix:
    raw = Path(path).read_bytes()
    if len(raw) < 12 or raw[:4] != MATRIX_MAGIC:
        raise MalformedFileError(f"{path}: not an SDMX matrix file")
    rows, cols = struct.unpack_from("<II", raw, 4)
    expected = 12 + 4 * rows * cols
    if len(raw) != expected:
        raise MalformedFileError(f"{path}: expected {expected} bytes, found {len(raw)}")
    vals = np.frombuffer(raw, dtype="<f4", offset=12).astype(np.float64)
    return DifferenceMatrix(values=vals.reshape(rows, cols))


def write_matrix_csv(path, matrix: DifferenceMatrix) -> None:
    np.savetxt(path, matrix.values, delimiter=",")


def write_matches(path, matches: list[MatchResult]) -> None:
    lines = ["T,s_star,V_star,score,accepted"]
    for m in matches:
        lines.append(f"{m.test_index},{m.s_star},{m.v_star!r},{m.score!r},"
                     f"{int(m.accepted)}")
    Path(path).write_text("\n".join(lines) + "\n")


def read_matches(path) -> list[MatchResult]:
    lines = Path(path).read_text().splitlines()
    if not lines or lines[0] != "T,s_star,V_star,score,accepted":
        raise MalformedFileError(f"{path}: bad match CSV header")
    out = []
    for line in lines[1:]:
        if not line.strip():
            continue
        t, s, v, sc, acc = line.split(",")
        out.append(MatchResult(test_index=int(t), s_star=int(s), v_star=float(v),
                               score=float(sc), accepted=bool(int(acc))))
    return out
