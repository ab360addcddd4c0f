"""Dense feature-map correspondences ranked by cyclical distance.

A query cell's descriptor is matched to its nearest reference cell, that
reference descriptor is matched back into the query map, and the round-trip
displacement (in grid cells) scores the match: zero means the cycle returned
to where it started. The reference image whose top-K matches have the lowest
cumulative cyclical distance is the best view.
"""

from __future__ import annotations

from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass
from functools import cached_property

import numpy as np

__all__ = [
    "FeatureMap",
    "Match",
    "MatchSet",
    "nn_coordinate",
    "cyclical_distance",
    "top_k_matches",
    "best_view",
    "DEFAULT_TOP_K",
]

# Default number of top correspondences kept per view pair.
DEFAULT_TOP_K = 50

_METRICS = ("cosine", "l2")


@dataclass(frozen=True)
class FeatureMap:
    """Dense descriptor grid registered to the source pixel grid.

    ``data`` has shape (grid_height, grid_width, channels), float32. Grid
    cell (i, j) sits at pixel (pixel_offset + j * pixel_stride,
    pixel_offset + i * pixel_stride). ``mask`` marks foreground cells; None
    means all cells are foreground.
    """

    data: np.ndarray
    pixel_stride: float = 1.0
    pixel_offset: float = 0.0
    mask: np.ndarray | None = None

    def __post_init__(self):
        data = np.ascontiguousarray(self.data, dtype=np.float32)
        if data.ndim != 3:
            raise ValueError(f"feature data must be (h, w, c), got shape {data.shape}")
        if not np.all(np.isfinite(data)):
            raise ValueError("feature data must be finite")
        if not self.pixel_stride >= 1.0:
            raise ValueError("pixel_stride must be >= 1")
        if not np.isfinite(self.pixel_offset) or self.pixel_offset < 0:
            raise ValueError("pixel_offset must be finite and non-negative")
        object.__setattr__(self, "data", data)
        if self.mask is not None:
            mask = np.ascontiguousarray(self.mask, dtype=bool)
            if mask.shape != data.shape[:2]:
                raise ValueError(
                    f"mask shape {mask.shape} does not match grid {data.shape[:2]}"
                )
            object.__setattr__(self, "mask", mask)

    @property
    def grid_height(self) -> int:
        return self.data.shape[0]

    @property
    def grid_width(self) -> int:
        return self.data.shape[1]

    @property
    def channels(self) -> int:
        return self.data.shape[2]

    @property
    def n_cells(self) -> int:
        return self.grid_height * self.grid_width

    def cell_to_pixel(self, cell: tuple[int, int]) -> tuple[float, float]:
        """Pixel (x, y) of a grid cell (i, j) center."""
        i, j = cell
        return (
            self.pixel_offset + j * self.pixel_stride,
            self.pixel_offset + i * self.pixel_stride,
        )

    def descriptor(self, cell: tuple[int, int]) -> np.ndarray:
        i, j = cell
        return self.data[i, j]

    def is_foreground(self, cell: tuple[int, int]) -> bool:
        return self.mask is None or bool(self.mask[cell[0], cell[1]])

    def foreground_cells(self) -> list[tuple[int, int]]:
        """Foreground cells in row-major order."""
        if self.mask is None:
            h, w = self.grid_height, self.grid_width
            return [(i, j) for i in range(h) for j in range(w)]
        ii, jj = np.nonzero(self.mask)
        return list(zip(ii.tolist(), jj.tolist()))

    @cached_property
    def _flat(self) -> np.ndarray:
        # float64 working copy: keeps similarity scores well conditioned.
        return self.data.reshape(self.n_cells, self.channels).astype(np.float64)

    @cached_property
    def _flat_unit(self) -> np.ndarray:
        norms = np.linalg.norm(self._flat, axis=1, keepdims=True)
        return self._flat / np.maximum(norms, 1e-30)

    @cached_property
    def _flat_background(self) -> np.ndarray | None:
        return None if self.mask is None else ~self.mask.reshape(-1)


@dataclass(frozen=True)
class Match:
    """One query-to-reference correspondence with its cyclical distance."""

    query_px: tuple[float, float]
    ref_px: tuple[float, float]
    query_cell: tuple[int, int]
    ref_cell: tuple[int, int]
    cyc_dist: float


@dataclass(frozen=True)
class MatchSet:
    """Matches sorted ascending by cyclical distance."""

    matches: tuple[Match, ...]

    def __post_init__(self):
        matches = tuple(self.matches)
        dists = [m.cyc_dist for m in matches]
        if any(b < a for a, b in zip(dists, dists[1:])):
            raise ValueError("matches must be sorted by non-decreasing cyc_dist")
        object.__setattr__(self, "matches", matches)

    @property
    def k(self) -> int:
        return len(self.matches)

    def total_distance(self) -> float:
        return float(sum(m.cyc_dist for m in self.matches))

    def __iter__(self):
        return iter(self.matches)

    def __len__(self):
        return len(self.matches)


def _check_query_vector(F: FeatureMap, v) -> np.ndarray:
    v = np.asarray(v, dtype=np.float64).reshape(-1)
    if v.shape[0] != F.channels:
        raise ValueError(
            f"descriptor has {v.shape[0]} channels, map has {F.channels}"
        )
    if not np.all(np.isfinite(v)):
        raise ValueError("descriptor must be finite")
    return v


def nn_coordinate(F: FeatureMap, v, metric: str = "cosine") -> tuple[int, int]:
    """Grid cell of the foreground descriptor nearest to ``v``.

    ``metric`` is "cosine" (maximize similarity) or "l2" (minimize distance).
    Ties resolve to the first cell in row-major order. Raises if every cell
    is masked out.
    """
    if metric not in _METRICS:
        raise ValueError(f"unknown metric {metric!r}, expected one of {_METRICS}")
    v = _check_query_vector(F, v)
    bg = F._flat_background
    if bg is not None and bg.all():
        raise ValueError("feature map has no foreground cells")

    if metric == "cosine":
        vn = v / max(np.linalg.norm(v), 1e-30)
        score = F._flat_unit @ vn
        if bg is not None:
            score[bg] = -np.inf
        flat = int(np.argmax(score))
    else:
        diff = F._flat - v
        dist2 = np.einsum("ij,ij->i", diff, diff)
        if bg is not None:
            dist2[bg] = np.inf
        flat = int(np.argmin(dist2))
    return (flat // F.grid_width, flat % F.grid_width)


def _nn_flat_batch(F_to: FeatureMap, V: np.ndarray, metric: str) -> np.ndarray:
    """Flat cell index in ``F_to`` nearest to each row of ``V`` (float64).

    Batched counterpart of nn_coordinate: one GEMM instead of a matvec per
    row. Ties resolve to the first cell in row-major order, matching the
    per-row path.
    """
    bg = F_to._flat_background
    if bg is not None and bg.all():
        raise ValueError("feature map has no foreground cells")
    if metric == "cosine":
        norms = np.linalg.norm(V, axis=1, keepdims=True)
        score = (V / np.maximum(norms, 1e-30)) @ F_to._flat_unit.T
        if bg is not None:
            score[:, bg] = -np.inf
        return np.argmax(score, axis=1)
    dist2 = (
        np.einsum("ij,ij->i", V, V)[:, None]
        - 2.0 * (V @ F_to._flat.T)
        + np.einsum("ij,ij->i", F_to._flat, F_to._flat)[None, :]
    )
    if bg is not None:
        dist2[:, bg] = np.inf
    return np.argmin(dist2, axis=1)


def cyclical_distance(
    x_q: tuple[int, int],
    F_q: FeatureMap,
    F_r: FeatureMap,
    metric: str = "cosine",
) -> tuple[float, tuple[int, int]]:
    """Round-trip matching displacement of query cell ``x_q``, in grid cells.

    Matches the query descriptor into the reference map (cell alpha), matches
    alpha's descriptor back into the query map (cell beta), and returns
    (|x_q - beta|, alpha). alpha is the reference cell paired with ``x_q``
    when building correspondences.
    """
    if F_q.channels != F_r.channels:
        raise ValueError("query and reference maps must have equal channel counts")
    i, j = x_q
    if not (0 <= i < F_q.grid_height and 0 <= j < F_q.grid_width):
        raise ValueError(f"cell {x_q!r} outside the query grid")
    if not F_q.is_foreground((i, j)):
        raise ValueError(f"query cell {x_q!r} is masked out")
    alpha = nn_coordinate(F_r, F_q.descriptor((i, j)), metric=metric)
    beta = nn_coordinate(F_q, F_r.descriptor(alpha), metric=metric)
    dist = float(np.hypot(i - beta[0], j - beta[1]))
    return dist, alpha


def top_k_matches(
    F_q: FeatureMap,
    F_r: FeatureMap,
    K: int = DEFAULT_TOP_K,
    metric: str = "cosine",
) -> MatchSet:
    """Top-K correspondences between two maps, ascending by cyclical distance.

    Every foreground query cell is scored; ties keep row-major cell order.
    If fewer than K cells exist, all are returned.
    """
    if K < 1:
        raise ValueError("K must be >= 1")
    if metric not in _METRICS:
        raise ValueError(f"unknown metric {metric!r}, expected one of {_METRICS}")
    if F_q.channels != F_r.channels:
        raise ValueError("query and reference maps must have equal channel counts")
    cells = F_q.foreground_cells()
    if not cells:
        raise ValueError("query map has no foreground cells")

    # Batched round trip: same argmax semantics as cyclical_distance per cell.
    ij_q = np.asarray(cells, dtype=np.int64)
    flat_q = ij_q[:, 0] * F_q.grid_width + ij_q[:, 1]
    alpha_flat = _nn_flat_batch(F_r, F_q._flat[flat_q], metric)
    beta_flat = _nn_flat_batch(F_q, F_r._flat[alpha_flat], metric)
    ij_alpha = np.stack([alpha_flat // F_r.grid_width, alpha_flat % F_r.grid_width], 1)
    ij_beta = np.stack([beta_flat // F_q.grid_width, beta_flat % F_q.grid_width], 1)
    dists = np.hypot(
        (ij_q[:, 0] - ij_beta[:, 0]).astype(np.float64),
        (ij_q[:, 1] - ij_beta[:, 1]).astype(np.float64),
    )
    order = np.argsort(dists, kind="stable")[:K]  # stable: row-major among ties

    matches = []
    for idx in order:
        cell = (int(ij_q[idx, 0]), int(ij_q[idx, 1]))
        alpha = (int(ij_alpha[idx, 0]), int(ij_alpha[idx, 1]))
        matches.append(
            Match(
                query_px=F_q.cell_to_pixel(cell),
                ref_px=F_r.cell_to_pixel(alpha),
                query_cell=cell,
                ref_cell=alpha,
                cyc_dist=float(dists[idx]),
            )
        )
    return MatchSet(tuple(matches))


def best_view(
    F_q: FeatureMap,
    refs: list[FeatureMap],
    K: int = DEFAULT_TOP_K,
    metric: str = "cosine",
    jobs: int = 1,
) -> tuple[int, MatchSet]:
    """Reference with the lowest cumulative top-K cyclical distance.

    Ties resolve to the lowest reference index. ``jobs`` > 1 scores the
    references on a thread pool; the reduction is by index, so the result is
    independent of scheduling.
    """
    refs = list(refs)
    if not refs:
        raise ValueError("refs must be non-empty")

    def score(ref: FeatureMap) -> MatchSet:
        return top_k_matches(F_q, ref, K=K, metric=metric)

    if jobs > 1 and len(refs) > 1:
        with ThreadPoolExecutor(max_workers=jobs) as pool:
            match_sets = list(pool.map(score, refs))
    else:
        match_sets = [score(ref) for ref in refs]

    best_idx = 0
    best_total = match_sets[0].total_distance()
    for idx in range(1, len(match_sets)):
        total = match_sets[idx].total_distance()
        if total < best_total:
            best_idx, best_total = idx, total
    return best_idx, match_sets[best_idx]
