"""Pure-numpy versions of the compiled kernels.

Same call signatures as ``dsclab._kernels``. The Jacobi solver here sweeps in
round-robin (tournament) order so that each round's d/2 disjoint rotations can be
applied as whole-array operations; it is still a cyclic Jacobi method, only the
pair ordering differs from the row-cyclic compiled loop.
"""

from __future__ import annotations

import numpy as np


def _tournament_rounds(n: int) -> list[tuple[np.ndarray, np.ndarray]]:
    # n is even; player 0 stays fixed, the rest rotate one seat per round
    players = list(range(n))
    rounds = []
    for _ in range(n - 1):
        top = players[: n // 2]
        bot = players[n // 2 :][::-1]
        p = np.minimum(top, bot)
        q = np.maximum(top, bot)
        rounds.append((p, q))
        players = [players[0]] + [players[-1]] + players[1:-1]
    return rounds


def jacobi_eigh(m: np.ndarray, rel_tol: float, max_sweeps: int):
    n0 = m.shape[0]
    n = n0 + (n0 % 2)
    a = np.zeros((n, n))
    a[:n0, :n0] = m
    v = np.eye(n)
    tol = rel_tol * np.sqrt(np.sum(a * a))
    off_mask = ~np.eye(n, dtype=bool)
    rounds = _tournament_rounds(n) if n > 1 else []

    sweep = 0
    while sweep < max_sweeps:
        if np.sqrt(np.sum(a[off_mask] ** 2)) <= tol:
            break
        for p, q in rounds:
            apq = a[p, q]
            active = apq != 0.0
            safe = np.where(active, apq, 1.0)
            theta = (a[q, q] - a[p, p]) / (2.0 * safe)
            t = np.sign(theta) / (np.abs(theta) + np.sqrt(theta * theta + 1.0))
            t = np.where(theta == 0.0, 1.0, t)
            t = np.where(active, t, 0.0)
            c = 1.0 / np.sqrt(t * t + 1.0)
            s = t * c

            ap = a[:, p].copy()
            aq = a[:, q]
            a[:, p] = c * ap - s * aq
            a[:, q] = s * ap + c * aq
            ap = a[p, :].copy()
            aq = a[q, :]
            a[p, :] = c[:, None] * ap - s[:, None] * aq
            a[q, :] = s[:, None] * ap + c[:, None] * aq
            a[p, q] = np.where(active, 0.0, a[p, q])
            a[q, p] = a[p, q]

            vp = v[:, p].copy()
            vq = v[:, q]
            v[:, p] = c * vp - s * vq
            v[:, q] = s * vp + c * vq
        sweep += 1

    return np.diagonal(a)[:n0].copy(), v[:n0, :n0].copy(), sweep


def knn_kth_distance(store: np.ndarray, queries: np.ndarray, k: int, chunk: int = 64) -> np.ndarray:
    out = np.empty(queries.shape[0])
    for start in range(0, queries.shape[0], chunk):
        q = queries[start : start + chunk]
        diff = q[:, None, :] - store[None, :, :]
        d2 = np.einsum("ijk,ijk->ij", diff, diff)
        out[start : start + chunk] = np.sqrt(np.partition(d2, k - 1, axis=1)[:, k - 1])
    return out
