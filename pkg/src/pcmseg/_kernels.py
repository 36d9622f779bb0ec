"""Compiled inner loops for Potts field simulation."""

import numba
import numpy as np


@numba.njit(cache=True)
def _update_sites(lat, offsets, psi, u, rows_idx, cols_idx):
    S, R, C = lat.shape
    M = offsets.shape[0]
    logits = np.empty(M)
    for s in range(S):
        for k in range(rows_idx.shape[0]):
            r = rows_idx[k]
            c = cols_idx[k]
            for m in range(M):
                logits[m] = offsets[m]
            if r > 0:
                logits[lat[s, r - 1, c]] += psi
            if r < R - 1:
                logits[lat[s, r + 1, c]] += psi
            if c > 0:
                logits[lat[s, r, c - 1]] += psi
            if c < C - 1:
                logits[lat[s, r, c + 1]] += psi
            top = logits[0]
            for m in range(1, M):
                if logits[m] > top:
                    top = logits[m]
            total = 0.0
            for m in range(M):
                total += np.exp(logits[m] - top)
                logits[m] = total
            target = u[s, k] * total
            pick = 0
            for m in range(M):
                if target > logits[m]:
                    pick += 1
            lat[s, r, c] = min(pick, M - 1)


def sweep_fields(lat, offsets, psi, u_black, u_white, black, white):
    """Checkerboard sweep of ``S`` fields sharing one parameter value.

    ``black``/``white`` are (row_idx, col_idx) pairs in row-major order;
    uniforms are consumed in the same order as :func:`potts.gibbs_sweep`.
    """
    _update_sites(lat, offsets, psi, u_black, black[0], black[1])
    _update_sites(lat, offsets, psi, u_white, white[0], white[1])
