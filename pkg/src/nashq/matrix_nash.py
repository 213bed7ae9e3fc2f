"""Exact Nash equilibria of zero-sum matrix games.

``solve_zero_sum`` is the production solver (maximin linear program via a
dense primal simplex); ``support_enumeration`` is an independent oracle for
small matrices; ``saddle_check`` verifies any claimed equilibrium.

All functions are pure and safe to call from multiple threads.
"""

from __future__ import annotations

from dataclasses import dataclass
from itertools import combinations

import numpy as np


class UnsupportedSizeError(ValueError):
    """Raised when support enumeration is asked for a matrix above its size cap."""


@dataclass(frozen=True)
class PayoffMatrix:
    """Blue's payoff over joint actions (rows = Blue, columns = Red).

    Masks mark valid actions; masked rows/columns are excluded from play and
    from equilibrium support.
    """

    values: np.ndarray
    row_mask: np.ndarray
    col_mask: np.ndarray

    def __post_init__(self):
        values = np.asarray(self.values, dtype=np.float64)
        object.__setattr__(self, "values", values)
        object.__setattr__(
            self, "row_mask", np.asarray(self.row_mask, dtype=np.int8).reshape(-1)
        )
        object.__setattr__(
            self, "col_mask", np.asarray(self.col_mask, dtype=np.int8).reshape(-1)
        )
        if values.ndim != 2:
            raise ValueError("payoff values must be a matrix")
        if self.row_mask.shape[0] != values.shape[0]:
            raise ValueError("row_mask length does not match matrix")
        if self.col_mask.shape[0] != values.shape[1]:
            raise ValueError("col_mask length does not match matrix")


def full_matrix(values) -> PayoffMatrix:
    """PayoffMatrix with every action valid."""
    values = np.asarray(values, dtype=np.float64)
    return PayoffMatrix(values, np.ones(values.shape[0]), np.ones(values.shape[1]))


@dataclass(frozen=True)
class StageEquilibrium:
    """Mixed maximin strategies and the (unique) game value, from Blue's view."""

    blue_strategy: np.ndarray
    red_strategy: np.ndarray
    game_value: float


@dataclass(frozen=True)
class SaddleReport:
    max_row_deviation: float
    max_col_deviation: float
    passed: bool


def _validate(game: PayoffMatrix):
    if not np.all(np.isfinite(game.values)):
        raise ValueError("payoff matrix contains non-finite entries")
    rows = np.flatnonzero(game.row_mask)
    cols = np.flatnonzero(game.col_mask)
    if rows.size == 0 or cols.size == 0:
        raise ValueError("at least one row and one column must be unmasked")
    return rows, cols


# After this many Dantzig pivots the solver falls back to Bland's rule,
# which cannot cycle.
_BLAND_SWITCH = 200


def _simplex_max(A: np.ndarray, b: np.ndarray, c: np.ndarray):
    """Maximize c.x subject to A x <= b, x >= 0 with b >= 0.

    Returns (objective, x, duals). Dense tableau; entering variable by
    Dantzig's rule, switching to Bland's rule after _BLAND_SWITCH pivots so
    degenerate problems cannot cycle. Leaving variable ties break on the
    smallest basis index, so the pivot sequence is deterministic.
    """
    m, n = A.shape
    tol = 1e-10
    # tableau: columns = [x vars | slacks | rhs], last row = -c (reduced costs)
    T = np.zeros((m + 1, n + m + 1))
    T[:m, :n] = A
    T[:m, n : n + m] = np.eye(m)
    T[:m, -1] = b
    T[-1, :n] = -c
    basis = np.arange(n, n + m)

    for it in range(10000):
        red = T[-1, :-1]
        if it < _BLAND_SWITCH:
            j = int(np.argmin(red))
            if red[j] >= -tol:
                break
        else:
            neg = np.flatnonzero(red < -tol)
            if neg.size == 0:
                break
            j = int(neg[0])
        col = T[:m, j]
        pos = np.flatnonzero(col > tol)
        if pos.size == 0:
            raise ArithmeticError("unbounded linear program")
        ratios = T[pos, -1] / col[pos]
        best = ratios.min()
        cand = pos[ratios <= best + tol]
        r = int(cand[np.argmin(basis[cand])])
        # pivot on (r, j)
        T[r] /= T[r, j]
        piv = T[r]
        factors = T[:, j].copy()
        factors[r] = 0.0
        T -= np.outer(factors, piv)
        basis[r] = j
    else:
        raise ArithmeticError("simplex failed to terminate")

    x = np.zeros(n + m)
    x[basis] = T[:m, -1]
    duals = T[-1, n : n + m]
    return T[-1, -1], x[:n], duals


def _pure_saddle(A: np.ndarray):
    """Return (row, col, value) of a pure saddle point, or None."""
    row_mins = A.min(axis=1)
    col_maxs = A.max(axis=0)
    maximin = row_mins.max()
    minimax = col_maxs.min()
    if maximin == minimax:
        i = int(np.argmax(row_mins))
        j = int(np.argmin(col_maxs))
        if A[i, j] == maximin:
            return i, j, float(maximin)
    return None


def solve_zero_sum(game: PayoffMatrix) -> StageEquilibrium:
    """Maximin strategies and game value of a zero-sum matrix game.

    Masked actions receive exactly probability 0. The value is unique;
    returned strategies are whichever basic solution the fixed pivot order
    yields, so callers must rely only on saddle validity.
    """
    rows, cols = _validate(game)
    A = game.values[np.ix_(rows, cols)]
    m, n = A.shape

    blue = np.zeros(game.values.shape[0])
    red = np.zeros(game.values.shape[1])

    pure = _pure_saddle(A)
    if pure is not None:
        i, j, v = pure
        blue[rows[i]] = 1.0
        red[cols[j]] = 1.0
        return StageEquilibrium(blue, red, v)

    # classic transformation needs a strictly positive game value
    shift = 1.0 - A.min()
    As = A + shift
    # Red (column player) scaled: max 1.y  s.t.  As y <= 1, y >= 0;
    # the duals of the row constraints are Blue's scaled strategy.
    obj, y, duals = _simplex_max(As, np.ones(m), np.ones(n))
    value_shifted = 1.0 / obj
    x = duals
    xs = x.sum()
    ys = y.sum()
    if xs <= 0 or ys <= 0:
        raise ArithmeticError("degenerate simplex solution")
    blue[rows] = np.maximum(x / xs, 0.0)
    red[cols] = np.maximum(y / ys, 0.0)
    blue /= blue.sum()
    red /= red.sum()
    return StageEquilibrium(blue, red, float(value_shifted - shift))


def support_enumeration(game: PayoffMatrix, size_cap: int = 6) -> StageEquilibrium:
    """Exhaustive equal-size support search; oracle for small matrices.

    Every zero-sum game has an equilibrium on a square kernel, so enumerating
    equal-cardinality support pairs in lexicographic order and solving the
    indifference systems is complete. Singular candidate systems are skipped.
    """
    rows, cols = _validate(game)
    A = game.values[np.ix_(rows, cols)]
    m, n = A.shape
    if m > size_cap or n > size_cap:
        raise UnsupportedSizeError(
            f"support enumeration capped at {size_cap}x{size_cap}, got {m}x{n}"
        )
    tol = 1e-9
    for k in range(1, min(m, n) + 1):
        for I in combinations(range(m), k):
            for J in combinations(range(n), k):
                sub = A[np.ix_(I, J)]
                # x' sub = v 1', sum x = 1  and  sub y = v 1, sum y = 1
                M = np.zeros((k + 1, k + 1))
                M[:k, :k] = sub.T
                M[:k, k] = -1.0
                M[k, :k] = 1.0
                rhs = np.zeros(k + 1)
                rhs[k] = 1.0
                try:
                    solx = np.linalg.solve(M, rhs)
                    My = np.zeros((k + 1, k + 1))
                    My[:k, :k] = sub
                    My[:k, k] = -1.0
                    My[k, :k] = 1.0
                    soly = np.linalg.solve(My, rhs)
                except np.linalg.LinAlgError:
                    continue
                x, v = solx[:k], solx[k]
                y, w = soly[:k], soly[k]
                if abs(v - w) > 1e-7:
                    continue
                if np.any(x < -tol) or np.any(y < -tol):
                    continue
                # best-response check on the full unmasked matrix
                xf = np.zeros(m)
                xf[list(I)] = np.maximum(x, 0.0)
                xf /= xf.sum()
                yf = np.zeros(n)
                yf[list(J)] = np.maximum(y, 0.0)
                yf /= yf.sum()
                if np.any(A @ yf > v + 1e-8):
                    continue
                if np.any(xf @ A < v - 1e-8):
                    continue
                blue = np.zeros(game.values.shape[0])
                red = np.zeros(game.values.shape[1])
                blue[rows] = xf
                red[cols] = yf
                return StageEquilibrium(blue, red, float(v))
    raise ArithmeticError("no equilibrium found; zero-sum games always have one")


def saddle_check(game: PayoffMatrix, eq: StageEquilibrium, tol: float) -> SaddleReport:
    """Best-response gaps of a claimed equilibrium over unmasked actions."""
    rows, cols = _validate(game)
    A = game.values[np.ix_(rows, cols)]
    x = np.asarray(eq.blue_strategy, dtype=np.float64)[rows]
    y = np.asarray(eq.red_strategy, dtype=np.float64)[cols]
    v = eq.game_value
    row_dev = float(np.max(A @ y - v))
    col_dev = float(np.max(v - x @ A))
    return SaddleReport(row_dev, col_dev, row_dev <= tol and col_dev <= tol)
