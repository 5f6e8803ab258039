"""Exact solvers for the capacity-constrained utility maximisation.

Every solver uses the same total order on candidate states: higher utility
first, then lower total load, then the state that keeps earlier coordinates
switched on (see :meth:`StateVector.preference_key`).
"""
from __future__ import annotations

from functools import reduce
from math import gcd
from typing import Mapping, NamedTuple, Optional

import numpy as np

from .errors import InfeasibleScenarioError, ProtocolError, SizeError
from .model import (
    Coalition,
    Number,
    StateVector,
    UsersLike,
    as_coalition,
    clamps_to_units,
    mw_to_units,
    units_to_mw,
    units_to_utility,
)

MAX_BRUTEFORCE_SECTORS = 24
MAX_DP_CELLS = 1_000_000_000
_CHUNK_BITS = 16


class Solution(NamedTuple):
    state: StateVector
    utility_units: int
    load_units: int

    @property
    def utility(self) -> float:
        return units_to_utility(self.utility_units)

    @property
    def load_mw(self) -> float:
        return units_to_mw(self.load_units)


def rank_key(utility_units: int, load_units: int, state: StateVector) -> tuple:
    """Sort key; the smallest key is the preferred state."""
    return (-utility_units, load_units, state.preference_key())


def _free_capacity(co: Coalition, capacity_mw: Number, clamps: Mapping[int, int]) -> int:
    for uid in clamps:
        if uid not in co:
            raise ProtocolError(f"clamp references unknown user {uid}")
    free = mw_to_units(capacity_mw) - sum(clamps.values())
    if free < 0:
        raise InfeasibleScenarioError(f"capacity {capacity_mw} MW is below the clamped load")
    return free


def _items(co: Coalition, clamps: Mapping[int, int]) -> list[int]:
    """Coordinates that the solvers may switch."""
    out: list[int] = []
    for uid, (a, b) in co.blocks.items():
        if uid not in clamps:
            out.extend(range(a, b))
    return out


def _finish(co: Coalition, raw: bytearray, clamps: Mapping[int, int]) -> Solution:
    state = co.canonical(StateVector.from_unpacked(bytes(raw)), clamps)
    return Solution(state, co.utility_units(state, clamps), co.load_units(state, clamps))


def solve_centralized(users: UsersLike, capacity_mw: Number,
                      clamps: Mapping[int, Number] | None = None) -> Solution:
    """0-1 knapsack by dynamic programming over integer capacity.

    Items are processed last-to-first so the reconstruction can walk the
    coordinates in order and switch each one on whenever an optimal
    completion still exists, which realises the shared tie-break.
    """
    co = as_coalition(users)
    cl = clamps_to_units(clamps)
    free = _free_capacity(co, capacity_mw, cl)
    items = _items(co, cl)
    raw = bytearray(co.n_total)
    if not items:
        return _finish(co, raw, cl)

    loads = [co.sector_load[k] for k in items]
    values = [co.sector_value[k] for k in items]
    if sum(values) >= 2**62:
        raise SizeError("utility values overflow 64-bit accumulation")
    g = reduce(gcd, loads)
    w = [p // g for p in loads]
    cap = min(free // g, sum(w))
    cells = len(items) * (cap + 1)
    if cells > MAX_DP_CELLS:
        raise SizeError(f"DP table would need {cells} cells")

    take_ok = np.zeros((len(items), cap + 1), dtype=bool)
    f = np.zeros(cap + 1, dtype=np.int64)
    for idx in range(len(items) - 1, -1, -1):
        wi, vi = w[idx], values[idx]
        if wi > cap:
            continue
        taken = f[: cap + 1 - wi] + vi
        nxt = f.copy()
        nxt[wi:] = np.maximum(f[wi:], taken)
        take_ok[idx, wi:] = taken == nxt[wi:]
        f = nxt

    best = f[cap]
    c = int(np.argmax(f == best))  # f is non-decreasing, so this is the minimum load
    for idx, k in enumerate(items):
        if take_ok[idx, c]:
            raw[k] = 1
            c -= w[idx]
    return _finish(co, raw, cl)


def solve_bruteforce(users: UsersLike, capacity_mw: Number,
                     clamps: Mapping[int, Number] | None = None) -> Solution:
    """Enumerate every assignment of the switchable sectors."""
    co = as_coalition(users)
    if co.n_total > MAX_BRUTEFORCE_SECTORS:
        raise SizeError(f"{co.n_total} sectors exceeds the brute-force limit of {MAX_BRUTEFORCE_SECTORS}")
    cl = clamps_to_units(clamps)
    free = _free_capacity(co, capacity_mw, cl)
    items = _items(co, cl)
    n = len(items)
    loads = np.array([co.sector_load[k] for k in items], dtype=np.int64)
    values = np.array([co.sector_value[k] for k in items], dtype=np.int64)
    # coordinate 0 is the most significant bit, so a larger index is preferred on ties
    shifts = np.arange(n - 1, -1, -1, dtype=np.int64)

    best: Optional[tuple[int, int, int]] = None  # (utility, -load, index)
    chunk = 1 << min(n, _CHUNK_BITS)
    for start in range(0, 1 << n, chunk):
        idx = np.arange(start, start + chunk, dtype=np.int64)
        bits = (idx[:, None] >> shifts) & 1
        load = bits @ loads
        util = bits @ values
        ok = load <= free
        if not ok.any():
            continue
        u, l, i = util[ok], load[ok], idx[ok]
        top = u.max()
        sel = u == top
        lmin = l[sel].min()
        i_best = i[sel & (l == lmin)].max()
        cand = (int(top), -int(lmin), int(i_best))
        if best is None or cand > best:
            best = cand

    raw = bytearray(co.n_total)
    assert best is not None  # all-off is always within free capacity
    for pos, k in enumerate(items):
        raw[k] = (best[2] >> (n - 1 - pos)) & 1
    return _finish(co, raw, cl)


MAX_TABLE_SECTORS = 12


class _BlockTable:
    """Every setting of one user's block, best first, plus a value lookup.

    A setting is an integer whose bit ``j`` switches the block's ``j``-th
    sector.
    """

    __slots__ = ("start", "width", "settings", "lookup", "max_value", "user", "_lo", "_hi", "_shift", "_mask")

    def __init__(self, co: Coalition, user_id: int) -> None:
        a, b = co.blocks[user_id]
        self.start, self.width = a, b - a
        self.user = co.user(user_id)
        self._lo, self._shift = a >> 3, a & 7
        self._hi = ((b - 1) >> 3) + 1 if b > a else self._lo
        self._mask = (1 << self.width) - 1
        loads, values = co.sector_load[a:b], co.sector_value[a:b]
        if self.width > MAX_TABLE_SECTORS:
            self.settings = None
            self.lookup = None
            self.max_value = sum(values)
            return
        ranked = []
        for mask in range(1 << self.width):
            on = [(mask >> j) & 1 for j in range(self.width)]
            bl = sum(p for p, x in zip(loads, on) if x)
            bv = sum(v for v, x in zip(values, on) if x)
            # earlier sectors on sort first among equal value and load
            ranked.append(((-bv, bl, [1 - x for x in on]), mask, bl, bv))
        ranked.sort()
        self.settings = [(mask, bl, bv) for _, mask, bl, bv in ranked]
        self.lookup = {mask: (bl, bv) for mask, bl, bv in self.settings}
        self.max_value = self.settings[0][2]

    def current(self, co: Coalition, setting: int) -> tuple[int, int]:
        if self.lookup is not None:
            return self.lookup[setting]
        load = value = 0
        for j in range(self.width):
            if (setting >> j) & 1:
                load += co.sector_load[self.start + j]
                value += co.sector_value[self.start + j]
        return load, value

    def split(self, co: Coalition, state: StateVector) -> tuple[int, int, int]:
        """(setting, load, value) of this block in ``state``."""
        if self.width == 0:
            return 0, 0, 0
        packed = state.packed
        if self._hi - self._lo == 1:
            setting = (packed[self._lo] >> self._shift) & self._mask
        else:
            setting = (int.from_bytes(packed[self._lo:self._hi], "little") >> self._shift) & self._mask
        if self.lookup is not None:
            bl, bv = self.lookup[setting]
        else:
            bl, bv = self.current(co, setting)
        return setting, bl, bv

    def best(self, co: Coalition, room: int) -> Optional[tuple[int, int, int]]:
        """Best setting with load at most ``room``."""
        if room < 0:
            return None
        if self.settings is not None:
            for setting in self.settings:
                if setting[1] <= room:
                    return setting
            return None
        sol = solve_centralized([self.user], units_to_mw(room))
        return sol.state.block(0, self.width), sol.load_units, sol.utility_units


def block_table(co: Coalition, user_id: int) -> _BlockTable:
    table = co._block_cache.get(user_id)
    if table is None:
        table = co._block_cache[user_id] = _BlockTable(co, user_id)
    return table


def best_block(co: Coalition, state: StateVector, load_units: int, utility_units: int,
               user_id: int, cap_units: int) -> Optional[Solution]:
    """Best setting of one user's block with every other coordinate frozen.

    ``load_units``/``utility_units`` must describe ``state`` under the
    clamps in force; the user itself must not be clamped.
    """
    return table_best(block_table(co, user_id), co, state, load_units, utility_units, cap_units)


def table_best(table: _BlockTable, co: Coalition, state: StateVector, load_units: int, utility_units: int,
               cap_units: int) -> Optional[Solution]:
    """:func:`best_block` with the user's table already looked up."""
    a, w = table.start, table.width
    if w == 0:
        return Solution(state, utility_units, load_units) if load_units <= cap_units else None
    cur, cur_l, cur_v = table.split(co, state)
    rest_l = load_units - cur_l
    rest_v = utility_units - cur_v
    # the rest of the state only shifts value and load by constants, so the
    # block's own ranking decides
    hit = table.best(co, cap_units - rest_l)
    if hit is None:
        return None
    setting, bl, bv = hit
    x = state if setting == cur else state.with_block(a, w, setting)
    return tuple.__new__(Solution, (x, rest_v + bv, rest_l + bl))


def max_block_value(co: Coalition, user_id: int) -> int:
    return block_table(co, user_id).max_value


def local_block_optimize(base: StateVector, user_id: int, users: UsersLike, capacity_mw: Number,
                         clamps: Mapping[int, Number] | None = None) -> Optional[Solution]:
    """Re-optimise ``user_id``'s block of ``base``; ``None`` when no setting is feasible."""
    co = as_coalition(users)
    cl = clamps_to_units(clamps)
    if user_id in cl:
        raise ProtocolError(f"user {user_id} is clamped and cannot be re-optimised")
    if user_id not in co:
        raise ProtocolError(f"unknown user {user_id}")
    base = co.canonical(base, cl)
    return best_block(co, base, co.load_units(base, cl), co.utility_units(base, cl),
                      user_id, mw_to_units(capacity_mw))
