"""Problem data for incentive-based load management.

Power is held internally as integer centi-megawatts and weights as integer
hundredths, so every load sum and utility is exact.  A utility "unit" is
therefore 1e-4 of a weight-MW product.
"""
from __future__ import annotations

from dataclasses import dataclass
from decimal import Decimal, InvalidOperation
from typing import Iterable, Iterator, Mapping, Sequence, Union

import numpy as np

from .errors import CommandError, DimensionError

MW_SCALE = 100
WEIGHT_SCALE = 100
UTILITY_SCALE = MW_SCALE * WEIGHT_SCALE

Number = Union[int, float, Decimal, str]


def _scaled(value: Number, scale: int, what: str) -> int:
    try:
        d = Decimal(str(value)) * scale
    except InvalidOperation as exc:
        raise ValueError(f"{what} is not a number: {value!r}") from exc
    if d != d.to_integral_value():
        raise ValueError(f"{what} {value!r} is finer than the 1/{scale} resolution")
    return int(d)


def mw_to_units(mw: Number) -> int:
    return _scaled(mw, MW_SCALE, "power")


def weight_to_units(weight: Number) -> int:
    return _scaled(weight, WEIGHT_SCALE, "weight")


def units_to_mw(units: int) -> float:
    return units / MW_SCALE


def units_to_utility(units: int) -> float:
    return units / UTILITY_SCALE


@dataclass(frozen=True)
class LoadSector:
    baseline_mw: float
    weight: float

    def __post_init__(self) -> None:
        if mw_to_units(self.baseline_mw) <= 0:
            raise ValueError(f"baseline_mw must be > 0, got {self.baseline_mw}")
        if weight_to_units(self.weight) < 0:
            raise ValueError(f"weight must be >= 0, got {self.weight}")


@dataclass(frozen=True)
class UserLoad:
    """A user's switchable sectors; sector order fixes coordinate order."""

    user_id: int
    sectors: tuple[LoadSector, ...] = ()

    def __post_init__(self) -> None:
        object.__setattr__(self, "sectors", tuple(self.sectors))

    @property
    def baseline_mw(self) -> float:
        return units_to_mw(sum(mw_to_units(s.baseline_mw) for s in self.sectors))


def _pref_table() -> bytes:
    # reverse the bit order of each byte and invert it, so plain byte order
    # compares coordinates first-to-last with "on" sorting first
    return bytes(int(f"{v:08b}"[::-1], 2) ^ 0xFF for v in range(256))


_PREF = _pref_table()


def _pack(raw: bytes) -> bytes:
    if not raw:
        return b""
    return np.packbits(np.frombuffer(raw, dtype=np.uint8), bitorder="little").tobytes()


class StateVector:
    """On/off assignment of every load sector, user-major then sector-minor.

    Immutable.  Stored bit-packed, coordinate ``k`` at bit ``k % 8`` of byte
    ``k // 8`` (the wire layout), so equality, hashing and transport are
    cheap byte operations.  A block of coordinates is read and written as an
    integer whose bit ``j`` is coordinate ``start + j``.
    """

    __slots__ = ("packed", "n")

    def __init__(self, bits: Iterable[int] | bytes) -> None:
        if isinstance(bits, (bytes, bytearray)):
            raw = bytes(bits)
            if raw.translate(None, b"\x00\x01"):
                raise ValueError("state bytes must be 0 or 1")
        else:
            raw = bytes(1 if b else 0 for b in bits)
        object.__setattr__(self, "packed", _pack(raw))
        object.__setattr__(self, "n", len(raw))

    @classmethod
    def _from_packed(cls, packed: bytes, n: int) -> "StateVector":
        obj = cls.__new__(cls)
        object.__setattr__(obj, "packed", packed)
        object.__setattr__(obj, "n", n)
        return obj

    @classmethod
    def from_unpacked(cls, raw: bytes) -> "StateVector":
        """From one 0/1 byte per coordinate, without validation."""
        return cls._from_packed(_pack(raw), len(raw))

    @classmethod
    def zeros(cls, n: int) -> "StateVector":
        return cls._from_packed(bytes((n + 7) // 8), n)

    @classmethod
    def ones(cls, n: int) -> "StateVector":
        full, tail = divmod(n, 8)
        return cls._from_packed(b"\xff" * full + (bytes([(1 << tail) - 1]) if tail else b""), n)

    def __setattr__(self, name, value):
        raise AttributeError("StateVector is immutable")

    @property
    def bits(self) -> bytes:
        """One 0/1 byte per coordinate."""
        return self.array().tobytes()

    def __len__(self) -> int:
        return self.n

    def __iter__(self) -> Iterator[bool]:
        return (b == 1 for b in self.bits)

    def __getitem__(self, k: int) -> bool:
        if k < 0:
            k += self.n
        if not 0 <= k < self.n:
            raise IndexError(k)
        return bool((self.packed[k >> 3] >> (k & 7)) & 1)

    def __eq__(self, other: object) -> bool:
        return isinstance(other, StateVector) and self.n == other.n and self.packed == other.packed

    def __hash__(self) -> int:
        return hash(self.packed)

    def __repr__(self) -> str:
        return f"StateVector('{''.join('1' if b else '0' for b in self.bits)}')"

    def to_list(self) -> list[int]:
        return list(self.bits)

    def preference_key(self) -> bytes:
        """Byte string that sorts earlier-coordinates-on first.

        Used as the last tie-break after utility and load.
        """
        return self.packed.translate(_PREF)

    def block(self, start: int, width: int) -> int:
        if width == 0:
            return 0
        lo, shift = start >> 3, start & 7
        if shift + width <= 8:
            return (self.packed[lo] >> shift) & ((1 << width) - 1)
        hi = ((start + width - 1) >> 3) + 1
        seg = int.from_bytes(self.packed[lo:hi], "little")
        return (seg >> shift) & ((1 << width) - 1)

    def with_block(self, start: int, width: int, value: int) -> "StateVector":
        if width == 0:
            return self
        lo, shift = start >> 3, start & 7
        hi = ((start + width - 1) >> 3) + 1
        mask = ((1 << width) - 1) << shift
        buf = bytearray(self.packed)
        if hi - lo == 1:
            buf[lo] = (buf[lo] & ~mask) | (value << shift)
        else:
            seg = int.from_bytes(buf[lo:hi], "little")
            buf[lo:hi] = ((seg & ~mask) | (value << shift)).to_bytes(hi - lo, "little")
        return StateVector._from_packed(bytes(buf), self.n)

    def array(self) -> np.ndarray:
        if not self.n:
            return np.zeros(0, dtype=np.uint8)
        return np.unpackbits(np.frombuffer(self.packed, dtype=np.uint8), count=self.n, bitorder="little")


class Coalition:
    """Users sorted by id plus precomputed per-coordinate data.

    Every evaluation routine takes a ``Coalition``; plain sequences of
    :class:`UserLoad` are accepted by the public helpers and converted.
    """

    def __init__(self, users: Iterable[UserLoad]) -> None:
        ordered = sorted(users, key=lambda u: u.user_id)
        ids = [u.user_id for u in ordered]
        if len(set(ids)) != len(ids):
            raise ValueError("duplicate user ids")
        self.users: tuple[UserLoad, ...] = tuple(ordered)
        self.user_ids: tuple[int, ...] = tuple(ids)
        self._by_id = {u.user_id: u for u in ordered}
        self.blocks: dict[int, tuple[int, int]] = {}
        loads: list[int] = []
        values: list[int] = []
        pos = 0
        for u in ordered:
            self.blocks[u.user_id] = (pos, pos + len(u.sectors))
            for s in u.sectors:
                p = mw_to_units(s.baseline_mw)
                loads.append(p)
                values.append(p * weight_to_units(s.weight))
            pos += len(u.sectors)
        self.n_total = pos
        self.sector_load = tuple(loads)
        self.sector_value = tuple(values)
        self._load_arr = np.array(loads, dtype=np.int64)
        self._value_arr = np.array(values, dtype=np.int64)
        self._lv = np.stack([self._load_arr, self._value_arr], axis=1) if pos else np.zeros((0, 2), np.int64)
        # float64 sums are exact while every partial sum stays below 2**53
        self._lv_float = self._lv.astype(np.float64) if int(np.abs(self._lv).sum()) < 2**53 else None
        self.baseline_units = {uid: sum(loads[a:b]) for uid, (a, b) in self.blocks.items()}
        self.total_baseline_units = sum(loads)
        self._block_cache: dict = {}

    def __len__(self) -> int:
        return len(self.users)

    def __iter__(self) -> Iterator[UserLoad]:
        return iter(self.users)

    def __contains__(self, user_id: object) -> bool:
        return user_id in self._by_id

    def user(self, user_id: int) -> UserLoad:
        return self._by_id[user_id]

    def block(self, user_id: int) -> tuple[int, int]:
        return self.blocks[user_id]

    def check(self, state: StateVector) -> None:
        if len(state) != self.n_total:
            raise DimensionError(f"state has {len(state)} coordinates, coalition has {self.n_total}")

    # exact evaluation in scaled integer units

    def _block_sums(self, state: StateVector, user_id: int) -> tuple[int, int]:
        a, b = self.blocks[user_id]
        on = state.block(a, b - a)
        load = value = 0
        k = a
        while on:
            if on & 1:
                load += self.sector_load[k]
                value += self.sector_value[k]
            on >>= 1
            k += 1
        return load, value

    def evaluate_units(self, state: StateVector, clamps: Mapping[int, int] | None = None) -> tuple[int, int]:
        """(utility, load) in one pass."""
        self.check(state)
        if not self.n_total:
            load, value = 0, 0
        elif self._lv_float is not None:
            load, value = (int(v) for v in state.array().astype(np.float64) @ self._lv_float)
        else:
            load, value = (int(v) for v in state.array() @ self._lv)
        if clamps:
            for uid, clamp in clamps.items():
                bl, bv = self._block_sums(state, uid)
                load += clamp - bl
                value -= bv
        return value, load

    def load_units(self, state: StateVector, clamps: Mapping[int, int] | None = None) -> int:
        return self.evaluate_units(state, clamps)[1]

    def utility_units(self, state: StateVector, clamps: Mapping[int, int] | None = None) -> int:
        return self.evaluate_units(state, clamps)[0]

    def block_load_units(self, state: StateVector, user_id: int) -> int:
        return self._block_sums(state, user_id)[0]

    def canonical(self, state: StateVector, clamps: Mapping[int, int] | None) -> StateVector:
        """Report clamped users' bits as fixed-on."""
        if not clamps:
            return state
        for uid in clamps:
            a, b = self.blocks[uid]
            full = (1 << (b - a)) - 1
            if state.block(a, b - a) != full:
                state = state.with_block(a, b - a, full)
        return state

    def all_on(self) -> StateVector:
        return StateVector.ones(self.n_total)

    def all_off(self) -> StateVector:
        return StateVector.zeros(self.n_total)

    def state_from_blocks(self, blocks: Mapping[int, Sequence[int]]) -> StateVector:
        """Build a state from per-user block settings; missing users are off."""
        raw = bytearray(self.n_total)
        for uid, bits in blocks.items():
            a, b = self.blocks[uid]
            if len(bits) != b - a:
                raise DimensionError(f"user {uid} has {b - a} sectors, got {len(bits)} bits")
            raw[a:b] = bytes(1 if x else 0 for x in bits)
        return StateVector.from_unpacked(bytes(raw))

    def off_set(self, state: StateVector) -> set[int]:
        """Users with at least one sector switched off."""
        self.check(state)
        return {uid for uid, (a, b) in self.blocks.items()
                if b > a and state.block(a, b - a) != (1 << (b - a)) - 1}


UsersLike = Union[Coalition, Sequence[UserLoad]]


def as_coalition(users: UsersLike) -> Coalition:
    return users if isinstance(users, Coalition) else Coalition(users)


def clamps_to_units(clamps: Mapping[int, Number] | None) -> dict[int, int]:
    return {int(k): mw_to_units(v) for k, v in (clamps or {}).items()}


def evaluate_load(state: StateVector, users: UsersLike, clamps: Mapping[int, Number] | None = None) -> float:
    """Total MW drawn by the on-sectors (clamped users count at their clamp)."""
    return units_to_mw(as_coalition(users).load_units(state, clamps_to_units(clamps)))


def evaluate_utility(state: StateVector, users: UsersLike, clamps: Mapping[int, Number] | None = None) -> float:
    """Weighted utility of the on-sectors; clamped users contribute nothing."""
    return units_to_utility(as_coalition(users).utility_units(state, clamps_to_units(clamps)))


def is_feasible(state: StateVector, users: UsersLike, capacity_mw: Number,
                clamps: Mapping[int, Number] | None = None) -> bool:
    co = as_coalition(users)
    return co.load_units(state, clamps_to_units(clamps)) <= mw_to_units(capacity_mw)


def compute_capacity(running_load_mw: Number, required_reduction_mw: Number) -> float:
    """Capacity target left after the requested reduction."""
    pm, pr = mw_to_units(running_load_mw), mw_to_units(required_reduction_mw)
    if pr < 0 or pm < 0:
        raise CommandError("running load and reduction must be non-negative")
    if pr > pm:
        raise CommandError(f"required reduction {required_reduction_mw} exceeds running load {running_load_mw}")
    return units_to_mw(pm - pr)


@dataclass(frozen=True)
class OperatorCommand:
    """What the operator broadcasts: capacity target, incentive rate, duration.

    ``running_load_mw`` and ``required_reduction_mw`` are kept when the
    command was built from a reduction request; payments use them.
    """

    capacity_mw: float
    incentive_rate: float = 0.0
    duration_h: float = 1.0
    running_load_mw: float | None = None
    required_reduction_mw: float | None = None

    def __post_init__(self) -> None:
        if self.capacity_mw < 0:
            raise CommandError("capacity_mw must be >= 0")
        if self.incentive_rate < 0:
            raise CommandError("incentive_rate must be >= 0")
        if not self.duration_h > 0:
            raise CommandError("duration_h must be > 0")

    @classmethod
    def from_reduction(cls, running_load_mw: Number, required_reduction_mw: Number,
                       incentive_rate: float = 0.0, duration_h: float = 1.0) -> "OperatorCommand":
        return cls(compute_capacity(running_load_mw, required_reduction_mw), incentive_rate, duration_h,
                   float(running_load_mw), float(required_reduction_mw))

    @property
    def capacity_units(self) -> int:
        return mw_to_units(self.capacity_mw)
