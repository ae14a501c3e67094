"""Scheduling world data model and MDP state encoding."""

from __future__ import annotations

from dataclasses import dataclass, field
from enum import IntEnum
from typing import NamedTuple, Optional, Sequence

import numpy as np

OBS_DIM = 10
N_ACTIONS = 3
SINGLE_BOOK, DOUBLE_BOOK, REJECT = 0, 1, 2

FEATURE_NAMES = (
    "clinic",
    "department",
    "physician",
    "appointment_day",
    "slot",
    "slot_status",
    "noshow_prob",
    "double_eligible",
    "scheduled_count",
    "remaining_slots",
)


class ContractError(RuntimeError):
    """A caller broke a documented precondition."""


class InvariantViolation(ContractError):
    pass


class Occupancy(IntEnum):
    EMPTY = 0
    SINGLE = 1
    DOUBLE = 2


# ordinal encoding of slot status
OCCUPANCY_CODE = {Occupancy.EMPTY: 0.0, Occupancy.SINGLE: 0.5, Occupancy.DOUBLE: 1.0}


@dataclass(frozen=True)
class ClinicTopology:
    """Clinic -> department -> physician hierarchy with a per-day slot grid.

    Physicians and departments carry global indices; ``physicians_per_department``
    maps ``(clinic, department)`` to the physician ids working there.
    """

    clinics: tuple[int, ...]
    departments_per_clinic: dict[int, tuple[int, ...]]
    physicians_per_department: dict[tuple[int, int], tuple[int, ...]]
    slots_per_day: int = 16
    horizon_days: int = 14

    def __post_init__(self):
        if self.horizon_days < 1:
            raise ValueError("horizon_days must be >= 1")
        if self.slots_per_day < 1:
            raise ValueError("slots_per_day must be >= 1")
        seen: dict[int, tuple[int, int]] = {}
        for key, phys in self.physicians_per_department.items():
            if not phys:
                raise ValueError(f"department {key} has no physicians")
            for p in phys:
                if p in seen:
                    raise ValueError(f"physician {p} belongs to {seen[p]} and {key}")
                seen[p] = key
        if sorted(seen) != list(range(len(seen))):
            raise ValueError("physician ids must be 0..P-1")
        object.__setattr__(self, "_owner", seen)

    @classmethod
    def uniform(cls, n_clinics=1, departments_per_clinic=2, physicians_per_department=4,
                slots_per_day=16, horizon_days=14) -> "ClinicTopology":
        clinics = tuple(range(n_clinics))
        depts: dict[int, tuple[int, ...]] = {}
        phys: dict[tuple[int, int], tuple[int, ...]] = {}
        d_next = p_next = 0
        for c in clinics:
            depts[c] = tuple(range(d_next, d_next + departments_per_clinic))
            d_next += departments_per_clinic
            for d in depts[c]:
                phys[(c, d)] = tuple(range(p_next, p_next + physicians_per_department))
                p_next += physicians_per_department
        return cls(clinics, depts, phys, slots_per_day, horizon_days)

    @property
    def slot_times(self) -> tuple[int, ...]:
        return tuple(range(self.slots_per_day))

    @property
    def n_departments(self) -> int:
        return sum(len(v) for v in self.departments_per_clinic.values())

    @property
    def n_physicians(self) -> int:
        return len(self._owner)

    @property
    def department_keys(self) -> list[tuple[int, int]]:
        return list(self.physicians_per_department)

    def owner(self, physician: int) -> tuple[int, int]:
        return self._owner[physician]

    def physician_capacity(self) -> int:
        """Single-booking slot count of one physician over the horizon."""
        return self.slots_per_day * self.horizon_days

    def total_capacity(self) -> int:
        return self.n_physicians * self.physician_capacity()


class SlotRef(NamedTuple):
    physician: int
    day: int  # 1-based
    slot: int


@dataclass
class SlotOutcome:
    scheduled_count: int
    show_count: int
    expected_attendance: float
    was_double_booked: bool

    def __post_init__(self):
        if self.show_count > self.scheduled_count:
            raise InvariantViolation("more shows than scheduled patients")


@dataclass
class SlotState:
    occupancy: Occupancy = Occupancy.EMPTY
    bookings: tuple[int, ...] = ()
    double_eligible: bool = False
    realized: Optional[SlotOutcome] = None

    def __post_init__(self):
        if len(self.bookings) > 2:
            raise InvariantViolation("a slot holds at most two patients")
        if int(self.occupancy) != len(self.bookings):
            raise InvariantViolation("occupancy does not match booking count")
        if self.double_eligible and self.occupancy == Occupancy.DOUBLE:
            raise InvariantViolation("double-booked slot cannot be double-eligible")


@dataclass
class BookingRequest:
    patient_id: int
    features: np.ndarray
    noshow_prob: float
    booking_day: int
    lead_time_days: int
    appointment_day: int
    requested_slot: int
    department_id: int
    clinic_id: int
    # probability driving the attendance draw; differs from noshow_prob only
    # when a perturbation is applied to the policy input alone
    attendance_prob: Optional[float] = None
    attend_u: float = 0.5
    physician_id: Optional[int] = None

    def __post_init__(self):
        if not 0.0 <= self.noshow_prob <= 1.0:
            raise InvariantViolation(f"noshow_prob {self.noshow_prob} outside [0,1]")
        if self.appointment_day < self.booking_day:
            raise InvariantViolation("appointment before booking day")
        if self.attendance_prob is None:
            self.attendance_prob = self.noshow_prob


@dataclass(frozen=True)
class WeightVector:
    alpha: float
    beta: float
    gamma: float

    def __post_init__(self):
        if min(self.alpha, self.beta, self.gamma) < 0:
            raise ValueError(f"negative objective weight in {self}")
        if abs(self.alpha + self.beta + self.gamma - 1.0) > 1e-9:
            raise ValueError(f"weights {self} do not sum to 1")

    def as_array(self) -> np.ndarray:
        return np.array([self.alpha, self.beta, self.gamma])

    def scalarize(self, u: float, d: float, b: float) -> float:
        return self.alpha * u + self.beta * d + self.gamma * b


# objective weights of the ten ensemble members (utilization, double-show avoidance, balance)
DEFAULT_WEIGHT_TABLE: tuple[tuple[float, float, float], ...] = (
    (1.0, 0.0, 0.0),
    (0.0, 1.0, 0.0),
    (0.0, 0.0, 1.0),
    (0.5, 0.25, 0.25),
    (0.25, 0.5, 0.25),
    (0.25, 0.25, 0.5),
    (0.33, 0.33, 0.34),
    (0.7, 0.2, 0.1),
    (0.2, 0.7, 0.1),
    (0.2, 0.1, 0.7),
)


def default_weights() -> list[WeightVector]:
    return [WeightVector(*row) for row in DEFAULT_WEIGHT_TABLE]


class ActionMask(NamedTuple):
    single: bool
    double: bool
    reject: bool

    def as_array(self) -> np.ndarray:
        return np.array(self, dtype=bool)


@dataclass
class PhysicianLoad:
    scheduled: int  # N_p: patients currently booked with the physician
    remaining: int  # A_p: empty slots still bookable


def _norm_index(idx: int, count: int) -> float:
    return idx / (count - 1) if count > 1 else 0.0


def encode_observation(topology: ClinicTopology, slot_ref: SlotRef, slot: SlotState,
                       request: BookingRequest, load: PhysicianLoad) -> np.ndarray:
    """Encode the decision state as a 10-vector in [0, 1] (order: FEATURE_NAMES)."""
    H, S = topology.horizon_days, topology.slots_per_day
    cap = topology.physician_capacity()
    if not 0 <= load.scheduled <= 2 * cap:
        raise InvariantViolation(f"scheduled count {load.scheduled} exceeds 2x capacity {cap}")
    if not 0 <= load.remaining <= cap:
        raise InvariantViolation(f"remaining slots {load.remaining} exceed capacity {cap}")
    if not (1 <= slot_ref.day <= H and 0 <= slot_ref.slot < S):
        raise ContractError(f"{slot_ref} is not a slot of this topology")
    clinic, dept = topology.owner(slot_ref.physician)
    return np.array([
        _norm_index(topology.clinics.index(clinic), len(topology.clinics)),
        _norm_index(dept, topology.n_departments),
        _norm_index(slot_ref.physician, topology.n_physicians),
        slot_ref.day / H,
        _norm_index(slot_ref.slot, S),
        OCCUPANCY_CODE[slot.occupancy],
        request.noshow_prob,
        1.0 if slot.double_eligible else 0.0,
        load.scheduled / (2 * cap),
        load.remaining / cap,
    ])


def decode_indices(topology: ClinicTopology, obs: Sequence[float]) -> dict[str, int]:
    """Invert the categorical parts of :func:`encode_observation`."""

    def inv(x, count):
        return int(round(x * (count - 1))) if count > 1 else 0

    return {
        "clinic": topology.clinics[inv(obs[0], len(topology.clinics))],
        "department": inv(obs[1], topology.n_departments),
        "physician": inv(obs[2], topology.n_physicians),
        "day": int(round(obs[3] * topology.horizon_days)),
        "slot": inv(obs[4], topology.slots_per_day),
    }


@dataclass
class SlotCandidates:
    empty_candidate: Optional[SlotRef] = None
    double_candidate: Optional[SlotRef] = None
    search_tier: str = "None"
    # first candidate met along the scan; this is the slot the agent observes
    primary: Optional[SlotRef] = field(default=None, compare=False)


SEARCH_TIERS = ("RequestedSlot", "SameDoctorOtherDay", "SameDeptOtherDoctor", "None")


def valid_actions(candidates: SlotCandidates) -> ActionMask:
    single = candidates.empty_candidate is not None
    double = candidates.double_candidate is not None
    return ActionMask(single, double, not (single or double))
