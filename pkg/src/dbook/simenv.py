"""Discrete-event simulation of the booking / arrival process over the planning horizon.

Two event kinds drive an episode. Booking events each need one agent decision;
arrival events are realized silently on the appointment day (one per booked
slot, covering both patients of a double-booked slot).
"""

from __future__ import annotations

import csv
import heapq
import itertools
from dataclasses import dataclass
from functools import lru_cache
from typing import NamedTuple, Optional, Union

import numpy as np

from .domain import (
    DOUBLE_BOOK,
    REJECT,
    SINGLE_BOOK,
    ActionMask,
    BookingRequest,
    ClinicTopology,
    ContractError,
    InvariantViolation,
    Occupancy,
    PhysicianLoad,
    SlotCandidates,
    SlotOutcome,
    SlotRef,
    SlotState,
    encode_observation,
    valid_actions,
)
from .noshow import NoShowPredictor, perturb, sample_features

BOOKING, ARRIVAL = "Booking", "Arrival"
_KIND_RANK = {BOOKING: 0, ARRIVAL: 1}

STREAMS = ("requests", "features", "predictor", "lead_time", "attendance")

EVENT_LOG_COLUMNS = (
    "day", "seq", "event_kind", "patient_id", "physician_id", "slot_day", "slot_index",
    "action", "pi", "shaped_u", "shaped_d", "shaped_b",
    "realized_S", "realized_u", "realized_d", "realized_b",
)


@dataclass
class SimConfig:
    arrival_rate: float = 100.0
    horizon_days: int = 14
    gamma_shape: float = 2.0
    gamma_scale: float = 2.0
    n_clinics: int = 1
    departments_per_clinic: int = 2
    physicians_per_department: int = 4
    slots_per_day: int = 16
    # a single-booked slot takes a second patient only if its incumbent's no-show
    # probability is at least this; 0 makes every single-booked slot eligible
    double_eligibility_min_pi: float = 0.5

    def validate(self) -> None:
        if not self.arrival_rate > 0:
            raise ValueError("arrival_rate must be positive")
        if self.gamma_shape <= 0 or self.gamma_scale <= 0:
            raise ValueError("Gamma lead-time parameters must be positive")
        for name in ("horizon_days", "n_clinics", "departments_per_clinic",
                     "physicians_per_department", "slots_per_day"):
            if getattr(self, name) < 1:
                raise ValueError(f"{name} must be >= 1")
        if not 0.0 <= self.double_eligibility_min_pi <= 1.0:
            raise ValueError("double_eligibility_min_pi must lie in [0, 1]")

    def topology(self) -> ClinicTopology:
        return ClinicTopology.uniform(self.n_clinics, self.departments_per_clinic,
                                      self.physicians_per_department, self.slots_per_day,
                                      self.horizon_days)


class RewardComponents(NamedTuple):
    u: float
    d: float
    b: float


NO_REWARD = RewardComponents(0.0, 0.0, 0.0)


@dataclass
class Event:
    time_key: tuple[int, int, int]  # (day, kind rank, sequence number)
    kind: str
    payload: Union[BookingRequest, SlotRef]


def make_streams(seed) -> dict[str, np.random.Generator]:
    """Independent named generators derived from one seed (int or SeedSequence)."""
    ss = seed if isinstance(seed, np.random.SeedSequence) else np.random.SeedSequence(seed)
    return {name: np.random.default_rng(child) for name, child in zip(STREAMS, ss.spawn(len(STREAMS)))}


# -- reward algebra ---------------------------------------------------------

def attendance_balance(expected):
    if isinstance(expected, float):
        return max(0.0, 1.0 - abs(expected - 1.0))
    return np.maximum(0.0, 1.0 - np.abs(np.asarray(expected, dtype=float) - 1.0))[()]


def shaped_reward(action_kind: int, pis) -> RewardComponents:
    """Expectation-based components issued at booking time.

    ``pis`` holds the no-show probability of the single patient, or of the
    incumbent and the new patient for a double booking.
    """
    pis = tuple(float(p) for p in pis)
    if action_kind == SINGLE_BOOK:
        if len(pis) != 1:
            raise ContractError("single booking takes exactly one probability")
        (p,) = pis
        return RewardComponents(1.0 - p, 1.0, attendance_balance(1.0 - p))
    if action_kind == DOUBLE_BOOK:
        if len(pis) != 2:
            raise ContractError("double booking takes exactly two probabilities")
        p1, p2 = pis
        u = (1.0 - p1) * p2 + p1 * (1.0 - p2)
        d = 1.0 - (1.0 - p1) * (1.0 - p2)
        return RewardComponents(u, d, attendance_balance((1.0 - p1) + (1.0 - p2)))
    raise ContractError(f"no shaped reward for action {action_kind}")


def realized_components(show_count, n_booked, expected):
    """Vectorised realized (u, d, b) from show counts.

    d is 0 only when both patients of a double-booked slot attend; every other
    outcome (including zero shows, and any single-booked slot) scores 1.
    """
    show_count = np.asarray(show_count)
    n_booked = np.asarray(n_booked)
    u = 1.0 - np.abs(show_count - 1.0)
    d = np.where((n_booked == 2) & (show_count == 2), 0.0, 1.0)
    b = np.where(n_booked > 0, attendance_balance(expected), 0.0)
    return u, d, b


def realize_arrival(pis, attendance_probs=None, uniforms=None, rng=None):
    """Draw attendance for one slot; returns ``(SlotOutcome, RewardComponents)``.

    Patient k attends when ``uniforms[k] < 1 - attendance_probs[k]``. Uniforms are
    drawn from ``rng`` when not supplied.
    """
    pis = [float(p) for p in pis]
    n = len(pis)
    if n == 0:
        raise ContractError("cannot realize an empty slot")
    if n > 2:
        raise InvariantViolation("a slot holds at most two patients")
    att = pis if attendance_probs is None else [float(p) for p in attendance_probs]
    if uniforms is None:
        if rng is None:
            raise ContractError("need uniforms or an rng")
        uniforms = rng.random(n)
    shows = sum(1 for k in range(n) if uniforms[k] < 1.0 - att[k])
    expected = sum(1.0 - p for p in pis)
    u = 1.0 - abs(shows - 1.0)
    d = 0.0 if (n == 2 and shows == 2) else 1.0
    outcome = SlotOutcome(n, shows, expected, n == 2)
    return outcome, RewardComponents(u, d, attendance_balance(expected))


# -- request generation -------------------------------------------------------

def sample_lead_time(booking_day: int, rng: np.random.Generator, horizon_days: int,
                     shape: float = 2.0, scale: float = 2.0, size: Optional[int] = None):
    """Gamma lead time rounded to whole days and clipped to the horizon."""
    if booking_day > horizon_days:
        raise ContractError("booking day beyond horizon")
    g = rng.gamma(shape, scale, size=size)
    return np.clip(np.rint(g), 0, horizon_days - booking_day).astype(int)[()]


def generate_booking_requests(day: int, streams: dict[str, np.random.Generator], config: SimConfig,
                              topology: ClinicTopology, predictor: NoShowPredictor,
                              first_patient_id: int = 0) -> list[BookingRequest]:
    H = topology.horizon_days
    if not 1 <= day <= H:
        raise ContractError(f"day {day} outside [1, {H}]")
    rq = streams["requests"]
    n = int(rq.poisson(config.arrival_rate))
    if n == 0:
        return []
    dept_keys = topology.department_keys
    dept_idx = rq.integers(len(dept_keys), size=n)
    slots = rq.integers(topology.slots_per_day, size=n)
    feats = sample_features(streams["features"], predictor.n_features, size=n)
    raw = predictor.predict_batch(feats, streams["predictor"])
    delta = predictor.config.perturbation_delta
    seen = perturb(raw, delta) if delta else raw
    att = seen if predictor.config.perturb_attendance else raw
    seen = np.atleast_1d(seen)
    att = np.atleast_1d(att)
    leads = np.atleast_1d(sample_lead_time(day, streams["lead_time"], H, config.gamma_shape,
                                           config.gamma_scale, size=n))
    uniforms = streams["attendance"].random(n)
    out = []
    for k in range(n):
        c, d = dept_keys[dept_idx[k]]
        lead = int(leads[k])
        out.append(BookingRequest(
            patient_id=first_patient_id + k,
            features=feats[k],
            noshow_prob=float(seen[k]),
            booking_day=day,
            lead_time_days=lead,
            appointment_day=min(day + lead, H),
            requested_slot=int(slots[k]),
            department_id=d,
            clinic_id=c,
            attendance_prob=float(att[k]),
            attend_u=float(uniforms[k]),
        ))
    return out


# -- calendar ---------------------------------------------------------------

class Calendar:
    """Slot grid for every physician; days are 1-based in the public API."""

    def __init__(self, topology: ClinicTopology, eligibility_min_pi: float = 0.0):
        self.topology = topology
        self.eligibility_min_pi = eligibility_min_pi
        P, H, S = topology.n_physicians, topology.horizon_days, topology.slots_per_day
        self.occ = np.zeros((P, H, S), dtype=np.int8)
        self.pis = np.zeros((P, H, S, 2))
        self.att = np.zeros((P, H, S, 2))
        self.uniforms = np.zeros((P, H, S, 2))
        self.patients = np.full((P, H, S, 2), -1, dtype=np.int64)
        self.zeta = np.zeros((P, H, S), dtype=bool)
        self.loads = np.zeros(P, dtype=np.int64)
        self.realized: dict[SlotRef, SlotOutcome] = {}
        self._empty_per_day = [[S] * H for _ in range(P)]
        self._order_cache: dict = {}
        self._occ_ravel = self.occ.reshape(-1)
        self._zeta_ravel = self.zeta.reshape(-1)

    def physician_order(self, clinic: int, department: int, assigned: int):
        """Assigned physician first, then department colleagues by id; with flat-array offsets."""
        key = (clinic, department, assigned)
        hit = self._order_cache.get(key)
        if hit is None:
            topo = self.topology
            dept_phys = topo.physicians_per_department[(clinic, department)]
            phys = (assigned,) + tuple(p for p in dept_phys if p != assigned)
            offsets = (np.array(phys, dtype=np.int64) * (topo.horizon_days * topo.slots_per_day))[:, None]
            hit = self._order_cache[key] = (phys, offsets)
        return hit

    def slot_state(self, ref: SlotRef) -> SlotState:
        p, day, s = ref
        k = int(self.occ[p, day - 1, s])
        return SlotState(Occupancy(k), tuple(int(i) for i in self.patients[p, day - 1, s, :k]),
                         bool(self.zeta[p, day - 1, s]), self.realized.get(ref))

    def remaining(self, physician: int, from_day: int) -> int:
        return sum(self._empty_per_day[physician][from_day - 1:])

    def load(self, physician: int, from_day: int) -> PhysicianLoad:
        return PhysicianLoad(int(self.loads[physician]), self.remaining(physician, from_day))

    def book(self, ref: SlotRef, request: BookingRequest) -> int:
        """Add a patient; returns the new occupancy."""
        p, day, s = ref
        k = int(self.occ[p, day - 1, s])
        if k >= 2:
            raise InvariantViolation(f"slot {ref} already holds two patients")
        self.pis[p, day - 1, s, k] = request.noshow_prob
        self.att[p, day - 1, s, k] = request.attendance_prob
        self.uniforms[p, day - 1, s, k] = request.attend_u
        self.patients[p, day - 1, s, k] = request.patient_id
        self.occ[p, day - 1, s] = k + 1
        if k == 0:
            self._empty_per_day[p][day - 1] -= 1
        self.zeta[p, day - 1, s] = k == 0 and request.noshow_prob >= self.eligibility_min_pi
        self.loads[p] += 1
        return k + 1

    def booked(self, ref: SlotRef):
        p, day, s = ref
        k = int(self.occ[p, day - 1, s])
        return (self.pis[p, day - 1, s, :k], self.att[p, day - 1, s, :k],
                self.uniforms[p, day - 1, s, :k])


def assign_physician(clinic: int, department: int, calendar: Calendar) -> int:
    """Least-loaded physician of the department; ties go to the lowest id."""
    phys = calendar.topology.physicians_per_department[(clinic, department)]
    loads = calendar.loads[list(phys)]
    return phys[int(np.argmin(loads))]


@lru_cache(maxsize=None)
def _scan_order(booking_day: int, appointment_day: int, requested_slot: int,
                horizon: int, slots: int) -> np.ndarray:
    """Flat (day-1)*S+slot indices in search order for one physician."""
    order = [(appointment_day - 1) * slots + requested_slot]
    order += [(appointment_day - 1) * slots + s for s in range(slots) if s != requested_slot]
    for day in range(booking_day, horizon + 1):
        if day != appointment_day:
            order += [(day - 1) * slots + s for s in range(slots)]
    arr = np.array(order, dtype=np.int64)
    arr.setflags(write=False)
    return arr


def find_candidates(request: BookingRequest, calendar: Calendar) -> SlotCandidates:
    """Hierarchical slot search.

    Scan order: requested slot of the assigned physician, then that physician's
    other slots on the appointment day, then their other bookable days in
    (day, slot) order; then every other physician of the department in id order
    with the same scan. Returns the first empty and the first single-booked slot
    met along that order, the latter restricted to double-eligible slots.
    """
    topo = calendar.topology
    if request.physician_id is None:
        raise ContractError("request has no assigned physician")
    H, S = topo.horizon_days, topo.slots_per_day
    phys, offsets = calendar.physician_order(request.clinic_id, request.department_id, request.physician_id)
    order = _scan_order(request.booking_day, request.appointment_day, request.requested_slot, H, S)
    m = len(order)
    idx = (offsets + order).ravel()
    block = calendar._occ_ravel[idx]
    eligible = calendar._zeta_ravel[idx]

    def ref_at(pos):
        flat = order[pos % m]
        return SlotRef(phys[pos // m], int(flat // S) + 1, int(flat % S))

    e_hits = block == 0
    e_pos = int(e_hits.argmax())
    if not e_hits[e_pos]:
        e_pos = -1
    d_pos = int(eligible.argmax())
    if not eligible[d_pos]:
        d_pos = -1
    if e_pos < 0 and d_pos < 0:
        return SlotCandidates()
    first = min(p for p in (e_pos, d_pos) if p >= 0)
    tier = "RequestedSlot" if first == 0 else "SameDoctorOtherDay" if first < m else "SameDeptOtherDoctor"
    empty = ref_at(e_pos) if e_pos >= 0 else None
    double = ref_at(d_pos) if d_pos >= 0 else None
    return SlotCandidates(empty, double, tier, empty if first == e_pos else double)


# -- environment --------------------------------------------------------------

@dataclass
class EpisodeStats:
    requests: int = 0
    scheduled: int = 0
    rejected: int = 0
    shows: int = 0
    noshows: int = 0
    double_booked_slots: int = 0


class SchedulingEnv:
    """Gym-style wrapper: ``reset`` -> (obs, mask); ``step(action)`` -> (obs, mask, shaped, done, info).

    Randomness flows through named streams derived from the reset seed, so
    requests, lead times and attendance replay identically whatever the agent does.
    """

    def __init__(self, config: Optional[SimConfig] = None, predictor: Optional[NoShowPredictor] = None,
                 log_events: bool = False):
        self.config = config or SimConfig()
        self.config.validate()
        self.topology = self.config.topology()
        self.predictor = predictor or NoShowPredictor()
        self.log_events = log_events
        self._done = True

    def reset(self, seed=0):
        self.streams = make_streams(seed)
        self.calendar = Calendar(self.topology, self.config.double_eligibility_min_pi)
        self.stats = EpisodeStats()
        self.slot_outcomes: list[tuple[int, int, float, float, float]] = []  # (n_booked, S, u, d, b)
        self.events: list[dict] = []
        self.processed_keys: list[tuple[int, int, int]] = []
        self._queue: list[Event] = []
        self._seq = itertools.count()
        self._day = 0
        self._next_patient = 0
        self._done = False
        self._pending: Optional[BookingRequest] = None
        self._advance()
        return self._obs, self._mask

    # queue handling
    def _push(self, day: int, kind: str, payload) -> None:
        key = (day, _KIND_RANK[kind], next(self._seq))
        heapq.heappush(self._queue, (key, Event(key, kind, payload)))

    def _open_next_day(self) -> bool:
        if self._day >= self.topology.horizon_days:
            return False
        self._day += 1
        reqs = generate_booking_requests(self._day, self.streams, self.config, self.topology,
                                         self.predictor, self._next_patient)
        self._next_patient += len(reqs)
        for r in reqs:
            self._push(self._day, BOOKING, r)
        return True

    def _advance(self) -> None:
        """Process events until the next booking decision or the end of the horizon."""
        while True:
            while not self._queue or self._queue[0][0][0] > self._day:
                if not self._open_next_day():
                    break
            if not self._queue:
                self._done = True
                self._pending = None
                self._obs = None
                self._mask = ActionMask(False, False, True)
                return
            ev = heapq.heappop(self._queue)[1]
            self.processed_keys.append(ev.time_key)
            if ev.kind == ARRIVAL:
                self._realize(ev)
                continue
            req = ev.payload
            self.stats.requests += 1
            req.physician_id = assign_physician(req.clinic_id, req.department_id, self.calendar)
            cand = find_candidates(req, self.calendar)
            self._pending = req
            self._cand = cand
            self._mask = valid_actions(cand)
            self._event = ev
            self._obs = self._observe(req, cand)
            return

    def _observe(self, req: BookingRequest, cand: SlotCandidates) -> np.ndarray:
        ref = cand.primary
        if ref is None:
            # nothing bookable: describe the requested slot of the assigned physician
            ref = SlotRef(req.physician_id, req.appointment_day, req.requested_slot)
        return encode_observation(self.topology, ref, self.calendar.slot_state(ref), req,
                                  self.calendar.load(ref.physician, req.booking_day))

    @property
    def done(self) -> bool:
        return self._done

    @property
    def candidates(self) -> SlotCandidates:
        return self._cand

    @property
    def pending_request(self) -> Optional[BookingRequest]:
        return self._pending

    def apply_action(self, action: int, voluntary_reject: bool = False):
        """Book or reject the pending request; returns (slot ref or None, shaped components).

        ``voluntary_reject`` lets rule-based policies turn a request away even
        though a booking is feasible; learned policies always act under the mask.
        """
        req, cand = self._pending, self._cand
        if not (self._mask[action] or (voluntary_reject and action == REJECT)):
            raise ContractError(f"action {action} is masked (mask={tuple(self._mask)})")
        if action == REJECT:
            self.stats.rejected += 1
            return None, NO_REWARD
        ref = cand.empty_candidate if action == SINGLE_BOOK else cand.double_candidate
        if action == DOUBLE_BOOK:
            incumbent = float(self.calendar.booked(ref)[0][0])
            shaped = shaped_reward(DOUBLE_BOOK, (incumbent, req.noshow_prob))
        else:
            shaped = shaped_reward(SINGLE_BOOK, (req.noshow_prob,))
        k = self.calendar.book(ref, req)
        self.stats.scheduled += 1
        if k == 1:
            self._push(ref.day, ARRIVAL, ref)
        else:
            self.stats.double_booked_slots += 1
        return ref, shaped

    def step(self, action: int, voluntary_reject: bool = False):
        if self._done:
            raise ContractError("step() called on a finished episode")
        req, ev = self._pending, self._event
        ref, shaped = self.apply_action(int(action), voluntary_reject)
        if self.log_events:
            self.events.append({
                "day": ev.time_key[0], "seq": ev.time_key[2], "event_kind": BOOKING,
                "patient_id": req.patient_id,
                "physician_id": "" if ref is None else ref.physician,
                "slot_day": "" if ref is None else ref.day,
                "slot_index": "" if ref is None else ref.slot,
                "action": int(action), "pi": req.noshow_prob,
                "shaped_u": shaped.u, "shaped_d": shaped.d, "shaped_b": shaped.b,
                "realized_S": "", "realized_u": "", "realized_d": "", "realized_b": "",
            })
        info = {"request": req, "slot": ref}
        self._advance()
        return self._obs, self._mask, shaped, self._done, info

    def _realize(self, ev: Event) -> None:
        ref = ev.payload
        pis, att, uni = self.calendar.booked(ref)
        outcome, comp = realize_arrival(pis, att, uni)
        self.calendar.realized[ref] = outcome
        self.stats.shows += outcome.show_count
        self.stats.noshows += outcome.scheduled_count - outcome.show_count
        self.slot_outcomes.append((outcome.scheduled_count, outcome.show_count, comp.u, comp.d, comp.b))
        if self.log_events:
            self.events.append({
                "day": ev.time_key[0], "seq": ev.time_key[2], "event_kind": ARRIVAL,
                "patient_id": " ".join(str(i) for i in self.calendar.slot_state(ref).bookings),
                "physician_id": ref.physician, "slot_day": ref.day, "slot_index": ref.slot,
                "action": "", "pi": " ".join(f"{p:.6f}" for p in pis),
                "shaped_u": "", "shaped_d": "", "shaped_b": "",
                "realized_S": outcome.show_count, "realized_u": comp.u,
                "realized_d": comp.d, "realized_b": comp.b,
            })

    def write_event_log(self, path) -> None:
        with open(path, "w", newline="") as fh:
            w = csv.DictWriter(fh, fieldnames=EVENT_LOG_COLUMNS)
            w.writeheader()
            w.writerows(self.events)
