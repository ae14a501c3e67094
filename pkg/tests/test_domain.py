import numpy as np
import pytest
from hypothesis import given
from hypothesis import strategies as st

from dbook.domain import (
    DEFAULT_WEIGHT_TABLE,
    FEATURE_NAMES,
    OBS_DIM,
    ClinicTopology,
    ContractError,
    InvariantViolation,
    Occupancy,
    PhysicianLoad,
    SlotCandidates,
    SlotRef,
    SlotState,
    BookingRequest,
    WeightVector,
    decode_indices,
    default_weights,
    encode_observation,
    valid_actions,
)


def request(pi=0.4, day=1, appt=1):
    return BookingRequest(0, np.zeros(8), pi, day, appt - day, appt, 0, 0, 0)


def test_default_topology_shape():
    topo = ClinicTopology.uniform()
    assert topo.slots_per_day == 16 and topo.horizon_days == 14
    assert topo.n_physicians == 8
    assert topo.total_capacity() == 1792
    assert topo.slot_times == tuple(range(16))


def test_physician_in_two_departments_rejected():
    with pytest.raises(ValueError):
        ClinicTopology((0,), {0: (0, 1)}, {(0, 0): (0, 1), (0, 1): (1, 2)})


def test_horizon_must_be_positive():
    with pytest.raises(ValueError):
        ClinicTopology.uniform(horizon_days=0)


def test_slot_state_invariants():
    SlotState(Occupancy.SINGLE, (3,), True)
    with pytest.raises(InvariantViolation):
        SlotState(Occupancy.SINGLE, ())
    with pytest.raises(InvariantViolation):
        SlotState(Occupancy.DOUBLE, (1, 2), True)
    with pytest.raises(InvariantViolation):
        SlotState(Occupancy.DOUBLE, (1, 2, 3))


def test_booking_request_invariants():
    with pytest.raises(InvariantViolation):
        request(pi=1.2)
    with pytest.raises(InvariantViolation):
        BookingRequest(0, np.zeros(8), 0.3, 5, 0, 4, 0, 0, 0)


def test_weight_table_rows_sum_to_one():
    ws = default_weights()
    assert len(ws) == 10
    assert ws[0] == WeightVector(1.0, 0.0, 0.0)
    assert ws[6] == WeightVector(0.33, 0.33, 0.34)
    for row in DEFAULT_WEIGHT_TABLE:
        assert abs(sum(row) - 1.0) < 1e-9


def test_weight_vector_rejects_bad_rows():
    with pytest.raises(ValueError):
        WeightVector(0.5, 0.5, 0.5)
    with pytest.raises(ValueError):
        WeightVector(1.2, -0.2, 0.0)


def test_encoding_empty_slot_endpoints():
    topo = ClinicTopology.uniform()
    cap = topo.physician_capacity()
    obs = encode_observation(topo, SlotRef(0, 1, 0), SlotState(), request(0.4), PhysicianLoad(0, cap))
    assert obs.shape == (OBS_DIM,) == (len(FEATURE_NAMES),)
    assert obs[5] == 0.0 and obs[6] == 0.4 and obs[8] == 0.0 and obs[9] == 1.0


def test_encoding_single_booked_and_last_day():
    topo = ClinicTopology.uniform()
    obs = encode_observation(topo, SlotRef(7, 14, 15), SlotState(Occupancy.SINGLE, (1,), True),
                             request(0.4, 1, 14), PhysicianLoad(5, 100))
    assert obs[5] == 0.5
    assert obs[3] == 1.0
    assert obs[4] == 1.0 and obs[2] == 1.0 and obs[1] == 1.0
    assert obs[7] == 1.0


def test_encoding_rejects_overfull_load():
    topo = ClinicTopology.uniform()
    cap = topo.physician_capacity()
    with pytest.raises(InvariantViolation):
        encode_observation(topo, SlotRef(0, 1, 0), SlotState(), request(), PhysicianLoad(2 * cap + 1, 0))


def test_encoding_rejects_foreign_slot():
    topo = ClinicTopology.uniform()
    with pytest.raises(ContractError):
        encode_observation(topo, SlotRef(0, 15, 0), SlotState(), request(), PhysicianLoad(0, 0))


@given(clinics=st.integers(1, 4), depts=st.integers(1, 4), phys=st.integers(1, 4),
       slots=st.integers(1, 64), horizon=st.integers(1, 64), data=st.data())
def test_encoding_roundtrip_and_range(clinics, depts, phys, slots, horizon, data):
    topo = ClinicTopology.uniform(clinics, depts, phys, slots, horizon)
    p = data.draw(st.integers(0, topo.n_physicians - 1))
    day = data.draw(st.integers(1, horizon))
    s = data.draw(st.integers(0, slots - 1))
    cap = topo.physician_capacity()
    load = PhysicianLoad(data.draw(st.integers(0, 2 * cap)), data.draw(st.integers(0, cap)))
    pi = data.draw(st.floats(0, 1))
    obs = encode_observation(topo, SlotRef(p, day, s), SlotState(), request(pi, day, day), load)
    again = encode_observation(topo, SlotRef(p, day, s), SlotState(), request(pi, day, day), load)
    assert np.array_equal(obs, again)
    assert len(obs) == 10 and np.all((obs >= 0) & (obs <= 1))
    c, d = topo.owner(p)
    assert decode_indices(topo, obs) == {"clinic": c, "department": d, "physician": p, "day": day, "slot": s}


def test_valid_actions_cases():
    a, b = SlotRef(0, 1, 0), SlotRef(0, 1, 1)
    assert tuple(valid_actions(SlotCandidates(a, None))) == (True, False, False)
    assert tuple(valid_actions(SlotCandidates(a, b))) == (True, True, False)
    assert tuple(valid_actions(SlotCandidates())) == (False, False, True)
    assert tuple(valid_actions(SlotCandidates(None, b))) == (False, True, False)


@given(st.booleans(), st.booleans())
def test_mask_reject_iff_no_booking(has_e, has_d):
    m = valid_actions(SlotCandidates(SlotRef(0, 1, 0) if has_e else None, SlotRef(0, 1, 1) if has_d else None))
    assert any(m)
    assert m.reject == (not m.single and not m.double)
