import math

import pytest

from flexsim.autoflex import StatsSlot, adjust_scale, initialize_slot
from flexsim.format import ExponentState, FlexFormat
from flexsim.tensor import TensorUseKey
from flexsim.trace import TRACE_COLUMNS, Trace, TraceRecord, export_trace, read_trace

F16 = FlexFormat(16, 5)


def _small_trace():
    tr = Trace()
    slot = StatsSlot(F16, TensorUseKey("fc1.W", "weight"))
    initialize_slot(slot, lambda: 4 if slot.exponent == 0 else 15360, trace=tr)
    for it, g in enumerate([15360, 32767, 3000, 4001]):
        tr.iteration = it
        adjust_scale(slot, g, trace=tr, phase="bprop")
    return tr


def test_header_matches_schema(tmp_path):
    export_trace(_small_trace(), tmp_path / "t.csv")
    header = (tmp_path / "t.csv").read_text().splitlines()[0]
    assert header == "iteration,tensor_id,use_id,phase,gamma,exponent,kappa,phi,chi,overflow"
    assert tuple(header.split(",")) == TRACE_COLUMNS


def test_round_trip_is_exact(tmp_path):
    tr = _small_trace()
    export_trace(tr, tmp_path / "t.csv")
    back = read_trace(tmp_path / "t.csv")
    assert len(back) == len(tr)
    for a, b in zip(tr, back):
        assert a.iteration == b.iteration and a.tensor_id == b.tensor_id and a.gamma == b.gamma
        assert a.kappa == b.kappa and a.phi == b.phi and a.overflow == b.overflow
        assert a.chi == b.chi or (math.isnan(a.chi) and math.isnan(b.chi))


def test_rows_carry_phases_and_phi():
    tr = _small_trace()
    assert [r.phase for r in tr] == ["init", "init", "bprop", "bprop", "bprop", "bprop"]
    assert all(math.isnan(r.chi) for r in tr[:2])
    for r in tr:
        assert r.phi == pytest.approx(r.gamma * r.kappa, rel=1e-12)
        assert r.kappa == 2.0**-r.exponent
    assert [r.overflow for r in tr[2:]] == [False, True, False, False]


def test_read_rejects_wrong_header(tmp_path):
    p = tmp_path / "bad.csv"
    p.write_text("iteration,gamma\n0,1\n")
    with pytest.raises(ValueError):
        read_trace(p)


def test_record_without_key():
    tr = Trace()
    tr.record(StatsSlot(F16), 5, 0.5, 1, 1.0, False, "fprop")
    assert tr[0] == TraceRecord(0, "", "", "fprop", 5, 1, 0.5, 2.5, 1.0, False)
