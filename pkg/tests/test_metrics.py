import numpy as np
import pytest
from hypothesis import given, settings, strategies as st
from hypothesis.extra.numpy import arrays

from gridembed.embedding import Compression, compression_from_counts
from gridembed.grid import reduction_percentage
from gridembed.metrics import (ABSENT, CaseEval, build_report, combined_mse, dispatch_l1, emit_report,
                               gen_voltage_l1, opf_cost_error)
from gridembed.neural import History


def test_cost_error_examples():
    assert opf_cost_error(100, 100) == 0.0
    assert opf_cost_error(200, 199) == pytest.approx(0.5)
    assert opf_cost_error(200, 201) == pytest.approx(-0.5)
    with pytest.raises(ValueError):
        opf_cost_error(0, 1)


def test_compression_arithmetic_from_counts():
    c = compression_from_counts(11, 4, 11, 2)
    assert c.active == pytest.approx(63.64, abs=0.01)
    assert c.reactive == pytest.approx(81.82, abs=0.01)
    assert c.joint == pytest.approx(72.73, abs=0.01)
    assert reduction_percentage(22, 11) == 50.0


def test_dispatch_l1_examples():
    z = np.zeros((1, 1))
    assert dispatch_l1(z, z, z, z) == 0.0
    assert dispatch_l1([[0.0]], [[0.0]], [[0.2]], [[0.0]]) == pytest.approx(0.1)
    # per-instance values 0.1 and 0.3
    assert dispatch_l1(np.zeros((2, 1)), np.zeros((2, 1)), [[0.2], [0.6]], [[0.0], [0.0]]) == pytest.approx(0.2)
    with pytest.raises(ValueError):
        dispatch_l1(np.zeros((0, 2)), np.zeros((0, 2)), np.zeros((0, 2)), np.zeros((0, 2)))


def test_combined_mse_examples():
    g, b = np.zeros((3, 2)), np.zeros((3, 4))
    assert combined_mse(g, g, b, b, g, g, b, b) == 0.0
    off = np.full((3, 2), np.sqrt(0.4))
    assert combined_mse(g, g, b, b, off, g, b, b) == pytest.approx(0.2)
    assert combined_mse(g, g, b, b, g, g, b, np.full((3, 4), np.sqrt(0.4))) == pytest.approx(0.2)
    with pytest.raises(ValueError):
        combined_mse(g, g, b, b, g, g)


def test_gen_voltage_l1_examples():
    assert gen_voltage_l1([[1.0, 1.0]], [[1.0, 1.0]]) == 0.0
    assert gen_voltage_l1([[1.0, 1.0]], [[1.01, 0.97]]) == pytest.approx(0.02)
    assert gen_voltage_l1(np.ones((4, 3)), np.ones((4, 3)) + 0.007) == pytest.approx(0.007)
    with pytest.raises(ValueError):
        gen_voltage_l1(np.zeros((0, 3)), np.zeros((0, 3)))


# exact zeros or magnitudes >= 1e-6 (tinier values square to 0.0 in floating point)
entries = st.one_of(st.just(0.0), st.floats(1e-6, 1), st.floats(-1, -1e-6))
errs = arrays(float, (3, 4), elements=entries)


@settings(max_examples=60, deadline=None)
@given(errs, errs, st.floats(0.1, 10))
def test_homogeneity_and_positivity(e1, e2, k):
    t = np.zeros((3, 4))
    l1 = dispatch_l1(t, t, e1, e2)
    assert dispatch_l1(t, t, k * e1, k * e2) == pytest.approx(k * l1, rel=1e-9, abs=1e-12)
    assert gen_voltage_l1(t, k * e1) == pytest.approx(k * gen_voltage_l1(t, e1), rel=1e-9, abs=1e-12)
    m = combined_mse(t, t, t, t, e1, e2, e2, e1)
    assert combined_mse(t, t, t, t, k * e1, k * e2, k * e2, k * e1) == pytest.approx(k * k * m, rel=1e-9,
                                                                                      abs=1e-12)
    nonzero = np.any(e1 != 0) or np.any(e2 != 0)
    assert (l1 > 0) == nonzero and (m > 0) == nonzero


def sample_case(name="14_desk"):
    return CaseEval(name, Compression(63.64, 81.82), 0.18, 1.5, (22, 13),
                    {"none": 0.025, "linear": 0.024, "full": 0.027},
                    {"none": 0.001, "linear": 0.002, "full": 0.003},
                    {"none": 0.0008, "linear": 0.0009, "full": 0.0007},
                    curves={"dispatch/none": History([1.0, 0.1], [1.2, 0.2]), "encoder/full": History([0.5], [])})


def test_empty_report():
    report = emit_report([])
    assert report.empty
    assert all(t.rows == [] for t in report.tables)
    assert report.curves_csv.count("\n") == 1


def test_three_variant_columns():
    report = build_report([sample_case()])
    l1 = next(t for t in report.tables if t.name == "dispatch_l1")
    assert l1.header == ["Network", "No Enc.", "Linear Enc.", "Full Enc."]
    assert l1.rows == [["14_desk", "0.0250", "0.0240", "0.0270"]]
    comp = next(t for t in report.tables if t.name == "compression")
    assert comp.rows[0][1:4] == ["63.64", "81.82", "72.73"]
    dims = next(t for t in report.tables if t.name == "dimensions")
    assert dims.rows == [["14_desk", "22", "13", "41%"]]


def test_missing_variant_is_absent_and_rows_sorted():
    a = sample_case("b_case")
    b = CaseEval("a_case", dispatch_l1={"none": 0.5})
    report = build_report([a, b], timings=False)
    l1 = next(t for t in report.tables if t.name == "dispatch_l1")
    assert [r[0] for r in l1.rows] == ["a_case", "b_case"]
    assert l1.rows[0][2:] == [ABSENT, ABSENT]
    comp = next(t for t in report.tables if t.name == "compression")
    assert comp.rows[1][-1] == ABSENT  # timings off


def test_curves_are_log_losses():
    lines = build_report([sample_case()]).curves_csv.splitlines()
    assert lines[0] == "case,model,variant,split,epoch,loss,log10_loss"
    assert "14_desk,dispatch,none,train,1,0.1,-1.0" in lines
    assert "14_desk,encoder,full,train,0,0.5," + repr(float(np.log10(0.5))) in lines


def test_report_files_are_byte_identical(tmp_path):
    for d in ("a", "b"):
        emit_report([sample_case(), sample_case("30_desk")], tmp_path / d)
    names = sorted(p.name for p in (tmp_path / "a").iterdir())
    assert {"report.txt", "curves.csv", "dispatch_l1.csv", "compression.csv"} <= set(names)
    for n in names:
        assert (tmp_path / "a" / n).read_bytes() == (tmp_path / "b" / n).read_bytes()
