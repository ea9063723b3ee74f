import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from nvarrays.geometry import (ArrayPlan, ChipSpec, PlanError, capacity, plan_from_text, plan_sites, plan_to_text,
                               read_sites_csv, write_sites_csv)

ARRAY_M = dict(label="M", nx=21, ny=20, pitch_xy=3.0, depths=(6.0, 9.0, 12.0, 15.0, 18.0), pulse_energy=17.5)


def test_array_m_has_2100_sites():
    plan = ArrayPlan(**ARRAY_M)
    sites = plan_sites(plan)
    assert plan.n_sites == len(sites) == 2100
    assert len(write_sites_csv(sites).splitlines()) == 2101


def test_site_order_is_depth_major_then_row_major():
    sites = plan_sites(ArrayPlan("A", 2, 3, 1.5, (5.0, 7.0), 17.5, origin=(1.0, 2.0, 0.5)))
    assert [s.index for s in sites[:3]] == [(0, 0, 0), (1, 0, 0), (0, 1, 0)]
    assert sites[0].target == (1.0, 2.0, 5.5)
    assert sites[-1].target == (2.5, 5.0, 7.5)
    assert sites[-1].site_id == "A-1-2-1"


@pytest.mark.parametrize("field, value", [
    ("nx", 0), ("ny", -1), ("pitch_xy", 0.0), ("depths", ()), ("depths", (5.0, 5.0)),
    ("depths", (-1.0, 2.0)), ("pulse_energy", 25.0), ("label", ""),
])
def test_invalid_plan_names_the_field(field, value):
    with pytest.raises(PlanError) as info:
        ArrayPlan(**{**ARRAY_M, field: value})
    assert info.value.field == field


def test_from_dict_rejects_unknown_keys():
    with pytest.raises(PlanError):
        ArrayPlan.from_dict({**ARRAY_M, "spacing": 1.0})


def test_capacity_reference_chip():
    assert capacity(ChipSpec(), 10.0, 5) == {"nvc_sites": 1_012_500, "total_qubits": 5_062_500}
    assert capacity(ChipSpec(), 10.0, 5, count_electron=True)["total_qubits"] == 1_012_500 * 6


@pytest.mark.parametrize("kwargs", [dict(x_extent_mm=0), dict(usable_depth_um=600.0)])
def test_chip_invariants(kwargs):
    with pytest.raises(PlanError):
        ChipSpec(**kwargs)


def test_capacity_rejects_bad_pitch():
    with pytest.raises(PlanError):
        capacity(ChipSpec(), 0.0)


@given(pitch=st.floats(1.0, 200.0), q=st.integers(1, 10))
def test_capacity_counts_whole_cells(pitch, q):
    cap = capacity(ChipSpec(), pitch, q)
    assert cap["total_qubits"] == cap["nvc_sites"] * q
    # one more cell per axis would not fit
    assert cap["nvc_sites"] <= (4500 / pitch) ** 2 * (50 / pitch) + 1e-6


@given(p1=st.floats(1.0, 100.0), p2=st.floats(1.0, 100.0))
def test_capacity_non_increasing_in_pitch(p1, p2):
    lo, hi = sorted((p1, p2))
    assert capacity(ChipSpec(), hi)["nvc_sites"] <= capacity(ChipSpec(), lo)["nvc_sites"]


@settings(max_examples=30)
@given(nx=st.integers(1, 6), ny=st.integers(1, 6),
       depths=st.lists(st.floats(0.1, 50.0), min_size=1, max_size=4, unique=True),
       pitch=st.floats(0.1, 20.0))
def test_sites_csv_round_trip(nx, ny, depths, pitch):
    plan = ArrayPlan("R", nx, ny, pitch, tuple(sorted(depths)), 17.5)
    sites = plan_sites(plan)
    assert read_sites_csv(write_sites_csv(sites)) == sites
    assert plan_from_text(plan_to_text(plan)) == plan


def test_sites_csv_file_round_trip(tmp_path):
    sites = plan_sites(ArrayPlan(**ARRAY_M))
    path = tmp_path / "sites.csv"
    write_sites_csv(sites, path)
    assert read_sites_csv(path) == sites
