import pytest

from marketshare.ingest import FacilityProfile
from marketshare.synthetic import SyntheticConfig, generate_synthetic


@pytest.fixture(scope="session")
def default_data():
    return generate_synthetic(SyntheticConfig(seed=0))


@pytest.fixture(scope="session")
def small_data():
    return generate_synthetic(SyntheticConfig(n_facilities=10, n_clusters=2,
                                              n_service_lines=3, tuples_per_cell=3, seed=5))


def make_profile(fid, lat=47.0, lon=-122.0, system="S1", area="X", **kw):
    base = dict(facility_id=fid, name=fid.upper(), system_id=system, latitude=lat,
                longitude=lon, licensed_bed_cnt=100, nurse_avg_rate=3.5, service_area=area,
                hospital_type="Acute Care Hospitals", ownership="Proprietary",
                is_covid=False, emergency_services=True)
    base.update(kw)
    return FacilityProfile(**base)


def pytest_terminal_summary(terminalreporter):
    import sys
    mod = sys.modules.get("test_acceptance")
    lines = getattr(mod, "RESULTS", None)
    if lines:
        terminalreporter.section("acceptance criteria")
        for line in lines:
            terminalreporter.write_line(line)
