import numpy as np
import pytest

from dpfl.acpf import FluctuationSpec, sample_operating_points, solve_power_flow
from dpfl.dataset import Dataset, assemble_xy, standard_schema
from dpfl.grid import load_case, parse_matpower_case


def two_bus_text(pd=0.0, qd=0.0, r=0.0, x=0.1, b=0.0, status=1, comments=False):
    """Slack at bus 1, PQ load at bus 2 (loads in MW/MVAr on a 100 MVA base)."""
    c = "% comment line\n" if comments else ""
    return (
        "function mpc = two_bus\n"
        f"{c}mpc.baseMVA = 100;\n"
        f"{c}mpc.bus = [\n"
        "\t1\t3\t0\t0\t0\t0\t1\t1\t0\t230\t1\t1.1\t0.9;\n"
        f"{c}"
        f"\t2\t1\t{pd}\t{qd}\t0\t0\t1\t1\t0\t230\t1\t1.1\t0.9;\n"
        "];\n"
        f"{c}mpc.gen = [\n"
        "\t1\t0\t0\t300\t-300\t1\t100\t1\t250\t10;\n"
        "];\n"
        "mpc.branch = [\n"
        f"\t1\t2\t{r}\t{x}\t{b}\t250\t250\t250\t0\t0\t{status}\t-360\t360;  % the line\n"
        "];\n"
    )


def two_bus(**kw):
    return parse_matpower_case(two_bus_text(**kw), name="two_bus")


def linear_dataset(n=60, d=4, m=2, noise=0.0, seed=0, chronological=True):
    """Random design with intercept, responses ``X beta + noise``; returns (ds, beta)."""
    rng = np.random.default_rng(seed)
    X = np.column_stack([np.ones(n), rng.normal(size=(n, d - 1))])
    beta = rng.normal(size=(d, m))
    Y = X @ beta + noise * rng.normal(size=(n, m))
    return Dataset.from_arrays(X, Y, chronological=chronological), beta


@pytest.fixture(scope="session")
def case9():
    return load_case("case9")


@pytest.fixture(scope="session")
def case9_data(case9):
    """400 operating points at +-20% load, standard schema."""
    states = sample_operating_points(case9, FluctuationSpec(relative_range=0.2, seed=1), 400)
    return assemble_xy(states, standard_schema(case9))


@pytest.fixture(scope="session")
def case9_base(case9):
    return solve_power_flow(case9)


THREE_BUS = """function mpc = three_bus
mpc.baseMVA = 100;
mpc.bus = [
	1	3	0	0	0	0	1	1.02	0	230	1	1.1	0.9;
	2	2	20	5	0	0	1	1.01	0	230	1	1.1	0.9;
	3	1	60	20	0	0	1	1	0	230	1	1.1	0.9;
];
mpc.gen = [
	1	0	0	300	-300	1.02	100	1	250	0;
	2	40	0	300	-300	1.01	100	1	250	0;
];
mpc.branch = [
	1	2	0.01	0.08	0.02	250	250	250	0	0	1	-360	360;
	1	3	0.02	0.1	0.02	250	250	250	0	0	1	-360	360;
	2	3	0.015	0.09	0.02	250	250	250	0	0	1	-360	360;
];
"""


def three_bus():
    return parse_matpower_case(THREE_BUS, name="three_bus")
