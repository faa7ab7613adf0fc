import numpy as np
import pytest
from hypothesis import settings

from zibmed.model import MixtureConfig, table1_truth
from zibmed.simulate import SettingISpec, generate_setting1

settings.register_profile("default", max_examples=60, deadline=None)
settings.load_profile("default")


@pytest.fixture(scope="session")
def truth3():
    return table1_truth(3)


@pytest.fixture(scope="session")
def truth2():
    return table1_truth(2)


@pytest.fixture(scope="session")
def small_data():
    """50 Setting I subjects from the two-component truth."""
    return generate_setting1(SettingISpec.table1(2, n=50, seed=11)).dataset


@pytest.fixture(scope="session")
def data20():
    """20 subjects with a moderate library size so both zero types occur."""
    spec = SettingISpec(n=20, config=MixtureConfig(2), truth=table1_truth(3),
                        library_sizes=[200, 500, 1000], seed=5)
    return generate_setting1(spec).dataset


def random_feasible_free(rng, config):
    from zibmed.model import ParameterVector

    K1 = config.K + 1
    psi = rng.dirichlet(np.ones(K1))[:-1]
    p = ParameterVector(
        beta=rng.normal(0, 2, 6), delta_sd=rng.uniform(0.5, 2.0),
        gamma=rng.normal(0, 1, 2), phi=rng.uniform(2, 30),
        alpha0=np.sort(rng.normal(-2, 1.5, K1))[::-1], alpha1=rng.normal(0, 0.5, K1), psi=psi)
    return p.to_free(config)


# one summary line per acceptance criterion, echoed at the end of the run
ACCEPTANCE_LINES: list[str] = []


def record_criterion(number: int, title: str, checks: list[tuple[str, bool]]) -> bool:
    ok = all(passed for _, passed in checks)
    detail = "; ".join(f"{'ok' if passed else 'MISS'} {text}" for text, passed in checks)
    line = f"CRITERION {number} {'PASS' if ok else 'FAIL'}: {title} | {detail}"
    ACCEPTANCE_LINES.append(line)
    print(line)
    return ok


def pytest_terminal_summary(terminalreporter):
    if ACCEPTANCE_LINES:
        terminalreporter.section("acceptance criteria")
        for line in sorted(ACCEPTANCE_LINES, key=lambda s: int(s.split()[1])):
            terminalreporter.write_line(line)
