import numpy as np
import pytest

from optmm.config import BookGroup, BookModel, RunConfig
from optmm.model import CorrelationStructure, HestonJumpParams


def make_book(strikes=(97.0, 100.0), maturities=(0.3, 0.7), **book_kw):
    cfg = RunConfig(book=BookModel(groups=[BookGroup(strikes=list(strikes), maturities=list(maturities))], **book_kw))
    return cfg.build_book()


@pytest.fixture(scope="session")
def params():
    return HestonJumpParams()


@pytest.fixture(scope="session")
def corr():
    return CorrelationStructure.identity(1)


@pytest.fixture(scope="session")
def book4():
    return make_book()


@pytest.fixture
def rng():
    return np.random.default_rng(20240611)


# criterion number -> PASS/FAIL line, filled by test_acceptance
ACCEPTANCE = {}


def pytest_terminal_summary(terminalreporter):
    if ACCEPTANCE:
        terminalreporter.section("acceptance criteria")
        for n in sorted(ACCEPTANCE):
            terminalreporter.write_line(ACCEPTANCE[n])
