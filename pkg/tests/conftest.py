from __future__ import annotations

import numpy as np
import pytest

from ltre import SyntheticSpec, generate_synthetic


@pytest.fixture(scope="session")
def small_spec() -> SyntheticSpec:
    return SyntheticSpec(
        num_topics=4,
        num_docs=300,
        num_train_queries=60,
        num_eval_queries=30,
        dim_k=16,
        doc_noise=0.1,
        query_noise=0.1,
        mismatch_rate=0.5,
        vocab_size=160,
        terms_per_doc=12,
        terms_per_query=6,
        seed=7,
    )


@pytest.fixture(scope="session")
def small_bundle(small_spec):
    return generate_synthetic(small_spec)


@pytest.fixture()
def rng() -> np.random.Generator:
    return np.random.default_rng(1234)


def pytest_terminal_summary(terminalreporter, exitstatus, config):
    """Echo the acceptance criteria verdicts after the test summary."""
    try:
        from test_acceptance import REPORT_LINES
    except ImportError:
        return
    if REPORT_LINES:
        terminalreporter.section("acceptance criteria")
        for line in REPORT_LINES:
            terminalreporter.write_line(line)
