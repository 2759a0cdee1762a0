import json
import os
from collections import defaultdict

import numpy as np
import pytest
from dotenv import load_dotenv

from app import settings
from app.datagen import Dataset
from app.tree_core import build_complete_tree, init_model

# Load environment variables from .env file
load_dotenv()

REFERENCE_CASES_FILE = os.path.join(os.path.dirname(__file__), "reference_cases.json")

# Passed/total counters per test module
suite_results = defaultdict(lambda: [0, 0])


def _suite_name(nodeid: str) -> str:
    module = nodeid.split("::")[0].rsplit("/", 1)[-1]
    return module[: -len(".py")] if module.endswith(".py") else module


def pytest_report_teststatus(report, config):
    """Track test results."""
    if report.when == "call":  # Only count the actual test call, not setup/teardown
        counts = suite_results[_suite_name(report.nodeid)]
        counts[1] += 1
        if report.outcome == "passed":
            counts[0] += 1


def pytest_terminal_summary(terminalreporter, exitstatus, config):
    """Add per-suite pass rates to the terminal summary."""
    for suite, (passed, total) in sorted(suite_results.items()):
        if total > 0:
            terminalreporter.write_sep(
                "=", f"{suite}: {passed}/{total} passed ({passed / total * 100:.1f}%)"
            )


@pytest.hookimpl(optionalhook=True)
def pytest_html_report_title(report):
    passed = sum(counts[0] for counts in suite_results.values())
    total = sum(counts[1] for counts in suite_results.values())
    rate = passed / total * 100 if total else 0.0
    report.title = (
        f"Test Report - {rate:.1f}% passed - enumeration guard: "
        f"{settings.MAX_ENUMERATED_LEAVES} leaves"
    )


@pytest.hookimpl(optionalhook=True)
def pytest_html_results_summary(prefix, summary, postfix):
    rows = "".join(
        f"<tr><td>{suite}</td><td>{passed}/{total}</td>"
        f"<td>{(passed / total * 100) if total else 0:.1f}%</td></tr>"
        for suite, (passed, total) in sorted(suite_results.items())
    )
    prefix.append(
        f"""
    <div class="suite-summary">
        <h3>Suites</h3>
        <table>
            <tr><th>Suite</th><th>Passed/Total</th><th>Pass rate</th></tr>
            {rows}
        </table>
    </div>
    """
    )


@pytest.fixture(scope="session")
def reference_cases():
    with open(REFERENCE_CASES_FILE) as f:
        return json.load(f)


@pytest.fixture
def rng():
    return np.random.default_rng(1234)


@pytest.fixture
def small_model():
    """(2,2) tree, n=2, C=4, parameters large enough for non-uniform routing."""
    return init_model(build_complete_tree(2, 2), input_dim=2, num_classes=4, init_scale=1.0, seed=7)


@pytest.fixture
def random_dataset():
    """Factory for small random datasets with every class index drawn uniformly."""

    def make(count: int, num_classes: int, seed: int = 0, input_dim: int = 2) -> Dataset:
        generator = np.random.default_rng(seed)
        X = generator.uniform(-1.0, 1.0, size=(count, input_dim))
        labels = generator.integers(0, num_classes, size=count)
        return Dataset(X, labels, num_classes, "train")

    return make


@pytest.fixture
def two_clusters():
    """Two well-separated isotropic clusters at (-1, 0) and (1, 0), sigma 0.2."""

    def make(seed: int, per_class: int = 50) -> Dataset:
        generator = np.random.default_rng(seed)
        left = np.array([-1.0, 0.0]) + 0.2 * generator.standard_normal((per_class, 2))
        right = np.array([1.0, 0.0]) + 0.2 * generator.standard_normal((per_class, 2))
        labels = np.repeat([0, 1], per_class)
        return Dataset(np.concatenate([left, right]), labels, 2, "train")

    return make
