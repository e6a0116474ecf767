import time

import pytest
import torch

from belmil.bags import SynthConfig, make_splits, synth_generate
from belmil.training import TrainConfig, cross_validate

ABLATION_SEED = 7
ABLATION_EPOCHS = 40

_acceptance = []


@pytest.fixture(scope="session")
def synthetic_ablation():
    """One-fold runs with and without BEL on the 150-bag synthetic set, shared across test files."""
    torch.set_num_threads(1)
    ds = synth_generate(SynthConfig(class_count=3, bags_per_class=50, n_range=(50, 200), H=32, witness_rate=0.2),
                        seed=ABLATION_SEED)
    splits = make_splits(ds.manifest, 1 / 6, 1, seed=0)
    bags = {b.bag_id: b for b in ds.bags}
    runs = {}
    start = time.perf_counter()
    for use_bel in (True, False):
        config = TrainConfig(epochs=ABLATION_EPOCHS, seed=0, use_bel=use_bel, lr=1e-4, encoder={"dim": 128})
        runs[use_bel] = cross_validate(ds.manifest, splits, config, bags=bags)
    runs["seconds"] = time.perf_counter() - start
    runs["splits"] = splits
    return runs


def pytest_runtest_logreport(report):
    if "test_acceptance.py" not in report.nodeid:
        return
    if report.when == "call" or (report.when == "setup" and not report.passed):
        _acceptance.append(report)


def pytest_terminal_summary(terminalreporter):
    if not _acceptance:
        return
    terminalreporter.section("acceptance criteria")
    for rep in _acceptance:
        props = dict(rep.user_properties)
        status = "PASS" if rep.passed else "SKIP" if rep.skipped else "FAIL"
        name = props.get("criterion", rep.nodeid.split("::")[-1])
        terminalreporter.write_line(f"{status}  {name}  {props.get('measured', '')}".rstrip())
