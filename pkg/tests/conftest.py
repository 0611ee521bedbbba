import json
import os
import re
import sys
import time
from pathlib import Path

import pytest

sys.path.insert(0, str(Path(__file__).parent))

from evolve_ehr.cohort import CohortConfig, generate, save_jsonl, save_split, split  # noqa: E402
from evolve_ehr.logreg import OneVsRestLogReg  # noqa: E402
from evolve_ehr.model import load_checkpoint, save_checkpoint  # noqa: E402
from evolve_ehr.pipeline import Dataset, load_dataset, sibling, train_logreg, train_transformer  # noqa: E402

STANDARD_SEED = 0
STANDARD_COHORT = CohortConfig(n_persons=20_000, seed=STANDARD_SEED)

_criteria: dict[int, tuple[str, str]] = {}


class StandardRun:
    """The seed-pinned 20k-person cohort and the three models trained on it.

    Models are trained on first use. Setting EVOLVE_ACCEPT_CACHE to a directory
    keeps the artifacts between sessions so repeated runs skip training.
    """

    def __init__(self, root: Path):
        self.root = root
        self.root.mkdir(parents=True, exist_ok=True)
        self.data_path = root / "standard.jsonl"
        self.timings: dict[str, float] = {}
        self._models: dict = {}
        self._data = None

    @property
    def data(self) -> Dataset:
        if self._data is None:
            cohort_file = sibling(self.data_path, ".cohort.json")
            if not (self.data_path.exists() and cohort_file.exists()):
                persons = generate(STANDARD_COHORT)
                save_jsonl(persons, self.data_path)
                save_split(split(persons, STANDARD_SEED), sibling(self.data_path, ".split.json"))
                cohort_file.write_text(json.dumps(STANDARD_COHORT.to_dict()), encoding="utf-8")
            self._data = load_dataset(self.data_path)
        return self._data

    def model(self, kind: str):
        if kind in self._models:
            return self._models[kind]
        path = self.root / (f"{kind}.json" if kind == "logreg" else f"{kind}.ckpt")
        if path.exists():
            model = OneVsRestLogReg.load(path) if kind == "logreg" else load_checkpoint(path)
        else:
            t0 = time.perf_counter()
            if kind == "logreg":
                model = train_logreg(self.data)
                model.save(path)
            else:
                model, _ = train_transformer(self.data, kind, seed=STANDARD_SEED)
                save_checkpoint(model, path)
            self.timings[kind] = time.perf_counter() - t0
        self._models[kind] = model
        return model


@pytest.fixture(scope="session")
def standard(tmp_path_factory) -> StandardRun:
    cache = os.environ.get("EVOLVE_ACCEPT_CACHE")
    root = Path(cache) if cache else tmp_path_factory.mktemp("standard")
    return StandardRun(root)


def pytest_runtest_logreport(report):
    m = re.search(r"test_criterion_(\d+)_(\w+)", report.nodeid)
    if not m:
        return
    n = int(m.group(1))
    if report.when == "call" or (report.when == "setup" and report.outcome != "passed"):
        status = {"passed": "PASS", "failed": "FAIL", "skipped": "SKIP"}[report.outcome]
        _criteria[n] = (status, m.group(2).replace("_", " "))


def pytest_terminal_summary(terminalreporter):
    if not _criteria:
        return
    terminalreporter.section("acceptance criteria")
    for n in sorted(_criteria):
        status, name = _criteria[n]
        terminalreporter.write_line(f"criterion {n:2d}: {status}  {name}")
