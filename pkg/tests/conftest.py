from __future__ import annotations

import json
import sys
from pathlib import Path

import pytest

HERE = Path(__file__).resolve().parent
sys.path.insert(0, str(HERE))

DATA = HERE.parent / "src" / "servescale" / "data"


@pytest.fixture(scope="session")
def oracle():
    return json.loads((HERE / "oracle_values.json").read_text(encoding="utf-8"))


@pytest.fixture(scope="session")
def data_dir():
    return DATA
