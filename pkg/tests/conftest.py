import sys
from pathlib import Path

import pytest

SRC = Path(__file__).resolve().parents[1] / "src"
if str(SRC) not in sys.path:
    sys.path.insert(0, str(SRC))

from modlc.corpus import corpus_files, corpus_path  # noqa: E402


@pytest.fixture(scope="session")
def corpus():
    files = corpus_files()
    assert len(files) >= 20
    return files


@pytest.fixture(scope="session")
def cat_path():
    return corpus_path("cat.mod")


def read(path) -> str:
    return Path(path).read_text()
