import pytest

pytest.importorskip("torch")
pytest.importorskip("prunebridge")
pytest.importorskip("pruneblend")
