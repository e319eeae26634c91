import pytest
import torch
from hypothesis import settings

torch.set_num_threads(1)
settings.register_profile("repo", deadline=None, max_examples=60)
settings.load_profile("repo")


@pytest.fixture
def announce(capsys):
    """Print a PASS/FAIL line for an acceptance criterion straight to the terminal."""

    def _announce(name: str, ok: bool, detail: str = "") -> bool:
        with capsys.disabled():
            print(f"\n[{'PASS' if ok else 'FAIL'}] {name}: {detail}")
        return ok

    return _announce
