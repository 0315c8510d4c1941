import re
from pathlib import Path

from specpv.numerics import SeededRNG

from .test_numerics import _reference_stream

DOCS = Path(__file__).resolve().parents[1] / "docs"


def test_determinism_doc_lists_the_reference_stream():
    text = (DOCS / "determinism.md").read_text()
    pinned = [int(h, 16) for h in re.findall(r"^(0x[0-9a-f]{16})$", text, flags=re.M)]
    assert len(pinned) == 16
    assert pinned == list(_reference_stream(0, 16))
    rng = SeededRNG(0)
    assert pinned == [rng.next_u64() for _ in range(16)]
