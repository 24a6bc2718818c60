"""Check a scan listing read from stdin: ``python -m rawmamba.verify_scan [T H W]``.

Verifies that the listing visits every cell of the box exactly once and that
consecutive cells are face neighbours.  Without explicit dims the box is the
bounding box of the listed coordinates.  Exit status 0 on success, 1 otherwise.
"""

from __future__ import annotations

import sys

import numpy as np

from .scan import parse_listing


def verify(coords: np.ndarray, dims: tuple[int, int, int] | None = None) -> list[str]:
    """Return a list of problems (empty when the listing is a valid unit-step scan)."""
    problems = []
    if len(coords) == 0:
        return ["empty listing"]
    if dims is None:
        dims = tuple(int(v) + 1 for v in coords.max(axis=0))
    if (coords < 0).any() or (coords >= np.asarray(dims)).any():
        problems.append(f"coordinates outside {dims}")
        return problems
    flat = np.ravel_multi_index(coords.T, dims)
    counts = np.bincount(flat, minlength=int(np.prod(dims)))
    if (counts != 1).any():
        problems.append(f"{int((counts == 0).sum())} cells missed, {int((counts > 1).sum())} visited twice")
    steps = np.abs(np.diff(coords, axis=0)).sum(axis=1)
    bad = np.flatnonzero(steps != 1)
    if bad.size:
        problems.append(f"{bad.size} non-unit steps, first at position {int(bad[0])}")
    return problems


def main(argv: list[str] | None = None) -> int:
    argv = sys.argv[1:] if argv is None else argv
    dims = tuple(int(v) for v in argv[:3]) if len(argv) >= 3 else None
    problems = verify(parse_listing(sys.stdin.read()), dims)
    for p in problems:
        print(p, file=sys.stderr)
    print("ok" if not problems else "FAILED")
    return 0 if not problems else 1


if __name__ == "__main__":
    sys.exit(main())
