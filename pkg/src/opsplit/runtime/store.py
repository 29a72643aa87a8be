"""Per-endpoint store of computed and received layer fragments."""
from __future__ import annotations

import threading
import time

from ..engine import Fragment, combine


class StoreClosed(RuntimeError):
    """The store was closed (peer lost or inference aborted) while waiting."""


class FragmentStore:
    """Fragments per layer with blocking waits on row ranges.

    Writers ``put`` completed fragments; readers ``wait`` until a range is
    covered.  One instance serves one inference at a time.
    """

    def __init__(self):
        self._frags: dict[int, list[Fragment]] = {}
        self._cond = threading.Condition()
        self._error: BaseException | None = None

    def put(self, frag: Fragment) -> None:
        with self._cond:
            self._frags.setdefault(frag.layer_id, []).append(frag)
            self._cond.notify_all()

    def covered(self, layer_id: int, lo: int, hi: int) -> bool:
        with self._cond:
            return self._covered(layer_id, lo, hi)

    def _covered(self, layer_id: int, lo: int, hi: int) -> bool:
        pos = lo
        for f in sorted(self._frags.get(layer_id, ()), key=lambda f: f.start):
            if f.start > pos:
                break
            pos = max(pos, f.stop)
            if pos >= hi:
                return True
        return pos >= hi

    def get(self, layer_id: int, lo: int, hi: int, check: bool = True) -> Fragment:
        with self._cond:
            frags = list(self._frags.get(layer_id, ()))
        return combine(frags, lo, hi, check=check)

    def wait(self, layer_id: int, lo: int, hi: int, timeout: float | None = None) -> Fragment:
        deadline = None if timeout is None else time.monotonic() + timeout
        with self._cond:
            while not self._covered(layer_id, lo, hi):
                if self._error is not None:
                    raise StoreClosed(str(self._error)) from self._error
                left = None if deadline is None else deadline - time.monotonic()
                if left is not None and left <= 0:
                    raise TimeoutError(f"timed out waiting for rows [{lo},{hi}) of layer {layer_id}")
                self._cond.wait(left)
        return self.get(layer_id, lo, hi)

    def close(self, error: BaseException) -> None:
        with self._cond:
            self._error = error
            self._cond.notify_all()

    def clear(self) -> None:
        with self._cond:
            self._frags.clear()
            self._error = None

    def layers(self) -> list[int]:
        with self._cond:
            return sorted(self._frags)
