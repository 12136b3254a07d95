"""Injectable clocks. All timing in the package reads integer nanoseconds."""
import threading
import time


class WallClock:
    def now_ns(self):
        return time.perf_counter_ns()


class ManualClock:
    """Deterministic clock: every read advances by ``step_ns``."""

    def __init__(self, start_ns=0, step_ns=1_000_000):
        self._t = int(start_ns)
        self.step_ns = int(step_ns)
        self._lock = threading.Lock()

    def now_ns(self):
        with self._lock:
            t = self._t
            self._t += self.step_ns
            return t

    def advance(self, ns):
        with self._lock:
            self._t += int(ns)


class ScriptedClock:
    """Returns the given timestamps in order; raises once they run out."""

    def __init__(self, times_ns):
        self._times = list(times_ns)
        self._i = 0
        self._lock = threading.Lock()

    def now_ns(self):
        with self._lock:
            if self._i >= len(self._times):
                raise RuntimeError("scripted clock exhausted")
            t = self._times[self._i]
            self._i += 1
            return t


def ms(ns):
    return ns / 1e6
