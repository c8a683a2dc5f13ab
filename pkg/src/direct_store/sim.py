"""Deterministic discrete-event simulator and an in-process message network."""

import heapq
import itertools
import random

from . import wire


class Simulator:
    """Events run in (time, insertion order); time is in simulated milliseconds."""

    def __init__(self):
        self.now = 0.0
        self._queue = []
        self._seq = itertools.count()

    def schedule(self, delay, fn, *args):
        if delay < 0:
            raise ValueError("negative delay")
        heapq.heappush(self._queue, (self.now + delay, next(self._seq), fn, args))

    def step(self):
        t, _, fn, args = heapq.heappop(self._queue)
        self.now = max(self.now, t)
        fn(*args)

    def pending(self):
        return len(self._queue)

    def run(self, until=None, max_events=None):
        n = 0
        while self._queue and (until is None or self._queue[0][0] <= until):
            self.step()
            n += 1
            if max_events is not None and n >= max_events:
                break
        if until is not None and self.now < until:
            self.now = until
        return n

    def run_until(self, predicate, timeout=None):
        """Run events until ``predicate()`` holds; False if time or events run out first."""
        deadline = None if timeout is None else self.now + timeout
        while not predicate():
            if not self._queue or (deadline is not None and self._queue[0][0] > deadline):
                if deadline is not None:
                    self.now = max(self.now, deadline)
                return predicate()
            self.step()
        return True


class Network:
    """Delivers messages after a seeded random latency.

    Every message goes through :func:`wire.encode`/:func:`wire.decode` unless
    ``serialize`` is off (large experiments).  ``drop`` loses messages at
    random; nodes in ``down`` neither send nor receive.  With ``links`` on,
    each directed link transmits one message at a time (FIFO), so a stream of
    large messages shares the link bandwidth instead of overlapping.
    """

    def __init__(self, sim, seed=0, latency_ms=(0.1, 1.0), bandwidth_bytes_per_ms=100_000.0,
                 drop=0.0, serialize=True, links=False):
        self.sim = sim
        self.rng = random.Random(seed)
        self.latency_ms = latency_ms
        self.bandwidth = bandwidth_bytes_per_ms
        self.drop = drop
        self.serialize = serialize
        self.links = links
        self._link_free = {}
        self.handlers = {}
        self.down = set()
        self.sent = 0
        self.bytes_sent = 0
        self.dropped = 0

    def register(self, node, handler):
        self.handlers[node] = handler

    def delay_for(self, nbytes):
        lo, hi = self.latency_ms
        return self.rng.uniform(lo, hi) + nbytes / self.bandwidth

    def send(self, src, dst, msg, extra_delay=0.0):
        frame = wire.encode(msg) if self.serialize else msg
        size = len(frame) if self.serialize else _approx_size(msg)
        self.sent += 1
        self.bytes_sent += size
        if src in self.down or dst in self.down or (self.drop and self.rng.random() < self.drop):
            self.dropped += 1
            return size
        if self.links:
            start = max(self.sim.now + extra_delay, self._link_free.get((src, dst), 0.0))
            done = start + size / self.bandwidth
            self._link_free[(src, dst)] = done
            lo, hi = self.latency_ms
            delay = done - self.sim.now + self.rng.uniform(lo, hi)
        else:
            delay = extra_delay + self.delay_for(size)
        self.sim.schedule(delay, self._deliver, src, dst, frame)
        return size

    def _deliver(self, src, dst, frame):
        if dst in self.down:
            self.dropped += 1
            return
        msg = wire.decode(frame) if self.serialize else frame
        self.handlers[dst](src, msg)


def _approx_size(msg):
    data = getattr(msg, "data", b"")
    checksums = getattr(msg, "checksums", ())
    return 64 + len(data) + 4 * len(checksums)
