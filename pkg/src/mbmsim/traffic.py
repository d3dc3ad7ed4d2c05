"""Mobile-TV source, playout buffer with stall accounting, satisfaction verdicts.

Frames are equal-sized and periodic. Playout of relative frame j is scheduled
at start + theta + j*interval where theta = initial wait + accumulated stalls.
At a boundary whose frame is still in flight the playout pauses (stall) until
the frame arrives or, after a per-frame grace equal to the stall budget, it is
declared lost at that shifted deadline; arrivals after a frame was resolved are
ignored (late arrival = lost). Frames known lost at the transmitter (HARQ
exhaustion, queue drops) are skipped without stalling.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

OK = "OK"
INITIAL_WAIT = "INITIAL_WAIT"
STALL_BUDGET = "STALL_BUDGET"
LOSS_RATE = "LOSS_RATE"

_DELIVERED = 1
_LOST = 2


@dataclass
class VideoFrame:
    frame_id: int
    creation_s: float
    size_bits: int


@dataclass
class SessionVerdict:
    satisfied: bool
    reason: str
    initial_wait_s: float
    stall_s: float
    loss_rate: float
    frames_counted: int
    censored: int


class PlayoutState:
    """Per-session playout clock, stall/wait accounting, delivered/lost counters."""

    def __init__(self, start_s: float, frame_interval_s: float, stall_grace_s: float):
        self.start_s = start_s
        self.interval = frame_interval_s
        self.grace = stall_grace_s
        self.theta = 0.0
        self.started = False
        self.next_idx = 0
        self.n_generated = 0
        self.waiting_since: float | None = None
        self.initial_wait_s = 0.0
        self.stall_s = 0.0
        self.delivered = 0
        self.lost = 0
        self._status: dict[int, int] = {}
        self.ended = False

    # -- event interface (engine-driven) --

    def on_frame_generated(self):
        self.n_generated += 1

    def on_frame_delivered(self, idx: int, now: float):
        """Frame idx fully decoded at time now. Duplicate deliveries are ignored."""
        if self.ended or idx in self._status:
            return
        if not self.started:
            self._status[idx] = _DELIVERED
            self.delivered += 1
            if idx == self.next_idx:
                self._start_playout(now)
            return
        if self.waiting_since is not None:
            if idx == self.next_idx:
                self._shift(now - self.waiting_since)
                self._status[idx] = _DELIVERED
                self.delivered += 1
                self.waiting_since = None
                self.next_idx += 1
            else:
                # a stall is in progress: this frame's deadline will shift past
                # the stall's end, so the arrival is on time
                self._status[idx] = _DELIVERED
                self.delivered += 1
            return
        deadline = self.start_s + self.theta + idx * self.interval
        if now <= deadline + 1e-12:
            self._status[idx] = _DELIVERED
            self.delivered += 1
        else:
            self._status[idx] = _LOST
            self.lost += 1

    def on_frame_lost(self, idx: int, now: float):
        """Transmitter-side known loss (HARQ exhausted, dropped)."""
        if self.ended or idx in self._status:
            return
        self._status[idx] = _LOST
        self.lost += 1
        if not self.started:
            # skip past the dead head of the sequence; start on a buffered frame
            while self._status.get(self.next_idx) == _LOST:
                self.next_idx += 1
            if self._status.get(self.next_idx) == _DELIVERED:
                self._start_playout(now)
            return
        if self.waiting_since is not None and idx == self.next_idx:
            self._shift(now - self.waiting_since)
            self.waiting_since = None
            self.next_idx += 1

    def advance(self, now: float):
        """Process playout boundaries up to now; engine calls on wake times."""
        if self.ended or not self.started:
            return
        while True:
            if self.waiting_since is not None:
                if now >= self.waiting_since + self.grace - 1e-12:
                    # declared lost at the shifted deadline
                    idx = self.next_idx
                    self._status[idx] = _LOST
                    self.lost += 1
                    self._shift(self.grace)
                    self.waiting_since = None
                    self.next_idx += 1
                else:
                    return
            if self.next_idx >= self.n_generated:
                return
            boundary = self.start_s + self.theta + self.next_idx * self.interval
            if boundary > now + 1e-12:
                return
            st = self._status.get(self.next_idx)
            if st is None:
                self.waiting_since = boundary
            else:
                self.next_idx += 1  # plays or skips; counters already settled

    def next_wake(self) -> float:
        if self.ended or not self.started:
            return float("inf")
        if self.waiting_since is not None:
            return self.waiting_since + self.grace
        if self.next_idx >= self.n_generated:
            return float("inf")
        return self.start_s + self.theta + self.next_idx * self.interval

    def end_session(self, now: float):
        if self.ended:
            return
        if self.waiting_since is not None:
            self.stall_s += max(0.0, now - self.waiting_since)
            self.waiting_since = None
        if not self.started:
            self.initial_wait_s = max(0.0, now - self.start_s)
        self.ended = True

    # -- internals --

    def _start_playout(self, now: float):
        self.started = True
        self.initial_wait_s = max(0.0, now - self.start_s)
        self.theta = now - self.start_s - self.next_idx * self.interval
        self.next_idx += 1

    def _shift(self, dt: float):
        dt = max(0.0, dt)
        self.stall_s += dt
        self.theta += dt

    @property
    def censored(self) -> int:
        return self.n_generated - self.delivered - self.lost


def evaluate_satisfaction(playout: PlayoutState, wait_budget_s: float,
                          stall_budget_s: float, loss_tolerance: float) -> SessionVerdict:
    """Binary verdict; the first violated criterion (wait, stall, loss) is the reason."""
    counted = playout.delivered + playout.lost
    loss_rate = playout.lost / counted if counted else 0.0
    if playout.initial_wait_s > wait_budget_s:
        sat, reason = False, INITIAL_WAIT
    elif playout.stall_s > stall_budget_s:
        sat, reason = False, STALL_BUDGET
    elif loss_rate > loss_tolerance:
        sat, reason = False, LOSS_RATE
    else:
        sat, reason = True, OK
    return SessionVerdict(sat, reason, playout.initial_wait_s, playout.stall_s,
                          loss_rate, counted, playout.censored)


def draw_lifetime(rng: np.random.Generator, mean_s: float) -> float:
    """Exponential session lifetime; strictly positive."""
    t = rng.exponential(mean_s)
    return t if t > 0.0 else np.nextafter(0.0, 1.0)
