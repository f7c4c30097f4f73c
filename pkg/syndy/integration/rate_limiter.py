"""
Rate limiting and retry policy shared by every provider.

The limiter is the one synchronized object concurrent fetch/annotation
workers share: in any sliding window of `window_seconds`, at most
`max_requests` acquisitions succeed.
"""

import threading
import time
from collections import deque
from dataclasses import dataclass
from typing import Callable, Deque, List, Optional

from tenacity import RetryCallState, Retrying, retry_if_exception_type, stop_after_attempt, wait_exponential

from syndy.common.errors import TransportError
from syndy.common.logging_config import get_logger

logger = get_logger(__name__)


class SlidingWindowRateLimiter:
    def __init__(
        self,
        max_requests: int,
        window_seconds: float = 60.0,
        clock: Callable[[], float] = time.monotonic,
        sleep: Callable[[float], None] = time.sleep,
        record_history: bool = False,
    ):
        if max_requests < 1:
            raise ValueError("max_requests must be positive")
        self.max_requests = max_requests
        self.window_seconds = window_seconds
        self._clock = clock
        self._sleep = sleep
        self._lock = threading.Lock()
        self._recent: Deque[float] = deque()
        self.record_history = record_history
        # granted timestamps, kept only when record_history is set
        self.history: List[float] = []

    def acquire(self) -> float:
        """Block until a request may be sent; returns the granted timestamp."""
        with self._lock:
            while True:
                now = self._clock()
                while self._recent and self._recent[0] <= now - self.window_seconds:
                    self._recent.popleft()
                if len(self._recent) < self.max_requests:
                    self._recent.append(now)
                    if self.record_history:
                        self.history.append(now)
                    return now
                wait = self._recent[0] + self.window_seconds - now
                logger.debug(f"Rate cap {self.max_requests}/{self.window_seconds}s reached, waiting {wait:.2f}s")
                self._sleep(max(wait, 0.0))


@dataclass(frozen=True)
class RetryPolicy:
    max_attempts: int = 4
    base_delay: float = 1.0
    multiplier: float = 2.0
    max_delay: float = 60.0

    def retrying(self, sleep: Optional[Callable[[float], None]] = None) -> Retrying:
        """tenacity controller: retries TransportError only, exponential backoff, Retry-After honored."""
        backoff = wait_exponential(multiplier=self.base_delay, exp_base=self.multiplier, max=self.max_delay)

        def wait(retry_state: RetryCallState) -> float:
            delay = backoff(retry_state)
            exc = retry_state.outcome.exception() if retry_state.outcome else None
            retry_after = getattr(exc, "retry_after", None)
            if retry_after:
                delay = max(delay, float(retry_after))
            logger.debug(f"Attempt {retry_state.attempt_number} failed ({exc}); retrying in {delay:.2f}s")
            return delay

        return Retrying(
            stop=stop_after_attempt(self.max_attempts),
            wait=wait,
            retry=retry_if_exception_type(TransportError),
            sleep=sleep or time.sleep,
            reraise=True,
        )
