"""Bounded retry with exponential backoff, shared by the LLM and eUtils clients."""

from __future__ import annotations

import logging
import random
import time
from dataclasses import dataclass, field
from typing import Callable, TypeVar

from .errors import TransientError, TransportExhausted

log = logging.getLogger(__name__)

T = TypeVar("T")


@dataclass
class Backoff:
    """Exponential backoff with "equal" jitter.

    The k-th delay (k = 1, 2, ...) is drawn from ``[c/2, c]`` with
    ``c = min(base * 2**(k-1), max_delay)``. Below the cap the ranges do not
    overlap; ``schedule`` additionally carries the previous delay forward so a
    sequence never shrinks once the cap is reached.
    """

    base: float = 1.0
    max_delay: float = 60.0
    rng: random.Random = field(default_factory=random.Random)

    def delay(self, k: int) -> float:
        if k < 1:
            raise ValueError("retry index starts at 1")
        ceiling = min(self.base * 2 ** (k - 1), self.max_delay)
        return ceiling / 2 + self.rng.random() * ceiling / 2

    def schedule(self, n: int) -> list[float]:
        out: list[float] = []
        for k in range(1, n + 1):
            out.append(max(self.delay(k), out[-1] if out else 0.0))
        return out


def call_with_retry(
    fn: Callable[[], T],
    retry_max: int,
    backoff: Backoff,
    sleep: Callable[[float], None] = time.sleep,
    what: str = "request",
) -> tuple[T, int]:
    """Run ``fn`` until it succeeds or ``retry_max`` retries are spent.

    Only ``TransientError`` is retried. Returns ``(result, attempts)``.
    """
    attempt = 0
    previous = 0.0
    while True:
        attempt += 1
        try:
            return fn(), attempt
        except TransientError as exc:
            if attempt > retry_max:
                raise TransportExhausted(
                    f"{what} failed after {attempt} attempts: {exc}", attempts=attempt
                ) from exc
            wait = previous = max(backoff.delay(attempt), previous)
            log.warning("%s failed (%s); retry %d/%d in %.2fs", what, exc, attempt, retry_max, wait)
            sleep(wait)
