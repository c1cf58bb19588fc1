"""Single-producer, multi-consumer broadcast of ordered events."""

from __future__ import annotations

import queue
import threading
from collections import deque
from typing import Callable, Generic, Iterable, Iterator, Optional, TypeVar

T = TypeVar("T")


class EventStream(Generic[T]):
    """An ordered queue fed by a :class:`Broadcaster`.

    Every published item that matches the stream's predicate is delivered
    exactly once, in publication order.
    """

    def __init__(self, predicate: Callable[[T], bool], callback: Optional[Callable[[T], None]] = None):
        self._predicate = predicate
        self._callback = callback
        self._items: deque[T] = deque()
        self._cond = threading.Condition()
        self.closed = False

    def _push(self, item: T) -> None:
        if not self._predicate(item):
            return
        if self._callback is not None:
            self._callback(item)
            return
        with self._cond:
            self._items.append(item)
            self._cond.notify_all()

    def drain(self) -> list[T]:
        """Return and remove every pending item without blocking."""
        with self._cond:
            items = list(self._items)
            self._items.clear()
        return items

    def get(self, timeout: Optional[float] = None) -> T:
        with self._cond:
            if not self._cond.wait_for(lambda: self._items or self.closed, timeout):
                raise queue.Empty
            if not self._items:
                raise queue.Empty
            return self._items.popleft()

    def __len__(self) -> int:
        return len(self._items)

    def __iter__(self) -> Iterator[T]:
        while True:
            with self._cond:
                if not self._items:
                    return
                item = self._items.popleft()
            yield item


class Broadcaster(Generic[T]):
    def __init__(self) -> None:
        self._streams: list[EventStream[T]] = []
        self._lock = threading.RLock()

    @property
    def lock(self) -> threading.RLock:
        return self._lock

    def subscribe(
        self,
        predicate: Callable[[T], bool] = lambda _: True,
        backlog: Iterable[T] = (),
        callback: Optional[Callable[[T], None]] = None,
    ) -> EventStream[T]:
        stream: EventStream[T] = EventStream(predicate, callback)
        with self._lock:
            for item in backlog:
                stream._push(item)
            self._streams.append(stream)
        return stream

    def unsubscribe(self, stream: EventStream[T]) -> None:
        with self._lock:
            stream.closed = True
            if stream in self._streams:
                self._streams.remove(stream)

    def publish(self, item: T) -> None:
        with self._lock:
            for stream in list(self._streams):
                stream._push(item)
