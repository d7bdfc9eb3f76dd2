import queue
import threading

from extensions import get_logger

logger = get_logger('prefetcher')

_DONE = object()


class _Failure:
    def __init__(self, error):
        self.error = error


def _fill_queue_loop(jobs, build, slots, stop):
    try:
        for job in jobs:
            if stop.is_set():
                return
            item = build(job)
            while not stop.is_set():
                try:
                    slots.put(item, timeout=0.1)
                    break
                except queue.Full:
                    continue
    except Exception as error:
        slots.put(_Failure(error))
        return
    slots.put(_DONE)


class Prefetcher:
    """Runs `build(job)` for each job on a daemon thread, `depth` batches ahead.

    Items come out in job order; an exception raised by `build` is re-raised
    in the consuming thread at the position it occurred.
    """

    def __init__(self, jobs, build, depth=2):
        self.depth = depth
        self._jobs = jobs
        self._build = build
        self._stop = threading.Event()
        self._slots = queue.Queue(maxsize=max(depth, 1))
        self._thread = None

    def __iter__(self):
        if self.depth <= 0:
            for job in self._jobs:
                yield self._build(job)
            return
        self._thread = threading.Thread(target=_fill_queue_loop,
                                        args=(self._jobs, self._build, self._slots, self._stop))
        self._thread.daemon = True
        self._thread.start()
        logger.debug(f"Prefetcher started with depth {self.depth}")
        try:
            while True:
                item = self._slots.get()
                if item is _DONE:
                    return
                if isinstance(item, _Failure):
                    raise item.error
                yield item
        finally:
            self.close()

    def close(self):
        self._stop.set()
        if self._thread is not None:
            while True:
                try:
                    self._slots.get_nowait()
                except queue.Empty:
                    break
            self._thread.join(timeout=1.0)
            self._thread = None
