import logging
import threading
from queue import Empty, Queue
from typing import Any, Callable, Dict, List, Optional, Sequence, TypeVar

logger = logging.getLogger(__name__)

T = TypeVar('T')
R = TypeVar('R')


class ThreadManager:
    """Runs tasks on a bounded pool of worker threads, returning results in submission order."""

    def __init__(self, parallelism: int = 1):
        """Initialize thread manager."""
        if parallelism < 1:
            raise ValueError("parallelism must be at least 1")
        self.parallelism = parallelism
        self.task_queue: Queue = Queue()
        self.cancel_processing: bool = False
        self.progress_callback: Optional[Callable[[int, int], None]] = None
        self._results: Dict[int, Any] = {}
        self._errors: Dict[int, BaseException] = {}
        self._done = 0
        self._total = 0
        self._lock = threading.Lock()

    def set_progress_callback(self, callback: Callable[[int, int], None]) -> None:
        """Set callback receiving (completed, total) after each task."""
        self.progress_callback = callback

    def stop_processing(self) -> None:
        """Let running tasks finish but start no new ones."""
        self.cancel_processing = True

    def clear_queue(self) -> None:
        """Clear all pending tasks."""
        while not self.task_queue.empty():
            try:
                self.task_queue.get_nowait()
                self.task_queue.task_done()
            except Empty:
                break

    def map_ordered(self, task_func: Callable[[T], R], items: Sequence[T]) -> List[R]:
        """
        Apply task_func to every item with at most `parallelism` tasks in flight.

        Returns:
            Results in the order of items, regardless of completion order.
            Items never started because stop_processing was called are left
            out.

        Raises:
            The first (by item order) exception raised by a task, after all
            workers have stopped.
        """
        self._results.clear()
        self._errors.clear()
        self._done = 0
        self._total = len(items)
        self.cancel_processing = False
        for index, item in enumerate(items):
            self.task_queue.put({'index': index, 'func': task_func, 'item': item})

        workers = [
            threading.Thread(target=self._process_tasks, name=f"patient-worker-{n}", daemon=True)
            for n in range(min(self.parallelism, max(1, len(items))))
        ]
        for worker in workers:
            worker.start()
        for worker in workers:
            worker.join()

        if self._errors:
            raise self._errors[min(self._errors)]
        skipped = len(items) - len(self._results)
        if skipped:
            logger.warning(f"Processing stopped, {skipped} of {len(items)} tasks not run")
        return [self._results[index] for index in range(len(items)) if index in self._results]

    def _process_tasks(self) -> None:
        """Process tasks from the queue until it is empty."""
        while not self.cancel_processing:
            try:
                task = self.task_queue.get_nowait()
            except Empty:
                break
            index = task['index']
            try:
                result = task['func'](task['item'])
                with self._lock:
                    self._results[index] = result
                    self._done += 1
                    done = self._done
                if self.progress_callback:
                    self.progress_callback(done, self._total)
            except BaseException as e:
                logger.error(f"Task {index} failed: {e}")
                with self._lock:
                    self._errors[index] = e
                self.stop_processing()
            finally:
                self.task_queue.task_done()
        if self.cancel_processing:
            self.clear_queue()
