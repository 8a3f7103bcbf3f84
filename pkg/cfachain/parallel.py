"""
Thread Fan-out
Runs independent numpy work items concurrently while keeping input order
"""
import asyncio
import os
from typing import Awaitable, Callable, Iterable, List, TypeVar

from loguru import logger

T = TypeVar("T")
R = TypeVar("R")


def resolve_workers(workers: int) -> int:
    """0 means one worker per CPU"""
    if workers < 0:
        raise ValueError(f"workers must be >= 0, got {workers}")
    return workers or (os.cpu_count() or 1)


async def gather_threads(fn: Callable[[T], R], items: Iterable[T], workers: int = 0) -> List[R]:
    """
    Apply fn to every item in worker threads

    Args:
        fn: blocking function (numpy releases the GIL in the heavy parts)
        items: work items
        workers: concurrency limit, 0 = autodetect

    Returns:
        Results in input order
    """
    items = list(items)
    limit = asyncio.Semaphore(resolve_workers(workers))

    async def run_one(item: T) -> R:
        async with limit:
            return await asyncio.to_thread(fn, item)

    logger.debug(f"Dispatching {len(items)} items on {resolve_workers(workers)} workers")
    return list(await asyncio.gather(*(run_one(item) for item in items)))


def run_sync(coro: Awaitable[R]) -> R:
    """Run a stage coroutine from synchronous code"""
    return asyncio.run(coro)
