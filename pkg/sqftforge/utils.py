from asyncio import ensure_future, to_thread, wait
from functools import update_wrapper
from sys import stderr
from typing import TYPE_CHECKING, Any, Awaitable, Callable, Iterable, Sequence, TypeVar, cast


class Initializer:
    """Keyword arguments become attributes; class attributes act as defaults."""

    def __init__(self, *args, **kwargs):
        for key, value in kwargs.items():
            setattr(self, key, value)
        super().__init__(*args)

    def replace(self, **kwargs):
        """Shallow copy with some attributes overridden."""
        clone = type(self).__new__(type(self))
        vars(clone).update(vars(self))
        for key, value in kwargs.items():
            setattr(clone, key, value)
        return clone


if TYPE_CHECKING:
    ReturnValue = TypeVar("ReturnValue")

    def initializer(f: Callable[..., ReturnValue]) -> ReturnValue:
        return cast(ReturnValue, None)

else:

    class initializer:
        """Compute an attribute on first access and cache it on the instance.

        Assigning the attribute (or passing it to Initializer) skips the
        computation altogether."""

        def __init__(self, getfunction):
            self.getfunction = getfunction
            self.name = getfunction.__name__
            update_wrapper(self, getfunction)

        def __set_name__(self, objtype, name):
            self.name = name

        def __get__(self, obj, objtype=None):
            try:
                objdict = vars(obj)
            except AttributeError:
                if obj is None:
                    return self
                raise

            value = self.getfunction(obj)
            objdict[self.name] = value
            return value


async def _result_or_exception(awaitable: Awaitable):
    try:
        return await awaitable
    except Exception as e:
        return e


async def parallel(awaitables: Iterable[Awaitable]) -> Sequence:
    """Await everything concurrently; failures are returned, not raised."""
    tasks = tuple(map(ensure_future, awaitables))
    if not tasks:
        return ()
    await wait(tasks)
    return tuple([await _result_or_exception(task) for task in tasks])


async def in_threads(function: Callable, jobs: Iterable[Any]) -> Sequence:
    """Run function(job) for every job in worker threads."""
    return await parallel(to_thread(function, job) for job in jobs)


def warn(*args, **kwargs):
    kwargs.setdefault('file', stderr)
    kwargs.setdefault('flush', True)
    return print(*args, **kwargs)


class subdict(dict):
    """Subclass dict so that we can weakref it"""

    __slots__ = ('__weakref__',)


__all__ = (
    'Initializer',
    'in_threads',
    'initializer',
    'parallel',
    'subdict',
    'warn',
)
