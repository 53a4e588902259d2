from sys import platform
from typing import Any

from psutil import Process, cpu_count, virtual_memory


def get_platform(facts) -> None:
    facts['platform'] = platform


def get_cpu(facts) -> None:
    facts['cpu'] = {
        'cores': cpu_count(logical=False),
        'threads': cpu_count(logical=True),
    }


def get_memory(facts) -> None:
    facts['memory'] = {
        'ram': virtual_memory().total,
    }


def get_rss(facts) -> None:
    facts['rss'] = resident_bytes()


def resident_bytes() -> int:
    return Process().memory_info().rss


def get_host_facts() -> dict[str, Any]:
    """Facts that put wall-time and memory figures into context."""
    facts: dict[str, Any] = {}
    for f in (
        get_platform,
        get_cpu,
        get_memory,
        get_rss,
    ):
        f(facts)
    return facts


__all__ = ('get_host_facts', 'resident_bytes')
