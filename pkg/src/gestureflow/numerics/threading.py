"""BLAS thread pinning for the small-matrix training regime."""

from __future__ import annotations

from contextlib import contextmanager

try:
    from threadpoolctl import threadpool_limits
except ImportError:  # pragma: no cover
    threadpool_limits = None

__all__ = ["single_thread_blas"]


@contextmanager
def single_thread_blas():
    """Limit BLAS pools to one thread: the workload is many small GEMMs where
    thread handoff costs more than it saves, and fixed threading keeps runs
    reproducible across machines with different core counts."""
    if threadpool_limits is None:
        yield
        return
    with threadpool_limits(limits=1, user_api="blas"):
        yield
