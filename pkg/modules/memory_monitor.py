# =============================================================================
# MEMORY AND TIMING MONITOR FOR TRAINING, MD AND BENCHMARK PHASES
# =============================================================================

import gc
import logging
import threading
import time
from contextlib import contextmanager
from datetime import datetime, timezone
from functools import wraps
from typing import Any, Dict, List, Optional

import psutil

LOG = logging.getLogger(__name__)

HIGH_MEMORY_MB = 4000


class MemoryMonitor:
    """
    Resident-memory sampler for one process.

    Every snapshot updates `peak_mb`, so epoch loops can call `take_snapshot`
    once per epoch and report the peak of that window via `window_peak_mb`.
    """

    def __init__(self):
        self.process = psutil.Process()
        self.start_memory: Optional[Dict[str, Any]] = None
        self.snapshots: List[Dict[str, Any]] = []
        self.peak_mb = 0.0
        self._window_peak_mb = 0.0
        self._lock = threading.Lock()

    def start_monitoring(self) -> None:
        self.start_memory = self.get_memory_info()
        self.reset_window()
        LOG.info(f"MEMORY MONITOR: Started - Initial memory: {self.start_memory['memory_mb']:.1f}MB")

    def rss_mb(self) -> float:
        return self.process.memory_info().rss / 1024 / 1024

    def get_memory_info(self) -> Dict[str, Any]:
        try:
            memory_info = self.process.memory_info()
            system_memory = psutil.virtual_memory()
            return {
                "timestamp": datetime.now(timezone.utc).isoformat(),
                "memory_mb": memory_info.rss / 1024 / 1024,
                "memory_percent": self.process.memory_percent(),
                "threads": self.process.num_threads(),
                "system_available_mb": system_memory.available / 1024 / 1024,
            }
        except psutil.Error as e:
            LOG.error(f"Error getting memory info: {e}")
            return {"error": str(e), "memory_mb": 0.0}

    def sample(self) -> float:
        """Current RSS in MB, folded into the running peaks."""
        current = self.rss_mb()
        with self._lock:
            self.peak_mb = max(self.peak_mb, current)
            self._window_peak_mb = max(self._window_peak_mb, current)
        return current

    def reset_window(self) -> None:
        with self._lock:
            self._window_peak_mb = 0.0

    def window_peak_mb(self) -> float:
        """Peak RSS since the last `reset_window` (sampled now as well)."""
        self.sample()
        with self._lock:
            return self._window_peak_mb

    def take_snapshot(self, label: str) -> Dict[str, Any]:
        info = self.get_memory_info()
        info["label"] = label
        self.sample()
        self.snapshots.append(info)

        if self.start_memory:
            memory_change = info["memory_mb"] - self.start_memory["memory_mb"]
            LOG.debug(f"MEMORY SNAPSHOT [{label}]: {info['memory_mb']:.1f}MB ({memory_change:+.1f}MB since start)")
        if info["memory_mb"] > HIGH_MEMORY_MB:
            LOG.warning(f"⚠️ HIGH MEMORY USAGE [{label}]: {info['memory_mb']:.1f}MB")
        return info

    def force_garbage_collection(self) -> Dict[str, int]:
        before_objects = len(gc.get_objects())
        collected = gc.collect()
        after_objects = len(gc.get_objects())
        stats = {
            "objects_before": before_objects,
            "objects_after": after_objects,
            "objects_freed": before_objects - after_objects,
            "collected": collected,
        }
        LOG.debug(f"GARBAGE COLLECTION: Freed {stats['objects_freed']} objects")
        return stats

    def stop_monitoring(self) -> Optional[Dict[str, Any]]:
        if not self.start_memory:
            return None
        final_memory = self.rss_mb()
        LOG.info(f"MEMORY MONITOR: Stopped - Final memory: {final_memory:.1f}MB, peak {self.peak_mb:.1f}MB")
        return {
            "start_memory_mb": self.start_memory["memory_mb"],
            "final_memory_mb": final_memory,
            "peak_memory_mb": self.peak_mb,
            "snapshots": self.snapshots,
        }


# Global monitor instance
memory_monitor = MemoryMonitor()


# =============================================================================
# PHASE MONITORING
# =============================================================================

@contextmanager
def phase(name: str, monitor: Optional[MemoryMonitor] = None):
    """Snapshot memory around a block and log its wall time."""
    monitor = monitor or memory_monitor
    monitor.take_snapshot(f"{name}_START")
    started = time.perf_counter()
    try:
        yield monitor
    except Exception as e:
        monitor.take_snapshot(f"{name}_ERROR")
        LOG.error(f"Phase {name} failed: {e}")
        raise
    elapsed = time.perf_counter() - started
    monitor.take_snapshot(f"{name}_SUCCESS")
    LOG.info(f"PHASE [{name}]: {elapsed:.2f}s, peak {monitor.peak_mb:.1f}MB")


def monitor_phase(phase_name: str):
    """Decorator form of `phase` for whole commands."""
    def decorator(func):
        @wraps(func)
        def wrapper(*args, **kwargs):
            with phase(phase_name):
                result = func(*args, **kwargs)
            memory_monitor.force_garbage_collection()
            return result
        return wrapper
    return decorator
