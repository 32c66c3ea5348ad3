#!/usr/bin/env python3
"""
Gap Flight Performance Monitoring
=================================

Timing, memory and solver accounting for the batch commands: trajectory
matrices count collocation solves and their SQP iterations, closed-loop suites
count runs, aborts by reason and MPC solver failures. Off the numeric path:
nothing here changes a result artifact.
"""

import sys
import threading
import time
from collections import Counter
from contextlib import contextmanager
from dataclasses import asdict, dataclass, field
from pathlib import Path
from typing import Any, Dict, List, Optional

import numpy as np
import psutil

from errors import ValidationError
from utils import safe_file_write, setup_logging

SOLVES = 'trajectory_solves'
RUNS = 'closed_loop_runs'
BATCH_KINDS = (SOLVES, RUNS)


@dataclass
class BatchMetrics:
    """One monitored batch: resources plus per-item solve/run outcomes."""
    operation_name: str
    kind: str
    start_time: float
    planned: int = 0
    end_time: Optional[float] = None
    duration: Optional[float] = None
    memory_start_mb: Optional[float] = None
    memory_end_mb: Optional[float] = None
    memory_peak_mb: Optional[float] = None
    cpu_percent: Optional[float] = None
    succeeded: int = 0
    failed: int = 0
    failure_reasons: Dict[str, int] = field(default_factory=dict)
    solver_iterations: List[int] = field(default_factory=list)
    mpc_solver_failures: int = 0
    success: bool = True
    error_message: Optional[str] = None

    def record_solve(self, entry: Dict[str, Any]) -> None:
        """A trajectory-matrix entry (``status`` ok/failed)."""
        if entry['status'] == 'ok':
            self.succeeded += 1
            self.solver_iterations.append(int(entry['iterations']))
        else:
            self._failure(entry['error']['error'])

    def record_run(self, record: Dict[str, Any]) -> None:
        """A closed-loop metrics record (``status`` completed/aborted)."""
        if record['status'] == 'completed':
            self.succeeded += 1
            self.mpc_solver_failures += int((record.get('metrics') or {}).get('solver_failures') or 0)
        else:
            self._failure(record.get('abort_reason') or 'unknown')

    def _failure(self, reason: str) -> None:
        self.failed += 1
        self.failure_reasons[reason] = self.failure_reasons.get(reason, 0) + 1

    @property
    def finished(self) -> int:
        return self.succeeded + self.failed

    @property
    def seconds_per_item(self) -> Optional[float]:
        return self.duration / self.finished if self.finished and self.duration else None

    @property
    def mean_solver_iterations(self) -> Optional[float]:
        return float(np.mean(self.solver_iterations)) if self.solver_iterations else None

    def to_dict(self) -> Dict[str, Any]:
        return {**asdict(self), 'finished': self.finished, 'seconds_per_item': self.seconds_per_item,
                'mean_solver_iterations': self.mean_solver_iterations}


class PerformanceMonitor:
    """Wall-clock, memory and CPU sampling around batch solves and runs."""

    def __init__(self, sample_interval: float = 1.0):
        self.logger = setup_logging(self.__class__.__name__)
        self.sample_interval = sample_interval
        self.enabled = True
        self.metrics: List[BatchMetrics] = []
        self.monitoring_active = False
        self.monitor_thread: Optional[threading.Thread] = None
        self.system_metrics: List[Dict[str, float]] = []

    @contextmanager
    def monitor_operation(self, operation_name: str, kind: str, planned: int = 0, enabled: bool = True):
        """Monitor one batch; callers feed outcomes to the yielded ``BatchMetrics``.

        When disabled the metrics object is still yielded but not kept.
        """
        if kind not in BATCH_KINDS:
            raise ValidationError('kind', f"unknown batch kind {kind!r}")
        metrics = BatchMetrics(operation_name=operation_name, kind=kind, start_time=time.perf_counter(),
                               planned=planned, memory_start_mb=self._get_memory_usage())
        if not (self.enabled and enabled):
            yield metrics
            return

        self.logger.info(f"🚀 Starting: {operation_name}")
        try:
            self._start_system_monitoring()
            yield metrics
            metrics.success = True
        except Exception as e:
            metrics.success = False
            metrics.error_message = str(e)
            self.logger.error(f"💥 {operation_name} failed: {e}")
            raise
        finally:
            self._stop_system_monitoring()
            metrics.end_time = time.perf_counter()
            metrics.duration = metrics.end_time - metrics.start_time
            metrics.memory_end_mb = self._get_memory_usage()
            if self.system_metrics:
                metrics.memory_peak_mb = max(m['memory_mb'] for m in self.system_metrics)
                metrics.cpu_percent = sum(m['cpu_percent'] for m in self.system_metrics) / len(self.system_metrics)
            self.metrics.append(metrics)
            self._log_operation_summary(metrics)

    def _start_system_monitoring(self) -> None:
        if self.monitoring_active:
            return
        self.monitoring_active = True
        self.system_metrics = []

        def monitor_system():
            while self.monitoring_active:
                try:
                    self.system_metrics.append({'memory_mb': self._get_memory_usage(),
                                                'cpu_percent': psutil.cpu_percent()})
                    time.sleep(self.sample_interval)
                except psutil.Error as e:
                    self.logger.warning(f"System monitoring error: {e}")
                    break

        self.monitor_thread = threading.Thread(target=monitor_system, daemon=True)
        self.monitor_thread.start()

    def _stop_system_monitoring(self) -> None:
        self.monitoring_active = False
        if self.monitor_thread:
            self.monitor_thread.join(timeout=2 * self.sample_interval)

    def _get_memory_usage(self) -> float:
        """Resident set size in MB."""
        try:
            return psutil.Process().memory_info().rss / 1024 / 1024
        except psutil.Error:
            return 0.0

    def _log_operation_summary(self, metrics: BatchMetrics) -> None:
        status = "✅" if metrics.success else "❌"
        noun = "solves" if metrics.kind == SOLVES else "runs"
        self.logger.info(f"{status} {metrics.operation_name}: {metrics.duration:.2f}s")
        if metrics.finished:
            self.logger.info(f"   📊 {metrics.succeeded}/{metrics.finished} {noun} succeeded "
                             f"({metrics.seconds_per_item or 0.0:.2f}s each)")
        if metrics.mean_solver_iterations is not None:
            self.logger.info(f"   🔁 Mean SQP iterations: {metrics.mean_solver_iterations:.1f}")
        if metrics.failure_reasons:
            self.logger.info(f"   ⚠️  Failures: {metrics.failure_reasons}")
        if metrics.memory_start_mb and metrics.memory_end_mb:
            delta = metrics.memory_end_mb - metrics.memory_start_mb
            peak = f", peak: {metrics.memory_peak_mb:.1f}MB" if metrics.memory_peak_mb else ""
            self.logger.info(f"   🧠 Memory: {metrics.memory_start_mb:.1f}MB → "
                             f"{metrics.memory_end_mb:.1f}MB (Δ{delta:+.1f}MB{peak})")

    def _kind_summary(self, kind: str) -> Dict[str, Any]:
        batches = [m for m in self.metrics if m.kind == kind]
        reasons: Counter = Counter()
        for m in batches:
            reasons.update(m.failure_reasons)
        iterations = [i for m in batches for i in m.solver_iterations]
        finished = sum(m.finished for m in batches)
        seconds = sum(m.duration or 0.0 for m in batches)
        return {
            "batches": len(batches),
            "finished": finished,
            "succeeded": sum(m.succeeded for m in batches),
            "failed": sum(m.failed for m in batches),
            "failure_reasons": dict(reasons),
            "mean_solver_iterations": float(np.mean(iterations)) if iterations else None,
            "max_solver_iterations": max(iterations) if iterations else None,
            "mpc_solver_failures": sum(m.mpc_solver_failures for m in batches),
            "seconds_per_item": seconds / finished if finished else None,
        }

    def get_performance_summary(self) -> Dict[str, Any]:
        if not self.metrics:
            return {"message": "No performance data available"}
        total_duration = sum(m.duration for m in self.metrics if m.duration)
        peaks = [m.memory_peak_mb for m in self.metrics if m.memory_peak_mb]
        return {
            "total_operations": len(self.metrics),
            "failed_operations": sum(not m.success for m in self.metrics),
            "total_duration_seconds": total_duration,
            SOLVES: self._kind_summary(SOLVES),
            RUNS: self._kind_summary(RUNS),
            "peak_memory_mb": max(peaks) if peaks else None,
            "operations": [m.to_dict() for m in self.metrics],
        }

    def save_performance_report(self, output_path: Path) -> Path:
        """Write the summary plus host info as JSON."""
        report = {
            "kind": "performance",
            "system_info": {
                "cpu_count": psutil.cpu_count(),
                "memory_total_gb": psutil.virtual_memory().total / 1024 ** 3,
                "python_version": f"{sys.version_info.major}.{sys.version_info.minor}.{sys.version_info.micro}",
            },
            "performance_summary": self.get_performance_summary(),
        }
        path = safe_file_write(report, output_path, format='json')
        self.logger.info(f"📊 Performance report saved to: {path}")
        return path

    def print_performance_summary(self) -> None:
        summary = self.get_performance_summary()
        if "message" in summary:
            self.logger.info(summary["message"])
            return
        self.logger.info("=" * 60)
        self.logger.info("📊 PERFORMANCE SUMMARY")
        self.logger.info("=" * 60)
        self.logger.info(f"🔧 Batches: {summary['total_operations']} ({summary['failed_operations']} raised)")
        self.logger.info(f"⏱️  Total time: {summary['total_duration_seconds']:.2f}s")
        solves, runs = summary[SOLVES], summary[RUNS]
        if solves['batches']:
            iterations = solves['mean_solver_iterations']
            self.logger.info(f"🛫 Trajectory solves: {solves['succeeded']}/{solves['finished']} converged, "
                             f"mean SQP iterations {iterations if iterations is None else round(iterations, 1)}")
        if runs['batches']:
            self.logger.info(f"🎯 Closed-loop runs: {runs['succeeded']}/{runs['finished']} completed, "
                             f"{runs['mpc_solver_failures']} MPC solver failures")
        for kind in BATCH_KINDS:
            for reason, count in summary[kind]['failure_reasons'].items():
                self.logger.info(f"  • {kind} {reason}: {count}")


# Global performance monitor instance
performance_monitor = PerformanceMonitor()
