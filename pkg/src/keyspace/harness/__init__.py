"""Simulator, invariant checkers, lease explorer, liveness math and benchmarks."""
