"""Test and benchmark harness: fixtures, local clusters, workloads, faults."""
