"""VM resource manager that provisions IaaS virtual machines for queued batch jobs."""

__version__ = "0.1.0"
