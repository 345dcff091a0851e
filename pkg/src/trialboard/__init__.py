"""trialboard: a closed-loop experiment harness.

Role-partitioned proposers iterate on a shared recipe against evaluator-owned
synthetic tasks, coordinating through an append-only trial blackboard; an
audit toolkit reconstructs what happened from the artifacts alone.
"""

__version__ = "0.1.0"
