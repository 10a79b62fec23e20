"""Reasoning-trace integrity toolkit.

Parses step-structured model output, scores process quality with a judge
panel, reproduces the statistical battery over the scored corpus, and
distills the judges into a small feed-forward verifier served over HTTP.
"""

from . import (  # noqa: F401
    cli,
    errors,
    features,
    judging,
    reporting,
    service,
    stats,
    traces,
    verifier,
)

__version__ = "0.1.0"
