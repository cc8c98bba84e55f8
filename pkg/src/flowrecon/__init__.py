"""Posterior sampling for imaging inverse problems with robust normalizing flows.

Submodules are imported explicitly (``from flowrecon import flows``); the
package root stays light so the CLI can configure threading before JAX loads.
"""

__version__ = "0.1.0"

__all__ = [
    "boosting",
    "cli",
    "diffcore",
    "flows",
    "forward_ops",
    "io",
    "metrics",
    "sampling",
    "variational",
]
