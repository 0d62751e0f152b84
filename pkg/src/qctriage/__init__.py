"""QC triage for large imaging datasets.

Renders pipeline outputs into standardized QC PNGs, runs automated
pre-flight checks, serves a keyboard-driven review loop, and persists
yes/no/maybe verdicts to aggregatable CSV ledgers.
"""

__version__ = "0.1.0"

from . import bids, nifti, pngio, preflight, render, store  # noqa: F401
