#!/usr/bin/env python3
"""
Surrogate Control-Variates Estimator

Estimates the mean of an expensive target metric from a small set of paired
measurements and a large pool of cheap surrogate measurements.
See `python3 cv_estimator.py --help` for the subcommands.
"""

import sys

from surrogate_cv.cli import main

if __name__ == "__main__":
    sys.exit(main())
