"""Multi-source domain adaptation with pseudo target domains, matching normalization and a metric constraint."""

__version__ = "0.1.0"
