"""Desk-scale language-model lab: corpus, tuning curricula, evaluation, reports."""

__version__ = "0.1.0"
