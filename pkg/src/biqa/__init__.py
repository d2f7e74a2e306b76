"""Desk-scale blind image quality assessment toolkit.

Trains biased quality scorers on separate synthetic datasets, fuses them
into pairwise sigmoid pseudo-labels over an unlabeled image pool, trains a
final cross-dataset-robust scorer with the fidelity loss in a shared-weight
two-stream setup, and evaluates everything with SRCC / PLCC.
"""

__version__ = "0.1.0"
