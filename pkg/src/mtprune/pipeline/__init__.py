"""Desk-scale experiment pipeline: data, training, evaluation, reporting."""
