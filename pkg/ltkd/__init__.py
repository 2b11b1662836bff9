"""Relational-subset weighted knowledge distillation for long-tailed multi-label data."""
