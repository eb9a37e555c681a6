"""Influence-based robust training (ISR / ISP) on a small numpy engine."""
