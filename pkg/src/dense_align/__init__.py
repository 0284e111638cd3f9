"""Discounted dense-reward preference alignment.

``mdp``, ``preference`` and ``loss`` form the exact tabular tier; ``nn``,
``diffusion`` and ``trainer`` the toy 2-D diffusion model and its aligner.
"""

__version__ = "0.1.0"
