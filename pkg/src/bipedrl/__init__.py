"""Planar-biped multi-behavior control pipeline.

Stages: behavior-specialist RL with style rewards -> mixture-of-experts
distillation -> multi-task fine-tuning with gradient surgery over a terrain
curriculum, plus the evaluation protocols and CLI front door.
"""

__version__ = "0.1.0"
