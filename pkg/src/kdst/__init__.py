"""Toy-scale speech translation with knowledge distillation from a text-translation teacher, in numpy."""

__version__ = "0.1.0"
