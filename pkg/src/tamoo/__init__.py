"""Task-oriented multi-objective optimization for multi-task adversarial attacks."""

__version__ = "0.1.0"
