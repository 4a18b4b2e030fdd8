"""Safe reinforcement-learning eco-driving in mixed traffic with a tube-MPC safety filter."""

__version__ = "0.1.0"
