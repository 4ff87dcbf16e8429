"""Two-stage recommender bandit toolkit: environments, agents, composition,
regret decomposition, analytic counterexample harnesses, and mixture-of-experts
pool-allocation learning.
"""

__version__ = "0.1.0"
