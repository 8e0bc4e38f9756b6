"""Math word problem solving with explicit knowledge-graph learning.

The package trains a problem-to-expression solver whose latent state is an
explicit graph of word-word and word-operator relations.  The graph is
learned jointly with the solver (variational objective with a Bernoulli
prior over edges) and can be extracted, ranked, and scored against a
planted ground truth on synthetic corpora.
"""

__version__ = "0.1.0"
