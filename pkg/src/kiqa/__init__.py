"""Knowledge-infused multiple-choice question answering.

The pipeline: prepare a knowledge corpus, index it for ranked retrieval,
generate a query per (question, option) pair, re-rank retrieved sentences
for marginal information gain, attach them to the dataset, and score
options with one of several knowledge-fusion heads over a small trainable
text encoder.  A synthetic family-relations dataset generator is included
for controlled experiments.
"""

__version__ = "0.1.0"
