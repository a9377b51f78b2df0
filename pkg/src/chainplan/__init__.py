"""chainplan: goal-conditioned procedure planning on a synthetic corpus.

Predicts an action sequence from start and goal observations using a bank
of independent sub-chain decoders plus an accumulator, trained with focal
loss, and ships the corpus generator, metrics, and experiment harness
needed to study the approach end to end on a desk-scale machine.
"""

__version__ = "0.1.0"
