"""codeask: question-title generation and similar-question retrieval for
code snippets.

Subsystems: ``corpus`` (dump mining and vocabularies), ``numerics``
(differentiable primitives), ``model`` (attention/copy/coverage seq2seq),
``training``, ``inference`` (beam search), ``retrieval`` (embedding index
with LSH), ``service`` (HTTP API), and ``cli``.
"""

__version__ = "0.1.0"
