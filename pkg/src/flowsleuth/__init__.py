"""flowsleuth: evidence-grounded network-traffic forensics.

Connection logs are normalized into structured records, rendered into
deterministic one-sentence summaries, embedded and indexed across three
isolated vector collections, and queried through a filtered / MMR /
reranked retrieval pipeline with an abstention gate. Answers are
citation-verified verdicts, and a labeling + evaluation harness scores
the whole thing against ground truth.
"""

__version__ = "0.1.0"
