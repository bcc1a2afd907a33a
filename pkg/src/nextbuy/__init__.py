"""Next-purchase prediction from card transaction sequences.

Transactions are compressed into 32-d codes by a stacked autoencoder, a
stacked GRU predicts the next code from the last L codes, and the decoded
prediction is matched to industry codes by cosine similarity.
"""

__version__ = "0.1.0"
