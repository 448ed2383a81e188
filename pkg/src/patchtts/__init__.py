"""Desk-scale hierarchical-codec speech language model.

A compact encoder-decoder transformer over synthetic 3-level codec token
streams, together with the full training and inference stack: repetition
(flux) penalty, preference fine-tuning on cyclic outputs, repetition-aware
sampling with top-p backoff, quality prefixing, and exact objective
metrics (CER/WER, EER, stuck rate) backed by an invertible toy codec.
"""

__version__ = "0.1.0"
