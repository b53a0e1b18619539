"""End-to-end estimator: fit a controllable summarizer on article
records, then predict summaries under user control requests.

This is the convenience face over the pipeline (vocabulary, length bins,
model, trainer, beam search) with the usual estimator conventions:
constructor stores hyperparameters verbatim, ``fit`` learns state into
trailing-underscore attributes and returns ``self``.
"""

from __future__ import annotations

import numpy as np
from sklearn.base import BaseEstimator
from sklearn.exceptions import NotFittedError

from .corpus import ControlSpec, LengthBinner
from .datasets import build_task_vocab, training_examples
from .decoding import DecodeConstraints, decode_record
from .model import ConvSeq2Seq, ModelConfig
from .training import Trainer


class ControllableSummarizer(BaseEstimator):
    """Train-and-decode facade for token-level article records.

    Control markers are opt-in per dimension: length bins (on by
    default), entity markers per training policy, and style markers from
    each record's source id.
    """

    def __init__(self, n_bins: int = 10, length_control: bool = True,
                 entity_policy: str | None = None, style_control: bool = False,
                 encoder_layers: int = 4, decoder_layers: int = 4,
                 kernel_width: int = 3, hidden_size: int = 64,
                 embed_size: int = 48, dropout_rate: float = 0.1,
                 max_positions: int = 256, lr: float = 0.05,
                 momentum: float = 0.99, clip_norm: float = 0.1,
                 max_tokens_per_batch: int = 2000, max_epochs: int = 20,
                 dev_fraction: float = 0.1, beam_size: int = 5,
                 min_len: int = 1, max_len: int = 60,
                 block_trigrams: bool = True, seed: int = 0):
        self.n_bins = n_bins
        self.length_control = length_control
        self.entity_policy = entity_policy
        self.style_control = style_control
        self.encoder_layers = encoder_layers
        self.decoder_layers = decoder_layers
        self.kernel_width = kernel_width
        self.hidden_size = hidden_size
        self.embed_size = embed_size
        self.dropout_rate = dropout_rate
        self.max_positions = max_positions
        self.lr = lr
        self.momentum = momentum
        self.clip_norm = clip_norm
        self.max_tokens_per_batch = max_tokens_per_batch
        self.max_epochs = max_epochs
        self.dev_fraction = dev_fraction
        self.beam_size = beam_size
        self.min_len = min_len
        self.max_len = max_len
        self.block_trigrams = block_trigrams
        self.seed = seed

    def fit(self, records, y=None):
        records = list(records)
        if not records:
            raise ValueError("cannot fit on an empty record list")
        self.vocab_ = build_task_vocab(records)
        self.binner_ = None
        if self.length_control:
            self.binner_ = LengthBinner(n_bins=self.n_bins).fit(
                [len(r.summary_tokens()) for r in records])
        examples = training_examples(
            records, self.vocab_, binner=self.binner_,
            entity_policy=self.entity_policy,
            use_style=self.style_control, seed=self.seed)
        rng = np.random.default_rng(self.seed)
        n_dev = max(1, int(len(examples) * self.dev_fraction)) \
            if len(examples) > 1 else 0
        order = rng.permutation(len(examples))
        dev = [examples[i] for i in order[:n_dev]]
        train = [examples[i] for i in order[n_dev:]] or examples
        config = ModelConfig(
            vocab_size=len(self.vocab_),
            encoder_layers=self.encoder_layers,
            decoder_layers=self.decoder_layers,
            kernel_width=self.kernel_width,
            hidden_size=self.hidden_size, embed_size=self.embed_size,
            dropout_rate=self.dropout_rate,
            max_positions=self.max_positions,
            bos_id=self.vocab_.bos_id)
        self.model_ = ConvSeq2Seq(config, seed=self.seed)
        trainer = Trainer(self.model_, train, dev, lr=self.lr,
                          momentum=self.momentum, clip_norm=self.clip_norm,
                          max_tokens_per_batch=self.max_tokens_per_batch,
                          max_epochs=self.max_epochs, seed=self.seed)
        self.history_ = trainer.train()
        return self

    def predict(self, records, control: ControlSpec | None = None):
        """Decode one summary text per record under ``control`` (an empty
        request when omitted)."""
        self._check_fitted()
        spec = control if control is not None else ControlSpec()
        constraints = DecodeConstraints(
            beam_size=self.beam_size, min_len=self.min_len,
            max_len=self.max_len, block_trigrams=self.block_trigrams)
        return [decode_record(self.model_, rec, self.vocab_, spec,
                              constraints).text
                for rec in records]

    def _check_fitted(self):
        if not hasattr(self, "model_"):
            raise NotFittedError(
                "this ControllableSummarizer is not fitted yet; call fit first")
