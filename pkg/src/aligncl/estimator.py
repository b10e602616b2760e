"""scikit-learn compatible wrapper around the multi-exit model."""

from __future__ import annotations

import numpy as np
from sklearn.base import BaseEstimator, ClassifierMixin, TransformerMixin
from sklearn.utils.validation import check_is_fitted

from ._validation import check_exit_layer, check_targets, check_texts
from .data import EncodedData, LabeledText, Vocab
from .inference import EVAL_BATCH, ExitPolicy, ExitTrace, _softmax, exit_logits, run_policy
from .model import ModelConfig, MultiExitModel
from .training import RegimeConfig, RunLog, train_model


class MultiExitClassifier(ClassifierMixin, TransformerMixin, BaseEstimator):
    """Multi-exit transformer text classifier.

    ``X`` is a sequence of whitespace-tokenised strings. Class labels may be
    any sortable values. ``exit_layer=None`` means the last exit.
    ``transform`` returns the exit representations.
    """

    def __init__(self, regime="2st", objective="ce", stage1_objective="ce", use_acl_grad=False,
                 lam=0.02, temperature=0.5, gamma_thres=90.0, kd=False, epochs=15, batch_size=32,
                 peak_lr=1e-3, weight_decay=0.01, d_model=64, n_layers=4, n_heads=4, d_ff=256,
                 d_exit=64, exit_heads=2, max_seq_len=32, dropout=0.1, exit_kind="mha",
                 exit_layer=None, random_state=0):
        self.regime = regime
        self.objective = objective
        self.stage1_objective = stage1_objective
        self.use_acl_grad = use_acl_grad
        self.lam = lam
        self.temperature = temperature
        self.gamma_thres = gamma_thres
        self.kd = kd
        self.epochs = epochs
        self.batch_size = batch_size
        self.peak_lr = peak_lr
        self.weight_decay = weight_decay
        self.d_model = d_model
        self.n_layers = n_layers
        self.n_heads = n_heads
        self.d_ff = d_ff
        self.d_exit = d_exit
        self.exit_heads = exit_heads
        self.max_seq_len = max_seq_len
        self.dropout = dropout
        self.exit_kind = exit_kind
        self.exit_layer = exit_layer
        self.random_state = random_state

    def _regime(self) -> RegimeConfig:
        return RegimeConfig(
            regime=self.regime, objective=self.objective, stage1_objective=self.stage1_objective,
            use_acl_grad=self.use_acl_grad, lam=self.lam, temperature=self.temperature,
            gamma_thres=self.gamma_thres, kd=self.kd, epochs=self.epochs,
            batch_size=self.batch_size, peak_lr=self.peak_lr, weight_decay=self.weight_decay,
            seed=int(self.random_state)).validate()

    def fit(self, X, y):
        texts = check_texts(X)
        y = check_targets(y, len(texts))
        self.classes_, codes = np.unique(y, return_inverse=True)
        if self.classes_.size < 2:
            raise ValueError("need at least two classes")
        regime = self._regime()
        records = [LabeledText(t, int(c)) for t, c in zip(texts, codes)]
        self.vocab_ = Vocab.build(records)
        config = ModelConfig(
            vocab_size=len(self.vocab_), n_classes=int(self.classes_.size), d_model=self.d_model,
            n_layers=self.n_layers, n_heads=self.n_heads, d_ff=self.d_ff, d_exit=self.d_exit,
            exit_heads=self.exit_heads, max_seq_len=self.max_seq_len, dropout=self.dropout,
            exit_kind=self.exit_kind).validate()
        self.model_ = MultiExitModel(config, seed=int(self.random_state))
        self.model_.meta = {"vocab": self.vocab_.tokens}
        data = EncodedData.from_records(records, self.vocab_, config.max_seq_len)
        self.log_: RunLog = train_model(self.model_, data, regime)
        self.n_features_in_ = 1
        return self

    def _encode(self, X) -> EncodedData:
        check_is_fitted(self, "model_")
        texts = check_texts(X)
        seqs = [self.vocab_.encode(t, self.model_.config.max_seq_len - 1) for t in texts]
        return EncodedData(seqs, np.zeros(len(seqs), dtype=np.int64))

    def _exit_outputs(self, X, exit_layer):
        data = self._encode(X)
        m = check_exit_layer(self.exit_layer if exit_layer is None else exit_layer,
                             self.model_.n_layers)
        reps, logits = [], []
        for s in range(0, len(data), EVAL_BATCH):
            r, lg = exit_logits(self.model_, data.pad(np.arange(s, min(len(data), s + EVAL_BATCH))), m)
            reps.append(r)
            logits.append(lg)
        return np.concatenate(reps), np.concatenate(logits)

    def decision_function(self, X, exit_layer=None) -> np.ndarray:
        return self._exit_outputs(X, exit_layer)[1]

    def predict_proba(self, X, exit_layer=None) -> np.ndarray:
        return _softmax(self.decision_function(X, exit_layer))

    def predict(self, X, exit_layer=None) -> np.ndarray:
        return self.classes_[self.decision_function(X, exit_layer).argmax(axis=1)]

    def transform(self, X, exit_layer=None) -> np.ndarray:
        return self._exit_outputs(X, exit_layer)[0]

    def early_exit(self, X, policy: str | ExitPolicy) -> tuple[np.ndarray, ExitTrace]:
        """Predict with an early-exit policy; returns (labels, trace)."""
        data = self._encode(X)
        policy = ExitPolicy.parse(policy) if isinstance(policy, str) else policy
        if policy.kind == "fixed_layer":
            check_exit_layer(policy.layer, self.model_.n_layers)
        trace = run_policy(self.model_, data, policy)
        trace.labels = None
        return self.classes_[trace.predicted], trace
