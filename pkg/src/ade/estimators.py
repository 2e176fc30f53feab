"""Scikit-learn style estimators wrapping the full pipeline.

`AnchorDistiller` is a transformer: fit on an embedding matrix, get
non-negative anchor codes back. `AdeClassifier` is a text classifier:
fit on documents and labels, predict labels. Both follow the estimator
contract (get_params/set_params, fitted attributes with trailing
underscores), so they compose with pipelines, grid search, and clone().
"""

from __future__ import annotations

import numpy as np
from sklearn.base import BaseEstimator, ClassifierMixin, TransformerMixin
from sklearn.exceptions import NotFittedError

from . import data as data_mod
from . import distill as distill_mod
from . import pipeline as pipe
from .codebook import AnchorMatrix, build_vp
from .validation import check_documents, check_labels, check_matrix


class AnchorDistiller(TransformerMixin, BaseEstimator):
    """Learn a shared anchor matrix and non-negative codes for rows of an
    embedding matrix by cosine reconstruction with an L1 penalty."""

    def __init__(self, n_anchors=16, tau=0.1, steps=1500, lr=1e-3, l1=1e-3,
                 batch_size=None, seed=0):
        self.n_anchors = n_anchors
        self.tau = tau
        self.steps = steps
        self.lr = lr
        self.l1 = l1
        self.batch_size = batch_size
        self.seed = seed

    def _config(self):
        return distill_mod.DistillConfig(
            anchor_count=self.n_anchors, steps=self.steps, lr=self.lr,
            l1=self.l1, batch_size=self.batch_size, seed=self.seed)

    def fit(self, X, y=None):
        X = check_matrix(X)
        teacher = distill_mod.TeacherEmbedding(X)
        anchors, transform, history = distill_mod.learn_anchors(
            teacher, self._config())
        self.anchors_ = anchors.values
        self.codes_ = transform
        self.loss_history_ = history
        self.codebook_ = build_vp(transform, self.tau)
        self.mean_cosine_ = distill_mod.mean_cosine(anchors, transform, teacher)
        self.n_features_in_ = X.shape[1]
        return self

    def transform(self, X):
        self._check_fitted()
        X = check_matrix(X)
        if X.shape[1] != self.n_features_in_:
            raise ValueError(f"expected {self.n_features_in_} features, got {X.shape[1]}")
        return distill_mod.solve_codes(X, AnchorMatrix(self.anchors_),
                                       self._config())

    def inverse_transform(self, codes):
        self._check_fitted()
        codes = check_matrix(codes, name="codes")
        return codes @ self.anchors_

    def _check_fitted(self):
        if not hasattr(self, "anchors_"):
            raise NotFittedError("AnchorDistiller is not fitted yet")


class AdeClassifier(ClassifierMixin, BaseEstimator):
    """Text classifier over sparse multi-anchor embeddings.

    fit() builds a vocabulary, distils anchors against a (synthetic or
    supplied) teacher matrix, thresholds the codes into a codebook, and
    trains the attention/pooler/classifier stack end to end.
    """

    def __init__(self, n_anchors=16, tau=0.1, d=32, heads=4, l_max=64,
                 vocab_size=4096, distill_steps=800, distill_lr=3e-3, l1=1e-3,
                 steps=1000, lr=3e-3, batch_size=32, warmup_steps=100,
                 dropout=0.1, use_sat=True, trainable_embeddings=True,
                 teacher=None, seed=0):
        self.n_anchors = n_anchors
        self.tau = tau
        self.d = d
        self.heads = heads
        self.l_max = l_max
        self.vocab_size = vocab_size
        self.distill_steps = distill_steps
        self.distill_lr = distill_lr
        self.l1 = l1
        self.steps = steps
        self.lr = lr
        self.batch_size = batch_size
        self.warmup_steps = warmup_steps
        self.dropout = dropout
        self.use_sat = use_sat
        self.trainable_embeddings = trainable_embeddings
        self.teacher = teacher
        self.seed = seed

    def fit(self, X, y):
        docs = check_documents(X)
        self.classes_, labels = check_labels(y, len(docs))

        corpus = data_mod.Corpus(texts=docs, labels=labels,
                                 n_classes=self.classes_.size)
        self.vocab_ = data_mod.build_vocab(corpus, self.vocab_size)
        ids, mask, labels = data_mod.encode_corpus(corpus, self.vocab_, self.l_max)

        if self.teacher is not None:
            teacher = distill_mod.TeacherEmbedding(check_matrix(self.teacher,
                                                                name="teacher"))
            if teacher.n_vocab != self.vocab_.size or teacher.width != self.d:
                raise ValueError("teacher must be (vocab size, d) aligned to "
                                 "the built vocabulary")
        else:
            teacher = distill_mod.synthetic_teacher(
                self.vocab_.size, self.d,
                n_latent=min(self.n_anchors, self.vocab_.size), seed=self.seed)

        anchors, transform, self.distill_history_ = distill_mod.learn_anchors(
            teacher, distill_mod.DistillConfig(
                anchor_count=self.n_anchors, steps=self.distill_steps,
                lr=self.distill_lr, l1=self.l1, seed=self.seed))
        cb = build_vp(transform, self.tau)

        model = pipe.build_model(cb, anchors, pipe.AdeConfig(
            d=self.d, heads=self.heads, n_classes=self.classes_.size,
            l_max=self.l_max, tau=self.tau, dropout=self.dropout,
            use_sat=self.use_sat,
            trainable_embeddings=self.trainable_embeddings, seed=self.seed))
        self.model_, self.history_ = pipe.train_classifier(
            model, ids, mask, labels, pipe.TrainConfig(
                lr=self.lr, batch_size=min(self.batch_size, len(docs)),
                warmup_steps=min(self.warmup_steps, self.steps),
                total_steps=self.steps, seed=self.seed, use_sat=self.use_sat,
                trainable_embeddings=self.trainable_embeddings))
        return self

    def _encode(self, X):
        docs = check_documents(X)
        ids = np.zeros((len(docs), self.l_max), dtype=np.int64)
        mask = np.zeros((len(docs), self.l_max), dtype=bool)
        for i, doc in enumerate(docs):
            ids[i], mask[i] = data_mod.encode(doc, self.vocab_, self.l_max)
            if not mask[i].any():
                raise ValueError(f"document {i} encodes to an empty sequence")
        return ids, mask

    def decision_function(self, X):
        self._check_fitted()
        ids, mask = self._encode(X)
        return pipe.predict_logits(self.model_, ids, mask)

    def predict_proba(self, X):
        logits = self.decision_function(X)
        e = np.exp(logits - logits.max(axis=1, keepdims=True))
        return e / e.sum(axis=1, keepdims=True)

    def predict(self, X):
        return self.classes_[self.decision_function(X).argmax(axis=1)]

    def _check_fitted(self):
        if not hasattr(self, "model_"):
            raise NotFittedError("AdeClassifier is not fitted yet")
