"""Quality-probing classifier.

A main head trained on label-smoothed targets and an auxiliary head that sees
a stop-gradient copy of the feature. The confidence gap between the two heads
gives a per-sample factor that re-weights the main loss.
"""

from dataclasses import dataclass

import numpy as np

from . import instrument, nn
from . import tensor as T
from .errors import ConfigurationError, DimensionError


def _labels(labels, batch):
    labels = np.atleast_1d(np.asarray(labels, dtype=np.int64))
    if labels.shape != (batch,):
        raise DimensionError(f"expected {batch} labels, got shape {labels.shape}")
    return labels


def smoothed_targets(labels, num_classes, alpha):
    """Rows with ``alpha`` at the label and ``(1 - alpha) / C`` elsewhere."""
    if not 0.0 < alpha <= 1.0:
        raise ConfigurationError(f"smoothing factor must lie in (0, 1], got {alpha}")
    labels = np.atleast_1d(np.asarray(labels, dtype=np.int64))
    if labels.min() < 0 or labels.max() >= num_classes:
        raise ConfigurationError(f"label out of range [0, {num_classes})")
    y = np.full((labels.size, num_classes), (1.0 - alpha) / num_classes)
    y[np.arange(labels.size), labels] = alpha
    return y


def _as_batch(logits):
    logits = T.as_tensor(logits)
    if logits.ndim == 1:
        return T.reshape(logits, (1, -1)), True
    if logits.ndim != 2:
        raise DimensionError(f"logits must be [C] or [B, C], got {logits.shape}")
    return logits, False


def smoothed_ce(logits, label, alpha, reduce=True):
    """Label-smoothing cross entropy ``-sum_i y_alpha[i] log softmax(logits)[i]``.

    Accepts ``[C]`` or ``[B, C]`` logits. With ``reduce`` the batch mean is
    returned, otherwise the per-sample vector.
    """
    z, single = _as_batch(logits)
    target = smoothed_targets(_labels(label, z.shape[0]), z.shape[1], alpha)
    per = -T.tsum(T.log_softmax(z, axis=1) * target, axis=1)
    if reduce or single:
        return T.mean(per) if not single else T.reshape(per, ())
    return per


def standard_ce(logits, label, reduce=True):
    """``-log softmax(logits)[label]``; batch-mean with ``reduce``."""
    z, single = _as_batch(logits)
    labels = _labels(label, z.shape[0])
    if labels.min() < 0 or labels.max() >= z.shape[1]:
        raise ConfigurationError(f"label out of range [0, {z.shape[1]})")
    per = -T.log_softmax(z, axis=1)[np.arange(z.shape[0]), labels]
    if reduce or single:
        return T.mean(per) if not single else T.reshape(per, ())
    return per


def regions(p, q, eps):
    """Region index per sample: 1 both confident, 2 main only, 4 aux only, 3 neither."""
    hp = np.asarray(p) >= eps
    hq = np.asarray(q) >= eps
    return np.where(hp & hq, 1, np.where(hp, 2, np.where(hq, 4, 3)))


def raw_factor(p, q):
    p, q = np.asarray(p, dtype=np.float64), np.asarray(q, dtype=np.float64)
    s = p + q
    assert not np.any(s <= 0), "p + q must be positive"
    return np.abs(p - q) / s


def quality_factor(p, q, eps, lam):
    """Region-adjusted quality factor; returns ``(adjusted, raw, region)``.

    Region 1 gets ``phi ** lam``, regions 2 and 4 get ``phi * lam / 2`` and
    region 3 gets ``phi * lam``. Scalars in, scalars out.
    """
    phi = raw_factor(p, q)
    reg = regions(p, q, eps)
    adj = np.where(reg == 1, phi ** lam, np.where(reg == 3, phi * lam, phi * lam / 2.0))
    if adj.ndim == 0:
        return float(adj), float(phi), int(reg)
    return adj, phi, reg


def max_prob(logits):
    z = np.asarray(logits, dtype=np.float64)
    z = z - z.max(axis=-1, keepdims=True)
    e = np.exp(z)
    return (e / e.sum(axis=-1, keepdims=True)).max(axis=-1)


@dataclass
class QpOutcome:
    main_logits: T.Tensor
    aux_logits: T.Tensor
    p: np.ndarray
    q: np.ndarray
    phi: np.ndarray
    phi_raw: np.ndarray
    region: np.ndarray


class QpClassifier(nn.Module):
    """Main + auxiliary linear heads for one stage index.

    ``eps`` defaults to ``alpha / 2``. The auxiliary head is re-initialised
    every ``delta`` epochs from a stream seeded by ``(seed, epoch)``.
    """

    def __init__(self, rng, in_dim, num_classes, alpha, lam=2.0, delta=2, eps=None, seed=0):
        if not 0.0 < alpha <= 1.0:
            raise ConfigurationError(f"smoothing factor must lie in (0, 1], got {alpha}")
        eps = alpha / 2.0 if eps is None else eps
        if not 0.0 < eps < alpha:
            raise ConfigurationError(f"region threshold {eps} must lie in (0, alpha={alpha})")
        if delta < 1:
            raise ConfigurationError(f"re-init period must be >= 1, got {delta}")
        self.in_dim, self.num_classes = in_dim, num_classes
        self.alpha, self.eps, self.lam, self.delta = alpha, eps, lam, delta
        self.seed = seed
        self.main = nn.Linear(rng, in_dim, num_classes)
        self.aux = nn.Linear(rng, in_dim, num_classes)

    def main_parameters(self):
        return self.main.parameters()

    def aux_parameters(self):
        return self.aux.parameters()

    def forward(self, feature, labels):
        """Return ``(outcome, terms)``; ``terms`` holds batch-mean ``sce``, ``ce`` and ``reg``."""
        feature = T.as_tensor(feature)
        if feature.shape[-1] != self.in_dim:
            raise DimensionError(
                f"QP feature axis has {feature.shape[-1]} entries, classifier expects {self.in_dim}")
        instrument.hit("qp")
        x = T.reshape(feature, (1, -1)) if feature.ndim == 1 else feature
        y1 = self.main(x)
        y2 = self.aux(T.stop_gradient(x))
        p, q = max_prob(y1.data), max_prob(y2.data)
        phi, phi_raw, region = quality_factor(p, q, self.eps, self.lam)
        phi, phi_raw, region = np.atleast_1d(phi), np.atleast_1d(phi_raw), np.atleast_1d(region)
        sce = smoothed_ce(y1, labels, self.alpha, reduce=False)
        reg = T.mean(sce * T.stop_gradient(phi))
        terms = {"sce": T.mean(sce), "ce": standard_ce(y2, labels), "reg": reg}
        return QpOutcome(y1, y2, p, q, phi, phi_raw, region), terms

    def loss(self, feature, labels, include_aux=True):
        outcome, terms = self(feature, labels)
        total = terms["sce"] + terms["reg"]
        if include_aux:
            total = total + terms["ce"]
        return total, outcome

    def maybe_reinit(self, epoch, optimizer=None):
        """Re-draw the auxiliary head when ``epoch > 0`` and ``epoch % delta == 0``."""
        if epoch <= 0 or epoch % self.delta:
            return False
        self.aux.reset(np.random.default_rng([self.seed, epoch]))
        if optimizer is not None:
            optimizer.clear_state(self.aux_parameters())
        return True
