"""Assembly of backbone, MLSQE, navigator and MPMSCA into one trainable model."""

from collections import OrderedDict
from dataclasses import dataclass, field

import numpy as np

from . import instrument, nn
from . import tensor as T
from .backbone import Backbone
from .errors import NonFiniteError
from .mlsqe import Mlsqe, StageVectors, branch_loss, build_classifiers, ensemble_logits, fuse, stage_logits
from .mpmsca import Mpmsca, part_tokens
from .navigator import PartNavigator, crop_resize, ranking_loss
from .qp import standard_ce


@dataclass
class StepResult:
    loss: T.Tensor
    parts: OrderedDict = field(default_factory=OrderedDict)
    outcomes: dict = field(default_factory=dict)
    logits: T.Tensor = None
    proposals: list = None


def _softmax_np(z):
    z = z - z.max(axis=-1, keepdims=True)
    e = np.exp(z)
    return e / e.sum(axis=-1, keepdims=True)


class CsqaModel(nn.Module):
    """Image branch (backbone + MLSQE or a plain head) and an optional part branch.

    ``config.model`` toggles the navigator, MLSQE and MPMSCA so the same class
    covers every ablation row. Without MLSQE the image branch is the plain
    baseline: global average pooling of the last stage and one linear head.
    """

    def __init__(self, config, num_classes):
        config.validate()
        self.config = config
        self.num_classes = num_classes
        rng = np.random.default_rng(config.train.seed)
        bc = config.backbone
        self.backbone = Backbone(bc, rng)
        self.part_backbone = self.backbone.shared_view()
        flags = config.model
        if flags.mlsqe:
            self.mlsqe = Mlsqe(config.mlsqe, bc.channels, rng)
            self.qps = build_classifiers(config.mlsqe, num_classes, rng, lam=config.qp.lam,
                                         delta=config.qp.delta, seed=config.train.seed)
        else:
            self.head = nn.Linear(rng, bc.channels[-1], num_classes)
        if flags.navigator:
            self.navigator = PartNavigator(config.navigator, bc.channels[-1], bc.resolution, rng)
        if flags.mpmsca:
            self.mpmsca = Mpmsca(config.attention, config.mlsqe.proj_channels,
                                 config.mlsqe.stages_used, config.navigator.parts, rng)
        self.trace = OrderedDict()

    # parameter groups ------------------------------------------------------
    def aux_named_parameters(self):
        if not self.config.model.mlsqe:
            return []
        aux = {id(p) for qp in self.qps for p in qp.aux_parameters()}
        return [(n, p) for n, p in self.named_parameters() if id(p) in aux]

    def navigator_named_parameters(self):
        if not self.config.model.navigator:
            return []
        return list(self.navigator.named_parameters("navigator."))

    def main_named_parameters(self):
        """Everything outside the auxiliary heads and the navigator."""
        skip = {id(p) for _, p in self.aux_named_parameters() + self.navigator_named_parameters()}
        return [(n, p) for n, p in self.named_parameters() if id(p) not in skip]

    # forward passes --------------------------------------------------------
    def _record(self, name, t):
        self.trace[name] = t
        return t

    def image_features(self, x):
        pyramid = self.backbone(x)
        for s, f in enumerate(pyramid, 1):
            self._record(f"image.stage{s}", f)
        if self.config.model.mlsqe:
            sv = self.mlsqe(pyramid)
            for i, v in enumerate(sv.all()):
                self._record(f"image.vector{i}", v)
            return pyramid, sv
        return pyramid, None

    def head_logits(self, pyramid, sv):
        """Main-head logits per head; the inference prediction is their sum."""
        if sv is not None:
            return stage_logits(sv, self.qps)
        return [self.head(T.pool_global(pyramid[-1], "avg"))]

    def predict(self, x):
        """Inference: image branch only, ``(ensemble_logits, per_head_logits)`` as arrays.

        Switches the model to eval mode so batch norm uses its running statistics.
        """
        self.eval()
        with T.no_grad():
            pyramid, sv = self.image_features(T.Tensor(x))
            heads = self.head_logits(pyramid, sv)
            total = ensemble_logits(heads)
        self.trace.clear()
        return total.data, [h.data for h in heads]

    def training_step(self, x, labels, include_aux=True):
        """Forward both branches and return the total loss with its components."""
        self.trace.clear()
        cfg = self.config
        labels = np.asarray(labels, dtype=np.int64)
        x = T.Tensor(x)
        res = StepResult(loss=None)
        pyramid, sv = self.image_features(x)
        if sv is not None:
            l_im, outs = branch_loss(sv, labels, self.qps, include_aux)
            res.outcomes["im"] = outs
            res.logits = ensemble_logits([o.main_logits for o in outs])
        else:
            logits = self.head(T.pool_global(pyramid[-1], "avg"))
            l_im = standard_ce(logits, labels)
            res.logits = logits
        res.parts["im"] = self._record("loss.im", l_im)
        total = l_im
        if cfg.model.navigator:
            l_part, l_rank = self._part_branch(x, pyramid, sv, labels, res, include_aux)
            total = total + l_part
            res.parts["part"] = self._record("loss.part", l_part)
            if l_rank is not None:
                total = total + cfg.navigator.ranking_weight * l_rank
                res.parts["rank"] = self._record("loss.rank", l_rank)
        res.loss = self._record("loss.total", total)
        return res

    def _part_branch(self, x, pyramid, sv, labels, res, include_aux):
        cfg = self.config
        n = cfg.navigator.parts
        b = x.shape[0]
        scores, proposals, idx = self.navigator(pyramid[-1])
        res.proposals = proposals
        self._record("navigator.scores", scores)
        parts = crop_resize(x, self.navigator.boxes(idx))
        part_pyr = self.part_backbone(parts)
        for s, f in enumerate(part_pyr, 1):
            self._record(f"part.stage{s}", f)
        if cfg.model.mlsqe:
            a = cfg.mlsqe.stages_used
            tokens, t_part = part_tokens(part_pyr[len(part_pyr) - a:], self.mlsqe.proj, n)
            if cfg.model.mpmsca:
                psv = self.mpmsca(sv.fusion, tokens, t_part)
            else:
                vecs = [T.mean(t, axis=1) for t in tokens]
                psv = StageVectors(vecs, fuse(vecs, a))
            l_part, outs = branch_loss(psv, labels, self.qps, include_aux)
            res.outcomes["part"] = outs
            per_part = self.qps[a - 1].main(T.stop_gradient(tokens[-1])).data
            conf = _softmax_np(per_part)[np.arange(b)[:, None], np.arange(n)[None], labels[:, None]]
        else:
            # parts are pooled into one vector per image, as the attention path does
            feats = T.reshape(T.pool_global(part_pyr[-1], "avg"), (b, n, -1))
            l_part = standard_ce(self.head(T.mean(feats, axis=1)), labels)
            per_part = self.head(T.stop_gradient(feats)).data
            conf = _softmax_np(per_part)[np.arange(b)[:, None], np.arange(n)[None], labels[:, None]]
        l_rank = None
        if cfg.navigator.ranking_loss:
            picked = scores[np.arange(b)[:, None], idx]
            l_rank = ranking_loss(picked, conf)
        return l_part, l_rank

    def first_non_finite(self):
        for name, t in self.trace.items():
            if not np.all(np.isfinite(t.data)):
                return name
        for name, p in self.named_parameters():
            if not np.all(np.isfinite(p.data)):
                return f"param:{name}"
        return None

    def check_finite(self, loss):
        if not np.isfinite(loss.data).all():
            raise NonFiniteError(f"non-finite loss; first non-finite tensor: {self.first_non_finite()}")


def count_calls(fn, *args, **kwargs):
    """Run ``fn`` and return ``(result, counter delta)``."""
    before = dict(instrument.counters)
    out = fn(*args, **kwargs)
    delta = {k: v - before.get(k, 0) for k, v in instrument.counters.items() if v != before.get(k, 0)}
    return out, delta
