"""Training loop, evaluation, checkpoint I/O and heatmap dumps."""

import logging
import math
import os
import time
from collections import OrderedDict
from dataclasses import dataclass, field

import numpy as np

from . import checkpoint as ckpt_io
from . import config as config_mod
from . import data as data_mod
from . import tensor as T
from .errors import UsageError
from .model import CsqaModel
from .navigator import write_proposals

log = logging.getLogger(__name__)


class SGD:
    """SGD with momentum and L2 weight decay over named parameters.

    ``clip_norm > 0`` rescales the raw gradients so their global L2 norm is
    at most ``clip_norm`` before decay and momentum are applied.
    """

    def __init__(self, named_params, lr, momentum=0.9, weight_decay=0.0, clip_norm=0.0):
        self.named = list(named_params)
        self.lr, self.momentum, self.weight_decay = lr, momentum, weight_decay
        self.clip_norm = clip_norm
        self.state = {}

    def grad_norm(self):
        return math.sqrt(sum(float(np.sum(p.grad * p.grad)) for _, p in self.named if p.grad is not None))

    def step(self):
        scale = 1.0
        if self.clip_norm > 0:
            norm = self.grad_norm()
            if norm > self.clip_norm:
                scale = self.clip_norm / norm
        for _, p in self.named:
            if p.grad is None:
                continue
            g = p.grad * scale if scale != 1.0 else p.grad
            if self.weight_decay:
                g = g + self.weight_decay * p.data
            if self.momentum:
                buf = self.state.get(id(p))
                buf = g.copy() if buf is None else self.momentum * buf + g
                self.state[id(p)] = buf
                g = buf
            p.data -= self.lr * g

    def zero_grad(self):
        for _, p in self.named:
            p.grad = None

    def clear_state(self, params=None):
        if params is None:
            self.state.clear()
            return
        for p in params:
            self.state.pop(id(p), None)

    def state_blocks(self):
        return OrderedDict((n, self.state[id(p)]) for n, p in self.named if id(p) in self.state)

    def load_blocks(self, blocks):
        by_name = dict(self.named)
        self.state = {id(by_name[n]): v.copy() for n, v in blocks.items() if n in by_name}


def learning_rate(epoch, base, epochs, warmup, schedule="cosine"):
    """Linear warm-up over ``warmup`` epochs, then cosine decay to zero at ``epochs``."""
    if epoch < warmup:
        return base * (epoch + 1) / warmup
    if schedule == "constant":
        return base
    span = max(epochs - warmup, 1)
    return base * 0.5 * (1.0 + math.cos(math.pi * (epoch - warmup) / span))


class MetricsWriter:
    """Append-only ``epoch step scope stage key value`` lines."""

    def __init__(self, path=None):
        self.path = path
        self.records = []
        self._fh = open(path, "a") if path else None

    def emit(self, epoch, step, scope, stage, key, value):
        rec = (epoch, step, scope, str(stage), key, float(value))
        if self.records and (epoch, step) < self.records[-1][:2]:
            raise ValueError("metrics must be non-decreasing in (epoch, step)")
        self.records.append(rec)
        if self._fh:
            self._fh.write(f"{epoch} {step} {scope} {stage} {key} {float(value):.10g}\n")

    def series(self, scope, key, stage="-"):
        return [r[5] for r in self.records if r[2] == scope and r[4] == key and r[3] == str(stage)]

    def close(self):
        if self._fh:
            self._fh.close()
            self._fh = None


def read_metrics(path):
    out = []
    with open(path) as fh:
        for line in fh:
            e, s, scope, stage, key, value = line.split()
            out.append((int(e), int(s), scope, stage, key, float(value)))
    return out


@dataclass
class TrainResult:
    model: CsqaModel
    checkpoint: ckpt_io.Checkpoint
    metrics: MetricsWriter
    loss_trace: list = field(default_factory=list)
    reinit_epochs: list = field(default_factory=list)
    train_accuracy: list = field(default_factory=list)
    test_accuracy: list = field(default_factory=list)
    lr_trace: list = field(default_factory=list)


def make_checkpoint(model, optimizers, epoch):
    """Parameters under ``model/``, optimizer state under ``optim.<group>/``."""
    blocks = OrderedDict()
    for name, arr in model.state_dict().items():
        blocks[f"model/{name}"] = arr
    for group, opt in optimizers.items():
        for name, arr in opt.state_blocks().items():
            blocks[f"optim.{group}/{name}"] = arr
    blocks["meta/num_classes"] = np.array(float(model.num_classes))
    return ckpt_io.Checkpoint(config_mod.to_text(model.config), epoch, blocks)


def build_optimizers(model, config):
    """Main and navigator groups follow the schedule; the auxiliary heads keep a constant rate."""
    oc = config.optim
    opts = OrderedDict(main=SGD(model.main_named_parameters(), oc.lr, oc.momentum, oc.weight_decay,
                                oc.clip_norm))
    nav = model.navigator_named_parameters()
    if nav:
        opts["navigator"] = SGD(nav, oc.lr, oc.momentum, oc.weight_decay, oc.clip_norm)
    aux = model.aux_named_parameters()
    if aux:
        opts["aux"] = SGD(aux, config.qp.aux_lr, oc.momentum, oc.weight_decay)
    return opts


def restore_model(ckpt):
    """Rebuild a model from a checkpoint's embedded config and parameters."""
    cfg = config_mod.parse_text(ckpt.config_text).validate()
    num_classes = int(ckpt.blocks.get("meta/num_classes", np.array(cfg.data.classes)))
    model = CsqaModel(cfg, num_classes)
    model.load_state_dict(ckpt.section("model"))
    return model


def accuracy(model, dataset, batch_size=64):
    """Top-1 of the summed main heads and of every head, in eval mode."""
    model.eval()
    correct, per_head = 0, None
    for i in range(0, len(dataset), batch_size):
        x = data_mod.to_float(dataset.images[i:i + batch_size])
        y = dataset.labels[i:i + batch_size]
        total, heads = model.predict(x)
        correct += int(np.sum(total.argmax(1) == y))
        hits = [int(np.sum(h.argmax(1) == y)) for h in heads]
        per_head = hits if per_head is None else [a + b for a, b in zip(per_head, hits)]
    n = max(len(dataset), 1)
    return correct / n, [h / n for h in per_head]


def _emit_qp(metrics, epoch, step, scope, outcomes, sample_ids):
    for k, o in enumerate(outcomes):
        for sid, p, q, phi, reg in zip(sample_ids, o.p, o.q, o.phi, o.region):
            metrics.emit(epoch, step, scope, k, f"s{sid}.p", p)
            metrics.emit(epoch, step, scope, k, f"s{sid}.q", q)
            metrics.emit(epoch, step, scope, k, f"s{sid}.phi", phi)
            metrics.emit(epoch, step, scope, k, f"s{sid}.region", reg)


def train(config, datasets=None, output=None, log_every=0):
    """Train per ``config``; writes checkpoint + metrics under ``output`` when given.

    ``datasets`` may supply ``(train, test)`` directly; otherwise they are
    built from ``config.data``.
    """
    config.validate()
    if datasets is None:
        datasets = data_mod.build(config.data)
    train_set, test_set = datasets
    if train_set.resolution != config.backbone.resolution:
        raise UsageError(
            f"dataset resolution {train_set.resolution} != backbone.resolution {config.backbone.resolution}")
    num_classes = int(max(train_set.labels.max() + 1, config.data.classes))
    model = CsqaModel(config, num_classes)
    oc = config.optim
    optimizers = build_optimizers(model, config)
    aux_optimizer = optimizers.get("aux")
    metrics_path = None
    if output:
        os.makedirs(output, exist_ok=True)
        config_mod.save(config, os.path.join(output, "config.txt"))
        metrics_path = os.path.join(output, "metrics.txt")
        if os.path.exists(metrics_path):
            os.remove(metrics_path)
    metrics = MetricsWriter(metrics_path)
    result = TrainResult(model, None, metrics)
    rng = np.random.default_rng([config.train.seed, 1])
    bs = config.train.batch_size
    step = 0
    for epoch in range(config.train.epochs):
        t0 = time.perf_counter()
        if config.model.mlsqe:
            fired = [qp.maybe_reinit(epoch, aux_optimizer) for qp in model.qps]
            if any(fired):
                result.reinit_epochs.append(epoch)
                metrics.emit(epoch, step, "qp", "-", "reinit", 1)
        lr = learning_rate(epoch, oc.lr, config.train.epochs, oc.warmup_epochs, oc.schedule)
        for group, opt in optimizers.items():
            if group != "aux":
                opt.lr = lr
        result.lr_trace.append(lr)
        model.train()
        order = rng.permutation(len(train_set))
        losses = []
        for i in range(0, len(order), bs):
            idx = order[i:i + bs]
            x = data_mod.to_float(train_set.images[idx])
            if config.train.augment:
                x = data_mod.augment(x, rng)
            y = train_set.labels[idx]
            res = model.training_step(x, y)
            model.check_finite(res.loss)
            T.backward(res.loss)
            for opt in optimizers.values():
                opt.step()
            model.zero_grad()
            step += 1
            value = res.loss.item()
            losses.append(value)
            metrics.emit(epoch, step, "train", "-", "loss", value)
            for name, part in res.parts.items():
                metrics.emit(epoch, step, "train", "-", f"loss.{name}", part.item())
            if config.train.qp_records:
                for scope, outs in res.outcomes.items():
                    _emit_qp(metrics, epoch, step, f"qp_{scope}", outs, idx)
        epoch_loss = float(np.mean(losses))
        result.loss_trace.append(epoch_loss)
        train_acc, _ = accuracy(model, train_set)
        result.train_accuracy.append(train_acc)
        metrics.emit(epoch, step, "epoch", "-", "loss", epoch_loss)
        metrics.emit(epoch, step, "epoch", "-", "lr", lr)
        metrics.emit(epoch, step, "epoch", "-", "train_acc", train_acc)
        if test_set is not None and len(test_set):
            test_acc, heads = accuracy(model, test_set)
            result.test_accuracy.append(test_acc)
            metrics.emit(epoch, step, "epoch", "-", "test_acc", test_acc)
            for k, h in enumerate(heads):
                metrics.emit(epoch, step, "epoch", k, "test_acc_head", h)
        if log_every and (epoch + 1) % log_every == 0:
            log.info("epoch %d loss %.4f train %.3f test %s (%.1fs)", epoch, epoch_loss, train_acc,
                     f"{result.test_accuracy[-1]:.3f}" if result.test_accuracy else "-",
                     time.perf_counter() - t0)
    ck = make_checkpoint(model, optimizers, config.train.epochs)
    result.checkpoint = ck
    if output:
        ckpt_io.save(os.path.join(output, "checkpoint.bin"), ck)
        if config.model.navigator and test_set is not None and len(test_set):
            write_proposals(os.path.join(output, "proposals.txt"), propose(model, test_set.images))
    metrics.close()
    return result


def propose(model, images, batch_size=64):
    """Navigator proposals per image (eval mode, no gradients)."""
    model.eval()
    out = []
    with T.no_grad():
        for i in range(0, len(images), batch_size):
            pyramid = model.backbone(T.Tensor(data_mod.to_float(images[i:i + batch_size])))
            out.extend(model.navigator(pyramid[-1])[1])
    return out


def evaluate(ckpt, dataset):
    """Image-branch accuracy: ``(ensemble_accuracy, per_head_accuracies)``."""
    model = restore_model(ckpt)
    if dataset.resolution != model.config.backbone.resolution:
        raise UsageError(
            f"dataset resolution {dataset.resolution} does not match checkpoint config "
            f"{ckpt.config_hash[:12]} (backbone.resolution {model.config.backbone.resolution})")
    return accuracy(model, dataset)


def stage_heatmaps(model, images):
    """Channel-mean activation grid per image per stage: ``[image][stage] -> [H, W]``."""
    model.eval()
    with T.no_grad():
        pyramid = model.backbone(T.Tensor(data_mod.to_float(images)))
    return [[f.data[i].mean(axis=0) for f in pyramid] for i in range(len(images))]


def dump_heatmaps(ckpt, images, out_dir):
    """Write one text matrix per image per stage; returns the written paths."""
    model = restore_model(ckpt)
    os.makedirs(out_dir, exist_ok=True)
    paths = []
    for i, grids in enumerate(stage_heatmaps(model, images)):
        for s, grid in enumerate(grids, 1):
            path = os.path.join(out_dir, f"image{i:04d}_stage{s}.txt")
            np.savetxt(path, grid, fmt="%.10g")
            paths.append(path)
    return paths
