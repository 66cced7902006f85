"""Stage-2 training, prediction and the checkpoint plumbing around them."""
import hashlib
from dataclasses import dataclass

import numpy as np
import torch
import torch.nn.functional as F

from .checkpoint import Checkpoint, load_checkpoint, module_tensors, save_checkpoint, tensor_digest
from .core import Homography, format_homography
from .errors import ConfigError, NonFiniteLoss
from .evaluation import evaluate_dataset
from .head import bce_dice_loss
from .model import ESTIMATOR_PREFIX, PCNet
from .she import HomographyEstimator, work_to_full

VAL_BUCKETS = 10


def is_validation_id(sample_id):
    """Fixed 10% hold-out: md5 of the id, modulo 10, equals 0."""
    return int(hashlib.md5(sample_id.encode()).hexdigest(), 16) % VAL_BUCKETS == 0


def split_by_id(samples):
    train = [s for s in samples if not is_validation_id(s.id)]
    val = [s for s in samples if is_validation_id(s.id)]
    return train, val


# ---------------------------------------------------------------------------
# tensors

def resize_image(x, size):
    """Corner-aligned bilinear resize of ``(B, C, H, W)`` to ``size x size``."""
    if x.shape[-2:] == (size, size):
        return x
    return F.interpolate(x, size=(size, size), mode="bilinear", align_corners=True)


def thermal_channel(thermal):
    """Single-channel thermal: 3-channel inputs are averaged."""
    return thermal if thermal.shape[0] == 1 else thermal.mean(axis=0, keepdims=True)


@dataclass
class Batch:
    ids: list
    rgb: torch.Tensor       # (N, 3, S, S)
    thermal: torch.Tensor   # (N, 1, S, S)
    gt: torch.Tensor | None  # (N, 1, S, S) binary

    def __len__(self):
        return len(self.ids)

    def take(self, idx):
        idx = torch.as_tensor(idx, dtype=torch.long)
        return Batch([self.ids[i] for i in idx.tolist()], self.rgb[idx], self.thermal[idx],
                     None if self.gt is None else self.gt[idx])


def prepare_batch(samples, size, with_gt=True):
    rgb = [resize_image(torch.from_numpy(s.rgb)[None], size)[0] for s in samples]
    th = [resize_image(torch.from_numpy(thermal_channel(s.thermal))[None], size)[0] for s in samples]
    gt = None
    if with_gt:
        gt = torch.stack([(resize_image(torch.from_numpy(s.gt_mask)[None], size)[0] >= 0.5).float()
                          for s in samples])
    return Batch([s.id for s in samples], torch.stack(rgb).float(), torch.stack(th).float(), gt)


# ---------------------------------------------------------------------------
# model construction

def load_estimator(path):
    """Pretrained estimator from an estimator or full checkpoint."""
    ckpt = load_checkpoint(path)
    est = HomographyEstimator.from_config(ckpt.config)
    state = {k[len(ESTIMATOR_PREFIX):]: v for k, v in ckpt.tensors.items()
             if k.startswith(ESTIMATOR_PREFIX)}
    if not state:
        raise ConfigError(f"{path} holds no estimator tensors")
    est.load_state_dict(state)
    est.eval()
    return est, ckpt


def build_model(cfg, estimator):
    """Stage-2 network around a pretrained estimator.

    Training from scratch without a pretrained estimator is not supported.
    """
    if estimator is None:
        raise ConfigError("stage-2 training needs a pretrained estimator checkpoint "
                          "(run `pcnet pretrain` first); joint training from scratch is not supported")
    torch.manual_seed(cfg.rng_seed)
    model = PCNet(cfg, estimator)
    model.freeze_estimator(not cfg.full_finetune_estimator)
    return model


def model_from_checkpoint(ckpt, cfg=None):
    """Rebuild a full network from a ``pcnet`` checkpoint (``cfg`` overrides the snapshot)."""
    if ckpt.kind != "pcnet":
        raise ConfigError(f"expected a full network checkpoint, got {ckpt.kind!r}")
    cfg = ckpt.config if cfg is None else cfg
    model = PCNet(cfg)
    model.load_state_dict(ckpt.tensors)
    model.freeze_estimator(not cfg.full_finetune_estimator)
    model.eval()
    return model


def network_checkpoint(model, cfg, epoch, optimizer=None, extra=None):
    frozen = model.frozen_names()
    return Checkpoint(
        kind="pcnet",
        tensors=module_tensors(model),
        frozen={k: k in frozen for k in model.state_dict()},
        config=cfg,
        epoch=epoch,
        rng_state=torch.get_rng_state(),
        optimizer=None if optimizer is None else optimizer.state_dict(),
        extra=extra or {},
    )


def frozen_digest(model):
    names = model.frozen_names()
    return tensor_digest(dict(model.named_parameters()), names) if names else ""


# ---------------------------------------------------------------------------
# prediction

@torch.no_grad()
def predict_batch(model, batch):
    model.eval()
    out = model(batch.rgb, batch.thermal)
    return out.prediction.prob, out


@torch.no_grad()
def predict_samples(model, samples, size, batch_size=8):
    """Per-sample ``(prob, homography)`` at each sample's native resolution.

    ``prob`` is a float64 map the size of the RGB image; ``homography`` maps
    native thermal pixels to native RGB pixels.
    """
    results = []
    for i in range(0, len(samples), batch_size):
        chunk = samples[i:i + batch_size]
        batch = prepare_batch(chunk, size, with_gt=False)
        model.eval()
        out = model(batch.rgb, batch.thermal)
        for j, s in enumerate(chunk):
            rgb_hw = s.rgb.shape[1:]
            logits = out.prediction.logits[j:j + 1].double()
            if tuple(logits.shape[-2:]) != tuple(rgb_hw):
                logits = F.interpolate(logits, size=tuple(rgb_hw), mode="bilinear", align_corners=True)
            prob = torch.sigmoid(logits)[0, 0].numpy()
            h = work_to_full(out.homography[j:j + 1], size, rgb_hw, s.thermal.shape[1:])[0]
            results.append((prob, Homography(h.numpy())))
    return results


# ---------------------------------------------------------------------------
# training

class Trainer:
    """AdamW over the unfrozen parameters; one permutation per (seed, epoch)."""

    def __init__(self, model, cfg, log=None):
        self.model = model
        self.cfg = cfg
        self.log = log or (lambda **kw: None)
        self.optimizer = torch.optim.AdamW(model.trainable_parameters(), lr=cfg.lr,
                                           weight_decay=cfg.weight_decay)
        self.epoch = 0
        self.history = []

    def step(self, batch, batch_id=""):
        self.model.train()
        self.model.estimator.eval()
        out = self.model(batch.rgb, batch.thermal)
        loss = bce_dice_loss(out.prediction, batch.gt, (self.cfg.bce_w, self.cfg.dice_w))
        if not torch.isfinite(loss):
            raise NonFiniteLoss(batch_id, loss.item())
        self.optimizer.zero_grad()
        loss.backward()
        self.optimizer.step()
        return loss.item()

    def train_epoch(self, data: Batch):
        self.epoch += 1
        order = np.random.default_rng([self.cfg.rng_seed, self.epoch]).permutation(len(data))
        bs = self.cfg.batch_size
        total = 0.0
        for k, i in enumerate(range(0, len(data), bs)):
            batch = data.take(order[i:i + bs])
            total += self.step(batch, f"epoch{self.epoch}:batch{k}:{','.join(batch.ids)}") * len(batch)
        return total / max(len(data), 1)

    @torch.no_grad()
    def validate(self, data: Batch, log_homographies=False):
        pairs, bs = [], self.cfg.batch_size
        for i in range(0, len(data), bs):
            batch = data.take(range(i, min(i + bs, len(data))))
            prob, out = predict_batch(self.model, batch)
            for j, sid in enumerate(batch.ids):
                pairs.append((sid, prob[j, 0].double().numpy(), batch.gt[j, 0].numpy(), ()))
                if log_homographies:
                    self.log(event="homography", id=sid,
                             h=format_homography(Homography(out.homography[j].numpy())).replace(" ", ","))
        e, sm, f = evaluate_dataset(pairs).aggregate
        return {"Em": e, "Sm": sm, "Fm": f}

    def fit(self, train: Batch, val: Batch | None = None, epochs=None, checkpoint_dir=None):
        epochs = self.cfg.epochs if epochs is None else epochs
        self.log(event="train_start", lr=self.cfg.lr, weight_decay=self.cfg.weight_decay,
                 batch_size=self.cfg.batch_size, epochs=epochs, start_epoch=self.epoch,
                 n_train=len(train), n_val=0 if val is None else len(val))
        while self.epoch < epochs:
            loss = self.train_epoch(train)
            rec = {"epoch": self.epoch, "loss": loss}
            if val is not None and len(val):
                rec.update({f"val_{k}": v for k, v in self.validate(val).items()})
            rec["frozen_digest"] = frozen_digest(self.model)[:16]
            self.history.append(rec)
            self.log(event="epoch", **rec)
            if checkpoint_dir is not None and (self.epoch % self.cfg.checkpoint_every == 0
                                               or self.epoch == epochs):
                path = checkpoint_dir / f"epoch{self.epoch:03d}.ckpt"
                self.save(path)
                self.log(event="checkpoint", path=path.name)
        if val is not None and len(val):
            self.validate(val, log_homographies=True)
        return self.history

    def checkpoint(self):
        return network_checkpoint(self.model, self.cfg, self.epoch, self.optimizer,
                                  {"history": list(self.history)})

    def save(self, path):
        save_checkpoint(path, self.checkpoint())

    @classmethod
    def resume(cls, ckpt, cfg=None, log=None):
        cfg = ckpt.config if cfg is None else cfg
        model = model_from_checkpoint(ckpt, cfg)
        trainer = cls(model, cfg, log)
        if ckpt.optimizer is not None:
            trainer.optimizer.load_state_dict(ckpt.optimizer)
        if ckpt.rng_state is not None:
            torch.set_rng_state(ckpt.rng_state)
        trainer.epoch = ckpt.epoch
        trainer.history = list(ckpt.extra.get("history", []))
        return trainer

