"""Adversarial training loop: optimizer, schedule, checkpointing, history.

Single-dataset training and pretrain-then-finetune both run through the
same step machinery. Training is bit-deterministic for a fixed seed in
single-threaded mode: the per-epoch shuffle is derived statelessly from
(seed, epoch), while crop windows and any stochastic loss draws consume a
dedicated generator whose state rides along in every checkpoint, so a
resumed run continues the exact stream.
"""

from __future__ import annotations

import dataclasses
import json
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from . import losses as L
from .checkpoint import Checkpoint, load_checkpoint, save_checkpoint
from .data import DatasetIndex, ImagePair, denormalize, normalize, psnr, \
    random_crop_pair, ssim
from .models import GeneratorConfig, LayerGraph, build_discriminator, \
    build_generator, forward_discriminator, forward_generator, init_weights, \
    parameters
from .tensor import Tensor, concat_channels

HINGE = "hinge"
WGAN_GP = "wgan_gp"

_EVAL_PAIR_CAP = 8


class TrainingDiverged(RuntimeError):
    pass


@dataclass
class TrainConfig:
    lr: float = 1e-4
    betas: tuple = (0.9, 0.999)
    epochs_constant: int = 150
    epochs_decay: int = 150
    batch: int = 1
    lambda_content: float = 100.0
    d_steps_per_g: int | None = None     # defaults: 1 hinge, 5 wgan_gp
    adv_loss: str = HINGE
    crop: int = 256
    seed: int = 0
    dropout_rate: float = 0.0
    ngf: int = 64
    n_blocks: int = 9
    decomposition: str = "res_only"
    ndf: int = 64
    gp_lambda: float = 10.0
    feature_seed: int = 0
    max_steps: int | None = None
    checkpoint_every: int = 0            # steps between saves; 0 = end only

    @classmethod
    def desk_scale(cls, **overrides) -> "TrainConfig":
        """Small-budget defaults; paper-scale values remain selectable."""
        base = {"crop": 64, "epochs_constant": 20, "epochs_decay": 20}
        base.update(overrides)
        return cls(**base)

    def validate(self) -> "TrainConfig":
        if self.lr <= 0 or self.epochs_constant < 0 or self.epochs_decay < 0:
            raise ValueError("lr must be positive and epoch counts >= 0")
        if self.lambda_content < 0 or self.gp_lambda < 0:
            raise ValueError("loss weights must be nonnegative")
        if self.adv_loss not in (HINGE, WGAN_GP):
            raise ValueError(f"adv_loss must be '{HINGE}' or '{WGAN_GP}'")
        if self.batch != 1:
            raise ValueError("only batch size 1 is supported")
        if self.crop < 4 or self.crop % 4:
            raise ValueError("crop must be a positive multiple of 4")
        return self

    def resolved_d_steps(self) -> int:
        if self.d_steps_per_g is not None:
            return self.d_steps_per_g
        return 5 if self.adv_loss == WGAN_GP else 1

    def generator_config(self) -> GeneratorConfig:
        return GeneratorConfig(self.ngf, self.n_blocks, self.decomposition,
                               self.dropout_rate)


@dataclass
class AdamState:
    m: dict = field(default_factory=dict)
    v: dict = field(default_factory=dict)
    step: int = 0

    @classmethod
    def for_params(cls, params) -> "AdamState":
        state = cls()
        for name, t in params:
            state.m[name] = np.zeros(t.shape, dtype=t.data.dtype)
            state.v[name] = np.zeros(t.shape, dtype=t.data.dtype)
        return state


def adam_step(params, state: AdamState, lr: float,
              betas: tuple = (0.9, 0.999), eps: float = 1e-8) -> None:
    """Standard bias-corrected Adam update over a (name, tensor) registry."""
    b1, b2 = betas
    state.step += 1
    t = state.step
    c1 = 1.0 - b1 ** t
    c2 = 1.0 - b2 ** t
    for name, p in params:
        g = p.grad
        if g is None:
            g = np.zeros_like(p.data)
        elif not np.all(np.isfinite(g)):
            raise TrainingDiverged(f"non-finite gradient for '{name}'")
        m = state.m[name]
        v = state.v[name]
        m *= b1
        m += (1.0 - b1) * g
        v *= b2
        v += (1.0 - b2) * (g * g)
        m_hat = m / c1
        v_hat = v / c2
        p.data = p.data - lr * m_hat / (np.sqrt(v_hat) + eps)


def lr_at_epoch(cfg: TrainConfig, epoch: int) -> float:
    """Constant for the first block of epochs, then linear to zero."""
    total = cfg.epochs_constant + cfg.epochs_decay
    if epoch < 0 or epoch > total:
        raise ValueError(f"epoch {epoch} outside schedule [0, {total}]")
    if epoch < cfg.epochs_constant:
        return cfg.lr
    if cfg.epochs_decay == 0:
        return 0.0
    return cfg.lr * (1.0 - (epoch - cfg.epochs_constant) / cfg.epochs_decay)


def _batched(t: Tensor) -> Tensor:
    return Tensor(t.data[None], requires_grad=False)


def train_step(g_net: LayerGraph, d_net: LayerGraph, feat: L.FeatureNet,
               blur: Tensor, sharp: Tensor, cfg: TrainConfig,
               g_state: AdamState, d_state: AdamState,
               rng: np.random.Generator, lr: float) -> dict:
    """d_steps_per_g critic updates (generator output detached), then one
    generator update on the combined objective."""
    g_params = parameters(g_net)
    d_params = parameters(d_net)
    training = cfg.dropout_rate > 0

    restored = forward_generator(g_net, blur, training=training, rng=rng)
    fake_detached = restored.detach()
    real_pair = concat_channels(blur, sharp)
    d_loss_val = 0.0
    for _ in range(cfg.resolved_d_steps()):
        fake_pair = concat_channels(blur, fake_detached)
        if cfg.adv_loss == HINGE:
            d_loss = L.hinge_d_loss(forward_discriminator(d_net, real_pair),
                                    forward_discriminator(d_net, fake_pair))
        else:
            d_loss = L.wgan_gp_d_loss(d_net, real_pair, fake_pair,
                                      L.GpConfig(cfg.gp_lambda, cfg.seed),
                                      rng)
        for _, p in d_params:
            p.zero_grad()
        d_loss.backward()
        adam_step(d_params, d_state, lr, cfg.betas)
        d_loss_val = d_loss.item()

    fake_pair = concat_channels(blur, restored)
    g_adv = L.hinge_g_loss(forward_discriminator(d_net, fake_pair))
    g_content = L.perceptual_loss(feat, restored, sharp)
    g_total = L.total_g_loss(g_adv, g_content, cfg.lambda_content)
    for _, p in g_params:
        p.zero_grad()
    g_total.backward()
    adam_step(g_params, g_state, lr, cfg.betas)

    out = {"d_loss": d_loss_val, "g_adv": g_adv.item(),
           "g_content": g_content.item(), "g_total": g_total.item()}
    if not all(np.isfinite(v) for v in out.values()):
        raise TrainingDiverged(f"non-finite loss values: {out}")
    return out


def _epoch_order(seed: int, epoch: int, n: int) -> np.ndarray:
    rng = np.random.Generator(
        np.random.PCG64(np.random.SeedSequence([seed, 2, epoch])))
    return rng.permutation(n)


def _dataset_id(dataset: DatasetIndex) -> str:
    return f"{dataset.root}:{dataset.split}"


def _config_json(cfg: TrainConfig) -> str:
    doc = dataclasses.asdict(cfg)
    doc["betas"] = list(doc["betas"])
    return json.dumps(doc, sort_keys=True)


def config_from_json(text: str) -> TrainConfig:
    doc = json.loads(text)
    doc["betas"] = tuple(doc["betas"])
    return TrainConfig(**doc)


def build_checkpoint(g_net, d_net, g_state, d_state, cfg, epoch, global_step,
                     train_rng, provenance, feature_source) -> Checkpoint:
    tensors = {}
    for name, t in parameters(g_net):
        tensors[f"G.{name}"] = t.data
    for name, t in parameters(d_net):
        tensors[f"D.{name}"] = t.data
    for name in g_state.m:
        tensors[f"optG.{name}.m"] = g_state.m[name]
        tensors[f"optG.{name}.v"] = g_state.v[name]
    for name in d_state.m:
        tensors[f"optD.{name}.m"] = d_state.m[name]
        tensors[f"optD.{name}.v"] = d_state.v[name]
    metadata = {
        "epoch": str(epoch),
        "global_step": str(global_step),
        "adam_g_step": str(g_state.step),
        "adam_d_step": str(d_state.step),
        "config": _config_json(cfg),
        "prng_state": json.dumps(train_rng.bit_generator.state),
        "provenance": json.dumps(provenance),
        "feature_source": feature_source,
    }
    return Checkpoint(tensors=tensors, metadata=metadata)


def _restore_weights(ck: Checkpoint, g_net, d_net) -> None:
    expected = {f"G.{n}": t for n, t in parameters(g_net)}
    expected.update({f"D.{n}": t for n, t in parameters(d_net)})
    problems = []
    for name, t in expected.items():
        arr = ck.tensors.get(name)
        if arr is None:
            problems.append(f"missing tensor {name} {tuple(t.shape)}")
        elif tuple(arr.shape) != tuple(t.shape):
            problems.append(
                f"shape mismatch {name}: checkpoint {tuple(arr.shape)} vs "
                f"model {tuple(t.shape)}")
    for name in ck.tensors:
        if (name.startswith("G.") or name.startswith("D.")) \
                and name not in expected:
            problems.append(f"unexpected tensor {name}")
    if problems:
        raise ValueError("architecture mismatch:\n  " +
                         "\n  ".join(problems))
    for name, t in expected.items():
        t.data = ck.tensors[name].astype(np.float32)
        t.grad = None


def _restore_optimizer(ck: Checkpoint, prefix: str, state: AdamState,
                       step_key: str) -> None:
    for name in state.m:
        state.m[name] = ck.tensors[f"{prefix}.{name}.m"].astype(np.float32)
        state.v[name] = ck.tensors[f"{prefix}.{name}.v"].astype(np.float32)
    state.step = int(ck.metadata[step_key])


def _load_eval_pair(dataset: DatasetIndex, identifier: str,
                    crop: int) -> ImagePair:
    pair = dataset.load_pair(identifier)
    h, w = pair.sharp.shape[:2]
    if h % 4 == 0 and w % 4 == 0 and h <= crop and w <= crop:
        return pair
    side = min(crop, h - h % 4, w - w % 4)
    top = (h - side) // 2
    left = (w - side) // 2
    return ImagePair(pair.blurred[top:top + side, left:left + side],
                     pair.sharp[top:top + side, left:left + side],
                     pair.identifier)


def evaluate(g_net: LayerGraph, dataset: DatasetIndex, crop: int = 256,
             cap: int | None = _EVAL_PAIR_CAP) -> dict:
    """Mean PSNR/SSIM of restorations against sharp references."""
    ids = dataset.identifiers[:cap] if cap else dataset.identifiers
    if not ids:
        raise ValueError("dataset is empty")
    psnrs, ssims = [], []
    for identifier in ids:
        pair = _load_eval_pair(dataset, identifier, crop)
        restored = forward_generator(g_net, _batched(normalize(pair.blurred)))
        img = denormalize(restored)
        psnrs.append(psnr(img, pair.sharp))
        ssims.append(ssim(img, pair.sharp))
    return {"psnr": float(np.mean(psnrs)), "ssim": float(np.mean(ssims))}


def _run_loop(g_net, d_net, g_state, d_state, feat, cfg: TrainConfig,
              dataset: DatasetIndex, out_dir: Path, start_step: int,
              train_rng, provenance) -> tuple:
    spe = len(dataset)
    total_epochs = cfg.epochs_constant + cfg.epochs_decay
    total_steps = total_epochs * spe
    if cfg.max_steps is not None:
        total_steps = min(total_steps, cfg.max_steps)

    out_dir.mkdir(parents=True, exist_ok=True)
    latest = out_dir / "latest.ckpt"
    history: list = []

    def save(epoch: int, step: int, path: Path) -> None:
        ck = build_checkpoint(g_net, d_net, g_state, d_state, cfg, epoch,
                              step, train_rng, provenance, feat.source)
        save_checkpoint(ck, path)

    global_step = start_step
    epoch = start_step // spe if spe else 0
    with open(out_dir / "history.tsv", "a") as hist_f, \
            open(out_dir / "epochs.tsv", "a") as ep_f:
        while epoch < total_epochs and global_step < total_steps:
            lr = lr_at_epoch(cfg, epoch)
            order = _epoch_order(cfg.seed, epoch, spe)
            start_k = global_step % spe if epoch == start_step // spe else 0
            ep_rows = []
            for k in range(start_k, spe):
                if global_step >= total_steps:
                    break
                pair = dataset.load_pair(dataset.identifiers[int(order[k])])
                h, w = pair.sharp.shape[:2]
                if min(h, w) < cfg.crop:
                    raise ValueError(
                        f"images {h}x{w} smaller than crop {cfg.crop}")
                pair = random_crop_pair(pair, cfg.crop, train_rng)
                blur = _batched(normalize(pair.blurred))
                sharp = _batched(normalize(pair.sharp))
                try:
                    row = train_step(g_net, d_net, feat, blur, sharp, cfg,
                                     g_state, d_state, train_rng, lr)
                except TrainingDiverged as e:
                    save(epoch, global_step, latest)
                    raise TrainingDiverged(
                        f"{e}; last good checkpoint: {latest}") from e
                global_step += 1
                history.append(row)
                ep_rows.append(row)
                hist_f.write(
                    f"{global_step}\t{row['d_loss']:.6g}\t"
                    f"{row['g_adv']:.6g}\t{row['g_content']:.6g}\t"
                    f"{row['g_total']:.6g}\t{lr:.6g}\n")
                hist_f.flush()
                if cfg.checkpoint_every and \
                        global_step % cfg.checkpoint_every == 0:
                    save(epoch, global_step,
                         out_dir / f"step{global_step:08d}.ckpt")
                    save(epoch, global_step, latest)
            if ep_rows:
                scores = evaluate(g_net, dataset, cfg.crop)
                ep_f.write(
                    f"{epoch}\t{np.mean([r['d_loss'] for r in ep_rows]):.6g}"
                    f"\t{np.mean([r['g_total'] for r in ep_rows]):.6g}"
                    f"\t{scores['psnr']:.6g}\t{scores['ssim']:.6g}\n")
                ep_f.flush()
            epoch += 1
    save(min(epoch, total_epochs), global_step, latest)
    return latest, history


def train(cfg: TrainConfig, dataset: DatasetIndex, out_dir,
          feature_net: L.FeatureNet | None = None,
          resume_from=None) -> tuple:
    """Full training run (or resume); returns (checkpoint path, history)."""
    cfg.validate()
    if len(dataset) == 0:
        raise ValueError("dataset is empty")
    g_net = build_generator(cfg.generator_config())
    d_net = build_discriminator(cfg.ndf)
    init_weights(g_net, cfg.seed)
    init_weights(d_net, cfg.seed + 1)
    feat = feature_net or L.builtin_tiny_featurenet(cfg.feature_seed)
    g_state = AdamState.for_params(parameters(g_net))
    d_state = AdamState.for_params(parameters(d_net))
    train_rng = np.random.Generator(
        np.random.PCG64(np.random.SeedSequence([cfg.seed, 1])))
    start_step = 0
    provenance = [_dataset_id(dataset)]
    if resume_from is not None:
        ck = load_checkpoint(resume_from)
        _restore_weights(ck, g_net, d_net)
        _restore_optimizer(ck, "optG", g_state, "adam_g_step")
        _restore_optimizer(ck, "optD", d_state, "adam_d_step")
        train_rng.bit_generator.state = json.loads(ck.metadata["prng_state"])
        start_step = int(ck.metadata["global_step"])
        provenance = json.loads(ck.metadata["provenance"])
    return _run_loop(g_net, d_net, g_state, d_state, feat, cfg, dataset,
                     Path(out_dir), start_step, train_rng, provenance)


def fine_tune(checkpoint_path, dataset2: DatasetIndex, cfg: TrainConfig,
              out_dir, feature_net: L.FeatureNet | None = None) -> tuple:
    """Continue optimizing pretrained weights on a second dataset with a
    fresh optimizer and schedule; provenance chain records both datasets."""
    cfg.validate()
    if len(dataset2) == 0:
        raise ValueError("dataset is empty")
    ck = load_checkpoint(checkpoint_path)
    g_net = build_generator(cfg.generator_config())
    d_net = build_discriminator(cfg.ndf)
    _restore_weights(ck, g_net, d_net)
    feat = feature_net or L.builtin_tiny_featurenet(cfg.feature_seed)
    g_state = AdamState.for_params(parameters(g_net))
    d_state = AdamState.for_params(parameters(d_net))
    train_rng = np.random.Generator(
        np.random.PCG64(np.random.SeedSequence([cfg.seed, 1])))
    provenance = json.loads(ck.metadata.get("provenance", "[]"))
    provenance.append(_dataset_id(dataset2))
    return _run_loop(g_net, d_net, g_state, d_state, feat, cfg, dataset2,
                     Path(out_dir), 0, train_rng, provenance)
