"""Two-stage trainer, ablation runner, and checkpoint archive."""
from __future__ import annotations

import copy
import io
import json
import logging
from dataclasses import asdict, dataclass, field, fields
from pathlib import Path

import numpy as np
import torch

from . import losses as L
from .errors import NumericError, StateError, ValidationError
from .kria import FiveWayCodes, keyed_transform
from .latent_codec import LEVEL_ROWS
from .model import ABLATIONS, DBAF, Discriminator, ModelConfig
from .utils import atomic_write_bytes

log = logging.getLogger(__name__)

CKPT_FORMAT = "dbaf-ckpt-v1"


@dataclass
class TrainConfig:
    stage: int = 1
    batch_size: int = 4
    lr: float = 1e-4
    betas: tuple = (0.9, 0.999)
    steps: int = 300
    same_prob: float = 0.5
    ablation: str = "full"
    seed: int = 0
    optimizer: str = "adam"
    r1_gamma: float = L.R1_GAMMA
    tau_plus: float = L.TAU_PLUS
    tau_minus: float = L.TAU_MINUS
    freeze_backbone: bool = False
    extractor_seed: int = 1234
    log_path: str | None = None
    stage1_weights: dict = field(default_factory=lambda: dict(L.STAGE1_WEIGHTS))
    stage2_weights: dict = field(default_factory=lambda: dict(L.STAGE2_WEIGHTS))

    def __post_init__(self):
        self.betas = tuple(self.betas)
        if self.stage not in (1, 2):
            raise ValidationError(f"stage must be 1 or 2, got {self.stage}")
        if self.steps < 0:
            raise ValidationError("step budget must be non-negative")
        if not 0.0 <= self.same_prob <= 1.0:
            raise ValidationError("same_prob must lie in [0, 1]")
        if self.ablation not in ABLATIONS:
            raise ValidationError(f"unknown ablation mode {self.ablation!r}; expected one of {ABLATIONS}")
        if self.optimizer not in ("adam", "ranger"):
            raise ValidationError(f"unknown optimizer {self.optimizer!r}")
        if self.batch_size < 1:
            raise ValidationError("batch size must be positive")
        L.LossWeights(self.stage1_weights, self.stage2_weights, self.r1_gamma)

    @property
    def weights(self) -> L.LossWeights:
        return L.LossWeights(dict(self.stage1_weights), dict(self.stage2_weights), self.r1_gamma)

    def to_dict(self) -> dict:
        d = asdict(self)
        d["betas"] = list(self.betas)
        return d

    @classmethod
    def from_dict(cls, data: dict) -> "TrainConfig":
        names = {f.name for f in fields(cls)}
        unknown = set(data) - names
        if unknown:
            raise ValidationError(f"unknown config keys: {sorted(unknown)}")
        return cls(**data)

    @classmethod
    def from_toml(cls, path) -> "TrainConfig":
        try:
            import tomllib
        except ModuleNotFoundError:  # python < 3.11
            import tomli as tomllib
        with open(path, "rb") as fh:
            data = tomllib.load(fh)
        return cls.from_dict(data.get("train", data))


class Lookahead:
    """Lookahead wrapper; with RAdam inside it gives the Ranger optimizer."""

    def __init__(self, base: torch.optim.Optimizer, k: int = 6, alpha: float = 0.5):
        self.base = base
        self.k = k
        self.alpha = alpha
        self.param_groups = base.param_groups
        self.defaults = base.defaults
        self.state = base.state
        self._count = 0
        self.slow = [[p.detach().clone() for p in g["params"]] for g in self.param_groups]

    def step(self, closure=None):
        loss = self.base.step(closure)
        self._count += 1
        if self._count % self.k == 0:
            for group, slow in zip(self.param_groups, self.slow):
                for p, s in zip(group["params"], slow):
                    s.add_(p.detach() - s, alpha=self.alpha)
                    p.data.copy_(s)
        return loss

    def zero_grad(self, set_to_none: bool = True):
        self.base.zero_grad(set_to_none=set_to_none)

    def state_dict(self):
        return {"base": self.base.state_dict(), "count": self._count, "slow": self.slow}

    def load_state_dict(self, state):
        self.base.load_state_dict(state["base"])
        self._count = state["count"]
        for dst, src in zip(self.slow, state["slow"]):
            for a, b in zip(dst, src):
                a.copy_(b)


def make_optimizer(params, config: TrainConfig):
    params = list(params)
    if config.optimizer == "ranger":
        return Lookahead(torch.optim.RAdam(params, lr=config.lr, betas=config.betas))
    return torch.optim.Adam(params, lr=config.lr, betas=config.betas)


@dataclass
class Checkpoint:
    model: DBAF
    discriminator: Discriminator | None = None
    train_config: TrainConfig | None = None
    step: int = 0
    optimizer_g: dict | None = None
    optimizer_d: dict | None = None
    rng_state: dict | None = None
    history: list = field(default_factory=list)


def save_checkpoint(ckpt: Checkpoint, path) -> None:
    payload = {
        "format": CKPT_FORMAT,
        "model_config": ckpt.model.config.to_dict(),
        "model": ckpt.model.state_dict(),
        "discriminator": ckpt.discriminator.state_dict() if ckpt.discriminator is not None else None,
        "disc_image_size": ckpt.model.config.backbone.image_size,
        "train_config": ckpt.train_config.to_dict() if ckpt.train_config else None,
        "step": ckpt.step,
        "optimizer_g": ckpt.optimizer_g,
        "optimizer_d": ckpt.optimizer_d,
        "rng_state": ckpt.rng_state,
        "history": ckpt.history,
    }
    buf = io.BytesIO()
    torch.save(payload, buf)
    atomic_write_bytes(Path(path), buf.getvalue())


def load_checkpoint(path) -> Checkpoint:
    path = Path(path)
    if not path.is_file():
        raise StateError(f"checkpoint not found: {path}")
    try:
        payload = torch.load(path, map_location="cpu", weights_only=False)
    except Exception as exc:  # corrupt archive
        raise StateError(f"cannot read checkpoint {path}: {exc}") from exc
    if not isinstance(payload, dict) or payload.get("format") != CKPT_FORMAT:
        raise StateError(f"{path}: not a {CKPT_FORMAT} archive")
    model = DBAF(ModelConfig(**payload["model_config"]))
    model.load_state_dict(payload["model"])
    disc = None
    if payload["discriminator"] is not None:
        disc = Discriminator(payload["disc_image_size"])
        disc.load_state_dict(payload["discriminator"])
    tc = TrainConfig.from_dict(payload["train_config"]) if payload["train_config"] else None
    return Checkpoint(model, disc, tc, payload["step"], payload["optimizer_g"], payload["optimizer_d"],
                      payload["rng_state"], payload["history"])


def sample_pair(dataset: torch.Tensor, same_prob: float, rng: np.random.Generator):
    """Draw ``(x_attr, x_id, same)``; ``same`` with probability ``same_prob``."""
    n = len(dataset)
    i = int(rng.integers(n))
    same = bool(rng.random() < same_prob) or n == 1
    if same:
        j = i
    else:
        j = int(rng.integers(n - 1))
        j += j >= i
    return dataset[i], dataset[j], same


def _sample_key_stacks(rng: np.random.Generator, batch: int, d: int) -> list[torch.Tensor]:
    """Four ``(B, 14, d)`` key stacks (cor1, cor2, err1, err2) from distinct seeds."""
    stacks = [[] for _ in range(4)]
    for _ in range(batch):
        seeds: list[int] = []
        while len(seeds) < 4:
            s = int(rng.integers(0, 2 ** 63))
            if s not in seeds:
                seeds.append(s)
        for slot, seed in zip(stacks, seeds):
            krng = np.random.default_rng(seed)
            slot.append(np.concatenate([krng.standard_normal((r, d)) for r in LEVEL_ROWS]))
    return [torch.from_numpy(np.stack(s).astype(np.float32)) for s in stacks]


class Trainer:
    """Runs one stage (or the joint single-stage ablation) over ``dataset``.

    Generator and discriminator are updated in strict alternation: the
    discriminator is frozen during the generator update and vice versa.
    """

    def __init__(self, model: DBAF, dataset: torch.Tensor, config: TrainConfig, joint: bool = False,
                 discriminator: Discriminator | None = None):
        if dataset.dim() != 4 or len(dataset) == 0:
            raise ValidationError("dataset must be a non-empty (N, 3, H, W) tensor")
        self.model = model
        self.dataset = dataset
        self.config = config
        self.joint = joint
        self.extractors = L.default_extractors(config.extractor_seed)
        self.disc = discriminator or Discriminator(model.config.backbone.image_size, seed=config.seed + 7919)
        self.rng = np.random.default_rng(config.seed)
        if config.freeze_backbone and hasattr(model.backbone, "parameters"):
            model.backbone.requires_grad_(False)
        g_params = [p for p in self._generator_modules().parameters() if p.requires_grad]
        self.opt_g = make_optimizer(g_params, config)
        self.opt_d = make_optimizer(self.disc.parameters(), config)
        self.step_count = 0
        self.history: list[dict] = []
        self._log_fh = open(config.log_path, "a") if config.log_path else None

    def _generator_modules(self) -> torch.nn.Module:
        m = self.model
        parts = [m.backbone, m.cid, m.maar] if isinstance(m.backbone, torch.nn.Module) else [m.cid, m.maar]
        if self.config.stage == 2 or self.joint:
            parts.append(m.kria)
        return torch.nn.ModuleList(parts)

    # -- batches --
    def _pair_batch(self):
        xs_attr, xs_id, same = [], [], []
        for _ in range(self.config.batch_size):
            a, b, s = sample_pair(self.dataset, self.config.same_prob, self.rng)
            xs_attr.append(a)
            xs_id.append(b)
            same.append(s)
        return torch.stack(xs_attr), torch.stack(xs_id), torch.tensor(same, dtype=torch.float32)

    def _image_batch(self):
        idx = self.rng.integers(len(self.dataset), size=self.config.batch_size)
        return self.dataset[torch.from_numpy(idx)]

    # -- loss terms --
    def stage1_terms(self, x_attr, x_id, same):
        ex, cfg = self.extractors, self.config
        x_mix, codes = self.model.mix(x_attr, x_id)
        d_c = 1 - L.cosine(ex.identity(x_mix), ex.identity(x_attr))
        terms = {
            "ctr": L.contrastive_loss(d_c, same, cfg.tau_plus, cfg.tau_minus),
            "lpips": L.perceptual_loss(x_mix, x_attr, ex.perceptual),
            "rec": L.l1_loss(x_mix, x_attr),
            "parse": L.parsing_loss(x_mix, x_attr, ex.parsing),
            "reg": L.latent_regularization(codes),
            "adv": L.generator_adv_loss([x_mix], self.disc),
        }
        return terms, x_attr, [x_mix]

    def stage2_outputs(self, x, keys):
        """Build the five code sets and render them; returns (images, codes)."""
        m = self.model
        cor1, cor2, err1, err2 = keys
        ori, feats_ori = m.encode(x)
        enh_ori = m.maar(feats_ori)
        dec = m.backbone.decode
        # the recovery branches consume the re-encoded first anonymization
        ano1 = ori.attribute + keyed_transform(ori.identity, cor1, m.kria)
        ano2 = ori.attribute + keyed_transform(ori.identity, cor2, m.kria)
        x_ano1, x_ano2 = dec(ano1, enh_ori), dec(ano2, enh_ori)
        ano, feats_ano = m.encode(x_ano1)
        enh_ano = m.maar(feats_ano)
        codes = FiveWayCodes(
            ano1=ano1,
            ano2=ano2,
            rec=ano.attribute + keyed_transform(ano.identity, cor1, m.kria),
            err1=ano.attribute + keyed_transform(ano.identity, err1, m.kria),
            err2=ano.attribute + keyed_transform(ano.identity, err2, m.kria),
        )
        images = {
            "ano1": x_ano1,
            "ano2": x_ano2,
            "rec": dec(codes.rec, enh_ano),
            "err1": dec(codes.err1, enh_ano),
            "err2": dec(codes.err2, enh_ano),
        }
        return images, codes

    def stage2_terms(self, x, keys):
        ex = self.extractors
        images, codes = self.stage2_outputs(x, keys)
        names = list(images)
        s2 = [images[n] for n in names]
        b = len(x)
        e_all = ex.identity(torch.cat([x] + s2)).split(b)
        e_ori, emb = e_all[0], dict(zip(names, e_all[1:]))
        s1 = [emb[n] for n in ("ano1", "ano2", "err1", "err2")]
        p_all = ex.perceptual(torch.cat([x] + s2)).split(b)
        q_all = ex.parsing(torch.cat([x] + s2)).split(b)
        terms = {
            "dif": L.difference_from_embeddings(e_ori, s1),
            "rev": L.recovery_from_embeddings(e_ori, emb["rec"]),
            "div": L.diversity_from_embeddings(s1),
            "lpips": sum(L.l2_distance(p, p_all[0]) for p in p_all[1:]),
            "rec": sum(L.l1_loss(img, x) for img in s2),
            "parse": sum(L.l2_distance(q, q_all[0]) for q in q_all[1:]),
            "reg": sum(L.latent_regularization(c) for c in codes) / len(codes),
            "adv": L.generator_adv_loss(s2, self.disc),
        }
        return terms, x, s2

    # -- one alternating update --
    def _forward(self):
        cfg = self.config
        if self.joint:
            t1, r1, f1 = self.stage1_terms(*self._pair_batch())
            x = self._image_batch()
            keys = _sample_key_stacks(self.rng, len(x), self.model.d)
            t2, r2, f2 = self.stage2_terms(x, keys)
            rep1, rep2 = L.stage1_total(t1, cfg.weights), L.stage2_total(t2, cfg.weights)
            report = L.LossReport("joint", {**{f"s1_{k}": v for k, v in rep1.terms.items()},
                                            **{f"s2_{k}": v for k, v in rep2.terms.items()}},
                                  rep1.total + rep2.total)
            return report, [(r1, f1), (r2, f2)]
        if cfg.stage == 1:
            terms, real, fakes = self.stage1_terms(*self._pair_batch())
            return L.stage1_total(terms, cfg.weights), [(real, fakes)]
        x = self._image_batch()
        keys = _sample_key_stacks(self.rng, len(x), self.model.d)
        terms, real, fakes = self.stage2_terms(x, keys)
        return L.stage2_total(terms, cfg.weights), [(real, fakes)]

    def step(self) -> L.LossReport:
        cfg = self.config
        self.disc.requires_grad_(False)
        self.model.train()
        try:
            report, pairs = self._forward()
        except NumericError as exc:
            self._abort(None, reason=str(exc))

        if not torch.isfinite(report.total):
            self._abort(report)
        self.opt_g.zero_grad(set_to_none=True)
        report.total.backward()
        self.opt_g.step()

        self.disc.requires_grad_(True)
        self.opt_d.zero_grad(set_to_none=True)
        d_loss = sum(L.discriminator_loss(real, fakes, self.disc, cfg.r1_gamma) for real, fakes in pairs)
        if not torch.isfinite(d_loss):
            self._abort(report, d_loss)
        d_loss.backward()
        self.opt_d.step()

        self.step_count += 1
        record = report.as_record(self.step_count)
        record["disc"] = float(d_loss.detach())
        self.history.append(record)
        if self._log_fh:
            self._log_fh.write(json.dumps(record) + "\n")
            self._log_fh.flush()
        return report

    def _abort(self, report, d_loss=None, reason=None):
        dump = {"event": "nan_abort", "step": self.step_count + 1,
                "terms": {k: L._scalar(v) for k, v in report.terms.items()} if report is not None else {}}
        if reason is not None:
            dump["reason"] = reason
        if d_loss is not None:
            dump["disc"] = L._scalar(d_loss)
        if self._log_fh:
            self._log_fh.write(json.dumps(dump) + "\n")
            self._log_fh.flush()
        raise NumericError(f"non-finite loss, aborting: {dump}")

    def run(self, steps: int | None = None) -> list[dict]:
        steps = self.config.steps if steps is None else steps
        for _ in range(steps):
            self.step()
            if self.step_count % 50 == 0:
                log.info("step %d %s", self.step_count, self.history[-1]["total"])
        return self.history

    def close(self):
        if self._log_fh:
            self._log_fh.close()
            self._log_fh = None

    # -- checkpointing --
    def checkpoint(self) -> Checkpoint:
        return Checkpoint(
            model=self.model, discriminator=self.disc, train_config=self.config, step=self.step_count,
            optimizer_g=self.opt_g.state_dict(), optimizer_d=self.opt_d.state_dict(),
            rng_state=self.rng.bit_generator.state, history=list(self.history),
        )

    @classmethod
    def resume(cls, ckpt: Checkpoint, dataset: torch.Tensor, joint: bool = False) -> "Trainer":
        if ckpt.train_config is None:
            raise StateError("checkpoint carries no training configuration")
        trainer = cls(ckpt.model, dataset, ckpt.train_config, joint=joint, discriminator=ckpt.discriminator)
        if ckpt.optimizer_g is not None:
            trainer.opt_g.load_state_dict(ckpt.optimizer_g)
            trainer.opt_d.load_state_dict(ckpt.optimizer_d)
        if ckpt.rng_state is not None:
            trainer.rng.bit_generator.state = ckpt.rng_state
        trainer.step_count = ckpt.step
        trainer.history = list(ckpt.history)
        return trainer


def _stage_config(config: TrainConfig, stage: int) -> TrainConfig:
    data = config.to_dict()
    data["stage"] = stage
    return TrainConfig.from_dict(data)


def train_stage1(dataset: torch.Tensor, config: TrainConfig, model: DBAF | None = None) -> Checkpoint:
    if config.stage != 1:
        raise ValidationError("train_stage1 needs a stage-1 config")
    model = model or DBAF(ModelConfig(ablation=config.ablation, seed=config.seed))
    trainer = Trainer(model, dataset, config)
    try:
        trainer.run()
    finally:
        trainer.close()
    if trainer.step_count > 0:
        model.stage_completed.fill_(max(1, int(model.stage_completed)))
    return trainer.checkpoint()


def train_stage2(dataset: torch.Tensor, config: TrainConfig, stage1_ckpt: Checkpoint | None) -> Checkpoint:
    """Anonymization stage on top of a stage-1 checkpoint; the discriminator starts fresh."""
    if config.stage != 2:
        raise ValidationError("train_stage2 needs a stage-2 config")
    if stage1_ckpt is None:
        if config.ablation != "single_stage":
            raise StateError("stage 2 requires a stage-1 checkpoint")
        model = DBAF(ModelConfig(ablation=config.ablation, seed=config.seed))
    else:
        model = copy.deepcopy(stage1_ckpt.model)
    trainer = Trainer(model, dataset, config)
    try:
        trainer.run()
    finally:
        trainer.close()
    if trainer.step_count > 0:
        model.stage_completed.fill_(2)
    return trainer.checkpoint()


def train_joint(dataset: torch.Tensor, config: TrainConfig) -> Checkpoint:
    """Single-stage ablation: disentanglement and anonymization losses in one pass."""
    model = DBAF(ModelConfig(ablation="single_stage", seed=config.seed))
    trainer = Trainer(model, dataset, _stage_config(config, 2), joint=True)
    try:
        trainer.run()
    finally:
        trainer.close()
    if trainer.step_count > 0:
        model.stage_completed.fill_(2)
    return trainer.checkpoint()


def run_ablation(mode: str, dataset: torch.Tensor, config: TrainConfig) -> Checkpoint:
    """Train one configuration; ``config.steps`` is the budget per stage."""
    if mode not in ABLATIONS:
        raise ValidationError(f"unknown ablation mode {mode!r}; expected one of {ABLATIONS}")
    data = config.to_dict()
    data["ablation"] = mode
    if mode == "single_stage":
        return train_joint(dataset, TrainConfig.from_dict(data))
    s1 = train_stage1(dataset, TrainConfig.from_dict({**data, "stage": 1}))
    return train_stage2(dataset, TrainConfig.from_dict({**data, "stage": 2}), s1)
