"""Training, purification and the ablation harness.

Training runs in three phases: the classifier, then the TopoAE on clean
images, then the reformer VAE and auxiliary module on TopoAE outputs
with the classifier and TopoAE frozen. The reformer phase uses the
freeze-flow schedule: for the first ``warmup_epochs`` the VAE encoder is
frozen, so the auxiliary module and the decoder take all the updates.
"""
from __future__ import annotations

import csv
import io
import json
import time
from dataclasses import dataclass, field
from typing import Callable

import numpy as np

from . import autodiff as ad
from .attacks import AttackConfig, TargetFn, attack_success_rate, run_attack
from .dataio import BatchPlan, Dataset, batch_indices, batches
from .errors import (
    EmptyDataset,
    FrozenDependencyMissing,
    MissingModel,
    StageMissing,
)
from .metrics import evaluate
from .models import (
    AuxArch,
    AuxModule,
    Classifier,
    ClassifierArch,
    ConvAEArch,
    Network,
    ReformerVAE,
    TopoAE,
    load_weights,
    prefixed,
    reformer_forward,
    reformer_loss,
    save_weights,
    topoae_loss,
    unprefixed,
)

STAGES = ("No Defense", "+ TopoAE", "+ Reformer", "+ Aux", "+ Warmup")


@dataclass(frozen=True)
class PipelineConfig:
    lam_topo: float = 1.0
    lam1: float = 1.0
    lam2: float = 0.5
    lam3: float = 0.5
    warmup_epochs: int = 3
    warmup_freeze: str = "encoder"  # or "encoder+decoder"
    classifier_epochs: int = 10
    topoae_epochs: int = 20
    reformer_epochs: int = 10
    batch_size: int = 128
    lr: float = 1e-3
    seed: int = 0
    d_topo: int = 16
    d_vae: int = 16
    d_aux: int = 8
    mse_target: str = "purified"  # or "original"
    inference_noise: str = "zero"  # or "sample"
    clf_conv1: int = 32
    clf_conv2: int = 64
    clf_hidden: int = 200
    ae_conv1: int = 16
    ae_conv2: int = 32
    aux_hidden: int = 64

    def __post_init__(self):
        if not 0 <= self.warmup_epochs <= self.reformer_epochs:
            raise ValueError("warmup_epochs must lie in [0, reformer_epochs]")
        if min(self.lam_topo, self.lam1, self.lam2, self.lam3) < 0:
            raise ValueError("loss weights must be non-negative")
        if self.batch_size < 2:
            raise ValueError("batch_size must be at least 2")
        if self.mse_target not in ("purified", "original"):
            raise ValueError(f"mse_target must be 'purified' or 'original', got {self.mse_target!r}")
        if self.inference_noise not in ("zero", "sample"):
            raise ValueError(f"inference_noise must be 'zero' or 'sample', got {self.inference_noise!r}")
        if self.warmup_freeze not in ("encoder", "encoder+decoder"):
            raise ValueError(f"bad warmup_freeze {self.warmup_freeze!r}")

    def classifier_arch(self, num_classes: int) -> ClassifierArch:
        return ClassifierArch(self.clf_conv1, self.clf_conv2, self.clf_hidden, num_classes)

    def ae_arch(self, latent_dim: int) -> ConvAEArch:
        return ConvAEArch(self.ae_conv1, self.ae_conv2, latent_dim)


# ------------------------------------------------------------------ history


@dataclass
class EpochRecord:
    epoch: int
    phase: str
    total: float
    components: dict[str, float]
    weights: dict[str, float]
    wall_time: float = 0.0


@dataclass
class TrainHistory:
    records: list[EpochRecord] = field(default_factory=list)

    def __len__(self) -> int:
        return len(self.records)

    def to_csv(self) -> str:
        """Epoch rows without wall time, so reruns are byte-identical."""
        names = sorted({k for r in self.records for k in r.components})
        buf = io.StringIO()
        writer = csv.writer(buf, lineterminator="\n")
        writer.writerow(["epoch", "phase", "total", *names])
        for r in self.records:
            writer.writerow([r.epoch, r.phase, repr(float(r.total)), *(repr(float(r.components.get(n, 0.0))) for n in names)])
        return buf.getvalue()

    def timings(self) -> str:
        return "".join(f"{r.phase} epoch {r.epoch}: {r.wall_time:.2f}s\n" for r in self.records)


class _EpochMeter:
    def __init__(self, epoch, phase, weights):
        self.epoch, self.phase, self.weights = epoch, phase, weights
        self.sums: dict[str, float] = {}
        self.total = 0.0
        self.count = 0
        self.start = time.perf_counter()

    def add(self, total: float, parts: dict[str, float]):
        self.total += total
        for k, v in parts.items():
            self.sums[k] = self.sums.get(k, 0.0) + v
        self.count += 1

    def record(self) -> EpochRecord:
        n = max(self.count, 1)
        comps = {k: v / n for k, v in self.sums.items()}
        # recompose from component means so weighted parts sum to the total exactly
        total = sum(self.weights[k] * comps[k] for k in comps)
        return EpochRecord(self.epoch, self.phase, total, comps, dict(self.weights),
                           time.perf_counter() - self.start)


def _round_to_storage(*nets: Network) -> None:
    """Snap parameters to float32 so in-memory and reloaded models agree."""
    for net in nets:
        for k, v in net.params.items():
            net.params[k] = v.astype(np.float32).astype(np.float64)


def _require_data(data: Dataset, cfg: PipelineConfig) -> None:
    if len(data) == 0:
        raise EmptyDataset("training set is empty")
    if len(data) < 2:
        raise EmptyDataset("need at least two training samples to form a batch")


_PHASE_STREAM = {"classifier": 11, "topoae": 22, "reformer": 33}


def batch_plan(cfg: PipelineConfig, phase: str) -> BatchPlan:
    """Each training phase shuffles with its own stream derived from the seed."""
    return BatchPlan(cfg.seed * 7919 + _PHASE_STREAM[phase], cfg.batch_size)


def _step(net_params: dict[str, np.ndarray], grads: dict[str, np.ndarray], state, cfg):
    ad.adam_step(net_params, grads, state, lr=cfg.lr)


# ---------------------------------------------------------- training phases


StepHook = Callable[[int, int, float, tuple], None]


def train_classifier(data: Dataset, cfg: PipelineConfig, epochs: int | None = None,
                     on_step: StepHook | None = None):
    """Cross-entropy training with Adam; the returned model is frozen.

    ``on_step(epoch, step, batch_loss, (model,))`` runs after every update.
    """
    _require_data(data, cfg)
    model = Classifier(cfg.classifier_arch(data.num_classes), seed=cfg.seed)
    plan = batch_plan(cfg, "classifier")
    state = ad.AdamState()
    history = TrainHistory()
    for epoch in range(cfg.classifier_epochs if epochs is None else epochs):
        meter = _EpochMeter(epoch + 1, "classifier", {"ce": 1.0})
        for b, (xb, yb) in enumerate(batches(data, plan, epoch)):
            with ad.Tape() as tape:
                bound = model.bind(tape)
                loss = ad.softmax_cross_entropy(model.forward(xb, bound), yb)
            _step(model.params, model.grads(tape, loss, bound), state, cfg)
            meter.add(float(loss.data), {"ce": float(loss.data)})
            if on_step is not None:
                on_step(epoch, b, float(loss.data), (model,))
        history.records.append(meter.record())
    _round_to_storage(model)
    model.freeze()
    return model, history


def train_topoae(data: Dataset, cfg: PipelineConfig, epochs: int | None = None,
                 on_step: StepHook | None = None):
    """Reconstruction plus topological loss on clean images; frozen on return."""
    _require_data(data, cfg)
    model = TopoAE(cfg.ae_arch(cfg.d_topo), seed=cfg.seed, lam=cfg.lam_topo)
    plan = batch_plan(cfg, "topoae")
    state = ad.AdamState()
    history = TrainHistory()
    for epoch in range(cfg.topoae_epochs if epochs is None else epochs):
        meter = _EpochMeter(epoch + 1, "topoae", {"rec": 1.0, "topo": cfg.lam_topo})
        for b, (xb, _) in enumerate(batches(data, plan, epoch)):
            with ad.Tape() as tape:
                bound = model.bind(tape)
                z, x_hat = model.forward(xb, bound, training=True)
                loss, parts = topoae_loss(xb, x_hat, z, cfg.lam_topo)
            _step(model.params, model.grads(tape, loss, bound), state, cfg)
            meter.add(float(loss.data), parts)
            if on_step is not None:
                on_step(epoch, b, float(loss.data), (model,))
        history.records.append(meter.record())
    _round_to_storage(model)
    model.freeze()
    return model, history


def _topoae_outputs(topoae: TopoAE, images: np.ndarray, chunk: int = 256):
    parts = [topoae.forward(images[s:s + chunk]) for s in range(0, len(images), chunk)]
    return (np.concatenate([z.data for z, _ in parts]),
            np.concatenate([x.data for _, x in parts]))


def train_reformer_freezeflow(data: Dataset, topoae: TopoAE, classifier: Classifier,
                              cfg: PipelineConfig, use_aux: bool = True,
                              warmup_epochs: int | None = None, epochs: int | None = None,
                              on_step: StepHook | None = None):
    """Train the reformer VAE (and auxiliary module) under freeze-flow.

    Epochs ``1..W`` are warmup: the VAE encoder (and decoder too with
    ``warmup_freeze="encoder+decoder"``) receives no updates. Afterwards
    every reformer parameter trains jointly. Returns ``(vae, aux, history)``
    with ``aux=None`` when ``use_aux`` is false.
    """
    _require_data(data, cfg)
    if not (topoae.frozen and classifier.frozen):
        raise FrozenDependencyMissing("TopoAE and classifier must be frozen before reformer training")
    total_epochs = cfg.reformer_epochs if epochs is None else epochs
    warm = cfg.warmup_epochs if warmup_epochs is None else warmup_epochs
    warm = warm if use_aux else 0
    vae = ReformerVAE(cfg.ae_arch(cfg.d_vae), aux_dim=cfg.d_aux, seed=cfg.seed)
    aux = AuxModule(AuxArch(cfg.d_topo, cfg.aux_hidden, cfg.d_aux), seed=cfg.seed) if use_aux else None
    plan = batch_plan(cfg, "reformer")
    state = ad.AdamState()
    history = TrainHistory()
    weights = {"mse": cfg.lam1, "ce": cfg.lam2, "kl": cfg.lam3}
    # the TopoAE is frozen, so its outputs are computed once for every epoch
    z_all, pure_all = _topoae_outputs(topoae, data.images)
    frozen_in_warmup = ("enc",) if cfg.warmup_freeze == "encoder" else ("enc", "dec")
    for epoch in range(total_epochs):
        warmup = epoch < warm
        vae.unfreeze()
        if warmup:
            vae.freeze(*frozen_in_warmup)
        meter = _EpochMeter(epoch + 1, "reformer-warmup" if warmup else "reformer", weights)
        for b, idx in enumerate(batch_indices(len(data), plan, epoch)):
            xb, yb = data.images[idx], data.labels[idx]
            z, x_pure = z_all[idx], pure_all[idx]
            noise = np.random.default_rng([cfg.seed, 77, epoch, b]).standard_normal((len(xb), cfg.d_vae))
            target = xb if cfg.mse_target == "original" else x_pure
            with ad.Tape() as tape:
                vb = vae.bind(tape)
                abd = aux.bind(tape) if aux is not None else None
                x_ref, mu, logvar = reformer_forward(vae, aux, x_pure, z, noise, vb, abd)
                logits = classifier.forward(x_ref)
                loss, parts = reformer_loss(x_ref, target, logits, yb, mu, logvar,
                                            cfg.lam1, cfg.lam2, cfg.lam3)
            grads = prefixed("vae", {k: g for k, g in vae.grads(tape, loss, vb).items()
                                     if k in vae.trainable_names()})
            if aux is not None:
                grads.update(prefixed("aux", aux.grads(tape, loss, abd)))
            params = {**prefixed("vae", vae.params), **(prefixed("aux", aux.params) if aux else {})}
            _step(params, grads, state, cfg)
            meter.add(float(loss.data), parts)
            if on_step is not None:
                on_step(epoch, b, float(loss.data), (vae, aux))
        history.records.append(meter.record())
    vae.freeze()
    nets = (vae, aux) if aux is not None else (vae,)
    _round_to_storage(*nets)
    if aux is not None:
        aux.freeze()
    return vae, aux, history


# ----------------------------------------------------------- purification


@dataclass
class Purifier:
    """TopoAE reconstruction, optionally followed by the reformer VAE.

    With ``vae=None`` the output is the TopoAE reconstruction. With a VAE
    and ``aux=None`` the decoder gets a zero auxiliary vector.
    """

    topoae: TopoAE
    vae: ReformerVAE | None = None
    aux: AuxModule | None = None

    @property
    def noise_dim(self) -> int:
        return self.vae.arch.latent_dim if self.vae is not None else 0

    def __call__(self, x, noise=None):
        z, x_pure = self.topoae.forward(x)
        if self.vae is None:
            return x_pure
        if noise is None:
            noise = np.zeros((x_pure.shape[0], self.noise_dim))
        x_ref, _, _ = reformer_forward(self.vae, self.aux, x_pure, z, noise)
        return x_ref


def purify(x, topoae: TopoAE, vae: ReformerVAE | None, aux: AuxModule | None,
           mode: str = "zero", seed: int = 0) -> np.ndarray:
    """Purified images; ``mode="sample"`` draws seeded reparameterisation noise."""
    for m in (topoae, vae, aux):
        if m is not None and not m.frozen:
            raise FrozenDependencyMissing("purify expects frozen models")
    pur = Purifier(topoae, vae, aux)
    x = np.asarray(x, dtype=np.float64)
    noise = None
    if mode == "sample" and pur.noise_dim:
        noise = np.random.default_rng([seed, 99]).standard_normal((len(x), pur.noise_dim))
    elif mode not in ("zero", "sample"):
        raise ValueError(f"unknown purify mode {mode!r}")
    return pur(x, noise).data


@dataclass
class ModelBundle:
    """Trained models for every ablation stage.

    ``vae_plain`` is the reformer trained with a zero auxiliary vector;
    ``vae_aux``/``aux_joint`` are trained without warmup and
    ``vae_warm``/``aux_warm`` with it.
    """

    classifier: Classifier | None = None
    topoae: TopoAE | None = None
    vae_plain: ReformerVAE | None = None
    vae_aux: ReformerVAE | None = None
    aux_joint: AuxModule | None = None
    vae_warm: ReformerVAE | None = None
    aux_warm: AuxModule | None = None

    def stage_purifier(self, stage: str) -> Purifier | None:
        if stage not in STAGES:
            raise StageMissing(stage)
        if self.classifier is None:
            raise StageMissing(f"{stage}: classifier not trained")
        if stage == "No Defense":
            return None
        needed = {
            "+ TopoAE": (self.topoae,),
            "+ Reformer": (self.topoae, self.vae_plain),
            "+ Aux": (self.topoae, self.vae_aux, self.aux_joint),
            "+ Warmup": (self.topoae, self.vae_warm, self.aux_warm),
        }[stage]
        if any(m is None for m in needed):
            raise StageMissing(f"{stage}: required models are not trained")
        if stage == "+ TopoAE":
            return Purifier(self.topoae)
        if stage == "+ Reformer":
            return Purifier(self.topoae, self.vae_plain)
        return Purifier(self.topoae, needed[1], needed[2])

    def target(self, stage: str = "+ Warmup", inference_noise: str = "zero") -> TargetFn:
        pur = self.stage_purifier(stage)
        return TargetFn(self.classifier, pur, pur.noise_dim if pur else 0,
                        sample_noise=inference_noise == "sample")

    def available_stages(self) -> list[str]:
        out = []
        for s in STAGES:
            try:
                self.stage_purifier(s)
            except StageMissing:
                continue
            out.append(s)
        return out

    _PARTS = ("classifier", "topoae", "vae_plain", "vae_aux", "aux_joint", "vae_warm", "aux_warm")

    def save(self, path) -> None:
        save_weights(path, self.tensors())

    def tensors(self) -> dict[str, np.ndarray]:
        out = {}
        for name in self._PARTS:
            net = getattr(self, name)
            if net is not None:
                out.update(prefixed(name, net.params))
        return out

    @classmethod
    def load(cls, path, cfg: PipelineConfig, num_classes: int) -> ModelBundle:
        return cls.from_tensors(load_weights(path), cfg, num_classes)

    @classmethod
    def from_tensors(cls, tensors: dict[str, np.ndarray], cfg: PipelineConfig,
                     num_classes: int) -> ModelBundle:
        """Rebuild every part whose ``<part>/`` prefix appears; all parts come back frozen."""
        builders = {
            "classifier": lambda: Classifier(cfg.classifier_arch(num_classes)),
            "topoae": lambda: TopoAE(cfg.ae_arch(cfg.d_topo), lam=cfg.lam_topo),
            "vae_plain": lambda: ReformerVAE(cfg.ae_arch(cfg.d_vae), cfg.d_aux),
            "vae_aux": lambda: ReformerVAE(cfg.ae_arch(cfg.d_vae), cfg.d_aux),
            "vae_warm": lambda: ReformerVAE(cfg.ae_arch(cfg.d_vae), cfg.d_aux),
            "aux_joint": lambda: AuxModule(AuxArch(cfg.d_topo, cfg.aux_hidden, cfg.d_aux)),
            "aux_warm": lambda: AuxModule(AuxArch(cfg.d_topo, cfg.aux_hidden, cfg.d_aux)),
        }
        bundle = cls()
        for name in cls._PARTS:
            part = unprefixed(name, tensors)
            if not part:
                continue
            net = builders[name]()
            net.load_state(part)
            net.freeze()
            setattr(bundle, name, net)
        return bundle


def predict(x, bundle: ModelBundle, stage: str = "+ Warmup", inference_noise: str = "zero") -> np.ndarray:
    """Argmax of classifier(purify(x)); ties resolve to the lowest class."""
    if bundle.classifier is None:
        raise MissingModel("bundle has no classifier")
    try:
        target = bundle.target(stage, inference_noise)
    except StageMissing as exc:
        raise MissingModel(str(exc)) from None
    return target.predict(x)


def train_all(data: Dataset, cfg: PipelineConfig, log=None) -> tuple[ModelBundle, dict[str, TrainHistory]]:
    """Train every model needed by the five ablation stages."""
    say = log or (lambda msg: None)
    histories = {}
    clf, histories["classifier"] = train_classifier(data, cfg)
    say("classifier trained")
    topo, histories["topoae"] = train_topoae(data, cfg)
    say("topoae trained")
    vae_plain, _, histories["reformer_plain"] = train_reformer_freezeflow(data, topo, clf, cfg, use_aux=False)
    say("reformer (no aux) trained")
    vae_aux, aux_joint, histories["reformer_aux"] = train_reformer_freezeflow(
        data, topo, clf, cfg, warmup_epochs=0)
    say("reformer + aux trained")
    vae_warm, aux_warm, histories["reformer_warmup"] = train_reformer_freezeflow(data, topo, clf, cfg)
    say("reformer + aux + warmup trained")
    bundle = ModelBundle(clf, topo, vae_plain, vae_aux, aux_joint, vae_warm, aux_warm)
    return bundle, histories


# ------------------------------------------------------------- evaluation


def evaluate_attack(target: TargetFn, data: Dataset, attack: AttackConfig, average: str = "macro",
                    clean_pred: np.ndarray | None = None, x_adv: np.ndarray | None = None) -> dict:
    """Craft ``attack`` and score the adversarial set on ``target``.

    With ``craft_on="classifier"`` the examples are crafted on the bare
    classifier (an attacker unaware of the defense); pass ``x_adv`` to reuse
    such a set across stages.
    """
    x, y = data.images, data.labels
    if clean_pred is None:
        clean_pred = target.predict(x)
    if x_adv is None:
        x_adv = craft(target, data, attack)
    adv_pred = target.predict(x_adv)
    scores = evaluate(y, adv_pred, data.num_classes, average)
    return {
        "kind": attack.kind,
        "params": attack.params(),
        "accuracy": scores.accuracy,
        "f1_macro": scores.f1_macro,
        "precision_macro": scores.precision_macro,
        "asr": attack_success_rate(clean_pred, adv_pred, y),
    }


def craft(target: TargetFn, data: Dataset, attack: AttackConfig) -> np.ndarray:
    """Adversarial images for ``data`` under ``attack.craft_on``."""
    if attack.craft_on == "classifier":
        target = TargetFn(target.classifier)
    return run_attack(target, data.images, data.labels, attack)[0]


def ablation_run(data: Dataset, attacks: list[AttackConfig], bundle: ModelBundle, cfg: PipelineConfig,
                 dataset_name: str = "mnist", stages=STAGES, average: str = "macro") -> dict:
    """Evaluate every (stage, attack) pair.

    Attacks with ``craft_on="target"`` are crafted white-box per stage;
    classifier-crafted sets are built once and shared by all stages.
    """
    report = {"dataset": dataset_name, "seed": cfg.seed, "stages": []}
    shared: dict[int, np.ndarray] = {}
    for stage in stages:
        target = bundle.target(stage, cfg.inference_noise)
        clean_pred = target.predict(data.images)
        rows = []
        for i, a in enumerate(attacks):
            if a.craft_on == "classifier" and i not in shared:
                shared[i] = craft(target, data, a)
            rows.append(evaluate_attack(target, data, a, average, clean_pred, shared.get(i)))
        report["stages"].append({"name": stage, "attacks": rows})
    return report


REPORT_COLUMNS = ("stage", "kind", "params", "accuracy", "f1_macro", "precision_macro", "asr")


def report_json(report: dict) -> str:
    return json.dumps(report, indent=2) + "\n"


def report_csv(report: dict) -> str:
    buf = io.StringIO()
    writer = csv.writer(buf, lineterminator="\n")
    writer.writerow(REPORT_COLUMNS)
    for stage in report["stages"]:
        for row in stage["attacks"]:
            writer.writerow([stage["name"], row["kind"], json.dumps(row["params"], sort_keys=True),
                             repr(float(row["accuracy"])), repr(float(row["f1_macro"])),
                             repr(float(row["precision_macro"])), repr(float(row["asr"]))])
    return buf.getvalue()
