"""Mean-teacher semi-supervised training with evidential fusion and prototypes."""

from __future__ import annotations

import json
import math
import os
import time
from dataclasses import asdict, dataclass, field, fields, replace

import numpy as np

from . import evidence as ev
from . import model as M
from . import tensor as T
from .errors import NumericError
from .losses import LossReport, gedl_loss, proto_ce_loss, seg_loss, total_loss
from .metrics import aggregate, evaluate
from .prototype import PrototypeSet, dump_prototypes, fuse_prototypes, pool_prototypes, similarity_probs
from .synth import Dataset, resplit
from .uncertainty import dual_uncertainty, normalize01, reliability_map


class ConfigError(KeyError):
    def __str__(self):
        return str(self.args[0]) if self.args else ""


@dataclass
class TrainConfig:
    iterations: int = 2000
    labeled_per_batch: int = 1
    unlabeled_per_batch: int = 2
    labeled_ratio: float | None = None
    lr: float = 1e-3
    adam_beta1: float = 0.9
    adam_beta2: float = 0.999
    adam_eps: float = 1e-8
    ema_decay: float = 0.99
    lambda_max: float = 1.0
    gamma_max: float = 0.5
    temperature: float = 0.1
    seed: int = 0
    dtype: str = "float32"
    checkpoint_every: int = 500
    # random cubic training crop (None = whole volumes); evaluation always sees whole volumes
    crop: int | None = None
    # std of clipped Gaussian noise added independently to the student and teacher views of unlabeled images
    unlabeled_noise: float = 0.0
    # ablation toggles
    use_mt: bool = True
    fuse_heads_mode: str = "dempster"
    use_prototypes: bool = True
    use_lrm: bool = True
    use_urm: bool = True
    use_gedl_labeled: bool = True
    use_gedl_unlabeled: bool = True
    # open-question switches
    fuse_student_heads: bool = True
    normalize_universal: bool = True
    gedl_literal: bool = False
    norm_scope: str = "volume"
    seg_source: str = "fused"
    eval_model: str = "student"
    model: M.NetConfig = field(default_factory=M.NetConfig)

    def __post_init__(self):
        if isinstance(self.model, dict):
            self.model = M.NetConfig(**self.model)
        if self.iterations < 0 or self.labeled_per_batch < 1 or self.unlabeled_per_batch < 0:
            raise ValueError("iterations and batch sizes must be non-negative (labeled >= 1)")
        if self.lr <= 0 or self.temperature <= 0 or self.lambda_max < 0:
            raise ValueError("rates must be positive")
        if not 0.0 <= self.ema_decay <= 1.0 or not 0.0 <= self.gamma_max <= 1.0:
            raise ValueError("ema_decay and gamma_max must lie in [0, 1]")
        if self.fuse_heads_mode not in ("average", "dempster"):
            raise ValueError("fuse_heads_mode must be 'average' or 'dempster'")
        if self.seg_source not in ("fused", "head0"):
            raise ValueError("seg_source must be 'fused' or 'head0'")
        if self.eval_model not in ("student", "teacher"):
            raise ValueError("eval_model must be 'student' or 'teacher'")
        if self.norm_scope not in ("volume", "batch"):
            raise ValueError("norm_scope must be 'volume' or 'batch'")
        if self.dtype not in ("float32", "float64"):
            raise ValueError("dtype must be float32 or float64")
        if self.unlabeled_noise < 0:
            raise ValueError("unlabeled_noise must be non-negative")
        if self.crop is not None and (self.crop < 1 or self.crop % 2 ** (self.model.depth - 1)):
            raise ValueError(f"crop must be a positive multiple of {2 ** (self.model.depth - 1)}")

    def to_dict(self) -> dict:
        return asdict(self)

    @classmethod
    def from_dict(cls, d: dict, strict: bool = True) -> "TrainConfig":
        """Build from a JSON object; in strict mode every key must be present."""
        names = [f.name for f in fields(cls)]
        unknown = sorted(set(d) - set(names))
        if unknown:
            raise ConfigError(f"unknown config key: {unknown[0]}")
        if strict:
            for name in names:
                if name not in d:
                    raise ConfigError(f"missing config key: {name}")
            model_keys = [f.name for f in fields(M.NetConfig)]
            for name in model_keys:
                if name not in d["model"]:
                    raise ConfigError(f"missing config key: model.{name}")
        model_d = dict(d.get("model", {}))
        extra = sorted(set(model_d) - {f.name for f in fields(M.NetConfig)})
        if extra:
            raise ConfigError(f"unknown config key: model.{extra[0]}")
        return cls(**{**d, "model": M.NetConfig(**model_d)})


def supervised_config(base: TrainConfig) -> TrainConfig:
    """Labeled-only training on the segmentation loss: every EPL component off."""
    return replace(base, use_mt=False, fuse_heads_mode="average", use_prototypes=False, use_lrm=False,
                   use_urm=False, use_gedl_labeled=False, use_gedl_unlabeled=False,
                   model=replace(base.model, num_heads=1))


def ablation_configs(base: TrainConfig) -> dict:
    """Cumulative component rows: MT, +AMC, +PL, +EFMC, +LRM, +URM, +LEDL, EPL."""
    heads = max(base.model.num_heads, 2)
    off = dict(use_mt=True, fuse_heads_mode="average", use_prototypes=False, use_lrm=False, use_urm=False,
               use_gedl_labeled=False, use_gedl_unlabeled=False)
    rows = {"MT": replace(base, **off, model=replace(base.model, num_heads=1))}
    steps = [("+AMC", {}), ("+PL", {"use_prototypes": True}), ("+EFMC", {"fuse_heads_mode": "dempster"}),
             ("+LRM", {"use_lrm": True}), ("+URM", {"use_urm": True}), ("+LEDL", {"use_gedl_labeled": True}),
             ("EPL", {"use_gedl_unlabeled": True})]
    cur = dict(off)
    for name, change in steps:
        cur.update(change)
        rows[name] = replace(base, **cur, model=replace(base.model, num_heads=heads))
    return rows


def lambda_con(t: float, total: float, lambda_max: float) -> float:
    """Gaussian warm-up ``lambda_max * exp(-5 (1 - t/T)^2)``."""
    if total <= 0:
        return float(lambda_max)
    return lambda_max * math.exp(-5.0 * (1.0 - t / total) ** 2)


def gamma_schedule(t: float, total: float, gamma_max: float) -> float:
    return lambda_con(t, total, gamma_max)


class Adam:
    def __init__(self, params: dict, lr: float = 1e-3, beta1: float = 0.9, beta2: float = 0.999, eps: float = 1e-8):
        self.params = params
        self.lr, self.beta1, self.beta2, self.eps = lr, beta1, beta2, eps
        self.t = 0
        self.m = {k: np.zeros_like(p.data) for k, p in params.items()}
        self.v = {k: np.zeros_like(p.data) for k, p in params.items()}

    def zero_grad(self) -> None:
        for p in self.params.values():
            p.grad = None

    def step(self) -> None:
        self.t += 1
        c1 = 1.0 - self.beta1 ** self.t
        c2 = 1.0 - self.beta2 ** self.t
        for k, p in self.params.items():
            g = p.grad
            if g is None:
                continue
            self.m[k] = self.beta1 * self.m[k] + (1.0 - self.beta1) * g
            self.v[k] = self.beta2 * self.v[k] + (1.0 - self.beta2) * g * g
            update = (self.m[k] / c1) / (np.sqrt(self.v[k] / c2) + self.eps)
            p.data = (p.data - self.lr * update).astype(p.data.dtype, copy=False)


@dataclass
class StepTargets:
    """Detached per-step quantities: weights, pseudo-labels, teacher prototypes."""
    u_bar_l: np.ndarray
    beta_l: np.ndarray
    u_bar_u: np.ndarray | None = None
    beta_u: np.ndarray | None = None
    pseudo: np.ndarray | None = None
    proto_u: PrototypeSet | None = None


@dataclass
class StepOutput:
    total: T.Tensor
    report: LossReport
    targets: StepTargets
    prototypes: PrototypeSet | None
    gamma: float


def _head_masses(evidence, lo, hi):
    return [ev.mass_from_evidence(e[lo:hi]) for e in evidence]


def _fuse(masses, cfg: TrainConfig) -> ev.MassField:
    return ev.fuse(masses, cfg.fuse_heads_mode, cfg.normalize_universal)


def teacher_targets(teacher: dict, cfg: TrainConfig, unl_img: np.ndarray):
    """Fused teacher mass, pseudo-labels, normalized uncertainty and hidden features."""
    with T.no_grad():
        out = M.forward(teacher, cfg.model, unl_img)
        m_t = _fuse(_head_masses(out.evidence, 0, unl_img.shape[0]), cfg)
        u_bar = normalize01(dual_uncertainty(m_t), cfg.norm_scope)
    return m_t, ev.pseudo_labels(m_t), u_bar, out.hidden


def step_objective(params: dict, cfg: TrainConfig, lab_img, lab_lbl, unl_img=None, teacher=None,
                   t: int = 0, targets: StepTargets | None = None, teacher_img=None) -> StepOutput:
    """Total loss of one training step as a function of the student parameters.

    ``targets`` carries everything that is treated as a constant during the
    step; pass the targets of a previous call to re-evaluate the objective with
    them frozen (used by finite-difference checks). ``teacher_img`` is the
    teacher's view of the unlabeled batch (defaults to ``unl_img``).
    """
    n = cfg.model.num_classes
    use_unl = cfg.use_mt and unl_img is not None and len(unl_img) > 0
    n_lab = lab_img.shape[0]
    x = np.concatenate([lab_img, unl_img]) if use_unl else lab_img
    out = M.forward(params, cfg.model, x)
    heads_l = _head_masses(out.evidence, 0, n_lab)
    m_l = _fuse(heads_l, cfg) if cfg.fuse_student_heads else heads_l[0]
    d_l = ev.dirichlet_from_mass(m_l)
    seg_dir = d_l if cfg.seg_source == "fused" else ev.dirichlet_from_mass(heads_l[0])
    seg = seg_loss(ev.expected_probs(seg_dir), lab_lbl)

    if targets is None:
        with T.no_grad():
            u_bar_l = normalize01(dual_uncertainty(m_l.detach()), cfg.norm_scope)
        beta_l = reliability_map(u_bar_l) if cfg.use_lrm else np.ones_like(u_bar_l)
        targets = StepTargets(u_bar_l=u_bar_l, beta_l=beta_l)
        if use_unl:
            t_img = unl_img if teacher_img is None else teacher_img
            _, pseudo, u_bar_u, hidden_t = teacher_targets(teacher, cfg, t_img)
            targets.u_bar_u, targets.pseudo = u_bar_u, pseudo
            targets.beta_u = reliability_map(u_bar_u) if cfg.use_urm else np.ones_like(u_bar_u)
            if cfg.use_prototypes:
                targets.proto_u = pool_prototypes(hidden_t, targets.beta_u, pseudo, n, source="unlabeled")

    zero = 0.0
    gedl_l = gedl_loss(d_l, lab_lbl, targets.u_bar_l, cfg.gedl_literal) if cfg.use_gedl_labeled else zero
    gedl_u = pce_l = pce_u = zero
    protos = None
    gamma = gamma_schedule(t, cfg.iterations, cfg.gamma_max)
    lam = lambda_con(t, cfg.iterations, cfg.lambda_max)

    if cfg.use_prototypes:
        h_l = out.hidden[:n_lab]
        p_l = pool_prototypes(h_l, targets.beta_l, lab_lbl, n, source="labeled")
        protos = fuse_prototypes(p_l, targets.proto_u, gamma) if use_unl else p_l
        pce_l = proto_ce_loss(similarity_probs(h_l, protos, cfg.temperature), lab_lbl, targets.beta_l)
        if use_unl:
            s_u = similarity_probs(out.hidden[n_lab:], protos, cfg.temperature)
            pce_u = proto_ce_loss(s_u, targets.pseudo, targets.beta_u)

    if use_unl and cfg.use_gedl_unlabeled:
        heads_u = _head_masses(out.evidence, n_lab, x.shape[0])
        m_su = _fuse(heads_u, cfg) if cfg.fuse_student_heads else heads_u[0]
        gedl_u = gedl_loss(ev.dirichlet_from_mass(m_su), targets.pseudo, targets.u_bar_u, cfg.gedl_literal)

    total, report = total_loss(seg, gedl_l, gedl_u, pce_l, pce_u, lam)
    return StepOutput(total=total, report=report, targets=targets, prototypes=protos, gamma=gamma)


@dataclass
class TrainState:
    step: int
    student: dict
    teacher: dict | None
    optimizer: Adam
    rng_labeled: np.random.Generator
    rng_unlabeled: np.random.Generator
    rng_aug: np.random.Generator
    reports: list = field(default_factory=list)
    last_prototypes: PrototypeSet | None = None
    last_gamma: float = 0.0


def _rng_streams(seed: int):
    # spawn keys are positional, so adding streams at the end leaves the others unchanged
    return tuple(np.random.default_rng(s) for s in np.random.SeedSequence(seed).spawn(4))


def init_state(cfg: TrainConfig) -> TrainState:
    rng_init, rng_l, rng_u, rng_aug = _rng_streams(cfg.seed)
    student = M.init_params(cfg.model, rng_init)
    teacher = M.clone_params(student) if cfg.use_mt else None
    opt = Adam(student, cfg.lr, cfg.adam_beta1, cfg.adam_beta2, cfg.adam_eps)
    return TrainState(step=0, student=student, teacher=teacher, optimizer=opt, rng_labeled=rng_l,
                      rng_unlabeled=rng_u, rng_aug=rng_aug)


def _draw(rng: np.random.Generator, n_items: int, k: int) -> np.ndarray:
    return rng.choice(n_items, size=k, replace=k > n_items)


def _noise(rng: np.random.Generator, like: np.ndarray, std: float) -> np.ndarray:
    return np.clip(rng.normal(0.0, std, like.shape), -2 * std, 2 * std).astype(like.dtype)


def _crop_box(rng: np.random.Generator, shape, size: int | None) -> tuple:
    # no draws when cropping is off, so uncropped runs keep their RNG streams
    if size is None:
        return (slice(None),) * 3
    box = []
    for n in shape:
        o = int(rng.integers(0, n - size + 1)) if n > size else 0
        box.append(slice(o, o + size))
    return tuple(box)


def train_step(state: TrainState, cfg: TrainConfig, labeled_batch, unlabeled_batch=None):
    """One optimizer step on the student followed by the teacher EMA update."""
    lab_img, lab_lbl = labeled_batch
    teacher_img = None
    if unlabeled_batch is not None and cfg.unlabeled_noise > 0:
        teacher_img = unlabeled_batch + _noise(state.rng_aug, unlabeled_batch, cfg.unlabeled_noise)
        unlabeled_batch = unlabeled_batch + _noise(state.rng_aug, unlabeled_batch, cfg.unlabeled_noise)
    state.optimizer.zero_grad()
    res = step_objective(state.student, cfg, lab_img, lab_lbl, unlabeled_batch, state.teacher, state.step,
                         teacher_img=teacher_img)
    if not np.isfinite(res.total.data).all():
        raise NumericError(f"non-finite loss at step {state.step}: {res.report}")
    T.backward(res.total)
    state.optimizer.step()
    if cfg.use_mt and state.teacher is not None:
        M.ema_update(state.teacher, state.student, cfg.ema_decay)
    state.step += 1
    state.reports.append(res.report)
    state.last_prototypes, state.last_gamma = res.prototypes, res.gamma
    return state, res.report


def next_batches(state: TrainState, cfg: TrainConfig, labeled, unlabeled_images):
    idx = _draw(state.rng_labeled, len(labeled), cfg.labeled_per_batch)
    boxes = [_crop_box(state.rng_aug, labeled[i].label.shape, cfg.crop) for i in idx]
    lab_img = np.stack([labeled[i].image[(Ellipsis,) + b] for i, b in zip(idx, boxes)])
    lab_lbl = np.stack([labeled[i].label[b] for i, b in zip(idx, boxes)])
    unl = None
    if cfg.use_mt and len(unlabeled_images) and cfg.unlabeled_per_batch:
        jdx = _draw(state.rng_unlabeled, len(unlabeled_images), cfg.unlabeled_per_batch)
        unl = np.stack([unlabeled_images[j][(Ellipsis,) + _crop_box(state.rng_aug, unlabeled_images[j].shape[-3:], cfg.crop)]
                        for j in jdx])
    dtype = T.get_default_dtype()
    return (lab_img.astype(dtype), lab_lbl), (None if unl is None else unl.astype(dtype))


def predict(params: dict, cfg: TrainConfig, image: np.ndarray) -> np.ndarray:
    """Label volume from the fused evidential heads."""
    with T.no_grad():
        out = M.forward(params, cfg.model, image.astype(T.get_default_dtype()))
        m = _fuse(_head_masses(out.evidence, 0, 1), cfg)
    return ev.pseudo_labels(m)[0]


def evaluate_params(params: dict, cfg: TrainConfig, samples) -> dict:
    per_volume = [evaluate(predict(params, cfg, s.image), s.label, cfg.model.num_classes) for s in samples]
    agg = aggregate(per_volume)
    return {"mean": agg.mean, "per_class": {str(k): v for k, v in agg.per_class.items()},
            "per_volume": [r.mean for r in per_volume]}


@dataclass
class RunResult:
    state: TrainState
    reports: list
    metrics: dict
    metrics_path: str | None = None


def _log_line(step: int, report: LossReport, gamma: float) -> dict:
    return {"step": step, **report.to_dict(), "gamma": gamma}


def run(cfg: TrainConfig, dataset: Dataset, out_dir: str | None = None, progress=None) -> RunResult:
    """Train for ``cfg.iterations`` steps, checkpointing and evaluating on the test split.

    When ``out_dir`` is given it receives ``config.json``, ``loss_log.jsonl``
    (deterministic), ``train_log.jsonl`` (adds wall time), ``checkpoints/``,
    ``prototypes/`` and ``metrics.json``.
    """
    if cfg.labeled_ratio is not None:
        dataset = resplit(dataset, cfg.labeled_ratio, cfg.seed)
    with T.default_dtype(np.dtype(cfg.dtype)):
        state = init_state(cfg)
        unlabeled_images = [s.image for s in dataset.unlabeled]
        writer = _ArtifactWriter(out_dir, cfg) if out_dir else None
        if writer:
            writer.checkpoint(state)
        start = time.perf_counter()
        for _ in range(cfg.iterations):
            lab, unl = next_batches(state, cfg, dataset.labeled, unlabeled_images)
            step = state.step
            state, report = train_step(state, cfg, lab, unl)
            if writer:
                writer.log(step, report, state.last_gamma, time.perf_counter() - start)
                if state.step % cfg.checkpoint_every == 0 or state.step == cfg.iterations:
                    writer.checkpoint(state)
            if progress:
                progress(step, report)
        eval_params = state.teacher if cfg.eval_model == "teacher" and state.teacher is not None else state.student
        metrics = evaluate_params(eval_params, cfg, dataset.test)
        metrics_path = writer.finish(metrics) if writer else None
    return RunResult(state=state, reports=list(state.reports), metrics=metrics, metrics_path=metrics_path)


def train_supervised(cfg: TrainConfig, dataset: Dataset) -> list:
    """Plain labeled-only loop on the segmentation loss (reference for the ablated trainer)."""
    with T.default_dtype(np.dtype(cfg.dtype)):
        rng_init, rng_l, _, rng_aug = _rng_streams(cfg.seed)
        params = M.init_params(cfg.model, rng_init)
        opt = Adam(params, cfg.lr, cfg.adam_beta1, cfg.adam_beta2, cfg.adam_eps)
        dtype = T.get_default_dtype()
        reports = []
        for t in range(cfg.iterations):
            idx = _draw(rng_l, len(dataset.labeled), cfg.labeled_per_batch)
            boxes = [_crop_box(rng_aug, dataset.labeled[i].label.shape, cfg.crop) for i in idx]
            img = np.stack([dataset.labeled[i].image[(Ellipsis,) + b] for i, b in zip(idx, boxes)]).astype(dtype)
            lbl = np.stack([dataset.labeled[i].label[b] for i, b in zip(idx, boxes)])
            opt.zero_grad()
            out = M.forward(params, cfg.model, img)
            masses = [ev.mass_from_evidence(e) for e in out.evidence]
            probs = ev.expected_probs(ev.dirichlet_from_mass(ev.fuse(masses, cfg.fuse_heads_mode)))
            loss, report = total_loss(seg_loss(probs, lbl), 0.0, 0.0, 0.0, 0.0,
                                      lambda_con(t, cfg.iterations, cfg.lambda_max))
            T.backward(loss)
            opt.step()
            reports.append(report)
    return reports


class _ArtifactWriter:
    def __init__(self, out_dir: str, cfg: TrainConfig):
        self.out_dir = out_dir
        self.cfg = cfg
        os.makedirs(os.path.join(out_dir, "checkpoints"), exist_ok=True)
        os.makedirs(os.path.join(out_dir, "prototypes"), exist_ok=True)
        with open(os.path.join(out_dir, "config.json"), "w") as fh:
            json.dump(cfg.to_dict(), fh, indent=2, sort_keys=True)
        self.loss_log = open(os.path.join(out_dir, "loss_log.jsonl"), "w")
        self.train_log = open(os.path.join(out_dir, "train_log.jsonl"), "w")

    def log(self, step, report, gamma, wall):
        line = _log_line(step, report, gamma)
        self.loss_log.write(json.dumps(line, sort_keys=True) + "\n")
        self.train_log.write(json.dumps({**line, "wall_time": wall}, sort_keys=True) + "\n")

    def checkpoint(self, state: TrainState):
        path = os.path.join(self.out_dir, "checkpoints", f"ckpt_{state.step:06d}.eplc")
        M.save_checkpoint(path, state.student, self.cfg.to_dict(), state.step, teacher=state.teacher)
        if state.last_prototypes is not None:
            with open(os.path.join(self.out_dir, "prototypes", f"proto_{state.step:06d}.bin"), "wb") as fh:
                fh.write(dump_prototypes(state.last_prototypes))

    def finish(self, metrics: dict) -> str:
        self.loss_log.close()
        self.train_log.close()
        path = os.path.join(self.out_dir, "metrics.json")
        with open(path, "w") as fh:
            json.dump(metrics, fh, indent=2, sort_keys=True)
        return path
