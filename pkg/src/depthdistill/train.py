"""Two-stage training: stereo teacher first, then a frozen-teacher student.

Both stages share one deterministic loop: seeded per-epoch shuffles, Adam
with bias correction, and a per-step CSV log. The student stage caches the
frozen teacher's per-sample outputs, so each pair is pushed through the
teacher exactly once per run.
"""

from __future__ import annotations

import time
from dataclasses import asdict, dataclass, field
from pathlib import Path

import numpy as np

from .adam import AdamState, adam_step
from .checkpoint import CheckpointError, load_checkpoint, save_checkpoint
from .distill import DistillSettings, LossBreakdown, total_student_loss
from .nets import ModelParams, NetOutput, batch_to_tensor, init_params, \
    student_forward, teacher_forward
from .stereo import ConfigError, load_split
from .tensor import Tensor

RUNLOG_HEADER = "step,l_b,l_umr,l_umf,l_focal,p_d,total,seconds"


@dataclass
class TrainConfig:
    stage: str
    manifest: str
    out_ckpt: str
    teacher_ckpt: str = ""
    runlog: str = ""  # defaults to out_ckpt with a .runlog.csv suffix
    epochs: int = 1
    max_steps: int = 0  # 0 runs every epoch in full; otherwise stop at this step
    batch_size: int = 4
    learning_rate: float = 1e-3
    beta1: float = 0.9
    beta2: float = 0.999
    eps_adam: float = 1e-8
    lam1: float = 0.9
    lam2: float = 0.6
    lam3: float = 0.8
    alpha_d: float = 1.0
    gamma: float = 2.0
    use_focal: bool = True
    use_uem: bool = True
    use_attention: bool = True
    distill: bool = True
    seed: int = 0
    log_timing: bool = False  # seconds column stays 0.000 unless enabled

    def __post_init__(self):
        if self.stage not in ("teacher", "student"):
            raise ConfigError(f"stage must be teacher or student, got {self.stage!r}")
        if self.learning_rate <= 0:
            raise ConfigError(f"learning_rate must be positive, got {self.learning_rate}")
        if self.batch_size < 1:
            raise ConfigError(f"batch_size must be at least 1, got {self.batch_size}")
        if self.epochs < 1:
            raise ConfigError(f"epochs must be at least 1, got {self.epochs}")
        if self.max_steps < 0:
            raise ConfigError(f"max_steps must be non-negative, got {self.max_steps}")
        if self.seed < 0:
            raise ConfigError(f"seed must be non-negative, got {self.seed}")
        if self.stage == "student" and not self.teacher_ckpt:
            raise ConfigError("student stage requires a teacher checkpoint path")
        if not self.runlog:
            self.runlog = str(Path(self.out_ckpt).with_suffix(".runlog.csv"))

    def settings(self) -> DistillSettings:
        return DistillSettings(
            lam1=self.lam1, lam2=self.lam2, lam3=self.lam3,
            alpha_d=self.alpha_d, gamma=self.gamma, distill=self.distill,
            use_focal=self.use_focal, use_uem=self.use_uem,
            use_attention=self.use_attention)


@dataclass
class TrainResult:
    ckpt_path: str
    runlog_path: str
    steps: int
    breakdowns: list = field(repr=False)  # LossBreakdown per step, graphs dropped
    params: ModelParams = field(repr=False)


def _fmt(x: float) -> str:
    return format(float(x), ".12g")


def _row(step: int, bd: LossBreakdown, seconds: float) -> str:
    cols = [str(step), _fmt(bd.l_b), _fmt(bd.l_umr), _fmt(bd.l_umf),
            _fmt(bd.l_focal), _fmt(bd.p_d), _fmt(bd.total), f"{seconds:.3f}"]
    return ",".join(cols)


def read_runlog(path) -> list[dict]:
    lines = Path(path).read_text().splitlines()
    if not lines or lines[0] != RUNLOG_HEADER:
        raise ValueError(f"{path}: bad run-log header")
    keys = RUNLOG_HEADER.split(",")
    rows = []
    for line in lines[1:]:
        vals = line.split(",")
        row = dict(zip(keys, (float(v) for v in vals)))
        row["step"] = int(vals[0])
        rows.append(row)
    return rows


def _shuffle(n: int, seed: int, epoch: int) -> np.ndarray:
    # keep shuffle streams disjoint from the parameter-init streams
    rng = np.random.default_rng(np.random.SeedSequence([seed, 1000 + epoch]))
    return rng.permutation(n)


def _gt_tensor(batch) -> Tensor:
    return Tensor(np.stack([s.depth_gt[None] for s in batch]))


def _train_loop(config: TrainConfig, samples: list, named_params: list,
                step_fn) -> tuple[int, list]:
    """Shared optimizer loop; step_fn(batch) -> LossBreakdown with live loss."""
    state = AdamState()
    breakdowns = []
    step = 0
    log_path = Path(config.runlog)
    if log_path.parent != Path("."):
        log_path.parent.mkdir(parents=True, exist_ok=True)
    with open(log_path, "w") as log:
        log.write(RUNLOG_HEADER + "\n")
        for epoch in range(config.epochs):
            perm = _shuffle(len(samples), config.seed, epoch)
            for lo in range(0, len(samples), config.batch_size):
                batch = [samples[i] for i in perm[lo:lo + config.batch_size]]
                t0 = time.perf_counter()
                for _, p in named_params:
                    p.zero_grad()
                bd = step_fn(batch)
                bd.loss.backward()
                adam_step(named_params, state, lr=config.learning_rate,
                          beta1=config.beta1, beta2=config.beta2, eps=config.eps_adam)
                step += 1
                seconds = time.perf_counter() - t0 if config.log_timing else 0.0
                log.write(_row(step, bd, seconds) + "\n")
                bd.loss = None  # drop the graph so the trace stays cheap to keep
                breakdowns.append(bd)
                if config.max_steps and step >= config.max_steps:
                    return step, breakdowns
    return step, breakdowns


def _load_train_split(config: TrainConfig) -> list:
    samples = load_split(config.manifest, "train")
    if not samples:
        raise ConfigError(f"train split of {config.manifest} is empty")
    return samples


def train_teacher(config: TrainConfig) -> TrainResult:
    if config.stage != "teacher":
        raise ConfigError(f"train_teacher needs stage=teacher, got {config.stage!r}")
    samples = _load_train_split(config)
    params = init_params("teacher", config.seed)
    named = list(params.items())
    supervised = DistillSettings(distill=False)

    def step_fn(batch):
        left = batch_to_tensor([s.left for s in batch])
        right = batch_to_tensor([s.right for s in batch])
        out = teacher_forward(left, right, params)
        return total_student_loss(out, None, _gt_tensor(batch), None, supervised)

    steps, breakdowns = _train_loop(config, samples, named, step_fn)
    save_checkpoint(params, asdict(config), config.out_ckpt, step=steps)
    return TrainResult(config.out_ckpt, config.runlog, steps, breakdowns, params)


class _TeacherCache:
    """Frozen-teacher outputs, computed once per sample and reused by id."""

    def __init__(self, params: ModelParams):
        self.params = params
        self._outs: dict = {}

    def _one(self, sample):
        out = self._outs.get(sample.id)
        if out is None:
            left = batch_to_tensor([sample.left])
            right = batch_to_tensor([sample.right])
            net = teacher_forward(left, right, self.params)
            out = ([t.data for t in net.enc], [t.data for t in net.dec],
                   net.depth.data, net.log_var.data)
            self._outs[sample.id] = out
        return out

    def batch(self, batch) -> NetOutput:
        outs = [self._one(s) for s in batch]
        cat = lambda arrs: Tensor(np.concatenate(arrs, axis=0))
        return NetOutput(
            enc=[cat([o[0][i] for o in outs]) for i in range(4)],
            dec=[cat([o[1][i] for o in outs]) for i in range(4)],
            depth=cat([o[2] for o in outs]),
            log_var=cat([o[3] for o in outs]))


def train_student(config: TrainConfig) -> TrainResult:
    if config.stage != "student":
        raise ConfigError(f"train_student needs stage=student, got {config.stage!r}")
    samples = _load_train_split(config)
    t_params, _ = load_checkpoint(config.teacher_ckpt)
    if t_params.role != "teacher":
        raise CheckpointError(
            f"{config.teacher_ckpt}: expected a teacher checkpoint, got role "
            f"{t_params.role!r}")
    t_params.freeze()
    t_checksum = t_params.checksum()

    settings = config.settings()
    s_params = init_params("student", config.seed)
    named = [(f"student.{n}", t) for n, t in s_params.items()]
    adapter = None
    if settings.distill:
        adapter = init_params("adapter", config.seed)
        named += [(f"adapter.{n}", t) for n, t in adapter.items()]
    cache = _TeacherCache(t_params)

    def step_fn(batch):
        img = batch_to_tensor([s.left for s in batch])
        t_out = cache.batch(batch) if settings.distill else None
        s_out = student_forward(img, s_params)
        return total_student_loss(s_out, t_out, _gt_tensor(batch), adapter, settings)

    steps, breakdowns = _train_loop(config, samples, named, step_fn)
    if t_params.checksum() != t_checksum:
        raise RuntimeError("teacher parameters changed during student training")
    save_checkpoint(s_params, asdict(config), config.out_ckpt, step=steps)
    return TrainResult(config.out_ckpt, config.runlog, steps, breakdowns, s_params)
