"""Base-task training: self-distillation first, then supervised cross-entropy.

The distillation phase follows the teacher/student recipe: two global crops
feed the teacher, all crops feed the student, teacher targets are centered
and sharpened before the softmax, no gradient reaches the teacher, and the
teacher tracks the student by exponential moving average.  Once that phase
finishes (early stopping on the distillation loss), the classifier means
are initialized from class prototypes and the encoder plus stochastic head
train under cross-entropy.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from .backbone import BackboneConfig, Encoder, Linear, hash_state
from .errors import ArgumentError, UsageError
from .numerics import SeededRng, Tensor, gelu, log_softmax, no_grad, softmax
from .optim import CosineSchedule, EarlyStopping, ReduceOnPlateau, make_optimizer
from .stochastic_classifier import StochasticHead, init_means_from_prototypes


# -- multi-crop views ---------------------------------------------------------


@dataclass
class CropSet:
    """Two global crops plus local crops, all resized to the input size."""

    globals: list
    locals: list
    boxes: list  # (top, left, side) per crop, global crops first

    @property
    def all_crops(self) -> list:
        return self.globals + self.locals

    def __len__(self):
        return len(self.globals) + len(self.locals)


def _resize_nearest(patch: np.ndarray, out_size: int) -> np.ndarray:
    side = patch.shape[-1]
    idx = np.floor(np.arange(out_size) * side / out_size).astype(int)
    return patch[:, idx][:, :, idx]


def _crop(image: np.ndarray, rng: SeededRng, scale_range, out_size: int):
    h = image.shape[-1]
    s = rng.uniform(*scale_range)
    side = int(np.clip(round(h * np.sqrt(s)), 1, h))
    top = int(rng.integers(0, h - side + 1))
    left = int(rng.integers(0, h - side + 1))
    patch = image[:, top : top + side, left : left + side]
    return _resize_nearest(patch, out_size), (top, left, side)


def multi_crop(image: np.ndarray, rng: SeededRng, n_local: int, global_scale=(0.6, 1.0), local_scale=(0.2, 0.5)) -> CropSet:
    """Deterministic (given rng) global/local crops of one (C, H, W) image."""
    image = np.asarray(image, dtype=float)
    if image.ndim != 3:
        raise ArgumentError(f"multi_crop expects a (C, H, W) image, got shape {image.shape}")
    h = image.shape[-1]
    if h < 2 or image.shape[-2] < 2:
        raise ArgumentError(f"image {image.shape} too small to crop")
    crops, boxes = [], []
    for i in range(2):
        crop, box = _crop(image, rng.child(f"global{i}"), global_scale, h)
        crops.append(crop)
        boxes.append(box)
    locs = []
    for i in range(n_local):
        crop, box = _crop(image, rng.child(f"local{i}"), local_scale, h)
        locs.append(crop)
        boxes.append(box)
    return CropSet(globals=crops, locals=locs, boxes=boxes)


def crop_slots(images: np.ndarray, rng: SeededRng, n_local: int, global_scale, local_scale) -> list:
    """Per-slot batches: slot j stacks the j-th crop of every image."""
    sets = [multi_crop(img, rng.child(f"img{i}"), n_local, global_scale, local_scale) for i, img in enumerate(images)]
    n_slots = 2 + n_local
    return [np.stack([s.all_crops[j] for s in sets]) for j in range(n_slots)]


# -- teacher state ------------------------------------------------------------


class DinoHead:
    """Two-layer projection from the pooled feature to the distillation space."""

    def __init__(self, rng: SeededRng, in_dim: int, hidden: int, out_dim: int):
        self.l1 = Linear(rng.child("l1"), in_dim, hidden, bias=True)
        self.l2 = Linear(rng.child("l2"), hidden, out_dim, bias=True)
        self.out_dim = out_dim

    def __call__(self, z: Tensor) -> Tensor:
        return self.l2(gelu(self.l1(z)))

    def params(self) -> dict:
        out = self.l1.params("l1")
        out.update(self.l2.params("l2"))
        return out

    def copy(self) -> "DinoHead":
        clone = DinoHead(SeededRng(0), self.l1.weight.shape[0], self.l1.weight.shape[1], self.out_dim)
        for name, p in clone.params().items():
            p.data = self.params()[name].data.copy()
        return clone


@dataclass
class TeacherState:
    encoder: Encoder
    proj: DinoHead
    center: np.ndarray
    ema_momentum: float
    teacher_temp: float
    warmup_teacher_temp: float
    current_temp: float = 0.0

    def __post_init__(self):
        if self.teacher_temp <= 0 or self.warmup_teacher_temp <= 0:
            raise ArgumentError("teacher temperatures must be positive")
        if self.current_temp == 0.0:
            self.current_temp = self.warmup_teacher_temp
        self.encoder.eval()
        self.encoder.set_requires_grad(False)
        for p in self.proj.params().values():
            p.requires_grad = False

    def logits(self, images: np.ndarray) -> np.ndarray:
        with no_grad():
            return self.proj(self.encoder.forward(Tensor(images))).data

    def probs(self, logits: np.ndarray) -> np.ndarray:
        shifted = (logits - self.center) / self.current_temp
        shifted = shifted - shifted.max(axis=-1, keepdims=True)
        e = np.exp(shifted)
        return e / e.sum(axis=-1, keepdims=True)

    def state_hash(self) -> str:
        import hashlib

        digest = hashlib.sha256()
        digest.update(hash_state(self.encoder).encode())
        for name in sorted(self.proj.params()):
            digest.update(np.ascontiguousarray(self.proj.params()[name].data).tobytes())
        return digest.hexdigest()


def make_teacher(student_encoder: Encoder, student_proj: DinoHead, config) -> TeacherState:
    return TeacherState(
        encoder=student_encoder.copy(),
        proj=student_proj.copy(),
        center=np.zeros(student_proj.out_dim),
        ema_momentum=config.ema_momentum,
        teacher_temp=config.teacher_temp,
        warmup_teacher_temp=config.warmup_teacher_temp,
    )


def update_center(teacher: TeacherState, batch_outputs: np.ndarray, momentum: float | None = None) -> np.ndarray:
    """c <- m*c + (1-m)*mean(batch outputs)."""
    batch_outputs = np.asarray(batch_outputs, dtype=float)
    if batch_outputs.size == 0:
        raise ArgumentError("update_center needs a non-empty batch")
    m = teacher.ema_momentum if momentum is None else momentum
    teacher.center = m * teacher.center + (1.0 - m) * batch_outputs.mean(axis=0)
    return teacher.center


def ema_update_teacher(teacher: TeacherState, student_encoder: Encoder, student_proj: DinoHead, momentum: float | None = None):
    """theta_t <- m*theta_t + (1-m)*theta_s elementwise (buffers included)."""
    m = teacher.ema_momentum if momentum is None else momentum
    s_params = student_encoder.params()
    for name, p in teacher.encoder.params().items():
        if p.data.shape != s_params[name].data.shape:
            raise ArgumentError(f"teacher/student shape mismatch at {name}")
        p.data = m * p.data + (1.0 - m) * s_params[name].data
    s_buffers = student_encoder.buffers()
    for name, buf in teacher.encoder.buffers().items():
        buf[...] = m * buf + (1.0 - m) * s_buffers[name]
    sp = student_proj.params()
    for name, p in teacher.proj.params().items():
        p.data = m * p.data + (1.0 - m) * sp[name].data


# -- distillation step --------------------------------------------------------


def dino_step(student_encoder: Encoder, student_proj: DinoHead, teacher: TeacherState, slots: list, student_temp: float):
    """Distillation loss over all (teacher global, student other-view) pairs.

    `slots` holds per-view batches, the first two being the global views.
    Returns the (graph-carrying) loss plus a dict with the pair count,
    teacher probabilities, and their mean entropy.
    """
    if teacher.encoder.mode != "eval":
        raise UsageError("teacher must be in eval mode for dino_step")
    if student_encoder.mode != "train":
        raise UsageError("student must be in train mode for dino_step")
    if len(slots) < 2:
        raise ArgumentError("need at least the two global views")
    teacher_logits = [teacher.logits(slots[i]) for i in range(2)]
    teacher_probs = [teacher.probs(lg) for lg in teacher_logits]
    student_logp = [log_softmax(student_proj(student_encoder.forward(Tensor(s))) * (1.0 / student_temp), axis=-1) for s in slots]

    loss = None
    n_pairs = 0
    for t_idx in range(2):
        target = Tensor(teacher_probs[t_idx])
        for s_idx in range(len(slots)):
            if s_idx == t_idx:
                continue  # a view is never its own distillation target
            term = -(target * student_logp[s_idx]).sum(axis=-1).mean()
            loss = term if loss is None else loss + term
            n_pairs += 1
    all_teacher = np.concatenate(teacher_probs)
    entropy = float(-(all_teacher * np.log(all_teacher + 1e-12)).sum(axis=-1).mean())
    info = {"n_pairs": n_pairs, "teacher_outputs": np.concatenate(teacher_logits), "teacher_entropy": entropy}
    return loss, info


def cross_entropy_loss(head: StochasticHead, z: Tensor, labels: np.ndarray, rng: SeededRng, noise: bool = True) -> Tensor:
    """Mean CE of the stochastic head's class probabilities at `labels`."""
    logits = head.logits(z, rng=rng, noise=noise)
    logp = log_softmax(logits, axis=-1)
    labels = np.asarray(labels, dtype=int)
    onehot = np.zeros(logp.shape)
    onehot[np.arange(len(labels)), labels] = 1.0
    return -(Tensor(onehot) * logp).sum() * (1.0 / len(labels))


# -- phases -------------------------------------------------------------------


def class_prototypes(encoder: Encoder, data_x: np.ndarray, labels: np.ndarray, batch: int = 256) -> dict:
    """Mean embedding per class id, computed in eval mode without gradients."""
    embeddings = embed_all(encoder, data_x, batch=batch)
    return {int(c): embeddings[labels == c].mean(axis=0) for c in sorted(set(int(c) for c in labels))}


def embed_all(encoder: Encoder, data_x: np.ndarray, prefixes=None, batch: int = 256) -> np.ndarray:
    mode = encoder.mode
    encoder.eval()
    outs = []
    with no_grad():
        for start in range(0, len(data_x), batch):
            outs.append(encoder.forward(Tensor(data_x[start : start + batch]), prefixes=prefixes).data)
    encoder.mode = mode
    return np.concatenate(outs) if outs else np.zeros((0, encoder.cfg.embed_dim))


def train_base(
    data_x: np.ndarray,
    data_y: np.ndarray,
    model_cfg: BackboneConfig,
    config,
    rng: SeededRng,
    log=None,
    skip_ssl: bool = False,
):
    """Full base-task routine.

    Phase 1 distills with cosine-scheduled learning rate and weight decay
    until early stopping; phase 2 initializes the head means from class
    prototypes and runs supervised cross-entropy.  Phase 2 never starts
    before phase 1 has finished.  Returns (encoder, head, teacher, history).
    """
    data_x = np.asarray(data_x, dtype=float)
    data_y = np.asarray(data_y, dtype=int)
    if len(data_x) == 0:
        raise ArgumentError("base task has no data")
    classes = sorted(set(int(c) for c in data_y))
    if len(classes) < 2:
        raise ArgumentError("base task needs at least 2 classes")

    encoder = Encoder(model_cfg, rng.child("init"))
    proj = DinoHead(rng.child("proj"), model_cfg.embed_dim, config.proj_hidden_dim, config.proj_dim)
    teacher = make_teacher(encoder, proj, config)
    history = {"ssl_loss": [], "sup_loss": [], "teacher_entropy": []}

    if not skip_ssl:
        _ssl_phase(encoder, proj, teacher, data_x, config, rng.child("ssl"), history, log)

    head = StochasticHead(model_cfg.embed_dim, temperature=config.head_temperature, offset=config.head_offset)
    prototypes = class_prototypes(encoder, data_x, data_y)
    init_means_from_prototypes(head, prototypes)
    _supervised_phase(encoder, head, data_x, data_y, config, rng.child("supervised"), history, log)
    return encoder, head, teacher, history


def _ssl_phase(encoder, proj, teacher, data_x, config, rng, history, log):
    encoder.train()
    params = list(encoder.params().values()) + list(proj.params().values())
    opt = make_optimizer(config.optimizer, [{"params": params, "lr": config.ssl_lr, "weight_decay": config.ssl_weight_decay}])
    lr_schedule = CosineSchedule(config.ssl_lr, config.ssl_lr * 1e-2, config.ssl_epochs)
    wd_schedule = CosineSchedule(config.ssl_weight_decay, config.ssl_weight_decay_end, config.ssl_epochs)
    warmup_epochs = max(1, int(config.warmup_fraction * config.ssl_epochs))
    stopper = EarlyStopping(config.ssl_early_stop)
    n = len(data_x)
    batch = min(config.ssl_batch_size, n)

    for epoch in range(config.ssl_epochs):
        if epoch < warmup_epochs:
            frac = epoch / warmup_epochs
            teacher.current_temp = config.warmup_teacher_temp + frac * (config.teacher_temp - config.warmup_teacher_temp)
        else:
            teacher.current_temp = config.teacher_temp
        lr = lr_schedule.value(epoch)
        wd = wd_schedule.value(epoch)
        for group in opt.groups:
            group["lr"] = lr
            group["weight_decay"] = wd

        order = rng.child("shuffle", f"epoch{epoch}").permutation(n)
        total, entropies = 0.0, []
        for start in range(0, n, batch):
            idx = order[start : start + batch]
            slots = crop_slots(
                data_x[idx], rng.child("crops", f"e{epoch}", f"b{start}"), config.n_local_crops, config.global_crop_scale, config.local_crop_scale
            )
            loss, info = dino_step(encoder, proj, teacher, slots, config.student_temp)
            opt.zero_grad()
            loss.backward()
            opt.step()
            ema_update_teacher(teacher, encoder, proj)
            update_center(teacher, info["teacher_outputs"], momentum=config.center_momentum)
            total += loss.item() * len(idx)
            entropies.append(info["teacher_entropy"])
        mean_loss = total / n
        mean_entropy = float(np.mean(entropies))
        history["ssl_loss"].append(mean_loss)
        history["teacher_entropy"].append(mean_entropy)
        if log is not None:
            log.emit(phase="ssl", session=0, epoch=epoch, key="loss", value=mean_loss)
            log.emit(phase="ssl", session=0, epoch=epoch, key="lr", value=lr)
            log.emit(phase="ssl", session=0, epoch=epoch, key="teacher_entropy", value=mean_entropy)
        if stopper.update(mean_loss):
            break


def _supervised_phase(encoder, head, data_x, data_y, config, rng, history, log):
    encoder.train()
    opt = make_optimizer(
        config.optimizer,
        [
            {"params": list(encoder.params().values()), "lr": config.sup_lr, "weight_decay": config.sup_weight_decay},
            {"params": list(head.params().values()), "lr": config.sup_classifier_lr, "weight_decay": config.sup_weight_decay},
        ],
    )
    plateau = ReduceOnPlateau(opt, config.sup_plateau_patience, config.sup_plateau_factor, config.sup_min_lr)
    stopper = EarlyStopping(config.sup_early_stop)
    n = len(data_x)
    batch = min(config.sup_batch_size, n)
    for epoch in range(config.sup_epochs):
        order = rng.child("shuffle", f"epoch{epoch}").permutation(n)
        total = 0.0
        for start in range(0, n, batch):
            idx = order[start : start + batch]
            z = encoder.forward(Tensor(data_x[idx]))
            loss = cross_entropy_loss(head, z, data_y[idx], rng.child("eps", f"e{epoch}", f"b{start}"), noise=config.head_noise_train)
            opt.zero_grad()
            loss.backward()
            opt.step()
            total += loss.item() * len(idx)
        mean_loss = total / n
        history["sup_loss"].append(mean_loss)
        plateau.step(mean_loss)
        if log is not None:
            log.emit(phase="supervised", session=0, epoch=epoch, key="loss", value=mean_loss)
            log.emit(phase="supervised", session=0, epoch=epoch, key="lr", value=opt.groups[0]["lr"])
        if stopper.update(mean_loss):
            break
    encoder.eval()


def linear_probe(teacher: TeacherState, data_x: np.ndarray, data_y: np.ndarray, config, rng: SeededRng, log=None):
    """Train a linear head on frozen teacher features; the teacher must not move.

    Returns (probe Linear, accuracy on the provided data).
    """
    before = teacher.state_hash()
    data_y = np.asarray(data_y, dtype=int)
    classes = sorted(set(int(c) for c in data_y))
    features = embed_all(teacher.encoder, np.asarray(data_x, dtype=float))
    index = {c: i for i, c in enumerate(classes)}
    targets = np.array([index[int(c)] for c in data_y])

    probe = Linear(rng.child("probe"), features.shape[1], len(classes), bias=True)
    opt = make_optimizer(config.probe_optimizer, [{"params": list(probe.params("p").values()), "lr": config.probe_lr}])
    stopper = EarlyStopping(config.probe_early_stop)
    n = len(features)
    batch = min(config.probe_batch_size, n)
    for epoch in range(config.probe_epochs):
        order = rng.child("shuffle", f"epoch{epoch}").permutation(n)
        total = 0.0
        for start in range(0, n, batch):
            idx = order[start : start + batch]
            logp = log_softmax(probe(Tensor(features[idx])), axis=-1)
            onehot = np.zeros(logp.shape)
            onehot[np.arange(len(idx)), targets[idx]] = 1.0
            loss = -(Tensor(onehot) * logp).sum() * (1.0 / len(idx))
            opt.zero_grad()
            loss.backward()
            opt.step()
            total += loss.item() * len(idx)
        if log is not None:
            log.emit(phase="linear_probe", session=0, epoch=epoch, key="loss", value=total / n)
        if stopper.update(total / n):
            break

    with no_grad():
        preds = np.argmax(probe(Tensor(features)).data, axis=-1)
    accuracy = float((preds == targets).mean())
    if teacher.state_hash() != before:
        raise UsageError("linear probe modified the frozen teacher")
    return probe, accuracy
