"""Joint training: loss interpolation, AdaDelta with validation-driven
epsilon decay, L2 regularization, gradient clipping, metrics, checkpoints.

Update rule (per tensor, decay rho, stability epsilon):

    g       <- g + l2 * theta, then global-norm clipped to clip_norm
    acc_g   <- rho * acc_g + (1 - rho) * g^2
    delta   <- -sqrt(acc_dx + eps) / sqrt(acc_g + eps) * g
    acc_dx  <- rho * acc_dx + (1 - rho) * delta^2
    theta   <- theta + delta

Validation teacher-forcing accuracy is measured every `val_interval`
iterations; when a measurement is strictly lower than the previous one,
epsilon is multiplied by `eps_decay`.

Batches are cut from the length-sorted utterance list; each epoch's batch
order is drawn from a per-epoch PCG32 stream, so the schedule is a pure
function of (seed, iteration) and checkpoint resume is bit-identical.

Checkpoint file layout (little-endian): magic "CTCA", u32 format version,
u32 record count, then per record u32 name length, name bytes, u32 rank,
u64 dims, f64 payload; trailing CRC32 of everything before it. Non-tensor
state (iteration, epsilon, PRNG state, config snapshot) is stored in
reserved "meta/..." records.
"""

from __future__ import annotations

import json
import math
import struct
import zlib
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from . import numerics as nm
from .features import (FeatureConfig, ManifestRecord, SynthConfig,
                       load_waveform, mel_filterbank, speed_perturb)
from .model import ModelConfig, build_model_params, utterance_forward
from .numerics import Tensor
from .rng import Pcg32, STREAM_SHUFFLE
from .subword import SubwordVocab, encode as bpe_encode

CHECKPOINT_MAGIC = b"CTCA"
CHECKPOINT_VERSION = 1


@dataclass
class TrainConfig:
    alpha: float = 0.3  # joint-loss weight on the CTC term
    epsilon: float = 1e-8
    rho: float = 0.95
    l2: float = 1e-6
    clip_norm: float = 5.0
    batch_size: int = 4
    val_interval: int = 1000
    eps_decay: float = 0.1
    iterations: int = 1000

    def __post_init__(self):
        if not 0.0 <= self.alpha <= 1.0:
            raise ValueError(f"alpha must be in [0, 1], got {self.alpha}")
        if self.clip_norm <= 0:
            raise ValueError("clip_norm must be positive")


def joint_loss(l_ctc: Tensor, l_att: Tensor, alpha: float) -> Tensor:
    """alpha * L_ctc + (1 - alpha) * L_att."""
    if not 0.0 <= alpha <= 1.0:
        raise ValueError(f"alpha must be in [0, 1], got {alpha}")
    if alpha == 0.0:
        return l_att
    if alpha == 1.0:
        return l_ctc
    return nm.add(nm.scale(l_ctc, alpha), nm.scale(l_att, 1.0 - alpha))


def clip_global_norm(grads: dict[str, np.ndarray], clip_norm: float) -> float:
    """Scale all gradients so their global L2 norm is at most clip_norm.
    Returns the factor applied (1.0 when no clipping was needed)."""
    total = math.sqrt(sum(float((g * g).sum()) for g in grads.values()))
    if total <= clip_norm or total == 0.0:
        return 1.0
    factor = clip_norm / total
    for g in grads.values():
        g *= factor
    return factor


@dataclass
class AdadeltaState:
    acc_g: dict[str, np.ndarray]
    acc_dx: dict[str, np.ndarray]
    epsilon: float

    @classmethod
    def fresh(cls, params: dict[str, Tensor], epsilon: float) -> "AdadeltaState":
        return cls({n: np.zeros_like(p.data) for n, p in params.items()},
                   {n: np.zeros_like(p.data) for n, p in params.items()},
                   epsilon)


def adadelta_step(params: dict[str, Tensor], grads: dict[str, np.ndarray],
                  state: AdadeltaState, config: TrainConfig) -> bool:
    """Apply one update in place. Returns False (step skipped) on
    non-finite gradients; L2 and clipping happen before the update."""
    if config.l2 > 0.0:
        for n, p in params.items():
            grads[n] = grads[n] + config.l2 * p.data
    if any(not np.all(np.isfinite(g)) for g in grads.values()):
        return False
    clip_global_norm(grads, config.clip_norm)
    rho, eps = config.rho, state.epsilon
    for n, p in params.items():
        g = grads[n]
        state.acc_g[n] = rho * state.acc_g[n] + (1.0 - rho) * g * g
        delta = -np.sqrt(state.acc_dx[n] + eps) / np.sqrt(state.acc_g[n] + eps) * g
        state.acc_dx[n] = rho * state.acc_dx[n] + (1.0 - rho) * delta * delta
        p.data += delta
    return True


# ---------------------------------------------------------------------------
# checkpoint I/O


def save_checkpoint(path, tensors: dict[str, np.ndarray], meta: dict) -> None:
    records: list[tuple[str, np.ndarray]] = []
    for name in sorted(tensors):
        records.append((name, np.asarray(tensors[name], dtype=np.float64)))
    records.append(("meta/iteration", np.asarray(float(meta.get("iteration", 0)))))
    records.append(("meta/epsilon", np.asarray(float(meta.get("epsilon", 0.0)))))
    val_prev = meta.get("val_acc_prev")
    records.append(("meta/val_acc_prev",
                    np.asarray(math.nan if val_prev is None else float(val_prev))))
    rs = meta.get("rng_state", (0, 0))
    records.append(("meta/rng_state", np.array(
        [rs[0] >> 32, rs[0] & 0xFFFFFFFF, rs[1] >> 32, rs[1] & 0xFFFFFFFF],
        dtype=np.float64)))
    cfg = meta.get("config_json", "")
    records.append(("meta/config_json",
                    np.frombuffer(cfg.encode("utf-8"), dtype=np.uint8).astype(np.float64)))

    buf = bytearray()
    buf += CHECKPOINT_MAGIC
    buf += struct.pack("<I", CHECKPOINT_VERSION)
    buf += struct.pack("<I", len(records))
    for name, arr in records:
        nb = name.encode("utf-8")
        buf += struct.pack("<I", len(nb))
        buf += nb
        buf += struct.pack("<I", arr.ndim)
        for d in arr.shape:
            buf += struct.pack("<Q", d)
        buf += arr.astype("<f8").tobytes()
    buf += struct.pack("<I", zlib.crc32(bytes(buf)) & 0xFFFFFFFF)

    tmp = Path(str(path) + ".tmp")
    tmp.write_bytes(bytes(buf))
    tmp.replace(path)


def load_checkpoint(path) -> tuple[dict[str, np.ndarray], dict]:
    raw = Path(path).read_bytes()
    if len(raw) < 12 or raw[:4] != CHECKPOINT_MAGIC:
        raise ValueError(f"{path}: not a checkpoint (bad magic)")
    stored_crc = struct.unpack("<I", raw[-4:])[0]
    if zlib.crc32(raw[:-4]) & 0xFFFFFFFF != stored_crc:
        raise ValueError(f"{path}: checkpoint CRC mismatch")
    version, count = struct.unpack("<II", raw[4:12])
    if version != CHECKPOINT_VERSION:
        raise ValueError(f"{path}: unsupported checkpoint version {version}")
    off = 12
    tensors: dict[str, np.ndarray] = {}
    for _ in range(count):
        (nlen,) = struct.unpack_from("<I", raw, off)
        off += 4
        name = raw[off:off + nlen].decode("utf-8")
        off += nlen
        (rank,) = struct.unpack_from("<I", raw, off)
        off += 4
        dims = struct.unpack_from(f"<{rank}Q", raw, off)
        off += 8 * rank
        n = int(np.prod(dims)) if rank else 1
        arr = np.frombuffer(raw, dtype="<f8", count=n, offset=off).reshape(dims).copy()
        off += 8 * n
        tensors[name] = arr
    rs = tensors.pop("meta/rng_state", np.zeros(4))
    cfg_bytes = tensors.pop("meta/config_json", np.array([]))
    vap = float(tensors.pop("meta/val_acc_prev", np.asarray(math.nan)))
    meta = {
        "iteration": int(float(tensors.pop("meta/iteration", np.asarray(0.0)))),
        "epsilon": float(tensors.pop("meta/epsilon", np.asarray(0.0))),
        "val_acc_prev": None if math.isnan(vap) else vap,
        "rng_state": ((int(rs[0]) << 32) | int(rs[1]),
                      (int(rs[2]) << 32) | int(rs[3])),
        "config_json": bytes(cfg_bytes.astype(np.uint8)).decode("utf-8"),
    }
    return tensors, meta


def pack_training_state(params: dict[str, Tensor], opt: AdadeltaState) -> dict[str, np.ndarray]:
    out = {n: p.data for n, p in params.items()}
    out.update({f"opt/acc_g/{n}": a for n, a in opt.acc_g.items()})
    out.update({f"opt/acc_dx/{n}": a for n, a in opt.acc_dx.items()})
    return out


def unpack_training_state(tensors: dict[str, np.ndarray], params: dict[str, Tensor],
                          epsilon: float) -> AdadeltaState:
    opt = AdadeltaState({}, {}, epsilon)
    for n, p in params.items():
        if n not in tensors:
            raise ValueError(f"checkpoint missing tensor {n}")
        if tensors[n].shape != p.data.shape:
            raise ValueError(f"checkpoint tensor {n} has shape {tensors[n].shape}, "
                             f"expected {p.data.shape}")
        p.data = tensors[n].copy()
        opt.acc_g[n] = tensors.get(f"opt/acc_g/{n}", np.zeros_like(p.data)).copy()
        opt.acc_dx[n] = tensors.get(f"opt/acc_dx/{n}", np.zeros_like(p.data)).copy()
    return opt


# ---------------------------------------------------------------------------
# data preparation and the training loop


@dataclass
class PreparedUtterance:
    utterance_id: str
    feats: np.ndarray
    label_ids: list[int]
    transcript: str


def prepare_dataset(records: list[ManifestRecord], vocab: SubwordVocab,
                    feat_config: FeatureConfig, synth_config: SynthConfig | None,
                    seed: int, augment: bool = False,
                    cache: dict[str, np.ndarray] | None = None) -> list[PreparedUtterance]:
    """Featurize every manifest record (optionally with 3-fold speed
    perturbation, id-suffixed per factor) and encode its transcript.

    With a feature cache (from the featurize stage) matrices are looked up
    by utterance id instead of recomputed."""
    out = []
    for rec in records:
        labels = bpe_encode(rec.transcript, vocab)
        factors = feat_config.speed_factors if augment else (1.0,)
        wave = None if cache is not None else load_waveform(rec, synth_config, seed)
        for f in factors:
            uid = rec.utterance_id if f == 1.0 else f"{rec.utterance_id}-sp{f}"
            if cache is not None:
                if uid not in cache:
                    raise ValueError(f"feature cache has no entry for {uid} "
                                     "(was it built with the same --augment?)")
                frames = cache[uid]
            else:
                w = speed_perturb(wave, f) if f != 1.0 else wave
                frames = mel_filterbank(w, feat_config, utterance_id=uid,
                                        transcript=rec.transcript).frames
            out.append(PreparedUtterance(uid, frames, labels, rec.transcript))
    return out


def make_batches(data: list[PreparedUtterance], batch_size: int) -> list[list[int]]:
    """Bucket by feature length, then cut fixed-size batches."""
    order = sorted(range(len(data)), key=lambda i: (data[i].feats.shape[0], i))
    return [order[i:i + batch_size] for i in range(0, len(order), batch_size)]


def batch_order_for_epoch(n_batches: int, seed: int, epoch: int) -> list[int]:
    order = list(range(n_batches))
    Pcg32(seed, STREAM_SHUFFLE + epoch).shuffle(order)
    return order


def teacher_forcing_accuracy(data: list[PreparedUtterance],
                             params: dict[str, Tensor], config: ModelConfig,
                             vocab: SubwordVocab) -> float:
    hits = steps = 0
    for utt in data:
        fwd = utterance_forward(utt.feats, utt.label_ids, params, config, vocab,
                                need_ctc=False)
        hits += fwd.hits
        steps += fwd.steps
    return hits / steps if steps else 0.0


class EpsDecaySchedule:
    """Tracks validation accuracy; a measurement strictly below the previous
    one multiplies the optimizer epsilon by the decay factor."""

    def __init__(self, config: TrainConfig, last: float | None = None):
        self.config = config
        self.last = last

    def observe(self, acc: float, opt: AdadeltaState) -> bool:
        dropped = self.last is not None and acc < self.last
        if dropped:
            opt.epsilon *= self.config.eps_decay
        self.last = acc
        return dropped


@dataclass
class TrainResult:
    params: dict[str, Tensor]
    opt: AdadeltaState
    metrics: list[dict]
    events: list[str]
    val_history: list[float]
    last_val: float | None  # feeds the eps-decay schedule across resumes


METRICS_HEADER = "iteration,train_loss,train_acc,val_acc,epsilon"


def write_metrics_csv(path, rows: list[dict]) -> None:
    tmp = Path(str(path) + ".tmp")
    with open(tmp, "w", encoding="utf-8") as f:
        f.write(METRICS_HEADER + "\n")
        for r in rows:
            val = "" if r["val_acc"] is None else f"{r['val_acc']:.6f}"
            f.write(f"{r['iteration']},{r['train_loss']:.6f},"
                    f"{r['train_acc']:.6f},{val},{r['epsilon']:.3e}\n")
    tmp.replace(path)


def train(train_data: list[PreparedUtterance], dev_data: list[PreparedUtterance],
          vocab: SubwordVocab, model_config: ModelConfig, config: TrainConfig,
          seed: int, resume_from: str | None = None,
          log=lambda msg: None) -> TrainResult:
    if not train_data:
        raise ValueError("training set is empty")
    params = build_model_params(model_config, vocab.size, seed)
    opt = AdadeltaState.fresh(params, config.epsilon)
    start_iter = 0
    val_prev: float | None = None
    metrics: list[dict] = []
    events: list[str] = []
    val_history: list[float] = []

    if resume_from:
        tensors, meta = load_checkpoint(resume_from)
        opt = unpack_training_state(tensors, params, meta["epsilon"])
        start_iter = meta["iteration"]
        val_prev = meta["val_acc_prev"]

    batches = make_batches(train_data, config.batch_size)
    n_batches = len(batches)
    alpha = config.alpha
    need_ctc = alpha > 0.0
    epoch_order: list[int] = []
    epoch_of_order = -1

    schedule = EpsDecaySchedule(config, val_prev)
    for it in range(start_iter, config.iterations):
        epoch = it // n_batches
        if epoch != epoch_of_order:
            epoch_order = batch_order_for_epoch(n_batches, seed, epoch)
            epoch_of_order = epoch
        batch = batches[epoch_order[it % n_batches]]

        losses = []
        hits = steps = 0
        skipped = 0
        for idx in batch:
            utt = train_data[idx]
            fwd = utterance_forward(utt.feats, utt.label_ids, params,
                                    model_config, vocab, need_ctc=need_ctc)
            if need_ctc and fwd.ctc_infeasible:
                skipped += 1
                events.append(f"iter {it}: {utt.utterance_id} infeasible for CTC, skipped")
                log(events[-1])
                continue
            loss = fwd.att_loss if not need_ctc else joint_loss(fwd.ctc_loss,
                                                                fwd.att_loss, alpha)
            losses.append(loss)
            hits += fwd.hits
            steps += fwd.steps
        if not losses:
            if skipped == len(batch) and all(
                    not ctc_ok(u, model_config) for u in train_data) and need_ctc:
                raise RuntimeError(
                    "every training sample is infeasible for CTC "
                    "(downsampled frames < label length); corpus unusable")
            events.append(f"iter {it}: whole batch skipped")
            continue

        total = nm.scale(nm.add_n(losses) if len(losses) > 1 else losses[0],
                         1.0 / len(losses))
        for p in params.values():
            p.zero_grad()
        nm.backward(total)
        grads = {n: (p.grad if p.grad is not None else np.zeros_like(p.data))
                 for n, p in params.items()}
        applied = adadelta_step(params, grads, opt, config)
        if not applied:
            events.append(f"iter {it}: non-finite gradients, step skipped")
            log(events[-1])

        if dev_data and (it + 1) % config.val_interval == 0:
            acc = teacher_forcing_accuracy(dev_data, params, model_config, vocab)
            val_history.append(acc)
            prev = schedule.last
            if schedule.observe(acc, opt):
                events.append(f"iter {it + 1}: val acc dropped "
                              f"{prev:.4f} -> {acc:.4f}, epsilon = {opt.epsilon:.3e}")
                log(events[-1])

        metrics.append({"iteration": it + 1, "train_loss": total.item(),
                        "train_acc": hits / steps if steps else 0.0,
                        "val_acc": schedule.last, "epsilon": opt.epsilon})

    return TrainResult(params, opt, metrics, events, val_history, schedule.last)


def ctc_ok(utt: PreparedUtterance, config: ModelConfig) -> bool:
    from .ctc import ctc_feasible
    from .encoder import downsampled_length
    return ctc_feasible(downsampled_length(utt.feats.shape[0]), utt.label_ids)


def checkpoint_meta(config_json: str, iteration: int, opt: AdadeltaState,
                    val_prev: float | None, seed: int) -> dict:
    rng = Pcg32(seed, STREAM_SHUFFLE)
    return {"iteration": iteration, "epsilon": opt.epsilon,
            "val_acc_prev": val_prev, "rng_state": rng.getstate(),
            "config_json": config_json}
