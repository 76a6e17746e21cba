"""Training loops: rectilinear baseline training and frozen-backbone adaptation.

Adaptation never touches the convolution weights learned on rectilinear
imagery.  Depending on the mode it trains the offset predictors of
deformable convolutions, the batch-norm affine parameters (with running
statistics allowed to follow the new domain), or both, restricted to the
encoder, the decoder, or the whole network.  Every adaptation run ends
with a bitwise audit proving that nothing outside the advertised set of
tensors changed.
"""

import dataclasses
import logging
import math
import time

import numpy as np

from . import data as D
from . import metrics as M
from . import model as Mo
from . import tensor as T
from .layers import PLACEMENTS
from .model import VOID_ID, load_checkpoint, partition_parameters
from .tensor import Tensor

log = logging.getLogger(__name__)

MODE_BN_ONLY = "BN_ONLY"
MODE_DCN_ONLY = "DCN_ONLY"
MODE_DCN_BN = "DCN_BN"
MODES = (MODE_BN_ONLY, MODE_DCN_ONLY, MODE_DCN_BN)

DEFAULT_SEEDS = (17, 42, 1337)
FULL_SET = "full"

# Named randomness sub-streams derived from one run seed.
_STREAMS = {"init": 0, "order": 1, "augment": 2, "subset": 3, "data": 4}


def substream(seed, name):
    """Independent generator for one named purpose under a shared seed."""
    return np.random.default_rng([int(seed), _STREAMS[name]])


def substream_key(seed, name):
    """Seed material for APIs that build their own generator."""
    return [int(seed), _STREAMS[name]]


class DivergenceError(RuntimeError):
    """Raised when the training loss stops being finite."""


# ---------------------------------------------------------------------------
# schedules, weights, optimizer
# ---------------------------------------------------------------------------


def poly_lr(lr0, step, total, power=0.9):
    """Polynomial decay lr0 * (1 - step/total) ** power."""
    if total <= 0:
        raise ValueError("total step count must be positive")
    if not 0 <= step <= total:
        raise ValueError(f"step {step} outside [0, {total}]")
    return lr0 * (1.0 - step / total) ** power


def schedule_scale(step, total, warmup_steps, power=0.9):
    """Poly decay with an optional linear ramp over the first steps.

    Freshly attached offset predictors take full-size Adam steps from
    the very first noisy gradients; at desk scale those few steps are a
    large fraction of the run, so without a ramp the model spends most
    of its budget recovering from them.
    """
    scale = poly_lr(1.0, step, total, power)
    if warmup_steps > 0:
        scale *= min(1.0, (step + 1) / warmup_steps)
    return scale


def inverse_frequency_weights(counts, clip=(0.5, 2.5)):
    """Per-class loss weights from pixel counts, 1.0 for a balanced class.

    Classes that never occur get weight 1.0; they are inert because the
    loss never selects them.
    """
    counts = np.asarray(counts, dtype=np.float64)
    total = counts.sum()
    if total <= 0:
        raise ValueError("no counted pixels")
    weights = np.ones_like(counts)
    present = counts > 0
    weights[present] = total / (present.sum() * counts[present])
    return np.clip(weights, clip[0], clip[1])


def matched_step_epochs(epochs, full_n, subset_n, cap_factor=2.4):
    """Epoch count for a subset run with roughly the full run's step budget.

    Training every subset for the same number of epochs would starve the
    small runs of optimizer steps and the curve would measure schedule
    length instead of data value, so subset runs stretch their epoch
    count in proportion.  The cap keeps single-digit subsets from
    spending far longer re-scoring the validation split than training.
    """
    if subset_n is None or subset_n >= full_n:
        return epochs
    if subset_n < 1:
        raise ValueError("subset_n must be >= 1 when given")
    scaled = math.ceil(epochs * full_n / subset_n)
    return min(scaled, int(cap_factor * epochs))


class Adam:
    """Adam over named learning-rate groups with a shared schedule scale."""

    def __init__(self, groups, beta1=0.9, beta2=0.999, eps=1e-8):
        self.groups = [(list(params), float(lr)) for params, lr in groups]
        self.beta1 = beta1
        self.beta2 = beta2
        self.eps = eps
        self.t = 0
        self._m = [[np.zeros_like(p.data) for p in params]
                   for params, _ in self.groups]
        self._v = [[np.zeros_like(p.data) for p in params]
                   for params, _ in self.groups]

    def parameters(self):
        return [p for params, _ in self.groups for p in params]

    def zero_grad(self):
        for p in self.parameters():
            p.zero_grad()

    def step(self, scale=1.0):
        self.t += 1
        bias1 = 1.0 - self.beta1 ** self.t
        bias2 = 1.0 - self.beta2 ** self.t
        for gi, (params, lr) in enumerate(self.groups):
            for pi, p in enumerate(params):
                g = p.grad
                if g is None:
                    g = np.zeros_like(p.data)
                m = self._m[gi][pi]
                v = self._v[gi][pi]
                m *= self.beta1
                m += (1.0 - self.beta1) * g
                v *= self.beta2
                v += (1.0 - self.beta2) * g * g
                p.data -= (lr * scale) * (m / bias1) / (np.sqrt(v / bias2)
                                                        + self.eps)


# ---------------------------------------------------------------------------
# run configuration
# ---------------------------------------------------------------------------


def _check_common(cfg):
    if cfg.epochs < 1:
        raise ValueError("epochs must be >= 1")
    if cfg.batch_size < 1:
        raise ValueError("batch_size must be >= 1")
    if cfg.lr_encoder <= 0 or cfg.lr_decoder <= 0:
        raise ValueError("learning rates must be positive")
    if cfg.seed < 0:
        raise ValueError("seed must be non-negative")


@dataclasses.dataclass(frozen=True)
class BaselineConfig:
    """Hyperparameters for training the rectilinear baseline."""

    epochs: int = 40
    lr_encoder: float = 0.005
    lr_decoder: float = 0.05
    batch_size: int = 8
    seed: int = 17
    poly_power: float = 0.9
    warmup_epochs: float = 0.0
    weight_clip: tuple = (0.5, 2.5)
    augment: D.AugmentConfig | None = D.AugmentConfig()
    n_classes: int = Mo.N_CLASSES_DEFAULT

    def __post_init__(self):
        _check_common(self)


@dataclasses.dataclass(frozen=True)
class AdaptationConfig:
    """What to adapt (mode), where (placement), and how long."""

    mode: str
    placement: str
    epochs: int = 35
    lr_encoder: float = 0.0005
    lr_decoder: float = 0.005
    batch_size: int = 4
    subset_n: int | None = None
    seed: int = 17
    poly_power: float = 0.9
    warmup_epochs: float = 2.0
    weight_clip: tuple = (0.5, 2.5)
    augment: D.AugmentConfig | None = D.AugmentConfig()

    def __post_init__(self):
        if self.mode not in MODES:
            raise ValueError(f"unknown mode {self.mode!r}; expected one of {MODES}")
        if self.placement not in PLACEMENTS:
            raise ValueError(
                f"unknown placement {self.placement!r}; expected one of {PLACEMENTS}")
        if self.subset_n is not None and self.subset_n < 1:
            raise ValueError("subset_n must be >= 1 when given")
        if self.warmup_epochs < 0:
            raise ValueError("warmup_epochs must be >= 0")
        _check_common(self)


@dataclasses.dataclass
class TrainReport:
    """Per-epoch curves plus the final held-out score.

    ``final_test_miou`` scores the best-validation-epoch checkpoint
    (``selected_epoch``), not the last epoch's weights.  ``wall_time_s``
    is logged for humans and deliberately kept out of the written
    artifacts so reruns are byte-identical.
    """

    config: dict
    history: list
    final_test_miou: float
    wall_time_s: float
    selected_epoch: int = 0

    def __post_init__(self):
        for i, row in enumerate(self.history):
            if row["epoch"] != i:
                raise ValueError("history epochs must be 0..n-1 in order")
            if not (math.isfinite(row["train_loss"])
                    and math.isfinite(row["val_miou"])):
                raise ValueError("non-finite value in history")
        if not math.isfinite(self.final_test_miou):
            raise ValueError("non-finite test mIoU")
        if not 0 <= self.selected_epoch < len(self.history):
            raise ValueError("selected_epoch outside the trained range")

    def write_history_csv(self, path):
        with open(path, "w", newline="") as fh:
            fh.write("epoch,train_loss,val_miou\n")
            for row in self.history:
                fh.write(f"{row['epoch']},{row['train_loss']:.6f},"
                         f"{row['val_miou']:.6f}\n")

    def write_summary_json(self, path):
        import json
        payload = {
            "config": self.config,
            "epochs": len(self.history),
            "final_train_loss": self.history[-1]["train_loss"],
            "final_val_miou": self.history[-1]["val_miou"],
            "selected_epoch": self.selected_epoch,
            "selected_val_miou": self.history[self.selected_epoch]["val_miou"],
            "final_test_miou": self.final_test_miou,
        }
        with open(path, "w") as fh:
            json.dump(payload, fh, indent=2, sort_keys=True)
            fh.write("\n")


# ---------------------------------------------------------------------------
# data plumbing
# ---------------------------------------------------------------------------


def _load_split(manifest, split, variant):
    images, labels = [], []
    for entry in manifest.select(split, variant):
        sample = manifest.load_sample(entry)
        images.append(sample.image)
        labels.append(sample.labels)
    return images, labels


def _eval_pairs(images, labels):
    return [(D.to_model_input(img), lab) for img, lab in zip(images, labels)]


def split_pairs(manifest, split, variant):
    """(planes, labels) evaluation pairs for one manifest split."""
    images, labels = _load_split(manifest, split, variant)
    return _eval_pairs(images, labels)


def evaluate_split(model, manifest, split, variant, void_id=VOID_ID,
                   batch_size=8):
    """Mean IoU of eval-mode predictions over one manifest split."""
    images, labels = _load_split(manifest, split, variant)
    if not images:
        raise ValueError(f"no {variant} samples in split {split!r}")
    matrix = M.evaluate_model(model, _eval_pairs(images, labels),
                              void_id=void_id, batch_size=batch_size)
    return matrix.mean_iou(), matrix


def _encoder_decoder_groups(named_params, lr_encoder, lr_decoder):
    enc = [p for n, p in named_params if n.split(".")[0] in Mo.ENCODER_BLOCKS]
    dec = [p for n, p in named_params if n.split(".")[0] in Mo.DECODER_BLOCKS]
    groups = []
    if enc:
        groups.append((enc, lr_encoder))
    if dec:
        groups.append((dec, lr_decoder))
    if not groups:
        raise ValueError("nothing to train")
    return groups


# ---------------------------------------------------------------------------
# the shared loop
# ---------------------------------------------------------------------------


def _snapshot_state(model):
    return {name: arr.copy() for name, arr, _ in model.named_tensors()}


def _restore_state(model, state):
    for name, param in model.named_parameters():
        param.data[...] = state[name]
    for name, buf in model.named_buffers():
        buf[...] = state[name]


def _fit(model, optimizer, images, labels, cfg, class_w, val_pairs,
         void_id=VOID_ID):
    """Run the epoch loop; returns (history, selected_epoch).

    The model is left holding the parameters of the epoch with the best
    validation mIoU (earliest wins ties), not the last one: near the
    end of a decayed schedule consecutive epochs differ mostly by
    noise, and the held-out score should not inherit that coin flip.
    """
    n = len(images)
    if n == 0:
        raise ValueError("empty training split")
    order_rng = substream(cfg.seed, "order")
    augment_rng = substream(cfg.seed, "augment")
    n_batches = math.ceil(n / cfg.batch_size)
    total_steps = cfg.epochs * n_batches
    warmup_steps = int(round(getattr(cfg, "warmup_epochs", 0.0) * n_batches))
    history = []
    best_val, best_epoch, best_state = -1.0, 0, None
    step = 0
    for epoch in range(cfg.epochs):
        t0 = time.perf_counter()
        order = order_rng.permutation(n)
        epoch_loss = 0.0
        for start in range(0, n, cfg.batch_size):
            planes, labs = [], []
            for i in order[start:start + cfg.batch_size]:
                x = D.to_model_input(images[i])
                y = labels[i]
                if cfg.augment is not None:
                    x, y = D.augment_sample(x, y, augment_rng, cfg.augment,
                                            void_id=void_id)
                planes.append(x)
                labs.append(y)
            logits = model(Tensor(np.stack(planes)), training=True)
            loss = T.weighted_cross_entropy(logits, np.stack(labs), class_w,
                                            void_id)
            if not np.isfinite(loss.data):
                raise DivergenceError(
                    f"non-finite loss at epoch {epoch}, step {step}")
            optimizer.zero_grad()
            loss.backward()
            optimizer.step(scale=schedule_scale(step, total_steps,
                                                warmup_steps, cfg.poly_power))
            step += 1
            epoch_loss += float(loss.data)
        val_miou = M.evaluate_model(model, val_pairs,
                                    void_id=void_id).mean_iou()
        history.append({"epoch": epoch,
                        "train_loss": epoch_loss / n_batches,
                        "val_miou": val_miou})
        if val_miou > best_val:
            best_val, best_epoch, best_state = val_miou, epoch, \
                _snapshot_state(model)
        log.info("epoch %d/%d loss %.4f val mIoU %.4f (%.1fs)",
                 epoch + 1, cfg.epochs, history[-1]["train_loss"], val_miou,
                 time.perf_counter() - t0)
    if best_epoch != cfg.epochs - 1:
        log.info("restoring epoch %d (val mIoU %.4f)", best_epoch, best_val)
    _restore_state(model, best_state)
    return history, best_epoch


def _class_weights_for(labels, n_classes, clip, void_id=VOID_ID):
    counts = np.zeros(n_classes, dtype=np.int64)
    for lab in labels:
        counts += D.label_histogram(lab, n_classes, void_id=void_id)
    return inverse_frequency_weights(counts, clip)


# ---------------------------------------------------------------------------
# baseline training
# ---------------------------------------------------------------------------


def train_baseline(manifest, cfg=BaselineConfig(), void_id=VOID_ID,
                   variant=D.VARIANT_RECT):
    """Train a fresh model on one image variant; returns (model, report).

    The default trains the rectilinear baseline; passing the fisheye
    variant gives the from-scratch distorted-domain reference run.
    """
    t0 = time.perf_counter()
    images, labels = _load_split(manifest, "train", variant)
    val_pairs = _eval_pairs(*_load_split(manifest, "val", variant))
    model = Mo.SegModel(n_classes=cfg.n_classes,
                        rng=substream(cfg.seed, "init"))
    class_w = _class_weights_for(labels, model.n_classes, cfg.weight_clip,
                                 void_id)
    optimizer = Adam(_encoder_decoder_groups(model.named_parameters(),
                                             cfg.lr_encoder, cfg.lr_decoder))
    history, selected = _fit(model, optimizer, images, labels, cfg, class_w,
                             val_pairs, void_id)
    test_miou, _ = evaluate_split(model, manifest, "test", variant,
                                  void_id, cfg.batch_size)
    report = TrainReport(config=dataclasses.asdict(cfg), history=history,
                         final_test_miou=test_miou,
                         wall_time_s=time.perf_counter() - t0,
                         selected_epoch=selected)
    log.info("baseline done: test mIoU %.4f in %.1fs",
             test_miou, report.wall_time_s)
    return model, report


# ---------------------------------------------------------------------------
# adaptation
# ---------------------------------------------------------------------------


def _allowed_changes(model, cfg):
    """Tensor names the mode/placement combination may legitimately alter."""
    groups = partition_parameters(model)
    allowed = set()
    if cfg.mode in (MODE_DCN_ONLY, MODE_DCN_BN):
        allowed.update(groups["offset"])
    if cfg.mode in (MODE_BN_ONLY, MODE_DCN_BN):
        blocks = (Mo.ENCODER_BLOCKS if cfg.placement == "ENCODER"
                  else Mo.DECODER_BLOCKS if cfg.placement == "DECODER"
                  else Mo.BLOCK_ORDER)
        for name in groups["bn_affine"] + groups["bn_running"]:
            if name.split(".")[0] in blocks:
                allowed.add(name)
    return allowed


def _configure_trainable(model, cfg):
    """Freeze everything, then re-enable exactly what the mode adapts."""
    for _, param in model.named_parameters():
        param.requires_grad = False
    for block in model.blocks_for_placement("BOTH"):
        if block.bn is not None:
            block.bn.stats_frozen = True
    if cfg.mode in (MODE_DCN_ONLY, MODE_DCN_BN):
        model.convert_to_deformable(cfg.placement)  # adds trainable offsets
    if cfg.mode in (MODE_BN_ONLY, MODE_DCN_BN):
        for block in model.blocks_for_placement(cfg.placement):
            if block.bn is not None:
                block.bn.gamma.requires_grad = True
                block.bn.beta.requires_grad = True
                block.bn.stats_frozen = False
    return model.trainable_parameters()


def adapt(baseline_path, manifest, cfg, void_id=VOID_ID):
    """Adapt a saved baseline to the warped domain; returns (model, report).

    Trains on the fisheye variant of the manifest's train split (or a
    deterministic subset of ``cfg.subset_n`` scenes) and verifies
    afterwards that only the tensors the mode advertises have changed.
    """
    t0 = time.perf_counter()
    model = load_checkpoint(baseline_path)
    if cfg.subset_n is not None:
        manifest = D.sample_fewshot_subset(manifest, cfg.subset_n,
                                           seed=substream_key(cfg.seed,
                                                              "subset"))
    images, labels = _load_split(manifest, "train", D.VARIANT_FISHEYE)
    val_pairs = _eval_pairs(*_load_split(manifest, "val", D.VARIANT_FISHEYE))

    trainable = _configure_trainable(model, cfg)
    before = {name: arr.copy() for name, arr, _ in model.named_tensors()}
    class_w = _class_weights_for(labels, model.n_classes, cfg.weight_clip,
                                 void_id)
    optimizer = Adam(_encoder_decoder_groups(trainable, cfg.lr_encoder,
                                             cfg.lr_decoder))
    history, selected = _fit(model, optimizer, images, labels, cfg, class_w,
                             val_pairs, void_id)

    allowed = _allowed_changes(model, cfg)
    changed = {name for name, arr, _ in model.named_tensors()
               if not np.array_equal(arr, before[name])}
    stray = changed - allowed
    if stray:
        raise RuntimeError(
            f"freeze contract violated; unexpected changes: {sorted(stray)}")

    test_miou, _ = evaluate_split(model, manifest, "test", D.VARIANT_FISHEYE,
                                  void_id, cfg.batch_size)
    report = TrainReport(config=dataclasses.asdict(cfg), history=history,
                         final_test_miou=test_miou,
                         wall_time_s=time.perf_counter() - t0,
                         selected_epoch=selected)
    log.info("adapt %s@%s done: test mIoU %.4f in %.1fs",
             cfg.mode, cfg.placement, test_miou, report.wall_time_s)
    return model, report


# ---------------------------------------------------------------------------
# ablation suite
# ---------------------------------------------------------------------------


def write_score_rows(path, rows):
    """Fixed-schema CSV: mode,placement,n,seed,miou."""
    with open(path, "w", newline="") as fh:
        fh.write("mode,placement,n,seed,miou\n")
        for r in rows:
            fh.write(f"{r['mode']},{r['placement']},{r['n']},{r['seed']},"
                     f"{r['miou']:.6f}\n")


def run_ablation_suite(baseline_path, manifest, out_dir, *,
                       seeds=DEFAULT_SEEDS, epochs=35, batch_size=4,
                       lr_encoder=0.0005, lr_decoder=0.005,
                       warmup_epochs=2.0, fewshot_sizes=(1, 50, 100, None),
                       augment=D.AugmentConfig(), void_id=VOID_ID):
    """Every mode x placement, plus a few-shot curve for the full setting.

    Writes ``sweep.csv`` and ``fewshot.csv`` under ``out_dir`` (schema
    mode,placement,n,seed,miou; ``n`` is "full" for the whole train set)
    and returns the row dicts.  The few-shot "full" rows reuse the sweep's
    DCN_BN @ BOTH runs, which have the identical configuration.  Subset
    rows train for ``matched_step_epochs`` so every point on the curve
    gets a comparable optimizer-step budget.
    """
    import os
    os.makedirs(out_dir, exist_ok=True)
    full_n = len(manifest.scene_ids(D.SPLIT_TRAIN))

    def one(mode, placement, subset_n, seed):
        cfg = AdaptationConfig(mode=mode, placement=placement,
                               epochs=matched_step_epochs(epochs, full_n,
                                                          subset_n),
                               lr_encoder=lr_encoder, lr_decoder=lr_decoder,
                               batch_size=batch_size, subset_n=subset_n,
                               warmup_epochs=warmup_epochs, seed=seed,
                               augment=augment)
        _, report = adapt(baseline_path, manifest, cfg, void_id)
        return {"mode": mode, "placement": placement,
                "n": FULL_SET if subset_n is None else subset_n,
                "seed": seed, "miou": report.final_test_miou}

    sweep = [one(mode, placement, None, seed)
             for mode in MODES for placement in PLACEMENTS for seed in seeds]
    fewshot = []
    for n in fewshot_sizes:
        for seed in seeds:
            if n is None:
                row = next(r for r in sweep
                           if r["mode"] == MODE_DCN_BN
                           and r["placement"] == "BOTH"
                           and r["seed"] == seed)
                fewshot.append(dict(row))
            else:
                fewshot.append(one(MODE_DCN_BN, "BOTH", n, seed))

    sweep_csv = os.path.join(out_dir, "sweep.csv")
    fewshot_csv = os.path.join(out_dir, "fewshot.csv")
    write_score_rows(sweep_csv, sweep)
    write_score_rows(fewshot_csv, fewshot)
    return {"sweep": sweep, "fewshot": fewshot,
            "sweep_csv": sweep_csv, "fewshot_csv": fewshot_csv}
