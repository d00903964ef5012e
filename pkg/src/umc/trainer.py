"""Deterministic training and evaluation loops.

The input image is bound once per batch and every pathway's loss reads from
the same forward pass. Per-pathway supervision comes from a binding table
(pathway name -> sample field); regression pathways compare against the
normalized clean image under MSE, classification pathways against a label
map under softmax cross-entropy, and the joint loss is their weighted sum.
All shuffling, augmentation coins and initialization flow from one seed.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from .autodiff import Graph
from .data import (IGNORE_INDEX, dataset_stats, denormalize, flip_sample,
                   normalize)
from .metrics import MetricsReport, confusion, miou, per_class_iou, pixel_accuracy, psnr
from .model import ModelGraph, UmcConfig, build, count_params, init_params
from .ops import AdamState, adam_step
from .rng import STREAM_AUGMENT, STREAM_SHUFFLE, make_rng


class TrainError(RuntimeError):
    """Training aborted (non-finite loss or optimizer blowup)."""


class BindingError(ValueError):
    """Pathway supervision table is inconsistent with the model or data."""


_IMAGE_FIELDS = ("clean", "noisy")
_LABEL_FIELDS = ("fine", "coarse", "category", "coarse_category")
_FIELD_ALIASES = {"cat": "category", "coarsecat": "coarse_category"}

# conventional pathway names resolve to their matching label granularity
_NAME_BINDINGS = {"f_cls": "fine", "c_cls": "coarse",
                  "f_cat": "category", "c_cat": "coarse_category"}


@dataclass(frozen=True)
class TrainConfig:
    epochs: int = 20
    max_steps: int | None = None
    batch_size: int = 2
    lr: float = 0.003
    beta1: float = 0.9
    beta2: float = 0.999
    seed: int = 0
    sigma: float = 0.0
    input_field: str = "noisy"
    bindings: dict = field(default_factory=dict)
    flip_probability: float = 0.5
    eval_every: int | None = None

    def validate(self) -> "TrainConfig":
        if self.epochs < 0:
            raise BindingError(f"epochs must be >= 0, got {self.epochs}")
        if self.batch_size < 1:
            raise BindingError(f"batch_size must be >= 1, got {self.batch_size}")
        for nm in ("beta1", "beta2"):
            v = getattr(self, nm)
            if not (0.0 <= v < 1.0):
                raise BindingError(f"{nm} must lie in [0, 1), got {v}")
        if self.input_field not in _IMAGE_FIELDS:
            raise BindingError(f"input_field must be one of {_IMAGE_FIELDS}, "
                               f"got '{self.input_field}'")
        return self


def resolve_bindings(config: UmcConfig, explicit: dict | None = None) -> dict:
    """One supervision field per pathway; unknown or missing entries fail."""
    explicit = dict(explicit or {})
    unknown = set(explicit) - {p.name for p in config.pathways}
    if unknown:
        raise BindingError(f"bindings name unknown pathways: {sorted(unknown)}")
    out = {}
    for p in config.pathways:
        raw = explicit.get(p.name)
        if raw is None:
            raw = "clean" if p.task == "regression" else \
                  _NAME_BINDINGS.get(p.name, "fine")
        fld = _FIELD_ALIASES.get(raw, raw)
        if p.task == "regression" and fld not in _IMAGE_FIELDS:
            raise BindingError(f"regression pathway '{p.name}' must bind an image "
                               f"field, got '{raw}'")
        if p.task == "classification" and fld not in _LABEL_FIELDS:
            raise BindingError(f"classification pathway '{p.name}' must bind a "
                               f"label field, got '{raw}'")
        out[p.name] = fld
    return out


def attach_losses(model: ModelGraph) -> dict:
    """Add per-pathway loss nodes plus their weighted sum to the graph.

    Returns node ids: {'total': id, '<pathway>': id, ...}. New graph inputs
    are 'target:<name>' for regression and 'labels:<name>' for classification.
    """
    g: Graph = model.graph
    ids, weights = {}, []
    for p in model.config.pathways:
        head = model.output_ids[p.name]
        if p.task == "regression":
            tgt = g.input(f"target:{p.name}", channels=p.out_channels)
            ids[p.name] = g.apply("mse", head, tgt)
        else:
            lab = g.input(f"labels:{p.name}", integer=True)
            ids[p.name] = g.apply("softmax_ce", head, lab,
                                  ignore_index=IGNORE_INDEX)
        g.mark_output(f"loss:{p.name}", ids[p.name])
        weights.append(float(p.loss_weight))
    total = g.apply("wsum", *[ids[p.name] for p in model.config.pathways],
                    weights=weights)
    g.mark_output("loss:total", total)
    ids["total"] = total
    return ids


def prepare_batch(samples, indices, stats, bindings, input_field,
                  flip_rng=None, flip_p=0.5) -> dict:
    """Graph bindings for one batch: normalized input plus per-pathway targets."""
    mean, std = stats
    batch = [samples[i] for i in indices]
    if flip_rng is not None:
        batch = [flip_sample(s) if flip_rng.random() < flip_p else s for s in batch]
    out = {"input": np.stack([normalize(getattr(s, input_field), mean, std)
                              for s in batch])}
    for name, fld in bindings.items():
        if fld in _IMAGE_FIELDS:
            out[f"target:{name}"] = np.stack(
                [normalize(getattr(s, fld), mean, std) for s in batch])
        else:
            out[f"labels:{name}"] = np.stack(
                [getattr(s, fld).astype(np.int64) for s in batch])
    return out


@dataclass
class RunLog:
    pathway_names: list
    rows: list = field(default_factory=list)     # (step, total, per-pathway list)
    evals: list = field(default_factory=list)    # (step, {pathway: MetricsReport})

    def append(self, step: int, total: float, per_pathway: dict) -> None:
        self.rows.append((step, total, [per_pathway[n] for n in self.pathway_names]))

    def csv(self) -> str:
        header = "step,loss_total," + ",".join(f"loss_{n}" for n in self.pathway_names)
        lines = [header]
        for step, total, per in self.rows:
            lines.append(f"{step}," + ",".join(f"{v:.9g}" for v in [total] + per))
        return "\n".join(lines) + "\n"


@dataclass
class TrainResult:
    config: UmcConfig
    params: dict
    optimizer: AdamState
    runlog: RunLog
    stats: tuple             # (mean, std) per channel
    bindings: dict


def train(model_config: UmcConfig, tc: TrainConfig, samples,
          eval_samples=None) -> TrainResult:
    tc.validate()
    if not samples:
        raise BindingError("training dataset is empty")
    bindings = resolve_bindings(model_config, tc.bindings)
    stats = dataset_stats(samples)

    model = build(model_config)
    init_params(model, tc.seed)
    attach_losses(model)
    g = model.graph
    total_id = g.outputs["loss:total"]
    names = [p.name for p in model_config.pathways]
    runlog = RunLog(pathway_names=names)

    params = g.param_values()
    state = AdamState(lr=tc.lr, beta1=tc.beta1, beta2=tc.beta2)
    step = 0
    n = len(samples)
    done = False
    for epoch in range(tc.epochs):
        order = make_rng(tc.seed, STREAM_SHUFFLE, epoch).permutation(n)
        for b0 in range(0, n, tc.batch_size):
            idxs = order[b0:b0 + tc.batch_size]
            flip_rng = make_rng(tc.seed, STREAM_AUGMENT, epoch, step)
            feed = prepare_batch(samples, idxs, stats, bindings, tc.input_field,
                                 flip_rng, tc.flip_probability)
            outs = g.forward(feed)
            total = float(outs["loss:total"])
            if not np.isfinite(total):
                raise TrainError(f"non-finite joint loss at step {step}")
            runlog.append(step, total,
                          {nm: float(outs[f"loss:{nm}"]) for nm in names})
            grads = g.backward(total_id)
            try:
                params = adam_step(params, grads, state)
            except Exception as e:
                raise TrainError(f"optimizer failure at step {step}: {e}") from e
            for nm, value in params.items():
                g.set_param(nm, value)
            step += 1
            if tc.eval_every and step % tc.eval_every == 0:
                reports = evaluate(model_config, params, stats,
                                   eval_samples or samples, bindings,
                                   input_field=tc.input_field,
                                   run_id=f"step{step}", sigma=tc.sigma)
                runlog.evals.append((step, reports))
            if tc.max_steps is not None and step >= tc.max_steps:
                done = True
                break
        if done:
            break
    return TrainResult(config=model_config, params=params, optimizer=state,
                       runlog=runlog, stats=stats, bindings=bindings)


# --------------------------------------------------------------------------
# Evaluation
# --------------------------------------------------------------------------


def regression_psnr(preds, cleans) -> float:
    """Mean per-image PSNR of clamped 0..255 predictions."""
    vals = [psnr(np.clip(p, 0, 255), c) for p, c in zip(preds, cleans)]
    return float(np.mean(vals))


def classification_scores(preds, gts, n_classes: int) -> tuple:
    """(miou, pixel accuracy, per-class IoU) over a whole prediction set."""
    cm = np.zeros((n_classes, n_classes), dtype=np.int64)
    for p, t in zip(preds, gts):
        cm += confusion(p, t, n_classes)
    return miou(cm), pixel_accuracy(cm), per_class_iou(cm)


def check_class_counts(config: UmcConfig, bindings: dict, meta: dict) -> None:
    """Heads must be as wide as the label vocabulary they are scored against."""
    vocab = {"fine": "n_classes", "coarse": "n_classes",
             "category": "n_categories", "coarse_category": "n_categories"}
    for p in config.pathways:
        fld = bindings[p.name]
        if fld in vocab and int(meta[vocab[fld]]) != p.out_channels:
            raise BindingError(
                f"pathway '{p.name}' has {p.out_channels} output channels but "
                f"the dataset provides {meta[vocab[fld]]} {vocab[fld].replace('_', ' ')}")


def evaluate(model_config: UmcConfig, params: dict, stats, samples,
             bindings: dict | None = None, *, input_field: str = "noisy",
             run_id: str = "eval", sigma: float = 0.0,
             batch_size: int = 4, meta: dict | None = None) -> dict:
    """Per-pathway MetricsReport over a dataset; no augmentation."""
    if not samples:
        raise BindingError("evaluation dataset is empty")
    bindings = resolve_bindings(model_config, bindings)
    if meta is not None:
        check_class_counts(model_config, bindings, meta)
    model = build(model_config)
    for nm, value in params.items():
        model.graph.set_param(nm, value)
    mean, std = stats

    outputs = {p.name: [] for p in model_config.pathways}
    for b0 in range(0, len(samples), batch_size):
        idxs = range(b0, min(b0 + batch_size, len(samples)))
        feed = prepare_batch(samples, idxs, stats, bindings, input_field)
        outs = model.graph.forward({"input": feed["input"]})
        for p in model_config.pathways:
            for img in outs[p.name]:
                outputs[p.name].append(img)

    reports = {}
    for p in model_config.pathways:
        rep = MetricsReport(run_id=run_id, sigma=sigma,
                            connectivity=model_config.connectivity)
        if p.task == "regression":
            preds = [denormalize(o, mean, std) for o in outputs[p.name]]
            rep.psnr_db = regression_psnr(preds, [s.clean for s in samples])
        else:
            preds = [np.argmax(o, axis=0) for o in outputs[p.name]]
            gts = [getattr(s, bindings[p.name]) for s in samples]
            rep.miou, rep.pixel_acc, rep.per_class_iou = \
                classification_scores(preds, gts, p.out_channels)
        reports[p.name] = rep
    return reports


# --------------------------------------------------------------------------
# Experiment protocols
# --------------------------------------------------------------------------


def denoise_segment_config(n_classes: int, connectivity: str,
                           filters=(4, 8, 16, 32, 64)) -> UmcConfig:
    """Two pathways, denoise then segment, bilinear upsampling."""
    from .model import PathwaySpec
    return UmcConfig(
        in_channels=3, filters=tuple(filters),
        pathways=(PathwaySpec("denoise", 3, "regression"),
                  PathwaySpec("segment", n_classes, "classification")),
        connectivity=connectivity, upsample_mode="bilinear").validate()


def experiment_one(sigmas, connectivities, gen_dataset, tc: TrainConfig,
                   n_classes: int, filters=(4, 8, 16, 32, 64)) -> tuple:
    """Denoise + segment grid over sigma x connectivity.

    ``gen_dataset(sigma)`` must return the SAME underlying clean set for
    every sigma so rows are comparable; cells read "mIoU (PSNRdB)".
    Returns (csv text, {(sigma, connectivity): reports}).
    """
    all_reports = {}
    lines = ["sigma," + ",".join(connectivities)]
    for sigma in sigmas:
        samples = gen_dataset(sigma)
        cells = []
        for conn in connectivities:
            config = denoise_segment_config(n_classes, conn, filters)
            run_tc = TrainConfig(
                epochs=tc.epochs, max_steps=tc.max_steps, batch_size=tc.batch_size,
                lr=tc.lr, seed=tc.seed, sigma=sigma, input_field="noisy",
                flip_probability=tc.flip_probability)
            result = train(config, run_tc, samples)
            reports = evaluate(config, result.params, result.stats, samples,
                               result.bindings, input_field="noisy",
                               run_id=f"s{sigma:g}-{conn}", sigma=sigma)
            all_reports[(sigma, conn)] = reports
            cells.append(f"{reports['segment'].miou:.3f} "
                         f"({reports['denoise'].psnr_db:.2f}dB)")
        lines.append(f"{sigma:g}," + ",".join(cells))
    return "\n".join(lines) + "\n", all_reports


EXPERIMENT_TWO_GROUPS = {
    "f_cls": ("f_cls",),
    "c_cls,f_cls": ("c_cls", "f_cls"),
    "c_cat,f_cls": ("c_cat", "f_cls"),
    "c_cat,f_cat,f_cls": ("c_cat", "f_cat", "f_cls"),
}


def coarse_to_fine_config(group: str, connectivity: str, n_classes: int,
                          n_categories: int, filters=(4, 8, 16, 32, 64)) -> UmcConfig:
    """Pathways for one supervision group, coarse first, fine-class last.

    The single-pathway group is the plain U-Net reference and keeps
    transposed-convolution upsampling; multi-pathway groups use bilinear.
    """
    from .model import PathwaySpec
    if group not in EXPERIMENT_TWO_GROUPS:
        raise BindingError(f"unknown group '{group}', expected one of "
                           f"{sorted(EXPERIMENT_TWO_GROUPS)}")
    names = EXPERIMENT_TWO_GROUPS[group]
    heads = {"f_cls": n_classes, "c_cls": n_classes,
             "f_cat": n_categories, "c_cat": n_categories}
    pathways = tuple(PathwaySpec(nm, heads[nm], "classification") for nm in names)
    upsample = "transposed2x2" if len(names) == 1 else "bilinear"
    return UmcConfig(in_channels=3, filters=tuple(filters), pathways=pathways,
                     connectivity=connectivity, upsample_mode=upsample).validate()


def experiment_two(group: str, connectivity: str, samples, tc: TrainConfig,
                   n_classes: int, n_categories: int,
                   filters=(4, 8, 16, 32, 64)) -> dict:
    """Train one supervision group on clean inputs; score the fine-class head."""
    config = coarse_to_fine_config(group, connectivity, n_classes,
                                   n_categories, filters)
    run_tc = TrainConfig(
        epochs=tc.epochs, max_steps=tc.max_steps, batch_size=tc.batch_size,
        lr=tc.lr, seed=tc.seed, sigma=0.0, input_field="clean",
        flip_probability=tc.flip_probability)
    result = train(config, run_tc, samples)
    reports = evaluate(config, result.params, result.stats, samples,
                       result.bindings, input_field="clean",
                       run_id=f"group-{group}-{connectivity}")
    fine = reports["f_cls"]
    return {
        "group": group,
        "connectivity": config.connectivity,
        "pixel_acc": fine.pixel_acc,
        "miou": fine.miou,
        "param_count": count_params(config)[0],
        "reports": reports,
        "result": result,
    }
