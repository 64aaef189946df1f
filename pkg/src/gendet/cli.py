"""Command-line interface: gen, train, eval, infer, sweep.

One JSON config file drives everything; command-line flags win over file
values. Exit codes: 0 ok, 2 config error, 3 data/IO error; failures print
one machine-readable JSON line to stderr before any output is touched.
"""

from __future__ import annotations

import argparse
import csv
import dataclasses
import json
import os
import sys
from dataclasses import dataclass, field

import numpy as np

from . import numcore as nc
from .evaluation import (
    compute_ap,
    exact_name_rate,
    rescale_scores,
    save_pr_csv,
    save_predictions,
    save_report,
)
from .featurizer import ModelConfig
from .model import Detector
from .numcore import CheckpointError, ConfigError
from .objective import LossWeights
from .synthdata import (
    DataError,
    SceneConfig,
    build_vocabulary,
    detokenize,
    generate_scene,
    read_dataset,
    read_ppm,
    write_dataset,
)

METRICS_HEADER = ["epoch", "total", "reg", "iou", "obj", "dag", "val_ap50", "val_exact_name"]
SWEEP_HEADER = ["axis", "value", "AP", "AP50", "AP75", "params"]
SWEEP_AXES = ("text_tokens", "decoder_layers")


@dataclass
class TrainConfig:
    epochs: int = 30
    batch_size: int = 16
    learning_rate: float = 1e-4
    warmup_steps: int = 30
    lr_floor: float = 0.05  # cosine decays to lr * lr_floor
    beta1: float = 0.9
    beta2: float = 0.999
    weight_decay: float = 1e-4
    flip_augment: bool = True  # random h/v flips during training
    seed: int = 0
    train_samples: int = 2000
    val_samples: int = 200
    loss_reg: float = 5.0
    loss_iou: float = 2.0
    loss_obj: float = 1.0
    loss_dag: float = 1.0

    def loss_weights(self):
        return LossWeights(
            reg=self.loss_reg, iou=self.loss_iou, obj=self.loss_obj, dag=self.loss_dag
        )


@dataclass
class RunConfig:
    model: ModelConfig = field(default_factory=ModelConfig)
    scene: SceneConfig = field(default_factory=SceneConfig)
    training: TrainConfig = field(default_factory=TrainConfig)

    def validate(self):
        self.model.validate()
        self.scene.validate()
        if self.training.epochs < 1 or self.training.batch_size < 1:
            raise ConfigError("epochs and batch_size must be positive")
        if self.training.train_samples < 1 or self.training.val_samples < 0:
            raise ConfigError("sample counts must be positive")
        return self

    def to_dict(self):
        return dataclasses.asdict(self)

    @staticmethod
    def from_dict(doc):
        if not isinstance(doc, dict):
            raise ConfigError("config root must be a JSON object")
        out = RunConfig()
        sections = {"model": out.model, "scene": out.scene, "training": out.training}
        unknown = set(doc) - set(sections)
        if unknown:
            raise ConfigError(f"unknown config sections {sorted(unknown)}")
        for section_name, target in sections.items():
            values = doc.get(section_name, {})
            if not isinstance(values, dict):
                raise ConfigError(f"config section {section_name!r} must be an object")
            known = {f.name for f in dataclasses.fields(target)}
            bad = set(values) - known
            if bad:
                raise ConfigError(f"unknown keys in {section_name}: {sorted(bad)}")
            for key, value in values.items():
                setattr(target, key, value)
        out.scene.normalize()
        return out


def load_config(path):
    try:
        with open(path, "r", encoding="utf-8") as fh:
            doc = json.load(fh)
    except FileNotFoundError:
        raise ConfigError(f"config file not found: {path}") from None
    except json.JSONDecodeError as e:
        raise ConfigError(f"{path}: invalid JSON at line {e.lineno} column {e.colno}") from None
    return RunConfig.from_dict(doc)


def apply_overrides(run, overrides):
    """Apply dotted key=value strings, e.g. training.epochs=5."""
    for item in overrides or []:
        if "=" not in item:
            raise ConfigError(f"override {item!r} is not of the form section.key=value")
        dotted, raw = item.split("=", 1)
        parts = dotted.split(".")
        if len(parts) != 2:
            raise ConfigError(f"override key {dotted!r} must be section.key")
        section, key = parts
        target = {"model": run.model, "scene": run.scene, "training": run.training}.get(section)
        if target is None:
            raise ConfigError(f"unknown config section {section!r}")
        if not hasattr(target, key):
            raise ConfigError(f"unknown key {key!r} in section {section!r}")
        current = getattr(target, key)
        try:
            value = json.loads(raw)
        except json.JSONDecodeError:
            value = raw
        if isinstance(current, bool):
            value = bool(value)
        elif isinstance(current, int) and not isinstance(value, bool):
            value = int(value)
        elif isinstance(current, float):
            value = float(value)
        setattr(target, key, value)
    return run


def build_run_config(args):
    run = load_config(args.config) if args.config else RunConfig()
    if getattr(args, "seed", None) is not None:
        run.training.seed = args.seed
    run = apply_overrides(run, getattr(args, "set", None))
    return run.validate()


# ---------------------------------------------------------------------------
# training
# ---------------------------------------------------------------------------


class Trainer:
    """Deterministic training loop with best-checkpoint tracking.

    The data order each epoch is a pure function of (seed, epoch), so a run
    resumed from a checkpoint replays exactly the batches a continued run
    would see.
    """

    def __init__(self, run, train_samples, val_samples, vocab):
        run.validate()
        check_dataset_fits(run.model, train_samples + val_samples, vocab)
        self.run = run
        self.train_samples = train_samples
        self.val_samples = val_samples
        self.vocab = vocab
        self.model = Detector(run.model, seed=run.training.seed, dtype=np.float32)
        self.named = self.model.parameters()
        self.optim = nc.init_optim_state(self.named)
        self.weights = run.training.loss_weights()
        self.epochs_done = 0
        self.best_ap50 = -1.0
        self.best_epoch = -1
        self.categories = sorted({tuple(n) for s in val_samples for n in s.names})
        if not self.categories:
            self.categories = sorted({tuple(n) for s in train_samples for n in s.names})

    def epoch_order(self, epoch):
        rng = np.random.default_rng([self.run.training.seed, epoch])
        return rng.permutation(len(self.train_samples))

    def total_steps(self):
        cfg = self.run.training
        per_epoch = -(-len(self.train_samples) // cfg.batch_size)
        return cfg.epochs * per_epoch

    def learning_rate(self, step):
        """Linear warmup then cosine decay; a pure function of the global
        step count so resumed runs see the identical schedule."""
        cfg = self.run.training
        base = cfg.learning_rate
        if cfg.warmup_steps > 0 and step < cfg.warmup_steps:
            return base * (step + 1) / cfg.warmup_steps
        total = max(self.total_steps(), step + 1)
        progress = (step - cfg.warmup_steps) / max(total - cfg.warmup_steps, 1)
        floor = cfg.lr_floor * base
        return floor + (base - floor) * 0.5 * (1.0 + np.cos(np.pi * min(progress, 1.0)))

    def run_epoch(self):
        cfg = self.run.training
        order = self.epoch_order(self.epochs_done)
        if cfg.flip_augment:
            flip_rng = np.random.default_rng([cfg.seed, self.epochs_done, 1])
            flips = flip_rng.integers(0, 4, size=len(order))
        else:
            flips = np.zeros(len(order), dtype=int)
        sums = {"total": 0.0, "reg": 0.0, "iou": 0.0, "obj": 0.0, "dag": 0.0}
        count = 0
        for start in range(0, len(order), cfg.batch_size):
            batch = [
                flip_sample(self.train_samples[i], flips[pos])
                for pos, i in enumerate(order[start : start + cfg.batch_size], start)
            ]
            self.model.zero_grad()
            loss, terms, _ = self.model.loss_batch(batch, self.weights)
            loss.backward()
            nc.adamw_step(
                self.named,
                self.optim,
                lr=self.learning_rate(self.optim.t),
                beta1=cfg.beta1,
                beta2=cfg.beta2,
                weight_decay=cfg.weight_decay,
            )
            for t in terms:
                for key in sums:
                    sums[key] += t[key]
                count += 1
        self.epochs_done += 1
        return {key: value / max(count, 1) for key, value in sums.items()}

    def evaluate(self, samples, decode="viterbi"):
        dets_per_image = []
        gts_per_image = []
        for sample in samples:
            dets = self.model.detect(sample.image, decode=decode)
            dets = rescale_scores(dets, self.categories)
            dets_per_image.append(dets)
            gts_per_image.append(list(zip(sample.boxes, sample.names)))
        report = compute_ap(dets_per_image, gts_per_image)
        exact = exact_name_rate(dets_per_image, gts_per_image)
        return {"report": report, "ap50": report.ap50, "exact_name": exact}

    def train(self, out_dir, log=None):
        os.makedirs(out_dir, exist_ok=True)
        metrics_path = os.path.join(out_dir, "metrics.csv")
        mode = "a" if self.epochs_done > 0 and os.path.exists(metrics_path) else "w"
        with open(metrics_path, mode, encoding="utf-8", newline="") as fh:
            writer = csv.writer(fh)
            if mode == "w":
                writer.writerow(METRICS_HEADER)
            while self.epochs_done < self.run.training.epochs:
                epoch = self.epochs_done
                terms = self.run_epoch()
                val = self.evaluate(self.val_samples) if self.val_samples else None
                ap50 = val["ap50"] if val else 0.0
                exact = val["exact_name"] if val else 0.0
                writer.writerow(
                    [epoch]
                    + [repr(terms[k]) for k in ("total", "reg", "iou", "obj", "dag")]
                    + [repr(ap50), repr(exact)]
                )
                fh.flush()
                if ap50 > self.best_ap50:
                    self.best_ap50 = ap50
                    self.best_epoch = epoch
                    self.save(os.path.join(out_dir, "best.ckpt"))
                self.save(os.path.join(out_dir, "last.ckpt"))
                if log:
                    log(
                        f"epoch {epoch}: loss {terms['total']:.4f} "
                        f"val_ap50 {ap50:.3f} exact {exact:.3f}"
                    )
        return metrics_path

    # -- persistence --------------------------------------------------------

    def state_tensors(self):
        tensors = dict(self.model.state_tensors())
        for name, _ in self.named:
            tensors[f"optim.m.{name}"] = self.optim.m[name]
            tensors[f"optim.v.{name}"] = self.optim.v[name]
        tensors["optim.step"] = np.array([self.optim.t], dtype=np.float32)
        tensors["trainer.epoch"] = np.array([self.epochs_done], dtype=np.float32)
        tensors["trainer.best_ap50"] = np.array([self.best_ap50], dtype=np.float32)
        tensors["trainer.best_epoch"] = np.array([self.best_epoch], dtype=np.float32)
        return tensors

    def save(self, path):
        nc.save_tensors(path, self.state_tensors())
        with open(path + ".json", "w", encoding="utf-8") as fh:
            json.dump(self.run.to_dict(), fh, indent=1)
            fh.write("\n")

    def load(self, path):
        tensors = nc.load_tensors(path)
        self.model.load_state_tensors(tensors)
        for name, _ in self.named:
            for prefix, store in (("optim.m.", self.optim.m), ("optim.v.", self.optim.v)):
                key = prefix + name
                if key not in tensors:
                    raise CheckpointError(f"checkpoint is missing tensor {key}")
                store[name] = tensors[key].astype(np.float32)
        self.optim.t = int(tensors["optim.step"][0])
        self.epochs_done = int(tensors["trainer.epoch"][0])
        self.best_ap50 = float(tensors["trainer.best_ap50"][0])
        self.best_epoch = int(tensors["trainer.best_epoch"][0])


def flip_sample(sample, mode):
    """Flip a sample horizontally (bit 0) and/or vertically (bit 1); names
    are flip-invariant, box centers mirror."""
    if mode == 0:
        return sample
    image = sample.image
    boxes = sample.boxes.copy()
    if mode & 1:
        image = image[:, ::-1]
        boxes[:, 0] = 1.0 - boxes[:, 0]
    if mode & 2:
        image = image[::-1]
        boxes[:, 1] = 1.0 - boxes[:, 1]
    return dataclasses.replace(sample, image=np.ascontiguousarray(image), boxes=boxes)


def check_dataset_fits(model_cfg, samples, vocab):
    """The dataset must agree with the model's text budget and vocabulary."""
    if len(vocab) != model_cfg.vocab_size:
        raise ConfigError(
            f"vocabulary has {len(vocab)} ids but model.vocab_size is {model_cfg.vocab_size}"
        )
    limit = model_cfg.text_tokens - 1
    for sample in samples:
        for name in sample.names:
            if not 1 <= len(name) <= limit:
                raise ConfigError(
                    f"name of length {len(name)} does not fit {limit} text slots "
                    f"(text_tokens={model_cfg.text_tokens})"
                )
            for t in name:
                if not 2 <= t < model_cfg.vocab_size:
                    raise ConfigError(f"token id {t} outside model vocabulary")


def load_model(checkpoint_path):
    """Rebuild a Detector from a checkpoint plus its config sidecar."""
    sidecar = checkpoint_path + ".json"
    try:
        with open(sidecar, "r", encoding="utf-8") as fh:
            run = RunConfig.from_dict(json.load(fh))
    except FileNotFoundError:
        raise DataError(f"missing config sidecar {sidecar}") from None
    except json.JSONDecodeError as e:
        raise DataError(f"{sidecar}: invalid JSON at line {e.lineno}") from None
    run.validate()
    model = Detector(run.model, seed=run.training.seed, dtype=np.float32)
    model.load_state_tensors(nc.load_tensors(checkpoint_path))
    return model, run


# ---------------------------------------------------------------------------
# commands
# ---------------------------------------------------------------------------


def cmd_gen(args):
    run = build_run_config(args)
    vocab = build_vocabulary(run.scene)
    base = run.training.seed
    n_train, n_val = run.training.train_samples, run.training.val_samples
    train = [generate_scene(base + i, run.scene, vocab) for i in range(n_train)]
    val = [generate_scene(base + n_train + i, run.scene, vocab) for i in range(n_val)]
    write_dataset(os.path.join(args.out, "train"), train, vocab)
    write_dataset(os.path.join(args.out, "val"), val, vocab)
    print(
        json.dumps(
            {
                "out": args.out,
                "train": n_train,
                "val": n_val,
                "seed_range_train": [base, base + n_train - 1],
                "seed_range_val": [base + n_train, base + n_train + n_val - 1],
            }
        )
    )
    return 0


def cmd_train(args):
    run = build_run_config(args)
    train, vocab = read_dataset(os.path.join(args.data, "train"))
    val, val_vocab = read_dataset(os.path.join(args.data, "val"))
    if val_vocab.words != vocab.words:
        raise DataError("train and val splits carry different vocabularies")
    trainer = Trainer(run, train, val, vocab)
    if args.resume:
        trainer.load(args.resume)
    trainer.train(args.out, log=lambda msg: print(msg, flush=True))
    print(
        json.dumps(
            {
                "out": args.out,
                "epochs": trainer.epochs_done,
                "best_val_ap50": trainer.best_ap50,
                "best_epoch": trainer.best_epoch,
            }
        )
    )
    return 0


def cmd_eval(args):
    model, run = load_model(args.checkpoint)
    samples, vocab = read_dataset(args.data)
    if not samples:
        raise DataError(f"{args.data}: dataset is empty")
    check_dataset_fits(run.model, samples, vocab)
    categories = sorted({tuple(n) for s in samples for n in s.names})
    dets_per_image = []
    gts_per_image = []
    for sample in samples:
        dets = model.detect(sample.image, decode=args.decode)
        dets_per_image.append(rescale_scores(dets, categories))
        gts_per_image.append(list(zip(sample.boxes, sample.names)))
    report = compute_ap(dets_per_image, gts_per_image)
    exact = exact_name_rate(dets_per_image, gts_per_image)
    os.makedirs(args.out, exist_ok=True)
    save_report(os.path.join(args.out, "report.json"), report)
    save_pr_csv(os.path.join(args.out, "pr_curves.csv"), report)
    save_predictions(os.path.join(args.out, "predictions.json"), dets_per_image, vocab)
    print(
        json.dumps(
            {
                "AP": report.ap,
                "AP50": report.ap50,
                "AP75": report.ap75,
                "exact_name": exact,
                "images": len(samples),
            }
        )
    )
    return 0


def cmd_infer(args):
    model, run = load_model(args.checkpoint)
    image = read_ppm(args.image)
    if image.shape[:2] != (run.model.image_size, run.model.image_size):
        raise DataError(
            f"image is {image.shape[1]}x{image.shape[0]}, model wants "
            f"{run.model.image_size}x{run.model.image_size}"
        )
    vocab = build_vocabulary(run.scene)
    dets = model.detect(
        image, decode=args.decode, top_k=args.topk, score_threshold=args.score_threshold
    )
    records = [
        {
            "box": [float(v) for v in d.box],
            "objectness": d.objectness,
            "name": list(map(int, d.token_ids)),
            "name_text": detokenize(d.token_ids, vocab) if len(vocab) == run.model.vocab_size else "",
            "final_score": d.final_score,
        }
        for d in dets
    ]
    text = json.dumps(records, indent=1)
    if args.out:
        with open(args.out, "w", encoding="utf-8") as fh:
            fh.write(text + "\n")
    print(text)
    return 0


def cmd_sweep(args):
    run = build_run_config(args)
    if args.axis not in SWEEP_AXES:
        raise ConfigError(f"sweep axis must be one of {SWEEP_AXES}")
    try:
        values = [int(v) for v in args.values.split(",") if v.strip() != ""]
    except ValueError:
        raise ConfigError(f"sweep values {args.values!r} must be comma-separated integers")
    if not values:
        raise ConfigError("sweep needs at least one value")
    floor = 2 if args.axis == "text_tokens" else 1
    for v in values:
        if v < floor:
            raise ConfigError(f"illegal {args.axis} value {v} (must be >= {floor})")
        probe = dataclasses.replace(run.model, **{args.axis: v})
        probe.validate()
    train, vocab = read_dataset(os.path.join(args.data, "train"))
    val, _ = read_dataset(os.path.join(args.data, "val"))
    os.makedirs(args.out, exist_ok=True)
    csv_path = os.path.join(args.out, "sweep.csv")
    rows = []
    for v in values:
        variant = RunConfig.from_dict(run.to_dict())
        setattr(variant.model, args.axis, v)
        variant.validate()
        trainer = Trainer(variant, train, val, vocab)
        trainer.train(os.path.join(args.out, f"{args.axis}_{v}"))
        result = trainer.evaluate(val if val else train)
        report = result["report"]
        rows.append([args.axis, v, report.ap, report.ap50, report.ap75, trainer.model.num_parameters()])
    with open(csv_path, "w", encoding="utf-8", newline="") as fh:
        writer = csv.writer(fh)
        writer.writerow(SWEEP_HEADER)
        for row in rows:
            writer.writerow([row[0], row[1], repr(row[2]), repr(row[3]), repr(row[4]), row[5]])
    print(json.dumps({"out": csv_path, "rows": len(rows)}))
    return 0


# ---------------------------------------------------------------------------
# argument parsing
# ---------------------------------------------------------------------------


def build_parser():
    parser = argparse.ArgumentParser(
        prog="gendet", description="generative object detection at desk scale"
    )
    sub = parser.add_subparsers(dest="command", required=True)

    def common(p):
        p.add_argument("--config", help="JSON run config (flags win over file values)")
        p.add_argument("--seed", type=int, help="override training.seed")
        p.add_argument(
            "--set",
            action="append",
            metavar="SECTION.KEY=VALUE",
            help="override any config value, e.g. training.epochs=5",
        )

    p = sub.add_parser("gen", help="generate train/val datasets")
    common(p)
    p.add_argument("--out", required=True)
    p.set_defaults(fn=cmd_gen)

    p = sub.add_parser("train", help="train a detector")
    common(p)
    p.add_argument("--data", required=True, help="directory holding train/ and val/")
    p.add_argument("--out", required=True)
    p.add_argument("--resume", help="checkpoint to continue from")
    p.set_defaults(fn=cmd_train)

    p = sub.add_parser("eval", help="evaluate a checkpoint on a dataset split")
    p.add_argument("--checkpoint", required=True)
    p.add_argument("--data", required=True, help="one dataset split directory")
    p.add_argument("--out", required=True)
    p.add_argument("--decode", choices=["viterbi", "greedy"], default="viterbi")
    p.set_defaults(fn=cmd_eval)

    p = sub.add_parser("infer", help="detect objects in one PPM image")
    p.add_argument("--checkpoint", required=True)
    p.add_argument("--image", required=True)
    p.add_argument("--decode", choices=["viterbi", "greedy"], default="viterbi")
    p.add_argument("--topk", type=int, default=10)
    p.add_argument("--score-threshold", type=float, default=0.0)
    p.add_argument("--out")
    p.set_defaults(fn=cmd_infer)

    p = sub.add_parser("sweep", help="train once per axis value and tabulate AP")
    common(p)
    p.add_argument("--axis", required=True)
    p.add_argument("--values", required=True, help="comma-separated integers")
    p.add_argument("--data", required=True, help="directory holding train/ and val/")
    p.add_argument("--out", required=True)
    p.set_defaults(fn=cmd_sweep)
    return parser


def main(argv=None):
    args = build_parser().parse_args(argv)
    try:
        return args.fn(args)
    except ConfigError as e:
        print(json.dumps({"error": "config_error", "message": str(e)}), file=sys.stderr)
        return 2
    except (DataError, CheckpointError) as e:
        print(json.dumps({"error": "data_error", "message": str(e)}), file=sys.stderr)
        return 3
    except OSError as e:
        print(json.dumps({"error": "io_error", "message": str(e)}), file=sys.stderr)
        return 3


if __name__ == "__main__":
    sys.exit(main())
