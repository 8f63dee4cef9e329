"""Command-line entry point: ``conceptnce <command> [options]``.

Settings come from the shipped ``defaults.ini``, then an optional
``--config`` file, then command-line flags.  A dataset directory holds
``dataset.jsonl``, ``boxes.jsonl``, ``vocab.txt`` and ``images/*.pgm``.
Diagnostics go to stderr; results are written to the declared paths.
"""

from __future__ import annotations

import argparse
import configparser
import logging
import math
import sys
from dataclasses import dataclass
from importlib import resources
from pathlib import Path
from typing import Optional

from threadpoolctl import threadpool_limits

from .alignment import AlignConfig, TrainConfig, draw_batch, fit, relations_for
from .batching import BatchPlan, dump_samples, sample_texts
from .encoders import init_encoder, load_checkpoint, save_checkpoint
from .errors import ConceptNCEError, ConfigInvalid, IoFailure
from .gradcheck import run_suite
from .inference import (
    GroundingQuery,
    classify,
    concept_prompt,
    ground,
    heatmap_name,
    read_heatmap_sidecar,
    write_heatmap,
    write_score_table,
)
from .metrics import EvalOutcome, evaluate_classification, evaluate_grounding, format_report, pointing_game
from .ontology import Presence, default_vocabulary, holdout_split, load_dataset, load_vocabulary
from .relabel import (
    RuleOracle,
    external_oracle_adapter,
    format_summary,
    rule_oracle,
    write_relation_matrix,
)
from .synthgen import GenConfig, generate, load_images, read_boxes, write_synth

log = logging.getLogger("conceptnce")

SHIPPED_CONFIGS = ("defaults", "scaled")
SPLITS = ("train", "test", "all")


def shipped_config(name: str) -> Path:
    """Path of a config file bundled with the package."""
    if name not in SHIPPED_CONFIGS:
        raise ConfigInvalid(f"no shipped config named {name!r}")
    return Path(str(resources.files("conceptnce") / "data" / f"{name}.ini"))


# ---------------------------------------------------------------- config


@dataclass
class RunConfig:
    seed: int
    threads: int
    gen: GenConfig
    train: TrainConfig
    holdout: int
    dim: int
    hash_buckets: int
    antonyms: str
    oracle_command: str
    oracle_timeout: float
    fail_open: bool

    def validate(self) -> None:
        self.gen.validate()
        self.train.validate()
        if self.threads < 1:
            raise ConfigInvalid("threads must be >= 1")
        if self.holdout < 0 or self.dim < 1 or self.hash_buckets < 1:
            raise ConfigInvalid("holdout >= 0, dim >= 1 and hash_buckets >= 1 required")
        if self.oracle_timeout <= 0:
            raise ConfigInvalid("oracle timeout must be positive")

    def oracle(self):
        if self.oracle_command.strip():
            return external_oracle_adapter(self.oracle_command, self.oracle_timeout)
        if self.antonyms.strip():
            return RuleOracle.from_file(self.antonyms)
        return rule_oracle

    def settings(self) -> dict:
        """Hyperparameters recorded in checkpoints."""
        a = self.train.align
        return {
            "seed": self.train.seed,
            "steps": self.train.steps,
            "batch_size": self.train.batch_size,
            "texts_per_image": self.train.texts_per_image,
            "p_counterfactual": self.train.p_counterfactual,
            "relations": self.train.relations,
            "mining": self.train.mining,
            "optimizer": self.train.optimizer,
            "tau_attn": a.tau_attn,
            "tau_loss": a.tau_loss,
            "epsilon": a.epsilon,
            "learning_rate": a.learning_rate,
        }


def read_config(path: Optional[str] = None) -> configparser.ConfigParser:
    cp = configparser.ConfigParser(inline_comment_prefixes=("#",))
    cp.read_string(shipped_config("defaults").read_text(encoding="utf-8"))
    if path:
        p = Path(path)
        if not p.exists() and path in SHIPPED_CONFIGS:
            p = shipped_config(path)
        try:
            text = p.read_text(encoding="utf-8")
        except OSError as exc:
            raise IoFailure(f"cannot read config {path}: {exc}") from exc
        try:
            cp.read_string(text, source=str(p))
        except configparser.Error as exc:
            raise ConfigInvalid(str(exc)) from exc
    return cp


def build_run_config(cp: configparser.ConfigParser, args: argparse.Namespace) -> RunConfig:
    """Merge ``cp`` with the flags in ``args`` and validate the result."""

    def flag(name):
        return getattr(args, name, None)

    def pick(name, section, key, conv):
        v = flag(name)
        if v is not None:
            return v
        try:
            return conv(cp.get(section, key))
        except (configparser.Error, ValueError) as exc:
            raise ConfigInvalid(f"[{section}] {key}: {exc}") from exc

    def boolean(section, key):
        try:
            return cp.getboolean(section, key)
        except (configparser.Error, ValueError) as exc:
            raise ConfigInvalid(f"[{section}] {key}: {exc}") from exc

    seed = pick("seed", "run", "seed", int)
    align = AlignConfig(
        tau_attn=pick("tau_attn", "align", "tau_attn", float),
        tau_loss=pick("tau_loss", "align", "tau_loss", float),
        epsilon=pick("epsilon", "align", "epsilon", float),
        learning_rate=pick("lr", "align", "learning_rate", float),
    )
    vocab_file = flag("vocab")
    vocab = load_vocabulary(vocab_file) if vocab_file else default_vocabulary(pick("vocab_size", "gen", "vocab_size", int))
    gen = GenConfig(
        n_studies=pick("studies", "gen", "studies", int),
        vocab=vocab,
        image_size=pick("image_size", "gen", "image_size", int),
        grid=pick("grid", "gen", "grid", int),
        noise_sigma=pick("noise_sigma", "gen", "noise_sigma", float),
        p_present=pick("p_present", "gen", "p_present", float),
        p_unknown=pick("p_unknown", "gen", "p_unknown", float),
        seed=seed,
    )
    train = TrainConfig(
        steps=pick("steps", "train", "steps", int),
        batch_size=pick("batch_size", "batch", "batch_size", int),
        texts_per_image=pick("texts_per_image", "batch", "texts_per_image", int),
        p_counterfactual=pick("p_counterfactual", "batch", "p_counterfactual", float),
        seed=seed,
        relations=pick("mode", "train", "relations", str),
        mining=boolean("train", "mining") if not flag("no_mining") else False,
        fail_open=boolean("oracle", "fail_open"),
        optimizer=pick("optimizer", "train", "optimizer", str),
        align=align,
    )
    rc = RunConfig(
        seed=seed,
        threads=pick("threads", "run", "threads", int),
        gen=gen,
        train=train,
        holdout=pick("holdout", "train", "holdout", int),
        dim=pick("dim", "train", "dim", int),
        hash_buckets=pick("hash_buckets", "train", "hash_buckets", int),
        antonyms=cp.get("oracle", "antonyms", fallback=""),
        oracle_command=cp.get("oracle", "command", fallback=""),
        oracle_timeout=pick("oracle_timeout", "oracle", "timeout", float),
        fail_open=train.fail_open,
    )
    rc.validate()
    return rc


# ---------------------------------------------------------------- data


@dataclass
class DataDir:
    records: list
    images: dict
    boxes: dict
    vocab: object


def load_data_dir(root) -> DataDir:
    root = Path(root)
    vocab = load_vocabulary(root / "vocab.txt")
    records = load_dataset(root / "dataset.jsonl", vocab)
    box_file = root / "boxes.jsonl"
    boxes = read_boxes(box_file) if box_file.exists() else {}
    return DataDir(records, load_images(root, records, boxes), boxes, vocab)


def select_split(records, rc: RunConfig, split: str):
    if split == "all":
        return list(records)
    train, test = holdout_split(records, min(rc.holdout, len(records)))
    chosen = train if split == "train" else test
    if records and not chosen:
        raise ConfigInvalid(f"split {split!r} is empty ({len(records)} studies, holdout {rc.holdout})")
    return chosen


def _out_dir(path) -> Path:
    p = Path(path)
    p.mkdir(parents=True, exist_ok=True)
    return p


# ---------------------------------------------------------------- commands


def cmd_gen_synth(args, rc: RunConfig) -> int:
    records, images = generate(rc.gen)
    out = _out_dir(args.out)
    write_synth(out, records, images)
    (out / "vocab.txt").write_text("".join(f"{n}\n" for n in rc.gen.vocab), encoding="utf-8")
    n_boxes = sum(len(img.planted) for img in images.values())
    print(f"wrote {len(records)} studies, {len(images)} images, {n_boxes} boxes to {out}", file=sys.stderr)
    return 0


def cmd_relabel(args, rc: RunConfig) -> int:
    data = load_data_dir(args.data)
    records = [r for r in select_split(data.records, rc, args.split) if r.known_entries()]
    if not records:
        raise ConfigInvalid("no study with a known concept in this split")
    studies, plan_seed = draw_batch(records, rc.train, args.step)
    plan = BatchPlan(studies, N=rc.train.texts_per_image, p_counterfactual=rc.train.p_counterfactual, seed=plan_seed)
    samples = sample_texts(plan)
    matrix = relations_for(samples, studies, rc.train, rc.oracle())
    write_relation_matrix(matrix, args.out)
    summary = format_summary(matrix)
    summary_path = Path(args.summary) if args.summary else Path(f"{args.out}.summary.tsv")
    summary_path.write_text(summary + "\n", encoding="utf-8")
    if args.samples:
        dump_samples(samples, args.samples)
    print(summary, file=sys.stderr)
    return 0


def train_steps(args, rc: RunConfig, n_train: int) -> int:
    if args.epochs is None:
        return rc.train.steps
    per_epoch = math.ceil(n_train / rc.train.batch_size) if n_train else 0
    return args.epochs * per_epoch


def cmd_train(args, rc: RunConfig) -> int:
    data = load_data_dir(args.data)
    records = select_split(data.records, rc, args.split)
    rc.train.steps = train_steps(args, rc, len(records))
    rc.validate()
    model = init_encoder(rc.seed, rc.dim, rc.gen.grid, rc.hash_buckets, rc.settings())
    log_path = Path(args.log) if args.log else Path(f"{args.out}.log")
    with open(log_path, "w", encoding="utf-8", newline="\n") as fh:
        fh.write("step\tloss\twall_ms\n")

        def on_step(step, loss, wall_ms):
            fh.write(f"{step}\t{loss!r}\t{wall_ms:.3f}\n")

        if rc.train.steps:
            model, losses = fit(records, data.images, model, rc.train, rc.oracle(), on_step)
            print(f"trained {len(losses)} steps, final loss {losses[-1]:.6f}", file=sys.stderr)
        else:
            print("0 steps: checkpoint holds the initialization", file=sys.stderr)
    save_checkpoint(model, args.out)
    return 0


def _split_records(args, rc: RunConfig, data: DataDir):
    records = select_split(data.records, rc, args.split)
    if args.image:
        wanted = set(args.image)
        records = [r for r in records if r.image_ref in wanted or r.study_id in wanted]
    return records


def cmd_ground(args, rc: RunConfig) -> int:
    data = load_data_dir(args.data)
    model = load_checkpoint(args.checkpoint)
    out = _out_dir(args.out)
    count = 0
    for rec in _split_records(args, rc, data):
        if args.prompt:
            queries = [("prompt", args.prompt)]
        else:
            concepts = args.concept or [e.concept for e in rec.concepts if e.presence is Presence.YES]
            queries = [(c, concept_prompt(c)) for c in concepts]
        for label, prompt in queries:
            hm = ground(GroundingQuery(rec.image_ref, prompt), model, rc.train.align, data.images)
            name = heatmap_name(rec.image_ref, label)
            write_heatmap(hm, out / f"{name}.pgm", out / f"{name}.tsv")
            count += 1
    print(f"wrote {count} heatmaps to {out}", file=sys.stderr)
    return 0


def cmd_classify(args, rc: RunConfig) -> int:
    data = load_data_dir(args.data)
    model = load_checkpoint(args.checkpoint)
    concepts = args.concept or list(data.vocab)
    rows = []
    for rec in _split_records(args, rc, data):
        rows.extend(classify(rec.image_ref, concepts, model, rc.train.align, data.images))
    write_score_table(rows, args.out)
    print(f"wrote {len(rows)} scores to {args.out}", file=sys.stderr)
    return 0


def heatmap_grounding(records, boxes, heatmap_dir) -> EvalOutcome:
    """Pointing game over exported heatmap sidecars, one per present concept."""
    outcome = EvalOutcome()
    root = Path(heatmap_dir)
    for rec in records:
        planted = boxes.get(rec.image_ref, [])
        for entry in rec.concepts:
            if entry.presence is not Presence.YES:
                continue
            hm = read_heatmap_sidecar(root / f"{heatmap_name(rec.image_ref, entry.concept)}.tsv")
            hit = pointing_game(hm, [b for c, b in planted if c == entry.concept])
            outcome.hits += int(hit)
            outcome.total += 1
            outcome.hit_flags.append((rec.image_ref, entry.concept, hit))
    return outcome


def _evaluate(args, rc: RunConfig, with_auroc: bool) -> int:
    data = load_data_dir(args.data)
    records = _split_records(args, rc, data)
    if args.heatmaps:
        outcome = heatmap_grounding(records, data.boxes, args.heatmaps)
    else:
        if not args.checkpoint:
            raise ConfigInvalid("eval needs --checkpoint or --heatmaps")
        model = load_checkpoint(args.checkpoint)
        outcome = evaluate_grounding(records, data.boxes, model, rc.train.align, data.images)
        if with_auroc:
            evaluate_classification(records, list(data.vocab), model, rc.train.align, data.images, outcome)
    report = format_report(outcome)
    if args.out:
        Path(args.out).write_text(report + "\n", encoding="utf-8")
    print(report)
    return 0


def cmd_eval(args, rc: RunConfig) -> int:
    return _evaluate(args, rc, with_auroc=True)


def cmd_eval_ground(args, rc: RunConfig) -> int:
    return _evaluate(args, rc, with_auroc=False)


def cmd_check_grad(args, rc: RunConfig) -> int:
    report = run_suite(rc.seed, args.score_cases, args.param_cases)
    line = report.line()
    if args.out:
        Path(args.out).write_text(line + "\n", encoding="utf-8")
    print(line)
    if not report.ok:
        print("gradient check failed", file=sys.stderr)
        return 1
    return 0


# ---------------------------------------------------------------- parser


def _shared(p: argparse.ArgumentParser, out_required: bool = True) -> None:
    p.add_argument("--config", help="config file (or a shipped name: defaults, scaled)")
    p.add_argument("--seed", type=int)
    p.add_argument("--threads", type=int)
    p.add_argument("--out", required=out_required)
    p.add_argument("-v", "--verbose", action="store_true")


def _data(p: argparse.ArgumentParser, split: str) -> None:
    p.add_argument("--data", required=True, help="dataset directory")
    p.add_argument("--split", choices=SPLITS, default=split)
    p.add_argument("--holdout", type=int)


def _train_flags(p: argparse.ArgumentParser) -> None:
    p.add_argument("--batch-size", dest="batch_size", type=int)
    p.add_argument("--texts-per-image", dest="texts_per_image", type=int)
    p.add_argument("--p-counterfactual", dest="p_counterfactual", type=float)
    p.add_argument("--mode", choices=("concept", "patient"), help="relation mode")
    p.add_argument("--no-mining", dest="no_mining", action="store_true")


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="conceptnce", description=__doc__.splitlines()[0])
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("gen-synth", help="generate a synthetic dataset")
    _shared(p)
    p.add_argument("--studies", type=int)
    p.add_argument("--vocab", help="concept names file (default: finding_01..)")
    p.add_argument("--vocab-size", dest="vocab_size", type=int)
    p.add_argument("--p-present", dest="p_present", type=float)
    p.add_argument("--p-unknown", dest="p_unknown", type=float)
    p.add_argument("--noise-sigma", dest="noise_sigma", type=float)
    p.set_defaults(func=cmd_gen_synth)

    p = sub.add_parser("relabel", help="export the relation matrix of one training batch")
    _shared(p)
    _data(p, "train")
    _train_flags(p)
    p.add_argument("--step", type=int, default=0, help="training step whose batch is rebuilt")
    p.add_argument("--summary", help="summary file (default: OUT.summary.tsv)")
    p.add_argument("--samples", help="also write the sampled texts here")
    p.set_defaults(func=cmd_relabel)

    p = sub.add_parser("train", help="train the dual encoder")
    _shared(p)
    _data(p, "train")
    _train_flags(p)
    steps = p.add_mutually_exclusive_group()
    steps.add_argument("--steps", type=int)
    steps.add_argument("--epochs", type=int)
    p.add_argument("--optimizer", choices=("gd", "adam"))
    p.add_argument("--lr", type=float)
    p.add_argument("--tau-loss", dest="tau_loss", type=float)
    p.add_argument("--tau-attn", dest="tau_attn", type=float)
    p.add_argument("--log", help="per-step log (default: OUT.log)")
    p.set_defaults(func=cmd_train)

    for name, func, help_ in (
        ("ground", cmd_ground, "write grounding heatmaps"),
        ("classify", cmd_classify, "write per-concept scores"),
    ):
        p = sub.add_parser(name, help=help_)
        _shared(p)
        _data(p, "test")
        p.add_argument("--checkpoint", required=True)
        p.add_argument("--image", action="append", help="restrict to this image or study (repeatable)")
        p.add_argument("--concept", action="append", help="restrict to this concept (repeatable)")
        if name == "ground":
            p.add_argument("--prompt", help="free-text query instead of the concept prompts")
        p.set_defaults(func=func)

    for name, func, help_ in (
        ("eval", cmd_eval, "pointing game and AUROC report"),
        ("eval-ground", cmd_eval_ground, "pointing game report"),
    ):
        p = sub.add_parser(name, help=help_)
        _shared(p, out_required=False)
        _data(p, "test")
        p.add_argument("--checkpoint")
        p.add_argument("--heatmaps", help="score exported heatmap sidecars instead of a checkpoint")
        p.set_defaults(func=func, image=None)

    p = sub.add_parser("check-grad", help="finite-difference gradient suite")
    _shared(p, out_required=False)
    p.add_argument("--score-cases", dest="score_cases", type=int, default=20)
    p.add_argument("--param-cases", dest="param_cases", type=int, default=2)
    p.set_defaults(func=cmd_check_grad)
    return parser


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(
        stream=sys.stderr,
        level=logging.DEBUG if args.verbose else logging.WARNING,
        format="%(levelname)s %(name)s: %(message)s",
    )
    try:
        rc = build_run_config(read_config(args.config), args)
        with threadpool_limits(limits=rc.threads):
            return args.func(args, rc)
    except (ConceptNCEError, OSError, ValueError, KeyError) as exc:
        print(f"conceptnce {args.command}: error: {exc}", file=sys.stderr)
        return 1


if __name__ == "__main__":
    sys.exit(main())
