"""Command-line driver: ingest, train, index and evaluate from a flat config file.

Every artifact written to the work directory carries a hash of the
settings it depends on.  A later stage recomputes that hash from its own
configuration and refuses a mismatch unless ``--force`` is given.
"""

from __future__ import annotations

import argparse
import configparser
import dataclasses
import hashlib
import json
import logging
import sys
from dataclasses import dataclass, fields
from pathlib import Path

import numpy as np

from kgrefine.encoder import BAG, TRANSFORMER, load_checkpoint, save_checkpoint
from kgrefine.evaluation import (
    FEW_SHOT_THRESHOLDS,
    GLOBAL_FALLBACK,
    K_MODE,
    MAX,
    MEAN,
    MIN,
    PREDICT_NEGATIVE,
    ClassifierConfig,
    Embedder,
    RelationPredictorConfig,
    evaluate_classification,
    evaluate_relation_prediction,
    few_shot_report,
    relation_ranks,
    tune_sigma_on,
)
from kgrefine.exceptions import ArtifactError, DataFormatError, TrainingDivergedError
from kgrefine.index import EXACT, IVF, ReferenceIndex
from kgrefine.reference import build_reference_index
from kgrefine.sampling import Regime, SamplerConfig
from kgrefine.store import KgStore, add_reverse_relations, few_shot_relations, ingest, load_store, save_store
from kgrefine.text import TokenVocab
from kgrefine.training import PAPER_LEARNING_RATE, TrainConfig, train

log = logging.getLogger("kgrefine")

TOY_DIR = Path(__file__).parent / "data" / "toy"

# keys whose value changes an artifact, grouped by the stage that consumes them
DATA_KEYS = ("train", "valid", "test", "descriptions")
TRAIN_KEYS = (
    "seed", "margin", "batch_size", "epochs", "learning_rate", "embedding_dim", "architecture",
    "num_layers", "num_heads", "feedforward_dim", "max_seq_len", "n_per_anchor", "threshold_pct",
    "hrt_prob", "use_descriptions", "reverse_relations",
)
INDEX_KEYS = ("mode", "n_lists", "n_probe")

RELATION, ENTITY = Regime.RELATION.value, Regime.ENTITY.value


@dataclass
class RunConfig:
    train: str = ""
    valid: str = ""
    test: str = ""
    descriptions: str = ""
    workdir: str = "kgrefine-run"
    seed: int = 42
    # trainer
    margin: float = 5.0
    batch_size: int = 64
    epochs: int = 4
    learning_rate: float = 1e-3
    # encoder
    embedding_dim: int = 64
    architecture: str = BAG
    num_layers: int = 1
    num_heads: int = 2
    feedforward_dim: int = 128
    max_seq_len: int = 32
    # sampler
    n_per_anchor: int = 5
    threshold_pct: float = 30.0
    hrt_prob: float = 0.3
    use_descriptions: bool = False
    reverse_relations: bool = False
    workers: int = 1
    # index
    mode: str = EXACT
    n_lists: int = 16
    n_probe: int = 4
    # evaluation
    k: int = 10
    strategy: str = K_MODE
    filtered: bool = True
    aggregation: str = MIN
    cold_start_policy: str = GLOBAL_FALLBACK

    def validate(self) -> "RunConfig":
        choices = {
            "architecture": (BAG, TRANSFORMER),
            "mode": (EXACT, IVF),
            "strategy": (MIN, K_MODE),
            "aggregation": (MIN, MAX, MEAN),
            "cold_start_policy": (GLOBAL_FALLBACK, PREDICT_NEGATIVE),
        }
        for key, allowed in choices.items():
            if getattr(self, key) not in allowed:
                raise ValueError(f"{key} must be one of {allowed}, got {getattr(self, key)!r}")
        for key in DATA_KEYS:
            path = getattr(self, key)
            if path and not Path(path).exists():
                raise FileNotFoundError(f"{key} file not found: {path}")
        return self

    def stage_hash(self, stage: str, regime: str | None = None) -> str:
        """Hash of the settings an artifact of ``stage`` depends on."""
        keys = list(DATA_KEYS)
        if stage in ("encoder", "index"):
            keys += TRAIN_KEYS
        if stage == "index":
            keys += INDEX_KEYS
        payload = {key: getattr(self, key) for key in keys}
        for key in DATA_KEYS:
            # a path's contents matter, its spelling does not
            payload[key] = _file_digest(payload[key]) if payload[key] else ""
        payload["stage"] = stage
        payload["regime"] = regime
        blob = json.dumps(payload, sort_keys=True).encode()
        return hashlib.sha256(blob).hexdigest()[:16]


def _file_digest(path: str) -> str:
    p = Path(path)
    return hashlib.sha256(p.read_bytes()).hexdigest() if p.exists() else "missing:" + path


def _coerce(name: str, raw: str):
    kind = {f.name: f.type for f in fields(RunConfig)}[name]
    if kind == "bool":
        low = raw.strip().lower()
        if low not in ("1", "0", "true", "false", "yes", "no"):
            raise ValueError(f"{name}: expected a boolean, got {raw!r}")
        return low in ("1", "true", "yes")
    if kind == "int":
        return int(raw)
    if kind == "float":
        return float(raw)
    return raw.strip()


def read_config_file(path) -> dict:
    """Parse a flat ``key = value`` file; data paths resolve against its folder."""
    path = Path(path)
    if not path.exists():
        raise FileNotFoundError(f"config file not found: {path}")
    parser = configparser.ConfigParser(inline_comment_prefixes=("#",))
    parser.read_string("[run]\n" + path.read_text(encoding="utf-8"), source=str(path))
    known = {f.name for f in fields(RunConfig)}
    out = {}
    for key, raw in parser["run"].items():
        name = key.replace("-", "_")
        if name not in known:
            raise ValueError(f"{path}: unknown config key {key!r}")
        value = _coerce(name, raw)
        if name in DATA_KEYS + ("workdir",) and value and not Path(value).is_absolute():
            value = str(path.parent / value)
        out[name] = value
    return out


def build_config(args: argparse.Namespace) -> RunConfig:
    values: dict = {}
    if args.toy:
        values.update(read_config_file(TOY_DIR / "toy.cfg"))
    if args.config:
        values.update(read_config_file(args.config))
    for f in fields(RunConfig):
        flag = getattr(args, f.name, None)
        if flag is not None:
            values[f.name] = flag
    if args.paper_lr:
        values["learning_rate"] = PAPER_LEARNING_RATE
    return RunConfig(**values).validate()


# -- artifacts -----------------------------------------------------------------


class Workdir:
    def __init__(self, root, force: bool = False):
        self.root = Path(root)
        self.force = force

    @property
    def store(self) -> Path:
        return self.root / "store.bin"

    def vocab(self, regime: str) -> Path:
        return self.root / f"vocab.{regime}.txt"

    def checkpoint(self, regime: str) -> Path:
        return self.root / f"encoder.{regime}.ckpt"

    def index(self, regime: str) -> Path:
        return self.root / f"index.{regime}.bin"

    def report(self, name: str) -> Path:
        return self.root / f"report.{name}.json"

    def require(self, path: Path, produced_by: str) -> Path:
        if not path.exists():
            raise ArtifactError(f"missing {path.name}: expected {path} (run `kgrefine {produced_by}` first)")
        return path

    def check_hash(self, path: Path, found: str, expected: str) -> None:
        if found == expected:
            return
        if self.force:
            log.warning("%s: config hash %s != %s, continuing because of --force", path, found, expected)
            return
        raise ArtifactError(
            f"{path}: built with config hash {found}, current config hashes to {expected}; "
            "rebuild it or pass --force"
        )


def _load_store(cfg: RunConfig, wd: Workdir) -> KgStore:
    path = wd.require(wd.store, "ingest")
    store, found = load_store(path)
    wd.check_hash(path, found, cfg.stage_hash("store"))
    return store


def _regime_store(store: KgStore, cfg: RunConfig, regime: str) -> KgStore:
    if regime == ENTITY and cfg.reverse_relations:
        return add_reverse_relations(store)
    return store


def _sampler_config(cfg: RunConfig, regime: str) -> SamplerConfig:
    return SamplerConfig(
        regime=Regime(regime), n_per_anchor=cfg.n_per_anchor, threshold_pct=cfg.threshold_pct,
        hrt_prob=cfg.hrt_prob, use_descriptions=cfg.use_descriptions, workers=cfg.workers,
    )


def _load_model(cfg: RunConfig, wd: Workdir, regime: str, with_index: bool = True):
    store = _regime_store(_load_store(cfg, wd), cfg, regime)
    ckpt = wd.require(wd.checkpoint(regime), f"train --regime {regime}")
    vocab = TokenVocab.load(wd.require(wd.vocab(regime), f"train --regime {regime}"))
    encoder, found = load_checkpoint(ckpt)
    wd.check_hash(ckpt, found, cfg.stage_hash("encoder", regime))
    embedder = Embedder(encoder, vocab, store, cfg.use_descriptions)
    index = None
    if with_index:
        ipath = wd.require(wd.index(regime), f"index --regime {regime}")
        index, found = ReferenceIndex.load(ipath)
        wd.check_hash(ipath, found, cfg.stage_hash("index", regime))
    return store, embedder, index


def _write_report(wd: Workdir, name: str, report: dict) -> Path:
    path = wd.report(name)
    path.write_text(json.dumps(report, indent=2, sort_keys=True) + "\n", encoding="utf-8")
    # combined view of every task evaluated so far
    combined_path = wd.root / "report.json"
    combined = json.loads(combined_path.read_text()) if combined_path.exists() else {}
    combined[name] = report
    combined_path.write_text(json.dumps(combined, indent=2, sort_keys=True) + "\n", encoding="utf-8")
    return path


# -- commands ------------------------------------------------------------------


def cmd_ingest(cfg: RunConfig, wd: Workdir, args) -> int:
    if not cfg.train:
        raise ValueError("no train split given (set `train` in the config or pass --train)")
    store = ingest(cfg.train, cfg.valid or None, cfg.test or None, cfg.descriptions or None)
    wd.root.mkdir(parents=True, exist_ok=True)
    save_store(store, wd.store, cfg.stage_hash("store"))
    print(json.dumps(store.stats(), sort_keys=True))
    return 0


def cmd_train(cfg: RunConfig, wd: Workdir, args) -> int:
    regime = args.regime
    store = _regime_store(_load_store(cfg, wd), cfg, regime)
    encoder_config = {
        "embedding_dim": cfg.embedding_dim, "architecture": cfg.architecture,
        "num_layers": cfg.num_layers, "num_heads": cfg.num_heads,
        "feedforward_dim": cfg.feedforward_dim, "max_seq_len": cfg.max_seq_len, "init_seed": cfg.seed,
    }
    train_config = TrainConfig(margin=cfg.margin, batch_size=cfg.batch_size, epochs=cfg.epochs,
                               learning_rate=cfg.learning_rate, seed=cfg.seed)

    def on_epoch(epoch, loss, active):
        print(f"{epoch}\t{loss:.6f}\t{active:.4f}", flush=True)

    result = train(store, _sampler_config(cfg, regime), encoder_config, train_config, on_epoch=on_epoch)
    result.vocab.save(wd.vocab(regime))
    save_checkpoint(result.encoder, wd.checkpoint(regime), cfg.stage_hash("encoder", regime))
    return 0


def cmd_index(cfg: RunConfig, wd: Workdir, args) -> int:
    regime = args.regime
    store, embedder, _ = _load_model(cfg, wd, regime, with_index=False)
    index = build_reference_index(store, embedder, _sampler_config(cfg, regime), cfg.seed,
                                  mode=cfg.mode, n_lists=cfg.n_lists, n_probe=cfg.n_probe)
    index.save(wd.index(regime), cfg.stage_hash("index", regime))
    print(f"indexed {len(index)} reference points")
    return 0


def cmd_eval_classify(cfg: RunConfig, wd: Workdir, args) -> int:
    store, embedder, index = _load_model(cfg, wd, ENTITY)
    if store.valid_labels is None or store.test_labels is None:
        raise DataFormatError("triple classification needs labeled valid and test splits")
    config = ClassifierConfig(cfg.aggregation, None, cfg.cold_start_policy)
    config.sigma, valid_acc = tune_sigma_on(store.valid, store.valid_labels, embedder, index, config)
    report = evaluate_classification(store.test, store.test_labels, embedder, index, config)
    report.metrics["valid_accuracy"] = valid_acc
    out = _write_report(wd, "triple_classification", dataclasses.asdict(report))
    print(f"accuracy\t{report.metrics['accuracy']:.4f}\t{out}")
    return 0


def _relation_test(store: KgStore) -> np.ndarray:
    test = store.test
    if store.test_labels is not None:
        test = test[store.test_labels == 1]
    if len(test) == 0:
        raise DataFormatError("relation prediction needs true test facts")
    return test


def cmd_eval_relation(cfg: RunConfig, wd: Workdir, args) -> int:
    store, embedder, index = _load_model(cfg, wd, RELATION)
    config = RelationPredictorConfig(cfg.strategy, cfg.k, cfg.filtered)
    report = evaluate_relation_prediction(_relation_test(store), embedder, index, config, store,
                                          dump_path=wd.root / "relation_ranks.tsv")
    out = _write_report(wd, "relation_prediction", dataclasses.asdict(report))
    print(f"mr\t{report.metrics['mr']:.4f}\thits@1\t{report.metrics['hits@1']:.4f}\t{out}")
    return 0


def cmd_fewshot(cfg: RunConfig, wd: Workdir, args) -> int:
    thresholds = tuple(args.thresholds) if args.thresholds else FEW_SHOT_THRESHOLDS
    store = _load_store(cfg, wd)
    census = {}
    for n in thresholds:
        rels, frac = few_shot_relations(store, n, train_only=args.train_only)
        universe = int((store.relation_frequencies()[: store.n_base_relations] > 0).sum()) \
            if args.train_only else store.n_base_relations
        census[str(n)] = {"n_relations": len(rels), "relation_fraction": len(rels) / universe,
                          "instance_fraction": frac}
    report = {"task": "few_shot", "census": census}
    if not args.census_only:
        store, embedder, index = _load_model(cfg, wd, RELATION)
        test = _relation_test(store)
        config = RelationPredictorConfig(cfg.strategy, cfg.k, cfg.filtered)
        ranks, _ = relation_ranks(test, embedder, index, config, store)
        report["slices"] = few_shot_report(test, ranks, store, thresholds, train_only=args.train_only)
    out = _write_report(wd, "few_shot", report)
    for n, row in census.items():
        print(f"<{n}\t{row['n_relations']}\t{row['relation_fraction']:.4f}\t{row['instance_fraction']:.4f}")
    print(out)
    return 0


COMMANDS = {
    "ingest": cmd_ingest,
    "train": cmd_train,
    "index": cmd_index,
    "eval-classify": cmd_eval_classify,
    "eval-relation": cmd_eval_relation,
    "fewshot": cmd_fewshot,
}


def _add_run_flags(p: argparse.ArgumentParser) -> None:
    p.add_argument("--config", help="flat key = value config file")
    p.add_argument("--toy", action="store_true", help="use the bundled toy dataset and its config")
    p.add_argument("--workdir", help="artifact directory")
    p.add_argument("--force", action="store_true", help="accept artifacts built with another config")
    p.add_argument("--paper-lr", action="store_true", help=f"use learning rate {PAPER_LEARNING_RATE}")
    p.add_argument("-v", "--verbose", action="store_true")
    for f in fields(RunConfig):
        if f.name == "workdir":
            continue
        flag = "--" + f.name.replace("_", "-")
        if f.type == "bool":
            p.add_argument(flag, dest=f.name, default=None, action=argparse.BooleanOptionalAction)
        else:
            kind = {"int": int, "float": float}.get(f.type, str)
            p.add_argument(flag, dest=f.name, type=kind, default=None)


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="kgrefine", description=__doc__.splitlines()[0])
    sub = parser.add_subparsers(dest="command", required=True)
    for name in COMMANDS:
        p = sub.add_parser(name)
        _add_run_flags(p)
        if name in ("train", "index"):
            p.add_argument("--regime", choices=(RELATION, ENTITY), default=RELATION)
        if name == "fewshot":
            p.add_argument("--thresholds", type=int, nargs="+")
            p.add_argument("--train-only", action="store_true",
                           help="count only relations that occur in train")
            p.add_argument("--census-only", action="store_true", help="skip the trained-model slices")
    return parser


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s")
    try:
        cfg = build_config(args)
        if args.workdir:
            cfg.workdir = args.workdir
        wd = Workdir(cfg.workdir, force=args.force)
        return COMMANDS[args.command](cfg, wd, args)
    except (ArtifactError, DataFormatError, TrainingDivergedError, FileNotFoundError, ValueError) as exc:
        print(f"kgrefine {args.command}: error: {exc}", file=sys.stderr)
        return 2


if __name__ == "__main__":
    sys.exit(main())
