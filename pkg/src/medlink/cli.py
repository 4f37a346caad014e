"""Command-line pipeline: ingest -> mine -> train -> index -> retrieve -> rerank -> evaluate.

Every command reads its inputs from the work directory (or the configured
source files for ``ingest``), writes its outputs there, and records a
manifest with input/output hashes and the config snapshot.
"""

from __future__ import annotations

import argparse
import dataclasses
import hashlib
import json
import logging
import sys
from dataclasses import dataclass, field
from datetime import datetime, timezone
from importlib import resources
from pathlib import Path
from typing import Callable, Sequence

try:
    import tomllib
except ModuleNotFoundError:  # Python < 3.11
    import tomli as tomllib

from . import corpus, evaluation, mining, terminology
from .contrastive import (MSLossConfig, train_biencoder, train_biencoder_triplets,
                          write_loss_trace)
from .encoder import (CheckpointError, OptimizerConfig, ToyEncoder, load_checkpoint,
                      save_checkpoint)
from .index import IndexError_, build_index, load_index, retrieve_batch, save_index
from .reranker import (candidates_to_predictions, link_end_to_end, read_predictions,
                       train_crossencoder, write_predictions)

logger = logging.getLogger("medlink")

EXIT_OK, EXIT_FAILURE, EXIT_VALIDATION = 0, 1, 2


class ConfigError(ValueError):
    pass


class MissingArtifactError(RuntimeError):
    pass


@dataclass
class EncoderSettings:
    dim: int = 64
    vocab_size: int = 2**15
    hidden_dim: int = 64
    max_input_length: int = 256
    ngram_orders: tuple[int, ...] = (3,)


@dataclass
class BiencoderSettings:
    objective: str = "multi_similarity"  # or "triplet_margin"
    learning_rate: float = 2e-5
    batch_size: int = 256
    epochs: int = 1
    negatives_per_positive: int = 5
    triplet_margin: float = 5.0


@dataclass
class CrossencoderSettings:
    learning_rate: float = 2e-5
    batch_size: int = 256
    epochs: int = 1
    candidates_k: int = 10
    rerank_depth: int | None = None


@dataclass
class PipelineConfig:
    gazetteer: Path | None = None
    train: Path | None = None
    test: Path | None = None
    workdir: Path = Path("medlink-work")
    seed: int = 0
    include_obsolete: bool = False
    retrieval_k: int = 100
    eval_ks: tuple[int, ...] = evaluation.DEFAULT_KS
    encoder: EncoderSettings = field(default_factory=EncoderSettings)
    biencoder: BiencoderSettings = field(default_factory=BiencoderSettings)
    loss: MSLossConfig = field(default_factory=MSLossConfig)
    crossencoder: CrossencoderSettings = field(default_factory=CrossencoderSettings)

    def validate(self) -> None:
        if self.retrieval_k < max(self.eval_ks):
            raise ConfigError(f"retrieval k={self.retrieval_k} < max eval k={max(self.eval_ks)}")
        if min(self.eval_ks) < 1:
            raise ConfigError("eval ks must be positive")
        if self.biencoder.objective not in ("multi_similarity", "triplet_margin"):
            raise ConfigError(f"unknown bi-encoder objective {self.biencoder.objective!r}")
        try:
            self.biencoder_opt()
            self.crossencoder_opt()
        except ValueError as exc:
            raise ConfigError(str(exc)) from None

    def biencoder_opt(self) -> OptimizerConfig:
        b = self.biencoder
        return OptimizerConfig(b.learning_rate, b.batch_size, b.epochs, self.seed)

    def crossencoder_opt(self) -> OptimizerConfig:
        c = self.crossencoder
        return OptimizerConfig(c.learning_rate, c.batch_size, c.epochs, self.seed)

    def snapshot(self) -> dict:
        def plain(v):
            if isinstance(v, Path):
                return str(v)
            if isinstance(v, tuple):
                return list(v)
            if isinstance(v, dict):
                return {k: plain(x) for k, x in v.items()}
            return v
        return plain(dataclasses.asdict(self))


def _section(cls, raw: dict, name: str):
    known = {f.name for f in dataclasses.fields(cls)}
    extra = set(raw) - known
    if extra:
        raise ConfigError(f"unknown keys in [{name}]: {sorted(extra)}")
    values = {k: tuple(v) if isinstance(v, list) else v for k, v in raw.items()}
    try:
        return cls(**values)
    except (TypeError, ValueError) as exc:
        raise ConfigError(f"[{name}]: {exc}") from None


def load_config(path: str | Path | None, seed: int | None = None,
                workdir: str | Path | None = None) -> PipelineConfig:
    """Read a TOML config; relative paths resolve against the config's directory."""
    raw: dict = {}
    base = Path.cwd()
    if path is not None:
        path = Path(path)
        if not path.is_file():
            raise ConfigError(f"config file not found: {path}")
        try:
            raw = tomllib.loads(path.read_text(encoding="utf-8"))
        except tomllib.TOMLDecodeError as exc:
            raise ConfigError(f"{path}: {exc}") from None
        base = path.parent
    paths = raw.pop("paths", {})
    sections = {
        "encoder": (EncoderSettings, raw.pop("encoder", {})),
        "biencoder": (BiencoderSettings, raw.pop("biencoder", {})),
        "loss": (MSLossConfig, raw.pop("loss", {})),
        "crossencoder": (CrossencoderSettings, raw.pop("crossencoder", {})),
    }
    retrieval = raw.pop("retrieval", {})
    ev = raw.pop("evaluation", {})
    cfg = PipelineConfig()
    for key in ("seed", "include_obsolete"):
        if key in raw:
            setattr(cfg, key, raw.pop(key))
    if raw:
        raise ConfigError(f"unknown top-level keys: {sorted(raw)}")
    for key in ("gazetteer", "train", "test", "workdir"):
        if key in paths:
            setattr(cfg, key, (base / paths.pop(key)).resolve())
    if paths:
        raise ConfigError(f"unknown keys in [paths]: {sorted(paths)}")
    for name, (cls, section) in sections.items():
        setattr(cfg, name, _section(cls, section, name))
    cfg.retrieval_k = int(retrieval.get("k", cfg.retrieval_k))
    cfg.eval_ks = tuple(int(k) for k in ev.get("ks", cfg.eval_ks))
    if seed is not None:
        cfg.seed = seed
    if workdir is not None:
        cfg.workdir = Path(workdir).resolve()
    cfg.validate()
    return cfg


# work directory layout: name -> (relative path, producing command)
ARTIFACTS = {
    "store": ("store/gazetteer.tsv", "ingest"),
    "store_stats": ("store/stats.json", "ingest"),
    "train": ("corpus/train.tsv", "ingest"),
    "test": ("corpus/test.tsv", "ingest"),
    "unseen": ("corpus/unseen.tsv", "ingest"),
    "pairs": ("mining/fsn_pairs.tsv", "mine"),
    "random_triplets": ("mining/random_triplets.tsv", "mine"),
    "biencoder": ("models/biencoder.ckpt", "train-biencoder"),
    "biencoder_trace": ("models/biencoder_trace.csv", "train-biencoder"),
    "index": ("index/gazetteer.clix", "build-index"),
    "candidates": ("candidates/test.jsonl", "retrieve"),
    "hard_triplets": ("mining/hard_triplets.tsv", "train-crossencoder"),
    "crossencoder": ("models/crossencoder.ckpt", "train-crossencoder"),
    "crossencoder_trace": ("models/crossencoder_trace.csv", "train-crossencoder"),
    "predictions": ("predictions/test.jsonl", "link"),
}


def sha256_file(path: Path) -> str:
    h = hashlib.sha256()
    with open(path, "rb") as fh:
        for chunk in iter(lambda: fh.read(1 << 20), b""):
            h.update(chunk)
    return h.hexdigest()


class Workspace:
    def __init__(self, cfg: PipelineConfig, command: str):
        self.cfg = cfg
        self.root = Path(cfg.workdir)
        self.command = command
        self.inputs: dict[str, str] = {}
        self.outputs: dict[str, str] = {}

    def path(self, name: str) -> Path:
        return self.root / ARTIFACTS[name][0]

    def need(self, name: str) -> Path:
        p = self.path(name)
        if not p.exists():
            raise MissingArtifactError(
                f"missing {ARTIFACTS[name][0]} in {self.root}; run `medlink {ARTIFACTS[name][1]}` first")
        self.record_input(p)
        return p

    def record_input(self, p: Path) -> None:
        self.inputs[self._label(p)] = sha256_file(p)

    def out(self, name_or_rel: str) -> Path:
        rel = ARTIFACTS[name_or_rel][0] if name_or_rel in ARTIFACTS else name_or_rel
        p = self.root / rel
        p.parent.mkdir(parents=True, exist_ok=True)
        return p

    def _label(self, p: Path) -> str:
        try:
            return str(p.resolve().relative_to(self.root.resolve()))
        except ValueError:
            return str(p.resolve())

    def write_manifest(self) -> Path:
        for p in sorted(self._written):
            self.outputs[self._label(p)] = sha256_file(p)
        manifest = {
            "command": self.command,
            "created_at": datetime.now(timezone.utc).isoformat(),
            "config": self.cfg.snapshot(),
            "inputs": dict(sorted(self.inputs.items())),
            "outputs": dict(sorted(self.outputs.items())),
        }
        path = self.out(f"manifests/{self.command}.json")
        path.write_text(json.dumps(manifest, indent=2) + "\n", encoding="utf-8")
        return path

    _written: set

    def written(self, *paths: Path) -> None:
        self._written.update(paths)

    def __enter__(self):
        self._written = set()
        return self

    def __exit__(self, exc_type, exc, tb):
        if exc_type is None:
            self.write_manifest()


def _source(path: Path | None, what: str) -> Path:
    if path is None:
        raise ConfigError(f"no {what} path configured ([paths] {what})")
    if not Path(path).is_file():
        raise ConfigError(f"{what} file not found: {path}")
    return Path(path)


def _load_encoder(cfg: PipelineConfig, path: Path):
    e = cfg.encoder
    return load_checkpoint(path, vocab_size=e.vocab_size, ngram_orders=e.ngram_orders,
                           max_input_length=e.max_input_length, expected_dim=e.dim)


def cmd_ingest(cfg: PipelineConfig) -> None:
    with Workspace(cfg, "ingest") as ws:
        gaz = _source(cfg.gazetteer, "gazetteer")
        tr, te = _source(cfg.train, "train"), _source(cfg.test, "test")
        for p in (gaz, tr, te):
            ws.record_input(p)
        store = terminology.ingest_gazetteer(gaz, include_obsolete=cfg.include_obsolete)
        train = corpus.ingest_annotations(tr, "train")
        test = corpus.ingest_annotations(te, "test")
        unseen = corpus.unseen_codes_subset(train, test)
        terminology.write_gazetteer(store, ws.out("store"))
        corpus.write_annotations(train.records, ws.out("train"))
        corpus.write_annotations(test.records, ws.out("test"))
        corpus.write_annotations(unseen.records, ws.out("unseen"))
        stats = terminology.store_stats(store)
        ws.out("store_stats").write_text(json.dumps({
            "concept_count": stats.concept_count,
            "term_count": stats.term_count,
            "synonym_histogram": {str(k): v for k, v in stats.synonym_histogram.items()},
            "train_records": len(train), "train_dropped": train.n_dropped,
            "test_records": len(test), "test_dropped": test.n_dropped,
            "unseen_records": len(unseen),
        }, indent=2) + "\n", encoding="utf-8")
        ws.written(*(ws.path(n) for n in ("store", "store_stats", "train", "test", "unseen")))
        logger.info("ingested %d concepts / %d terms; train %d, test %d, unseen %d",
                    stats.concept_count, stats.term_count, len(train), len(test), len(unseen))


def _store(ws: Workspace) -> terminology.ConceptStore:
    return terminology.ingest_gazetteer(ws.need("store"), include_obsolete=True)


def cmd_mine(cfg: PipelineConfig) -> None:
    with Workspace(cfg, "mine") as ws:
        store = _store(ws)
        pairs = mining.build_fsn_pairs(store)
        mining.write_pairs(pairs, ws.out("pairs"))
        written = [ws.path("pairs")]
        if len(store) >= 2:
            triplets = mining.build_random_triplets(
                store, cfg.biencoder.negatives_per_positive, seed=cfg.seed)
            mining.write_triplets(triplets, ws.out("random_triplets"))
            written.append(ws.path("random_triplets"))
        ws.written(*written)
        logger.info("mined %d fsn pairs", len(pairs))


def cmd_train_biencoder(cfg: PipelineConfig) -> None:
    with Workspace(cfg, "train-biencoder") as ws:
        e = cfg.encoder
        init = ToyEncoder(dim=e.dim, vocab_size=e.vocab_size, hidden_dim=e.hidden_dim,
                          ngram_orders=e.ngram_orders, max_input_length=e.max_input_length,
                          seed=cfg.seed)
        if cfg.biencoder.objective == "multi_similarity":
            result = train_biencoder(init, mining.read_pairs(ws.need("pairs")),
                                     cfg.biencoder_opt(), cfg.loss)
        else:
            result = train_biencoder_triplets(init, mining.read_triplets(ws.need("random_triplets")),
                                              cfg.biencoder_opt(), cfg.biencoder.triplet_margin)
        save_checkpoint(result.model, ws.out("biencoder"))
        write_loss_trace(result.trace, ws.out("biencoder_trace"))
        ws.written(ws.path("biencoder"), ws.path("biencoder_trace"))
        logger.info("bi-encoder trained: %d steps, %d skipped batches",
                    len(result.trace), result.skipped_batches)


def cmd_build_index(cfg: PipelineConfig) -> None:
    with Workspace(cfg, "build-index") as ws:
        store = _store(ws)
        encoder = _load_encoder(cfg, ws.need("biencoder"))
        index = build_index(store, encoder, existing=ws.path("index"))
        save_index(index, ws.out("index"))
        ws.written(ws.path("index"))
        logger.info("indexed %d terms", len(index))


def cmd_retrieve(cfg: PipelineConfig) -> None:
    with Workspace(cfg, "retrieve") as ws:
        encoder = _load_encoder(cfg, ws.need("biencoder"))
        index = load_index(ws.need("index"))
        test = corpus.ingest_annotations(ws.need("test"), "test")
        csets = retrieve_batch(index, encoder, [r.text for r in test], cfg.retrieval_k)
        write_predictions(candidates_to_predictions(test, csets), ws.out("candidates"))
        ws.written(ws.path("candidates"))


def cmd_train_crossencoder(cfg: PipelineConfig) -> None:
    with Workspace(cfg, "train-crossencoder") as ws:
        encoder = _load_encoder(cfg, ws.need("biencoder"))
        train = corpus.ingest_annotations(ws.need("train"), "train")
        pool = mining.mention_vocabulary_store(train)
        pool_index = build_index(pool, encoder)
        csets = retrieve_batch(pool_index, encoder, [r.text for r in train],
                               cfg.crossencoder.candidates_k)
        hard = mining.build_hard_triplets_from_candidates(zip(train, csets), pool)
        if not hard.triplets:
            raise ConfigError("no hard triplets could be mined from the training split")
        mining.write_triplets(hard.triplets, ws.out("hard_triplets"))
        result = train_crossencoder(encoder, hard.triplets, cfg.crossencoder_opt())
        save_checkpoint(result.model, ws.out("crossencoder"))
        write_loss_trace(result.trace, ws.out("crossencoder_trace"))
        ws.written(ws.path("hard_triplets"), ws.path("crossencoder"),
                   ws.path("crossencoder_trace"))
        logger.info("cross-encoder trained on %d triplets (%d mentions skipped)",
                    len(hard.triplets), hard.skipped_unknown_gold + hard.skipped_no_positive)


def cmd_link(cfg: PipelineConfig) -> None:
    with Workspace(cfg, "link") as ws:
        encoder = _load_encoder(cfg, ws.need("biencoder"))
        scorer = _load_encoder(cfg, ws.need("crossencoder"))
        index = load_index(ws.need("index"))
        test = corpus.ingest_annotations(ws.need("test"), "test")
        linked = link_end_to_end(encoder, scorer, index, [r.text for r in test],
                                 cfg.retrieval_k, cfg.crossencoder.rerank_depth)
        write_predictions(candidates_to_predictions(test, linked), ws.out("predictions"))
        ws.written(ws.path("predictions"))


def cmd_evaluate(cfg: PipelineConfig) -> dict[str, evaluation.EvalReport]:
    with Workspace(cfg, "evaluate") as ws:
        train_codes = corpus.ingest_annotations(ws.need("train"), "train").codes
        known = set(_store(ws).concepts)
        sources = [(label, name) for label, name in
                   (("biencoder", "candidates"), ("pipeline", "predictions"))
                   if ws.path(name).exists()]
        if not sources:
            raise MissingArtifactError(
                f"no predictions in {ws.root}; run `medlink retrieve` or `medlink link` first")
        reports: dict[str, evaluation.EvalReport] = {}
        for label, name in sources:
            preds = read_predictions(ws.need(name))
            subsets = {"gold": preds, "unseen": [p for p in preds if p.gold_code not in train_codes]}
            for split, items in subsets.items():
                rep = evaluation.topk_accuracy(items, cfg.eval_ks, split=split, known_codes=known)
                out = ws.out(f"reports/{split}_{label}.json")
                evaluation.write_report(rep, out)
                ws.written(out)
                reports[f"{split}_{label}"] = rep
        if len(sources) == 2:
            deltas = {split: {str(k): round(v, 4) for k, v in evaluation.compare_reports(
                reports[f"{split}_biencoder"], reports[f"{split}_pipeline"]).items()}
                for split in ("gold", "unseen")}
            out = ws.out("reports/delta.json")
            out.write_text(json.dumps(deltas, indent=2) + "\n", encoding="utf-8")
            ws.written(out)
        print(evaluation.format_table(list(reports.values()), list(reports)))
        return reports


def cmd_synthetic(cfg: PipelineConfig, target: Path) -> None:
    """Copy the bundled synthetic dataset and its config into ``target``."""
    target.mkdir(parents=True, exist_ok=True)
    src = resources.files("medlink") / "data" / "synthetic"
    for name in ("gazetteer.tsv", "train.tsv", "test.tsv", "pipeline.toml"):
        (target / name).write_bytes((src / name).read_bytes())
    print(f"wrote synthetic dataset to {target}")


COMMANDS: dict[str, Callable[[PipelineConfig], object]] = {
    "ingest": cmd_ingest,
    "mine": cmd_mine,
    "train-biencoder": cmd_train_biencoder,
    "build-index": cmd_build_index,
    "retrieve": cmd_retrieve,
    "train-crossencoder": cmd_train_crossencoder,
    "link": cmd_link,
    "evaluate": cmd_evaluate,
}
PIPELINE_ORDER = list(COMMANDS)


def build_parser() -> argparse.ArgumentParser:
    common = argparse.ArgumentParser(add_help=False)
    common.add_argument("--config", type=Path, default=argparse.SUPPRESS, help="TOML config file")
    common.add_argument("--seed", type=int, default=argparse.SUPPRESS, help="override config seed")
    common.add_argument("--workdir", type=Path, default=argparse.SUPPRESS,
                        help="artifact directory (overrides config)")
    common.add_argument("-v", "--verbose", action="store_true", default=argparse.SUPPRESS)
    parser = argparse.ArgumentParser(prog="medlink", parents=[common],
                                     description="Two-stage medical entity linking pipeline.")
    sub = parser.add_subparsers(dest="command", required=True)
    for name in COMMANDS:
        sub.add_parser(name, parents=[common])
    sub.add_parser("run", parents=[common], help="run every stage in order")
    syn = sub.add_parser("synthetic", parents=[common], help="write the bundled synthetic dataset")
    syn.add_argument("target", type=Path)
    return parser


def main(argv: Sequence[str] | None = None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.INFO if getattr(args, "verbose", False) else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s")
    try:
        if args.command == "synthetic":
            cmd_synthetic(PipelineConfig(), args.target)
            return EXIT_OK
        cfg = load_config(getattr(args, "config", None), getattr(args, "seed", None),
                          getattr(args, "workdir", None))
        for name in (PIPELINE_ORDER if args.command == "run" else [args.command]):
            COMMANDS[name](cfg)
    except (ConfigError, terminology.GazetteerError, corpus.AnnotationError) as exc:
        print(f"medlink: validation error: {exc}", file=sys.stderr)
        return EXIT_VALIDATION
    except (MissingArtifactError, CheckpointError, IndexError_, OSError, ValueError) as exc:
        print(f"medlink: error: {exc}", file=sys.stderr)
        return EXIT_FAILURE
    return EXIT_OK


if __name__ == "__main__":
    sys.exit(main())
