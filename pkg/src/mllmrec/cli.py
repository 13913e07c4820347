"""Stage-per-command pipeline driver.

Every stage writes its artifacts under ``<workdir>/<stage>/`` and records a
manifest entry (config hash, upstream artifact hashes, own artifact hash) in
``<workdir>/manifest.json``.
"""

from __future__ import annotations

import argparse
import dataclasses
import hashlib
import json
import logging
import os
import sys
from contextlib import contextmanager
from pathlib import Path

import numpy as np

from mllmrec import descriptor, graph, pipeline
from mllmrec.config import (FLAT_KEYS, ConfigError, PipelineConfig, config_to_dict, load_config,
                            stable_hash)
from mllmrec.corpus import (CorpusError, index, kcore_filter, load_interactions, load_split,
                            save_split, split)
from mllmrec.embedder import FileEncoder, StubEncoder, store_read, store_write
from mllmrec.errors import StageMissing
from mllmrec.evaluate import evaluate, rank_all, write_topn
from mllmrec.model import load_checkpoint, save_checkpoint, train, write_history

log = logging.getLogger("mllmrec")

EXIT_OK, EXIT_ERROR, EXIT_PARTIAL, EXIT_STAGE_MISSING, EXIT_CONFIG = 0, 1, 2, 3, 4

UPSTREAM = {
    "prepare": (),
    "describe": ("prepare",),
    "encode": ("describe",),
    "graph": ("prepare", "encode"),
    "train": ("prepare", "encode", "graph"),
    "evaluate": ("prepare", "encode", "graph", "train"),
    "ablate": ("prepare", "encode"),
    "export": ("prepare", "encode", "graph"),
}
COMMAND_NAME = {"graph": "build-graph"}

ENV_ENDPOINT, ENV_API_KEY, ENV_MODEL = "MLLMREC_ENDPOINT", "MLLMREC_API_KEY", "MLLMREC_MODEL"


class LockHeld(RuntimeError):
    pass


def file_hash(paths) -> str:
    h = hashlib.sha256()
    for p in sorted(Path(x) for x in paths):
        h.update(p.name.encode("utf-8") + b"\x00")
        with open(p, "rb") as fh:
            for chunk in iter(lambda: fh.read(1 << 20), b""):
                h.update(chunk)
    return h.hexdigest()[:16]


class Workdir:
    def __init__(self, root: str | Path):
        self.root = Path(root)
        self.root.mkdir(parents=True, exist_ok=True)
        self.manifest_path = self.root / "manifest.json"

    def stage_dir(self, stage: str) -> Path:
        d = self.root / stage
        d.mkdir(parents=True, exist_ok=True)
        return d

    def manifest(self) -> dict:
        if not self.manifest_path.exists():
            return {}
        return json.loads(self.manifest_path.read_text(encoding="utf-8"))

    def record(self, stage: str, config_hash: str, files, **extra) -> dict:
        m = self.manifest()
        entry = {
            "config_hash": config_hash,
            "upstream": {s: m[s]["artifact_hash"] for s in UPSTREAM.get(stage, ()) if s in m},
            "files": sorted(str(Path(f).relative_to(self.root)) for f in files),
            "artifact_hash": file_hash(files),
            **extra,
        }
        m[stage] = entry
        tmp = self.manifest_path.with_suffix(".tmp")
        tmp.write_text(json.dumps(m, indent=2, sort_keys=True) + "\n", encoding="utf-8")
        tmp.replace(self.manifest_path)
        return entry

    def require(self, stage: str) -> dict:
        """Check every upstream of ``stage`` exists and the recorded chain is intact."""
        m = self.manifest()
        for up in UPSTREAM[stage]:
            entry = m.get(up)
            name = COMMAND_NAME.get(up, up)
            if entry is None:
                raise StageMissing(name)
            if entry.get("partial_failed"):
                raise StageMissing(name, "previous run left users without preference texts")
            files = [self.root / f for f in entry["files"]]
            missing = [str(f) for f in files if not f.exists()]
            if missing:
                raise StageMissing(name, f"artifact missing: {missing[0]}")
            if file_hash(files) != entry["artifact_hash"]:
                raise StageMissing(name, "artifacts changed since the stage ran; rerun it")
            for grand, h in entry["upstream"].items():
                if grand in m and m[grand]["artifact_hash"] != h:
                    raise StageMissing(name, f"built from a different {COMMAND_NAME.get(grand, grand)} "
                                             "output; rerun it")
        return m

    @contextmanager
    def lock(self):
        path = self.root / ".lock"
        try:
            fd = os.open(path, os.O_CREAT | os.O_EXCL | os.O_WRONLY)
        except FileExistsError:
            raise LockHeld(f"workdir {self.root} is locked by another run ({path})") from None
        try:
            os.write(fd, str(os.getpid()).encode())
            os.close(fd)
            yield
        finally:
            path.unlink(missing_ok=True)


# per-stage config hashes ---------------------------------------------------------

def stage_config(cfg: PipelineConfig, stage: str, stub: bool) -> dict:
    if stage == "prepare":
        return {"interactions": cfg.interactions, "kcore": cfg.kcore,
                "ratios": cfg.split_ratios, "seed": cfg.seed}
    if stage == "describe":
        return {"dataset": cfg.dataset, "items": cfg.items, "cap": cfg.behavior_cap,
                "separator": cfg.separator, "model": "stub" if stub else cfg.mllm.model_name,
                "seed": cfg.seed if stub else None}
    if stage == "encode":
        enc = "stub" if stub else cfg.encoder
        return {"encoder": enc, "dim": cfg.encoder_dim if enc == "stub" else None,
                "path": cfg.encoder_path if enc == "file" else None,
                "seed": cfg.seed if enc == "stub" else None}
    if stage == "graph":
        return dataclasses.asdict(cfg.graph)
    if stage == "train":
        return dataclasses.asdict(cfg.train)
    if stage == "evaluate":
        return {"ks": cfg.ks}
    raise KeyError(stage)


class Runner:
    def __init__(self, cfg: PipelineConfig, stub: bool = False, force: bool = False):
        self.cfg = cfg
        self.stub = stub
        self.force = force
        self.work = Workdir(cfg.workdir)

    def _hash(self, stage):
        return stable_hash(stage_config(self.cfg, stage, self.stub))

    def up_to_date(self, stage: str) -> bool:
        """True when ``stage`` already ran with this config (nothing to do).

        Raises ConfigError when it ran with a different config and --force is off.
        """
        m = self.work.manifest()
        entry = m.get(stage)
        if entry is None or self.force or entry.get("partial"):
            return False
        current = {s: m[s]["artifact_hash"] for s in UPSTREAM[stage] if s in m}
        if entry["upstream"] != current:
            log.info("%s: upstream artifacts changed, rebuilding", stage)
            return False
        if entry["config_hash"] != self._hash(stage):
            raise ConfigError(f"stage {stage!r} was built with a different configuration; "
                              "pass --force to overwrite")
        return True

    # stages -----------------------------------------------------------------------

    def prepare(self) -> int:
        if self.up_to_date("prepare"):
            log.info("prepare: already complete; pass --force to rebuild")
            return EXIT_OK
        cfg = self.cfg
        raw = load_interactions(cfg.interactions)
        filtered = kcore_filter(raw, cfg.kcore)
        matrix = index(filtered)
        sp_ = split(matrix, cfg.split_ratios, cfg.seed)
        out = self.work.stage_dir("prepare")
        save_split(sp_, out, all_timestamps=matrix.timestamps)
        files = [out / n for n in ("train.tsv", "valid.tsv", "test.tsv", "user_map.tsv",
                                   "item_map.tsv", "split.json")]
        counts = json.loads((out / "split.json").read_text())
        counts.update(raw_interactions=len(raw), filtered_interactions=len(filtered))
        self.work.record("prepare", self._hash("prepare"), files, counts=counts)
        log.info("prepare: %d users, %d items, %d/%d/%d train/valid/test", counts["n_users"],
                 counts["n_items"], counts["n_train"], counts["n_valid"], counts["n_test"])
        return EXIT_OK

    def _client(self):
        if self.stub:
            return descriptor.StubMllmClient(seed=self.cfg.seed)
        mcfg = self.cfg.mllm
        overrides = {}
        if os.environ.get(ENV_ENDPOINT):
            overrides["endpoint"] = os.environ[ENV_ENDPOINT]
        if os.environ.get(ENV_MODEL):
            overrides["model_name"] = os.environ[ENV_MODEL]
        mcfg = dataclasses.replace(mcfg, **overrides)
        return descriptor.HttpMllmClient(mcfg, api_key=os.environ.get(ENV_API_KEY))

    def describe(self) -> int:
        self.work.require("describe")
        if self.up_to_date("describe"):
            log.info("describe: already complete; 0 generations")
            return EXIT_OK
        cfg = self.cfg
        sp_ = load_split(self.work.root / "prepare")
        items = descriptor.load_item_metadata(cfg.items, sp_.train.item_keys)
        out = self.work.stage_dir("describe")
        cache = descriptor.ResponseCache(out / "cache.jsonl")
        client = self._client()
        described = pipeline.describe(sp_, items, client, cfg.dataset, cache, cfg.behavior_cap,
                                      cfg.separator, cfg.mllm.concurrency)
        report = described.report
        descriptor.write_jsonl(described.items, out / "items.jsonl")
        descriptor.write_jsonl(described.users, out / "users.jsonl")
        failures = {"items": {sp_.train.item_keys[i]: e for i, e in report.item_failures.items()},
                    "users": {sp_.train.user_keys[u]: e for u, e in report.user_failures.items()}}
        (out / "failures.json").write_text(json.dumps(failures, indent=2) + "\n", encoding="utf-8")
        self.work.record("describe", self._hash("describe"),
                         [out / "items.jsonl", out / "users.jsonl"],
                         generations=report.generated, partial=report.partial,
                         partial_failed=bool(report.user_failures),
                         item_failures=len(report.item_failures),
                         user_failures=len(report.user_failures))
        log.info("describe: %d generations, %d item failures, %d user failures",
                 report.generated, len(report.item_failures), len(report.user_failures))
        return EXIT_PARTIAL if report.partial else EXIT_OK

    def _encoder(self):
        if self.stub or self.cfg.encoder == "stub":
            return StubEncoder(self.cfg.encoder_dim, seed=self.cfg.seed)
        return FileEncoder(self.cfg.encoder_path)

    def encode(self) -> int:
        self.work.require("encode")
        if self.up_to_date("encode"):
            log.info("encode: already complete")
            return EXIT_OK
        src = self.work.root / "describe"
        described = pipeline.Described(descriptor.read_items(src / "items.jsonl"),
                                       descriptor.read_users(src / "users.jsonl"),
                                       descriptor.DescribeReport())
        e0, users = pipeline.encode(self._encoder(), described)
        out = self.work.stage_dir("encode")
        store_write(e0, out / "items.emb")
        store_write(users, out / "users.emb")
        self.work.record("encode", self._hash("encode"), [out / "items.emb", out / "users.emb"],
                         dim=int(e0.shape[1]))
        log.info("encode: %d items, %d users, dim %d", e0.shape[0], users.shape[0], e0.shape[1])
        return EXIT_OK

    def _load_inputs(self):
        sp_ = load_split(self.work.root / "prepare")
        e0 = store_read(self.work.root / "encode" / "items.emb").astype(np.float64)
        users = store_read(self.work.root / "encode" / "users.emb").astype(np.float64)
        return sp_, e0, users

    def _write_graph(self, gcfg, sp_, e0) -> list[Path]:
        graphs = graph.build_refined_graph(e0, sp_.train, gcfg.k_semantic, gcfg.alpha,
                                           gcfg.k_cooccur, gcfg.use_cooccur, gcfg.symmetrize)
        feats = graph.propagate(graphs["normalized"], e0, gcfg.layers)
        out = self.work.stage_dir("graph")
        files = []
        for stage, g in graphs.items():
            graph.export_graph(g, out / f"{stage}.graph")
            files.append(out / f"{stage}.graph")
        store_write(feats, out / "items_prop.emb")
        files.append(out / "items_prop.emb")
        audit = audit_graph(graphs, e0, gcfg)
        self.work.record("graph", self._hash("graph"), files, audit=audit,
                         edges={k: g.n_edges for k, g in graphs.items()})
        log.info("graph: %s", ", ".join(f"{k}={g.n_edges}" for k, g in graphs.items()))
        return files

    def build_graph(self) -> int:
        self.work.require("graph")
        if self.up_to_date("graph"):
            log.info("build-graph: already complete")
            return EXIT_OK
        sp_, e0, _ = self._load_inputs()
        self._write_graph(self.cfg.graph, sp_, e0)
        return EXIT_OK

    def train(self) -> int:
        self.work.require("train")
        if self.up_to_date("train"):
            log.info("train: already complete")
            return EXIT_OK
        sp_, _, users = self._load_inputs()
        feats = store_read(self.work.root / "graph" / "items_prop.emb").astype(np.float64)
        result = train(sp_, users, feats, self.cfg.train, log=log.debug)
        self._write_train(result)
        return EXIT_OK

    def _write_train(self, result, **extra):
        out = self.work.stage_dir("train")
        save_checkpoint(out / "checkpoint.ckpt", result.params, result.state, result.best_epoch)
        write_history(result.history, out / "history.csv")
        self.work.record("train", self._hash("train"), [out / "checkpoint.ckpt", out / "history.csv"],
                         best_epoch=result.best_epoch, epochs=len(result.history),
                         best_valid_recall20=max(r.recall20 for r in result.history), **extra)
        log.info("train: %d epochs, best epoch %d, valid R@20 %.4f", len(result.history),
                 result.best_epoch, max(r.recall20 for r in result.history))

    def grid(self) -> int:
        """Build + train every (alpha, K_c) point; keep the best by validation R@20."""
        self.work.require("graph")
        sp_, e0, users = self._load_inputs()
        rows, best = [], None
        for gcfg in pipeline.grid_points(self.cfg):
            feats, _ = pipeline.item_features(e0, sp_, gcfg)
            result = train(sp_, users, feats, self.cfg.train)
            score = max(r.recall20 for r in result.history)
            rows.append({"alpha": gcfg.alpha, "k_cooccur": gcfg.k_cooccur, "valid_recall20": score,
                         "best_epoch": result.best_epoch})
            log.info("grid alpha=%.2f K_c=%d: valid R@20 %.4f", gcfg.alpha, gcfg.k_cooccur, score)
            if best is None or score > best[0]:
                best = (score, gcfg, result)
        score, gcfg, result = best
        self.cfg = dataclasses.replace(self.cfg, graph=gcfg)
        self._write_graph(gcfg, sp_, e0)
        self._write_train(result, grid_choice={"alpha": gcfg.alpha, "k_cooccur": gcfg.k_cooccur})
        out = self.work.stage_dir("train")
        (out / "grid.json").write_text(json.dumps({"points": rows, "chosen": {
            "alpha": gcfg.alpha, "k_cooccur": gcfg.k_cooccur, "valid_recall20": score}}, indent=2)
            + "\n", encoding="utf-8")
        log.info("grid: chose alpha=%.2f K_c=%d", gcfg.alpha, gcfg.k_cooccur)
        return EXIT_OK

    def evaluate(self, which: str = "test", dump_topn: bool = False) -> int:
        m = self.work.require("evaluate")
        sp_, _, users = self._load_inputs()
        feats = store_read(self.work.root / "graph" / "items_prop.emb").astype(np.float64)
        params, _, _ = load_checkpoint(self.work.root / "train" / "checkpoint.ckpt")
        slope = self.cfg.train.leaky_slope
        report = evaluate(params, sp_, users, feats, self.cfg.ks, which, slope)
        report.meta = {"dataset": self.cfg.dataset, "seed": self.cfg.seed, "split": which,
                       "config_hash": stable_hash({s: m[s]["config_hash"] for s in
                                                   UPSTREAM["evaluate"]} | {"evaluate": self._hash("evaluate")})}
        out = self.work.stage_dir("evaluate")
        report.write(out / "metrics.json")
        files = [out / "metrics.json"]
        if dump_topn:
            truth = sp_.test if which == "test" else sp_.valid
            who = [u for u in range(sp_.n_users) if len(truth[u])]
            ranked = rank_all(params, users, feats, sp_.train, who, max(self.cfg.ks), slope)
            write_topn(ranked, who, out / "topn.tsv", sp_.train.user_keys, sp_.train.item_keys)
            files.append(out / "topn.tsv")
        self.work.record("evaluate", self._hash("evaluate"), files)
        print(json.dumps(report.to_json(), indent=2))
        return EXIT_OK

    def export_graph(self, out_path: str | None, stage: str) -> int:
        self.work.require("export")
        src = self.work.root / "graph" / f"{stage}.graph"
        g = graph.import_graph(src)
        dest = Path(out_path) if out_path else self.work.stage_dir("export") / f"{stage}.graph"
        dest.parent.mkdir(parents=True, exist_ok=True)
        graph.export_graph(g, dest)
        log.info("export-graph: wrote %s (%d items, %d edges)", dest, g.n, g.n_edges)
        return EXIT_OK

    def ablate(self, variants, seeds) -> int:
        self.work.require("ablate")
        sp_, e0, users = self._load_inputs()
        results: dict[str, list[dict]] = {v: [] for v in variants}
        for seed in seeds:
            tcfg = dataclasses.replace(self.cfg.train, seed=seed)
            for v in variants:
                r = pipeline.run_variant(sp_, e0, users, self.cfg.graph, tcfg, v, self.cfg.ks)
                results[v].append({"seed": seed, "recall": r.test.recall, "ndcg": r.test.ndcg,
                                   "best_epoch": r.train.best_epoch})
        table = {}
        for v, runs in results.items():
            table[v] = {f"{m}@{k}": float(np.mean([run[m][k] for run in runs]))
                        for m in ("recall", "ndcg") for k in self.cfg.ks}
        out = self.work.stage_dir("ablate")
        payload = {"dataset": self.cfg.dataset, "seeds": list(seeds), "mean": table,
                   "runs": {v: [{**r, "recall": {str(k): x for k, x in r["recall"].items()},
                                 "ndcg": {str(k): x for k, x in r["ndcg"].items()}} for r in runs]
                            for v, runs in results.items()}}
        (out / "ablation.json").write_text(json.dumps(payload, indent=2) + "\n", encoding="utf-8")
        cols = list(next(iter(table.values())))
        print("variant  " + "  ".join(f"{c:>10}" for c in cols))
        for v, row in table.items():
            print(f"{v:<8} " + "  ".join(f"{row[c]:>10.4f}" for c in cols))
        return EXIT_OK


def audit_graph(graphs: dict[str, graph.SparseGraph], e0: np.ndarray, gcfg) -> dict:
    """Threshold and out-degree checks on a freshly built graph."""
    sem = graphs["semantic"]
    unit = e0 / np.linalg.norm(e0, axis=1, keepdims=True)
    cos = np.einsum("ij,ij->i", unit[sem.src], unit[sem.dst])
    return {
        "semantic_min_cosine": float(cos.min()) if cos.size else None,
        "threshold_ok": bool(np.all(cos >= gcfg.alpha)) if cos.size else True,
        "semantic_max_out_degree": int(sem.out_degree().max()) if sem.n_edges else 0,
        "cooccur_max_out_degree": int(graphs["cooccur"].out_degree().max())
        if graphs["cooccur"].n_edges else 0,
    }


# argument parsing ---------------------------------------------------------------

def build_parser() -> argparse.ArgumentParser:
    common = argparse.ArgumentParser(add_help=False)
    common.add_argument("--config", required=True, help="flat YAML config file")
    common.add_argument("--seed", type=int, help="override the config seed (split, init, stubs)")
    common.add_argument("--stub", action="store_true",
                        help="use the deterministic offline MLLM and encoder")
    common.add_argument("--force", action="store_true", help="rebuild even if up to date")
    common.add_argument("--grid", action="store_true",
                        help="(build-graph/train) search the alpha x K_c grid")
    common.add_argument("-v", "--verbose", action="store_true")

    epilog = ("config keys: " + ", ".join(FLAT_KEYS) + "\n\nexit codes: 0 ok, 2 partial "
              "(describe failures), 3 stage missing, 4 config error\n"
              f"environment: {ENV_ENDPOINT}, {ENV_MODEL}, {ENV_API_KEY}")
    parser = argparse.ArgumentParser(prog="mllmrec", description=__doc__, epilog=epilog,
                                     formatter_class=argparse.RawDescriptionHelpFormatter)
    sub = parser.add_subparsers(dest="command", required=True)
    for name, help_ in [("prepare", "5-core filter, index and split the interactions"),
                        ("describe", "generate item descriptions and user preferences"),
                        ("encode", "embed item and user texts"),
                        ("build-graph", "build the refined item-item graph and propagate"),
                        ("train", "train the dual MLPs with BPR")]:
        sub.add_parser(name, parents=[common], help=help_)
    p = sub.add_parser("evaluate", parents=[common], help="Recall/NDCG on the test split")
    p.add_argument("--split", choices=("test", "valid"), default="test")
    p.add_argument("--dump-topn", action="store_true", help="also write per-user top-N TSV")
    p = sub.add_parser("export-graph", parents=[common], help="write a plug-and-play graph file")
    p.add_argument("--out", help="destination path")
    p.add_argument("--stage", choices=graph.STAGES, default="merged")
    p = sub.add_parser("ablate", parents=[common], help="train and compare ablation variants")
    p.add_argument("--variants", nargs="+", choices=pipeline.VARIANTS, default=list(pipeline.VARIANTS))
    p.add_argument("--seeds", nargs="+", type=int, help="training seeds (default: config seed)")
    return parser


def run(args: argparse.Namespace) -> int:
    cfg = load_config(args.config)
    if args.seed is not None:
        cfg = dataclasses.replace(cfg, seed=args.seed,
                                  train=dataclasses.replace(cfg.train, seed=args.seed))
    if args.grid and args.command not in ("build-graph", "train"):
        raise ConfigError("--grid only applies to build-graph and train")
    runner = Runner(cfg, stub=args.stub, force=args.force)
    with runner.work.lock():
        (runner.work.root / "config.resolved.json").write_text(
            json.dumps(config_to_dict(cfg), indent=2) + "\n", encoding="utf-8")
        cmd = args.command
        if cmd == "prepare":
            return runner.prepare()
        if cmd == "describe":
            return runner.describe()
        if cmd == "encode":
            return runner.encode()
        if cmd in ("build-graph", "train") and args.grid:
            return runner.grid()
        if cmd == "build-graph":
            return runner.build_graph()
        if cmd == "train":
            return runner.train()
        if cmd == "evaluate":
            return runner.evaluate(args.split, args.dump_topn)
        if cmd == "export-graph":
            return runner.export_graph(args.out, args.stage)
        if cmd == "ablate":
            return runner.ablate(args.variants, args.seeds or [cfg.train.seed])
    raise AssertionError(cmd)


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.DEBUG if args.verbose else logging.INFO,
                        format="%(levelname)s %(message)s", stream=sys.stderr)
    try:
        return run(args)
    except StageMissing as exc:
        log.error("%s", exc)
        return EXIT_STAGE_MISSING
    except ConfigError as exc:
        log.error("config error: %s", exc)
        return EXIT_CONFIG
    except (OSError, CorpusError, descriptor.DescriptorError, graph.GraphError, LockHeld) as exc:
        log.error("%s", exc)
        return EXIT_ERROR


if __name__ == "__main__":
    sys.exit(main())
