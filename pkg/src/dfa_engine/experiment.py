"""Build and run experiments from a config; write metrics, alignment, summary and checkpoints."""
from __future__ import annotations

import csv
import io
import json
import logging
import math
import os
import tempfile
import time
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from . import datasets as D
from .alignment import CSV_HEADER as ALIGN_HEADER
from .alignment import measure_alignment
from .config import ExperimentConfig, parse_config
from .feedback import FeedbackMatrix
from .network import Network, build_gcn, build_mlp, build_transformer_lm
from .parallel import UnsupportedModeError, benchmark
from .tensor import ParameterError, SeededRng
from .training import (EpochMetrics, OptimizerState, PlateauScheduler, init_optimizer, loss_and_error,
                       train_epoch)

log = logging.getLogger(__name__)

METRICS_HEADER = ["epoch", "split", "loss", "metric", "lr", "wall_ms"]
REPO_ROOT = Path(__file__).resolve().parents[2]
DATA_ENV = "DFA_ENGINE_DATA"


# --------------------------------------------------------------------------
# atomic files


def write_atomic(path, data: str | bytes) -> None:
    """Write to a temp file in the target directory, then rename over ``path``."""
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    fd, tmp = tempfile.mkstemp(prefix=f".{path.name}.", dir=path.parent)
    try:
        with os.fdopen(fd, "wb") as fh:
            fh.write(data.encode() if isinstance(data, str) else data)
            fh.flush()
            os.fsync(fh.fileno())
        os.replace(tmp, path)
    except BaseException:
        if os.path.exists(tmp):
            os.unlink(tmp)
        raise


def _csv_text(header, rows) -> str:
    buf = io.StringIO()
    w = csv.writer(buf, lineterminator="\n")
    w.writerow(header)
    w.writerows(rows)
    return buf.getvalue()


def _num(v) -> str:
    return "" if v is None else repr(float(v))


# --------------------------------------------------------------------------
# construction


def resolve_data_path(path: str) -> Path:
    """Relative data paths are tried against the cwd, $DFA_ENGINE_DATA, then the source checkout."""
    p = Path(path)
    if p.is_absolute() or p.exists():
        return p
    bases = [Path(os.environ[DATA_ENV])] if os.environ.get(DATA_ENV) else []
    bases.append(REPO_ROOT)
    for base in bases:
        if (base / p).exists():
            return base / p
    return p


def build_dataset(cfg: ExperimentConfig, rng: SeededRng):
    d, task = cfg["data"], cfg.task
    if task == "blobs":
        return D.gen_blobs(rng, d["n_per_class"], d["n_classes"], d["dim"], d["spread"], d["separation"])
    if task == "sbm":
        return D.gen_sbm_graph(rng, d["n_per_community"], d["k_communities"], d["p_in"], d["p_out"],
                               d["feature_noise"], d["feature_dim"] or None, d["train_per_class"])
    if task == "cora":
        return D.load_planetoid(resolve_data_path(d["path"]), "cora")
    ds = D.load_text_chars(resolve_data_path(d["path"]), d["chunk_length"], d["batch_chunks"],
                           d["max_chars"] or None)
    ds.max_train_chunks = d["max_train_chunks"]
    ds.max_eval_chunks = d["max_eval_chunks"]
    return ds


def build_network(cfg: ExperimentConfig, dataset, init_rng: SeededRng, feedback_rng: SeededRng) -> Network:
    a, fb, opt = cfg["architecture"], cfg["feedback"], cfg["optimizer"]
    common = dict(mode=cfg.mode, feedback_rng=feedback_rng, scale_rule=fb["scale_rule"],
                  shared_master=fb["shared_master"])
    if cfg.task == "blobs":
        dims = [dataset.features.shape[1], *a["hidden"], dataset.n_classes]
        return build_mlp(init_rng, dims, a["activation"], dropout=opt["dropout"], **common)
    if cfg.task in ("sbm", "cora"):
        dims = [dataset.features.shape[1], *a["hidden"], dataset.n_classes]
        return build_gcn(init_rng, dataset.normalized_adjacency, dims, a["activation"], dropout=opt["dropout"],
                         input_dropout=opt["input_dropout"], **common)
    granularity = cfg.granularity if cfg.granularity != "per_layer" else "macro_block"
    return build_transformer_lm(init_rng, dataset.vocab_size, a["d_model"], a["n_heads"], a["d_ff"], a["n_blocks"],
                                cfg["data"]["chunk_length"], granularity=granularity, block_norm=a["block_norm"],
                                causal=a["causal"], dropout=opt["dropout"], attn_dropout=opt["attn_dropout"],
                                **common)


@dataclass
class Experiment:
    config: ExperimentConfig
    dataset: object
    net: Network
    opt: OptimizerState
    scheduler: PlateauScheduler | None
    shuffle_rng: SeededRng
    dropout_rng: SeededRng
    epoch: int = 0

    @property
    def batch_size(self) -> int:
        if self.config.task == "char_lm":
            return self.config["data"]["batch_chunks"]
        return self.config.experiment["batch_size"]

    @property
    def higher_is_better(self) -> bool:
        return self.dataset.metric == "accuracy"

    def alignment_batches(self, full: bool = False):
        """Every sample for tabular and graph data; validation chunks for text."""
        if self.config.task == "char_lm":
            batches = list(self.dataset.eval_batches("val", self.batch_size))
            return batches if full else batches[:1]
        return [self.dataset.full_batch()]


def build_experiment(cfg: ExperimentConfig) -> Experiment:
    root = SeededRng(cfg.seed)
    dataset = build_dataset(cfg, root.child("data"))
    net = build_network(cfg, dataset, root.child("init"), root.child("feedback"))
    o = cfg["optimizer"]
    opt = init_optimizer(o["kind"], net.params, o["lr"], o["beta1"], o["beta2"], o["eps"], o["weight_decay"])
    scheduler = None
    if cfg["scheduler"]["kind"] == "plateau":
        mode = "max" if dataset.metric == "accuracy" else "min"
        scheduler = PlateauScheduler(cfg["scheduler"]["factor"], cfg["scheduler"]["patience"], mode)
    return Experiment(cfg, dataset, net, opt, scheduler, root.child("shuffle"), root.child("dropout"))


# --------------------------------------------------------------------------
# checkpoints


def save_checkpoint(path, exp: Experiment) -> None:
    """npz archive: parameters, feedback matrices, Adam moments, plus JSON metadata."""
    arrays = {f"param::{k}": v for k, v in exp.net.params.items()}
    feedback_meta = {}
    for name, fb in exp.net.feedback.items():
        arrays[f"feedback::{name}"] = np.asarray(fb.raw)
        feedback_meta[name] = {"scale": fb.scale, "shared_view": fb.shared_view}
    for k, v in exp.opt.m.items():
        arrays[f"adam_m::{k}"] = v
    for k, v in exp.opt.v.items():
        arrays[f"adam_v::{k}"] = v
    meta = {
        "format": 1,
        "config": exp.config.to_text(),
        "epoch": exp.epoch,
        "mode": exp.net.mode,
        "feedback": feedback_meta,
        "optimizer": {"lr": exp.opt.lr, "step_count": exp.opt.step_count},
        "scheduler": None if exp.scheduler is None else
        {"best_metric": exp.scheduler.best_metric, "wait": exp.scheduler.wait},
        "rng": {"shuffle": exp.shuffle_rng.get_state(), "dropout": exp.dropout_rng.get_state()},
    }
    arrays["meta"] = np.array(json.dumps(meta, sort_keys=True))
    buf = io.BytesIO()
    np.savez(buf, **arrays)
    write_atomic(path, buf.getvalue())


def load_checkpoint(path) -> Experiment:
    """Rebuild the experiment from the embedded config, then restore every saved array and state."""
    try:
        archive = np.load(path, allow_pickle=False)
    except (OSError, ValueError) as exc:
        raise D.IngestionError(f"cannot read checkpoint {path}: {exc}") from exc
    with archive:
        meta = json.loads(str(archive["meta"]))
        exp = build_experiment(parse_config(meta["config"], f"{path}:config"))
        for key in archive.files:
            kind, _, name = key.partition("::")
            if kind == "param":
                if name not in exp.net.params:
                    raise D.IngestionError(f"checkpoint {path} has unknown parameter {name!r}")
                exp.net.params[name][...] = archive[key]
            elif kind == "feedback":
                fm = meta["feedback"][name]
                view = tuple(fm["shared_view"]) if fm["shared_view"] else None
                exp.net.feedback[name] = FeedbackMatrix(np.array(archive[key]), fm["scale"], name, view)
            elif kind == "adam_m":
                exp.opt.m[name][...] = archive[key]
            elif kind == "adam_v":
                exp.opt.v[name][...] = archive[key]
    exp.epoch = meta["epoch"]
    exp.opt.lr = meta["optimizer"]["lr"]
    exp.opt.step_count = meta["optimizer"]["step_count"]
    if exp.scheduler is not None and meta["scheduler"]:
        exp.scheduler.best_metric = meta["scheduler"]["best_metric"]
        exp.scheduler.wait = meta["scheduler"]["wait"]
    exp.shuffle_rng.set_state(meta["rng"]["shuffle"])
    exp.dropout_rng.set_state(meta["rng"]["dropout"])
    exp.net.check_feedback()
    return exp


# --------------------------------------------------------------------------
# run


def _metric_rows(m: EpochMetrics, wall_ms: float):
    rows = [[m.epoch, "train", _num(m.train_loss), _num(m.train_metric), _num(m.lr), _num(wall_ms)],
            [m.epoch, "val", _num(m.val_loss), _num(m.val_metric), _num(m.lr), _num(wall_ms)]]
    if m.test_loss is not None:
        rows.append([m.epoch, "test", _num(m.test_loss), _num(m.test_metric), _num(m.lr), _num(wall_ms)])
    return rows


def run(cfg: ExperimentConfig, out_dir=None, workers: int | None = None, config_text: str | None = None) -> dict:
    """Train for the configured epochs, writing every artifact into ``out_dir``. Returns the summary."""
    e = cfg.experiment
    out = Path(out_dir or e["output_dir"])
    out.mkdir(parents=True, exist_ok=True)
    workers = workers or e["workers"]
    write_atomic(out / "config.cfg", config_text if config_text is not None else cfg.to_text())

    exp = build_experiment(cfg)
    net = exp.net
    hidden_names = net.hidden_param_names()
    hidden_hash0 = net.param_hash(hidden_names) if hidden_names else ""
    metric_rows: list = []
    align_rows: list = []
    history = []
    best = None
    t_start = time.perf_counter()

    def align(epoch):
        if net.mode != "dfa":
            return
        recs = measure_alignment(net, exp.alignment_batches(), epoch)
        align_rows.extend(r.row() for r in recs)
        write_atomic(out / "alignment.csv", _csv_text(ALIGN_HEADER, align_rows))
        return recs

    align(0)
    for epoch in range(1, e["epochs"] + 1):
        t0 = time.perf_counter()
        m = train_epoch(net, exp.dataset, exp.opt, exp.scheduler, shuffle_rng=exp.shuffle_rng,
                        dropout_rng=exp.dropout_rng, batch_size=exp.batch_size, epoch=epoch, workers=workers,
                        eval_test=e["eval_test"])
        exp.epoch = epoch
        if not all(math.isfinite(v) for v in (m.train_loss, m.val_loss)):
            raise ParameterError(f"non-finite loss at epoch {epoch}; lower the learning rate")
        wall_ms = (time.perf_counter() - t0) * 1000.0 if e["record_wall_time"] else 0.0
        metric_rows.extend(_metric_rows(m, wall_ms))
        write_atomic(out / "metrics.csv", _csv_text(METRICS_HEADER, metric_rows))
        history.append(m)
        better = best is None or (m.val_metric > best.val_metric if exp.higher_is_better
                                  else m.val_metric < best.val_metric)
        if better:
            best = m
        if epoch % e["align_every"] == 0 or epoch == e["epochs"]:
            align(epoch)
        log.info("epoch %d train %.4f val %s=%.4f lr %.3g", epoch, m.train_loss, exp.dataset.metric,
                 m.val_metric, m.lr)
    if not history:
        write_atomic(out / "metrics.csv", _csv_text(METRICS_HEADER, []))

    save_checkpoint(out / "checkpoint.bin", exp)
    final = history[-1] if history else None
    summary = {
        "name": e["name"],
        "task": cfg.task,
        "mode": cfg.mode,
        "seed": cfg.seed,
        "metric": exp.dataset.metric,
        "epochs": e["epochs"],
        "best_val_metric": None if best is None else best.val_metric,
        "best_epoch": None if best is None else best.epoch,
        "test_metric_at_best_val": None if best is None else best.test_metric,
        "final_val_metric": None if final is None else final.val_metric,
        "final_test_metric": None if final is None else final.test_metric,
        "final_lr": exp.opt.lr,
        "hidden_params_unchanged": (net.param_hash(hidden_names) == hidden_hash0) if hidden_names else True,
        "feedback_storage": net.feedback_storage,
        "regions": [r.name for r in net.regions],
        "config": cfg.to_dict(),
    }
    if align_rows:
        last_epoch = align_rows[-1][0]
        recs = [r for r in align_rows if r[0] == last_epoch]
        summary["deepest_alignment"] = {"layer_id": recs[0][1], "mean_cosine": float(recs[0][2]),
                                        "std_cosine": float(recs[0][3]), "n": recs[0][4]}
    if e["record_wall_time"]:
        summary["wall_seconds"] = time.perf_counter() - t_start
    write_atomic(out / "summary.json", json.dumps(summary, indent=2, sort_keys=True) + "\n")
    return summary


# --------------------------------------------------------------------------
# align / compare / bench


def align_checkpoint(checkpoint=None, cfg: ExperimentConfig | None = None, out_dir=None):
    """Measure alignment over the full evaluation set of a checkpoint (or a fresh network)."""
    if checkpoint is not None:
        exp = load_checkpoint(checkpoint)
    elif cfg is not None:
        exp = build_experiment(cfg)
    else:
        raise ParameterError("align needs a checkpoint or a config")
    if exp.net.mode != "dfa":
        raise UnsupportedModeError(f"alignment needs a DFA checkpoint, got mode {exp.net.mode!r}")
    records = measure_alignment(exp.net, exp.alignment_batches(full=True), exp.epoch)
    if out_dir is not None:
        write_atomic(Path(out_dir) / "alignment.csv", _csv_text(ALIGN_HEADER, [r.row() for r in records]))
    return records


def read_metrics(path) -> list[dict]:
    with open(path, newline="") as fh:
        return list(csv.DictReader(fh))


def _rank(mode: str) -> int:
    return {"shallow": 0, "dfa": 1, "bp": 2}[mode]


def compare(cfg_a: ExperimentConfig, cfg_b: ExperimentConfig, out_dir, workers: int | None = None) -> dict:
    """Run both configs and report per-epoch metrics side by side, deltas (a - b) and ordering checks."""
    if cfg_a.task != cfg_b.task:
        raise ParameterError(f"compare needs a shared task, got {cfg_a.task!r} and {cfg_b.task!r}")
    if cfg_a.seed != cfg_b.seed:
        raise ParameterError(f"compare needs a shared seed, got {cfg_a.seed} and {cfg_b.seed}")
    out = Path(out_dir)
    name_a, name_b = cfg_a.experiment["name"], cfg_b.experiment["name"]
    if name_a == name_b:
        name_a, name_b = f"{name_a}_a", f"{name_b}_b"
    sa = run(cfg_a, out / name_a, workers)
    sb = run(cfg_b, out / name_b, workers)
    ma = {(r["epoch"], r["split"]): r for r in read_metrics(out / name_a / "metrics.csv")}
    mb = {(r["epoch"], r["split"]): r for r in read_metrics(out / name_b / "metrics.csv")}
    rows = []
    for key in sorted(set(ma) & set(mb), key=lambda k: (int(k[0]), k[1])):
        a, b = float(ma[key]["metric"]), float(mb[key]["metric"])
        rows.append({"epoch": int(key[0]), "split": key[1], "metric_a": a, "metric_b": b, "delta": a - b})

    higher = sa["metric"] == "accuracy"
    fa, fb = sa["final_test_metric"], sb["final_test_metric"]
    if fa is None or fb is None:
        fa, fb = sa["final_val_metric"], sb["final_val_metric"]
    winner = "tie"
    if fa is not None and fb is not None and fa != fb:
        winner = name_a if (fa > fb) == higher else name_b
    violations = []
    ra, rb = _rank(cfg_a.mode), _rank(cfg_b.mode)
    if ra != rb and fa is not None and fb is not None:
        (hi_name, hi_val, hi_mode), (lo_name, lo_val, lo_mode) = sorted(
            [(name_a, fa, cfg_a.mode), (name_b, fb, cfg_b.mode)], key=lambda t: -_rank(t[2]))
        beats = hi_val > lo_val if higher else hi_val < lo_val
        ties_ok = lo_mode != "shallow" and hi_val == lo_val
        if not (beats or ties_ok):
            violations.append(f"{hi_mode} ({hi_name}) does not beat {lo_mode} ({lo_name}): {hi_val} vs {lo_val}")
    report = {
        "a": name_a, "b": name_b, "task": cfg_a.task, "seed": cfg_a.seed, "metric": sa["metric"],
        "final_metric_a": fa, "final_metric_b": fb,
        "final_delta": None if fa is None or fb is None else fa - fb,
        "best_val_delta": None if sa["best_val_metric"] is None else sa["best_val_metric"] - sb["best_val_metric"],
        "winner": winner, "ordering_violations": violations, "epochs": rows,
    }
    write_atomic(out / "compare.json", json.dumps(report, indent=2, sort_keys=True) + "\n")
    write_atomic(out / "compare.csv", _csv_text(["epoch", "split", "metric_a", "metric_b", "delta"],
                                                [[r["epoch"], r["split"], _num(r["metric_a"]), _num(r["metric_b"]),
                                                  _num(r["delta"])] for r in rows]))
    return report


def format_compare(report: dict) -> str:
    lines = [f"{'epoch':>5} {'split':<5} {report['a']:>14} {report['b']:>14} {'delta':>10}"]
    for r in report["epochs"]:
        lines.append(f"{r['epoch']:>5} {r['split']:<5} {r['metric_a']:>14.4f} {r['metric_b']:>14.4f} "
                     f"{r['delta']:>+10.4f}")
    lines.append(f"final {report['metric']}: {report['final_metric_a']} vs {report['final_metric_b']}"
                 f" (delta {report['final_delta']}); winner: {report['winner']}")
    for v in report["ordering_violations"]:
        lines.append(f"ORDERING VIOLATION: {v}")
    return "\n".join(lines)


def bench(cfg: ExperimentConfig, workers_list=(1, 2, 4, 8), repeats: int = 3, out_dir=None) -> dict:
    """Time sequential versus concurrent DFA updates on one training batch."""
    exp = build_experiment(cfg)
    if exp.net.mode == "bp":
        raise UnsupportedModeError("bench times DFA updates; the config uses mode 'bp'")
    batch = next(iter(exp.dataset.train_batches(exp.shuffle_rng, exp.batch_size)))
    trace = exp.net.forward_trace(batch.x)
    _, delta = loss_and_error(exp.net.loss, trace.predictions, batch.y, batch.mask)
    report = benchmark(exp.net, trace, delta, workers_list, repeats)
    report["cpu_count"] = os.cpu_count()
    if out_dir is not None:
        write_atomic(Path(out_dir) / "bench.json", json.dumps(report, indent=2, sort_keys=True) + "\n")
    return report
