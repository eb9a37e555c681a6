"""Experiment harness: run configs, dataset/checkpoint plumbing, metrics, PGM export, result matrix."""
from __future__ import annotations

import csv
import dataclasses
import hashlib
import io
import json
import logging
import os
import time
from concurrent.futures import ProcessPoolExecutor
from dataclasses import dataclass, field
from pathlib import Path
import multiprocessing as mp

import numpy as np

from inflrobust import datagen, influence, kernels, nn, training
from inflrobust.checkpoint import load_checkpoint, save_checkpoint

log = logging.getLogger(__name__)

SCHEMA = "inflrobust.run/1"
METRICS_SCHEMA = "inflrobust.metrics/1"
METHODS = ("naive", "at", "isr", "isp")
NOISE_KINDS = ("gaussian", "rician")
RUNS_HEADER = ["config_hash", "method", "noise", "rho_test", "seed", "test_acc", "mean", "std"]


class ConfigError(ValueError):
    pass


class OutputExists(FileExistsError):
    pass


# ------------------------------------------------------------------ config

@dataclass
class RunConfig:
    method: str = "naive"
    seed: int = 0
    phantom: datagen.PhantomSpec = field(default_factory=datagen.PhantomSpec)
    noise: datagen.NoiseSpec = field(default_factory=datagen.NoiseSpec)
    train: training.TrainConfig = field(default_factory=training.TrainConfig)
    lissa: influence.LissaConfig = field(default_factory=influence.LissaConfig)
    arch: list | None = None
    dataset: str | None = None

    def __post_init__(self):
        if self.method not in METHODS:
            raise ConfigError(f"method must be one of {', '.join(METHODS)}; got {self.method!r}")
        # one seed drives training and LiSSA sampling
        self.train.seed = self.seed
        self.lissa.seed = self.seed
        if self.method in ("isr", "isp"):
            try:
                self.train.check_two_phase()
            except ValueError as exc:
                raise ConfigError(str(exc)) from None
        if self.arch is not None:
            try:
                nn.Network(self.arch, (1, self.phantom.size, self.phantom.size), seed=None)
            except (nn.ShapeError, ValueError, KeyError, TypeError) as exc:
                raise ConfigError(f"bad arch: {exc}") from None

    @property
    def architecture(self) -> list:
        return self.arch if self.arch is not None else nn.DEFAULT_ARCH

    def with_seed(self, seed: int) -> RunConfig:
        return config_from_dict({**config_to_dict(self), "seed": seed})


_SECTIONS = {"phantom": datagen.PhantomSpec, "noise": datagen.NoiseSpec,
             "train": training.TrainConfig, "lissa": influence.LissaConfig}
# seeds of these sections are owned by the top-level seed
_OWNED = {"train": {"seed"}, "lissa": {"seed"}}


def _section(name: str, cls, raw) -> object:
    if not isinstance(raw, dict):
        raise ConfigError(f"{name}: expected an object, got {type(raw).__name__}")
    allowed = {f.name for f in dataclasses.fields(cls)} - _OWNED.get(name, set())
    unknown = sorted(set(raw) - allowed)
    if unknown:
        raise ConfigError(f"{name}: unknown key(s) {', '.join(unknown)}; allowed: {', '.join(sorted(allowed))}")
    try:
        return cls(**raw)
    except (TypeError, ValueError) as exc:
        raise ConfigError(f"{name}: {exc}") from None


def config_from_dict(raw: dict) -> RunConfig:
    if not isinstance(raw, dict):
        raise ConfigError("config must be a JSON object")
    schema = raw.get("schema", SCHEMA)
    if schema != SCHEMA:
        raise ConfigError(f"unsupported config schema {schema!r}; expected {SCHEMA!r}")
    top = {"schema", "method", "seed", "arch", "dataset", *_SECTIONS}
    unknown = sorted(set(raw) - top)
    if unknown:
        raise ConfigError(f"unknown key(s) {', '.join(unknown)}; allowed: {', '.join(sorted(top))}")
    kw = {k: _section(k, cls, raw[k]) for k, cls in _SECTIONS.items() if k in raw}
    seed = raw.get("seed", 0)
    if not isinstance(seed, int) or isinstance(seed, bool) or seed < 0:
        raise ConfigError(f"seed must be a non-negative integer, got {seed!r}")
    return RunConfig(method=raw.get("method", "naive"), seed=seed, arch=raw.get("arch"),
                     dataset=raw.get("dataset"), **kw)


def load_config(path) -> RunConfig:
    path = Path(path)
    try:
        raw = json.loads(path.read_text())
    except json.JSONDecodeError as exc:
        raise ConfigError(f"{path}: invalid JSON: {exc}") from None
    cfg = config_from_dict(raw)
    if cfg.dataset is not None and not Path(cfg.dataset).is_absolute():
        cfg.dataset = str((path.parent / cfg.dataset).resolve())
    return cfg


def config_to_dict(cfg: RunConfig) -> dict:
    out = {"schema": SCHEMA, "method": cfg.method, "seed": cfg.seed}
    for k in _SECTIONS:
        d = dataclasses.asdict(getattr(cfg, k))
        for owned in _OWNED.get(k, ()):
            d.pop(owned)
        out[k] = datagen._jsonable(d)
    if cfg.arch is not None:
        out["arch"] = cfg.arch
    if cfg.dataset is not None:
        out["dataset"] = cfg.dataset
    return out


def digest(*parts) -> str:
    h = hashlib.sha256()
    for p in parts:
        h.update(p if isinstance(p, bytes) else json.dumps(p, sort_keys=True).encode())
        h.update(b"\0")
    return h.hexdigest()[:16]


def config_hash(cfg: RunConfig, dataset_digest: str = "") -> str:
    # the kernel backend changes float rounding, so it is part of a run's identity
    return digest(config_to_dict(cfg), dataset_digest, kernels.BACKEND)


# --------------------------------------------------------------- atomic IO

def atomic_write(path, data: bytes | str) -> None:
    path = Path(path)
    tmp = path.with_name(path.name + ".tmp")
    tmp.write_bytes(data.encode() if isinstance(data, str) else data)
    tmp.replace(path)


def dump_json(obj) -> str:
    return json.dumps(obj, sort_keys=True, indent=1) + "\n"


# --------------------------------------------------------------- generate

def build_dataset(cfg: RunConfig) -> datagen.SplitDataset:
    ds = datagen.apply_noise_protocol(datagen.generate_phantoms(cfg.phantom), cfg.noise)
    ds.provenance["config_hash"] = digest(config_to_dict(cfg)["phantom"], config_to_dict(cfg)["noise"])
    return ds


def cmd_generate(cfg: RunConfig, out) -> Path:
    out = Path(out)
    ds = build_dataset(cfg)
    datagen.save_dataset(ds, out)
    log.info("wrote %s (%d/%d/%d)", out, len(ds.train), len(ds.val), len(ds.test))
    return out


def file_digest(path) -> str:
    return hashlib.sha256(Path(path).read_bytes()).hexdigest()[:16]


# ------------------------------------------------------------------ eval

def _acc(net, split: datagen.Split, mask=None) -> float | None:
    if mask is not None:
        if not mask.any():
            return None
        return nn.accuracy(net, split.x[mask], split.y[mask])
    return nn.accuracy(net, split.x, split.y) if len(split) else None


def evaluate(net: nn.Network, ds: datagen.SplitDataset) -> dict:
    t = ds.test
    return {
        "train": _acc(net, ds.train),
        "val": _acc(net, ds.val),
        "test": _acc(net, t),
        "test_clean": _acc(net, t, ~t.noisy),
        "test_noisy": _acc(net, t, t.noisy),
        "n_test_clean": int((~t.noisy).sum()),
        "n_test_noisy": int(t.noisy.sum()),
    }


def _r2(v):
    return None if v is None else round(v, 2)


# ------------------------------------------------------------------ train

def _dataset_meta(ds: datagen.SplitDataset) -> tuple[str, float]:
    noise = ds.provenance.get("noise", {})
    return noise.get("kind", "unknown"), float(noise.get("rho_test", ds.test.noisy.mean() if len(ds.test) else 0))


def run_training(cfg: RunConfig, ds: datagen.SplitDataset, state: training.TrainState | None = None,
                 stop_after: int | None = None) -> training.RunResult:
    tc = cfg.train
    if stop_after is not None:
        if not 0 <= stop_after <= tc.epochs:
            raise ConfigError(f"stop_after must be in [0, {tc.epochs}], got {stop_after}")
        if cfg.method in ("isr", "isp") and stop_after <= tc.pretrain_epochs:
            st = training.pretrain(ds.train, dataclasses.replace(tc, pretrain_epochs=stop_after),
                                   cfg.architecture, ds.val, state)
            return training.RunResult(cfg.method, st)
        tc = dataclasses.replace(tc, epochs=stop_after)
    return training.train_method(cfg.method, ds.train, ds.val, tc, cfg.architecture, cfg.lissa, state)


def metrics_record(cfg: RunConfig, result: training.RunResult, ds: datagen.SplitDataset,
                   chash: str, ds_digest: str) -> dict:
    state = result.state
    kind, rho = _dataset_meta(ds)
    final = {k: (_r2(v) if k.startswith(("train", "val", "test")) else v) for k, v in evaluate(state.net, ds).items()}
    best = {"epoch": state.best_epoch}
    best.update({k: (_r2(v) if k.startswith(("train", "val", "test")) else v)
                 for k, v in evaluate(state.best_net(), ds).items() if not k.startswith("n_")})
    info = {k: (float(v) if isinstance(v, (float, np.floating)) else v) for k, v in result.info.items()}
    return {
        "schema": METRICS_SCHEMA,
        "method": cfg.method,
        "seed": cfg.seed,
        "config_hash": chash,
        "dataset": ds_digest,
        "backend": kernels.BACKEND,
        "noise": {"kind": kind, "rho_test": rho},
        "epochs_completed": state.epoch,
        "epochs_planned": cfg.train.epochs,
        "history": state.history,
        "final": final,
        "best_val_epoch": best,
        "info": info,
        "config": config_to_dict(cfg),
    }


def _append_run_row(path: Path, row: list) -> None:
    rows = []
    if path.exists():
        rows = [r for r in csv.reader(io.StringIO(path.read_text())) if r]
        if rows and rows[0] == RUNS_HEADER:
            rows = rows[1:]
        rows = [r for r in rows if r[0] != row[0]]  # a forced rerun replaces its own row
    buf = io.StringIO()
    w = csv.writer(buf, lineterminator="\n")
    w.writerow(RUNS_HEADER)
    w.writerows(rows + [row])
    atomic_write(path, buf.getvalue())


def cmd_train(cfg: RunConfig, data, out, force: bool = False, resume=None,
              stop_after: int | None = None) -> dict:
    data = Path(data)
    ds = datagen.load_dataset(data)
    ds_digest = file_digest(data)
    out = Path(out)
    out.mkdir(parents=True, exist_ok=True)
    ckpt, metrics_path = out / "model.nncp", out / "metrics.json"
    chash = config_hash(cfg, ds_digest)
    if (ckpt.exists() or metrics_path.exists()) and not force:
        old = None
        if metrics_path.exists():
            try:
                old = json.loads(metrics_path.read_text()).get("config_hash")
            except ValueError:
                pass
        what = "the same config" if old == chash else f"config {old}"
        raise OutputExists(f"{out} already holds a run of {what}; pass --force to overwrite")

    state = None
    if resume is not None:
        state, meta = load_checkpoint(resume)
        if meta.get("config_hash") != chash:
            raise ConfigError(f"checkpoint {resume} was written by config {meta.get('config_hash')}, "
                              f"not {chash}")
    t0 = time.perf_counter()
    result = run_training(cfg, ds, state, stop_after)
    wall = time.perf_counter() - t0
    rec = metrics_record(cfg, result, ds, chash, ds_digest)
    save_checkpoint(result.state, ckpt, {"config_hash": chash, "config": config_to_dict(cfg),
                                         "method": cfg.method, "dataset": ds_digest})
    atomic_write(metrics_path, dump_json(rec))
    kind, rho = _dataset_meta(ds)
    _append_run_row(out / "runs.csv", [chash, cfg.method, kind, f"{rho:g}", cfg.seed,
                                       f"{rec['final']['test']:.2f}", "", ""])
    # wall-clock is the one non-reproducible output, so it lives apart
    atomic_write(out / "timing.json", dump_json({"config_hash": chash, "seed": cfg.seed,
                                                  "wall_seconds": round(wall, 3)}))
    log.info("%s seed %d: test %.2f%% in %.1fs", cfg.method, cfg.seed, rec["final"]["test"], wall)
    return rec


# -------------------------------------------------------------- influence

def cmd_influence(checkpoint, data, out, maps: bool = False) -> dict:
    state, meta = load_checkpoint(checkpoint)
    ds = datagen.load_dataset(data)
    cfg = config_from_dict(meta["config"]) if "config" in meta else None
    lissa = cfg.lissa if cfg is not None else influence.LissaConfig()
    out = Path(out)
    out.mkdir(parents=True, exist_ok=True)
    net = state.net
    rep = influence.influence_report(net, ds.train.x, ds.train.y, ds.val.x, ds.val.y, lissa, with_maps=maps)
    doc = {
        "schema": "inflrobust.influence/1",
        "seed": lissa.seed,
        "config_hash": meta.get("config_hash"),
        "epoch": net.epoch,
        "params_snapshot": rep.params_snapshot,
        "method": rep.method,
        "residual": float(rep.residual),
        "lissa": {**dataclasses.asdict(lissa)},
        "n_train": len(ds.train),
        "scores": [float(s) for s in rep.scores],
    }
    if maps:
        mdir = out / "maps"
        mdir.mkdir(exist_ok=True)
        m = rep.maps.reshape(len(ds.train), *ds.shape)
        buf = io.BytesIO()
        np.save(buf, m)
        atomic_write(out / "maps.npy", buf.getvalue())
        for i in range(len(m)):
            export_pgm(ds.train.x[i], mdir / f"{i:04d}_image.pgm", "clip")
            export_pgm(m[i], mdir / f"{i:04d}_map.pgm", "rescale")
        doc["maps_file"] = "maps.npy"
    atomic_write(out / "influence.json", dump_json(doc))
    return doc


# -------------------------------------------------------------------- eval

def cmd_eval(checkpoint, data, out=None) -> dict:
    state, meta = load_checkpoint(checkpoint)
    ds = datagen.load_dataset(data)
    res = {k: (_r2(v) if k.startswith(("train", "val", "test")) else v)
           for k, v in evaluate(state.net, ds).items()}
    res.update({"schema": "inflrobust.eval/1", "config_hash": meta.get("config_hash"),
                "seed": state.net.seed, "epoch": state.net.epoch, "dataset": file_digest(data)})
    if out is not None:
        atomic_write(out, dump_json(res))
    return res


def format_eval(res: dict) -> str:
    rows = [("train", res["train"]), ("val", res["val"]), ("test (clean)", res["test_clean"]),
            ("test (noisy)", res["test_noisy"]), ("test (combined)", res["test"])]
    return "\n".join(f"{name:16s} {'-' if v is None else f'{v:6.2f}'}" for name, v in rows)


# --------------------------------------------------------------------- PGM

def export_pgm(arr, path, mode: str = "clip") -> None:
    """Binary P5 greyscale, maxval 255. ``rescale`` maps min..max onto 0..255."""
    a = np.asarray(arr, dtype=np.float64)
    if a.ndim == 3 and a.shape[0] == 1:
        a = a[0]
    if a.ndim != 2:
        raise ValueError(f"export_pgm needs a 2-D array, got shape {a.shape}")
    if not np.all(np.isfinite(a)):
        raise ValueError("export_pgm: array has non-finite values")
    if mode == "clip":
        px = np.rint(255.0 * np.clip(a, 0.0, 1.0))
    elif mode == "rescale":
        lo, hi = a.min(), a.max()
        px = np.full(a.shape, 128.0) if hi == lo else np.rint(255.0 * (a - lo) / (hi - lo))
    else:
        raise ValueError(f"mode must be 'clip' or 'rescale', got {mode!r}")
    h, w = a.shape
    atomic_write(path, f"P5\n{w} {h}\n255\n".encode() + px.astype(np.uint8).tobytes())


def read_pgm(path) -> np.ndarray:
    buf = Path(path).read_bytes()
    parts = buf.split(b"\n", 3)
    if parts[0] != b"P5" or parts[2] != b"255":
        raise ValueError(f"{path}: not a P5 PGM with maxval 255")
    w, h = map(int, parts[1].split())
    return np.frombuffer(parts[3], np.uint8, w * h).reshape(h, w)


# ------------------------------------------------------------------ matrix

def _family_key(cfg: RunConfig) -> str:
    """Configs that share a training set, architecture and pretraining schedule."""
    d = config_to_dict(cfg)
    noise = dict(d["noise"])
    noise.pop("rho_test")
    t = d["train"]
    return digest(d["phantom"], noise, d.get("dataset"), d.get("arch"),
                  {k: t[k] for k in ("lr", "batch_size", "augment", "pretrain_epochs")})


def _training_key(cfg: RunConfig) -> str:
    d = config_to_dict(cfg)
    d["noise"] = {k: v for k, v in d["noise"].items() if k != "rho_test"}
    return digest(d)


def _matrix_unit(job: tuple) -> list:
    """Train every distinct run of one family and seed; evaluate each on its own test set."""
    cfgs, seed = job
    cfgs = [(name, config_from_dict(d).with_seed(seed)) for name, d in cfgs]
    first = cfgs[0][1]
    if first.dataset is not None:
        base = datagen.load_dataset(first.dataset)
        tests = {c.noise.rho_test: base for _, c in cfgs}
    else:
        clean = datagen.generate_phantoms(first.phantom)
        tests = {c.noise.rho_test: datagen.apply_noise_protocol(clean, c.noise) for _, c in cfgs}
        base = next(iter(tests.values()))
    pre = None
    trained = {}
    out = []
    for name, cfg in cfgs:
        key = _training_key(cfg)
        if key not in trained:
            state = None
            if cfg.method in ("naive", "isr", "isp"):
                if pre is None:
                    pre = training.pretrain(base.train, cfg.train, cfg.architecture, base.val)
                state = pre
            t0 = time.perf_counter()
            res = training.train_method(cfg.method, base.train, base.val, cfg.train, cfg.architecture,
                                        cfg.lissa, state)
            trained[key] = (res, time.perf_counter() - t0)
        res, wall = trained[key]
        ds = tests[cfg.noise.rho_test]
        acc = evaluate(res.net, ds)
        out.append({"config": name, "method": cfg.method, "noise": cfg.noise.kind,
                    "rho_test": cfg.noise.rho_test, "seed": seed, "test_acc": acc["test"],
                    "test_clean": acc["test_clean"], "test_noisy": acc["test_noisy"],
                    "lissa_residual": res.info.get("lissa_residual"), "wall": wall})
    return out


def matrix_threads(n_jobs: int) -> int:
    env = os.environ.get("RT_THREADS")
    cap = os.cpu_count() or 1
    if env:
        try:
            cap = int(env)
        except ValueError:
            raise ConfigError(f"RT_THREADS must be a positive integer, got {env!r}") from None
        if cap < 1:
            raise ConfigError(f"RT_THREADS must be a positive integer, got {env!r}")
    return max(1, min(cap, n_jobs))


def fmt_cell(values) -> str:
    v = np.asarray(values, dtype=np.float64)
    sd = float(np.std(v, ddof=1)) if len(v) > 1 else 0.0
    return f"{float(np.mean(v)):.2f} ± {sd:.2f}"


def _column(kind: str, rho: float) -> str:
    return f"{kind} rho={rho:g}"


def run_matrix(configs: list[tuple[str, RunConfig]], seeds: int, out, threads: int | None = None) -> dict:
    """Run every config over ``seeds`` seeds and write the aggregated table."""
    if seeds < 1:
        raise ConfigError("seeds must be >= 1")
    if not configs:
        raise ConfigError("no run configs given")
    families: dict[str, list] = {}
    for name, cfg in configs:
        families.setdefault(_family_key(cfg), []).append((name, config_to_dict(cfg)))
    jobs = [(fam, fam[0][1]["seed"] + i) for fam in families.values() for i in range(seeds)]
    n_threads = threads or matrix_threads(len(jobs))
    t0 = time.perf_counter()
    log.info("matrix: %d configs, %d seeds, %d jobs on %d worker(s)", len(configs), seeds, len(jobs), n_threads)
    if n_threads == 1:
        results = [_matrix_unit(j) for j in jobs]
    else:
        # spawned workers inherit single-threaded BLAS settings so they do not oversubscribe
        ctx = mp.get_context("spawn")
        saved = {k: os.environ.get(k) for k in ("OMP_NUM_THREADS", "OPENBLAS_NUM_THREADS", "MKL_NUM_THREADS")}
        os.environ.update({k: "1" for k in saved})
        try:
            with ProcessPoolExecutor(n_threads, mp_context=ctx) as pool:
                results = list(pool.map(_matrix_unit, jobs))
        finally:
            for k, v in saved.items():
                if v is None:
                    os.environ.pop(k, None)
                else:
                    os.environ[k] = v
    wall = time.perf_counter() - t0
    runs = sorted((r for batch in results for r in batch),
                  key=lambda r: (METHODS.index(r["method"]), NOISE_KINDS.index(r["noise"]), r["rho_test"],
                                 r["config"], r["seed"]))

    cols = sorted({(r["noise"], r["rho_test"]) for r in runs}, key=lambda c: (NOISE_KINDS.index(c[0]), c[1]))
    methods = [m for m in METHODS if any(r["method"] == m for r in runs)]
    cells = {}
    for r in runs:
        cells.setdefault((r["method"], r["noise"], r["rho_test"]), []).append(r["test_acc"])
    buf = io.StringIO()
    w = csv.writer(buf, lineterminator="\n")
    w.writerow(["method"] + [_column(*c) for c in cols])
    for m in methods:
        w.writerow([m] + [fmt_cell(cells[(m, *c)]) if (m, *c) in cells else "" for c in cols])
    out = Path(out)
    atomic_write(out, buf.getvalue())

    buf = io.StringIO()
    w = csv.writer(buf, lineterminator="\n")
    w.writerow(["config", "method", "noise", "rho_test", "seed", "test_acc", "test_clean", "test_noisy",
                "lissa_residual"])
    for r in runs:
        w.writerow([r["config"], r["method"], r["noise"], f"{r['rho_test']:g}", r["seed"], f"{r['test_acc']:.2f}",
                    "" if r["test_clean"] is None else f"{r['test_clean']:.2f}",
                    "" if r["test_noisy"] is None else f"{r['test_noisy']:.2f}",
                    "" if r["lissa_residual"] is None else f"{r['lissa_residual']:.4f}"])
    runs_path = out.with_name(out.stem + ".runs.csv")
    atomic_write(runs_path, buf.getvalue())
    atomic_write(out.with_name(out.stem + ".timing.json"),
                 dump_json({"wall_seconds": round(wall, 1), "workers": n_threads, "jobs": len(jobs),
                            "train_seconds": round(sum(r["wall"] for r in runs), 1)}))
    means = {(m, *c): float(np.mean(v)) for (m, *c), v in cells.items()}
    return {"runs": runs, "cells": cells, "means": means, "wall": wall, "columns": cols, "methods": methods}


def load_matrix_configs(directory) -> list[tuple[str, RunConfig]]:
    d = Path(directory)
    if not d.is_dir():
        raise ConfigError(f"{d} is not a directory")
    paths = sorted(d.glob("*.json"))
    if not paths:
        raise ConfigError(f"no *.json run configs in {d}")
    return [(p.stem, load_config(p)) for p in paths]
