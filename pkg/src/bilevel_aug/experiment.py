"""Batch experiment runner: job expansion, resumable execution, metrics
persistence, aggregation and qualitative snapshots.

Every job is an (arm, cell/scenario, fold) training run with its own seed
stream, writing only inside its job directory; the parent merges per-job
CSVs in a deterministic order. All randomness derives from named seeds in
the config, so a config fully determines every output except wall_time.
"""

from __future__ import annotations

import json
import logging
import time
import zlib
from concurrent.futures import ProcessPoolExecutor
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from . import io as bio
from .augmenter import AugmenterNet, NoiseSource
from .baselines import (
    PredefinedDAConfig,
    RandAugmentConfig,
    GridCellResult,
    predefined_batch,
    randaugment_batch,
    select_best_cell,
)
from .bilevel import BilevelConfig, train
from .classifier import ClassifierNet
from .config import parse_config, seeds_for_folds
from .datasynth import SynthSpec, fold_arrays, generate, load_folder, make_folds
from .problems import (
    AugmentedClassificationProblem,
    BaselineClassificationProblem,
    DEVIATION_CHANNELS,
)
from .transforms import apply_transform

log = logging.getLogger(__name__)

METRICS_COLUMNS = (
    "run_id", "arm", "scenario", "cell", "fold", "seed", "epoch",
    "train_loss", "val_loss", "val_acc", "test_acc",
    "dev_contrast", "dev_brightness", "dev_saturation", "dev_hue", "dev_affine",
    "wall_time", "config_hash",
)

GRID_COLUMNS = ("arm", "cell", "fold", "val_acc", "test_acc", "seed")

SNAPSHOT_LABELS = (0, 25, 50, 75, 100)


@dataclass(frozen=True)
class JobSpec:
    arm: str
    scenario: str  # learned scenario, or "-"
    cell: str  # grid cell descriptor, or "-"
    fold: int
    seed: int

    @property
    def run_id(self):
        tag = self.scenario if self.arm == "learned" else self.cell
        tag = tag.replace("=", "").replace(";", "_").replace("+", "-")
        return f"{self.arm}_{tag}_f{self.fold}"


def expand_jobs(cfg):
    exp = cfg.values["experiment"]
    seeds = seeds_for_folds(cfg)
    jobs = []
    for arm in exp["arms"]:
        if arm == "learned":
            for scenario in exp["scenarios"]:
                for fold in range(exp["folds"]):
                    jobs.append(JobSpec(arm, scenario, "-", fold, seeds[fold]))
        elif arm == "none":
            for fold in range(exp["folds"]):
                jobs.append(JobSpec(arm, "-", "-", fold, seeds[fold]))
        elif arm == "predefined":
            cells = cfg.predefined_cells
            if not cells:
                raise ValueError("predefined arm requested but [predefined] cells is empty")
            for cell in cells:
                for fold in range(exp["folds"]):
                    jobs.append(JobSpec(arm, "-", cell.describe(), fold, seeds[fold]))
        elif arm == "randaugment":
            ra = cfg.values["randaugment"]
            for m in ra["m_values"]:
                for n in ra["n_values"]:
                    cell = RandAugmentConfig(magnitude=m, num_transforms=n)
                    for fold in range(exp["folds"]):
                        jobs.append(JobSpec(arm, "-", cell.describe(), fold, seeds[fold]))
    return jobs


def _cell_from_string(arm, text):
    if arm == "randaugment":
        kv = dict(item.split("=") for item in text.split(";"))
        return RandAugmentConfig(magnitude=int(kv["M"]), num_transforms=int(kv["N"]))
    if arm == "predefined":
        kv = dict(item.split("=") for item in text.split(";"))
        return PredefinedDAConfig(
            brightness=float(kv["b"]), contrast=float(kv["c"]),
            saturation=float(kv["s"]), hue=float(kv["h"]),
            rotation_deg=float(kv["rot"]), shear=float(kv["shear"]),
            translate=float(kv["trans"]),
        )
    raise ValueError(f"arm {arm} has no cells")


def build_dataset(cfg):
    ds_cfg = cfg.values["dataset"]
    if ds_cfg["source"] == "synthetic":
        spec = SynthSpec(
            num_classes=ds_cfg["num_classes"],
            samples_per_class=ds_cfg["samples_per_class"],
            image_size=ds_cfg["image_size"],
            test_fraction=ds_cfg["fractions"][2],
            shift=ds_cfg["shift"],
            noise_std=ds_cfg["noise_std"],
            seed=ds_cfg["seed"],
        )
        return generate(spec)
    path = ds_cfg["source"][len("folder:"):]
    return load_folder(path, image_size=ds_cfg["image_size"])


def _job_seed_seq(job):
    return np.random.SeedSequence(
        [job.seed, zlib.crc32(job.arm.encode()),
         zlib.crc32(job.scenario.encode()), zlib.crc32(job.cell.encode()), job.fold]
    )


def _bilevel_config(cfg, arm):
    tr = cfg.values["training"]
    bl = cfg.values["bilevel"]
    return BilevelConfig(
        unroll_steps=bl["k"],
        update_period=bl["j"],
        lr_inner=tr["lr_inner"],
        lr_outer=bl["lr_outer"] if arm == "learned" else 0.0,
        hvp_mode=bl["hvp_mode"],
        eps_hvp=bl["eps_hvp"],
        epochs=tr["epochs"],
        batch_size=tr["batch_size"],
        momentum=tr["momentum"],
        outer_optimizer=bl["outer_optimizer"],
    )


def _format_row(values):
    out = []
    for col, v in zip(METRICS_COLUMNS, values):
        if isinstance(v, float):
            out.append(f"{v:.6f}")
        else:
            out.append(str(v))
    return ",".join(out) + "\n"


def snapshot_epochs(total_epochs):
    return {label: int(round(label / 100 * total_epochs)) for label in SNAPSHOT_LABELS}


class _JobRunner:
    """Executes one job with per-epoch checkpointing and resume."""

    def __init__(self, cfg, job, dataset, plan, out_dir):
        self.cfg = cfg
        self.job = job
        self.out_dir = Path(out_dir)
        self.job_dir = self.out_dir / "jobs" / job.run_id
        self.job_dir.mkdir(parents=True, exist_ok=True)
        self.data = fold_arrays(dataset, plan.folds[job.fold])
        seq = _job_seed_seq(job)
        kids = seq.spawn(5)
        self.net_seed = int(kids[0].generate_state(1)[0])
        self.aug_seed = int(kids[1].generate_state(1)[0])
        self.noise_seed = int(kids[2].generate_state(1)[0])
        self.sampler_seed = int(kids[3].generate_state(1)[0])
        self.train_seed = int(kids[4].generate_state(1)[0])
        self.sampler_rng = None
        self.problem = None
        self.augmenter = None
        self.classifier = None

    # -- problem assembly ----------------------------------------------------

    def _build_problem(self):
        ds_cfg = self.cfg.values["dataset"]
        num_classes = int(np.max(self.data["train"][1])) + 1
        self.classifier = ClassifierNet(
            num_classes, image_size=ds_cfg["image_size"], seed=self.net_seed
        )
        job = self.job
        if job.arm == "learned":
            self.augmenter = AugmenterNet(job.scenario, seed=self.aug_seed)
            noise = NoiseSource(self.noise_seed)
            self.problem = AugmentedClassificationProblem(
                self.augmenter, self.classifier, noise
            )
        elif job.arm == "none":
            self.problem = BaselineClassificationProblem(self.classifier, None)
        else:
            cell = _cell_from_string(job.arm, job.cell)
            self.sampler_rng = np.random.default_rng(
                np.random.SeedSequence([self.sampler_seed, 0xA06])
            )
            if job.arm == "predefined":
                sampler = lambda im: predefined_batch(cell, im, self.sampler_rng)
            else:
                sampler = lambda im: randaugment_batch(cell, im, self.sampler_rng)
            self.problem = BaselineClassificationProblem(self.classifier, sampler)

    # -- state persistence -----------------------------------------------------

    def _save_state(self, engine, epoch_done, rows_written, train_states):
        self.classifier.params = [p for p in engine.omega_leaves]
        self.classifier.save(self.job_dir / "classifier_latest.bcls")
        if self.augmenter is not None:
            self.augmenter.save(self.job_dir / "augmenter_latest.baug")
        opt = engine.optimizer_state()
        np.savez(
            self.job_dir / "opt_state.npz",
            *opt["momentum"], *opt["adam_m"], *opt["adam_v"],
            counts=np.array([opt["adam_t"], opt["step_count"], opt["skipped_updates"],
                             len(opt["momentum"]), len(opt["adam_m"])]),
        )
        state = {
            "config_hash": self.cfg.config_hash,
            "next_epoch": epoch_done + 1,
            "rows_written": rows_written,
            "data_rng": train_states["data_rng"],
            "val_sampler": train_states["val_sampler"],
            "noise_rng": self.problem.noise_source.state()
            if self.job.arm == "learned" else None,
            "sampler_rng": self.sampler_rng.bit_generator.state
            if self.sampler_rng is not None else None,
        }
        (self.job_dir / "state.json").write_text(json.dumps(state, default=int))

    def _load_state(self):
        """Restore nets and rngs; returns (state dict, optimizer state)."""
        state = json.loads((self.job_dir / "state.json").read_text())
        if state["config_hash"] != self.cfg.config_hash:
            raise ValueError(
                f"{self.job.run_id}: existing state was produced by a different config"
            )
        named = bio.load_classifier(self.job_dir / "classifier_latest.bcls")
        self.classifier.load_state_arrays(named)
        if self.augmenter is not None:
            _, anamed = bio.load_augmenter(self.job_dir / "augmenter_latest.baug")
            self.augmenter.load_state_arrays(anamed)
        with np.load(self.job_dir / "opt_state.npz") as z:
            counts = z["counts"]
            n_mom, n_adam = int(counts[3]), int(counts[4])
            arrays = [z[f"arr_{i}"] for i in range(n_mom + 2 * n_adam)]
            opt_state = {
                "momentum": arrays[:n_mom],
                "adam_m": arrays[n_mom : n_mom + n_adam],
                "adam_v": arrays[n_mom + n_adam :],
                "adam_t": int(counts[0]),
                "step_count": int(counts[1]),
                "skipped_updates": int(counts[2]),
            }
        if state.get("noise_rng") is not None:
            self.problem.noise_source.set_state(state["noise_rng"])
        if state.get("sampler_rng") is not None:
            self.sampler_rng.bit_generator.state = state["sampler_rng"]
        return state, opt_state

    def _truncate_rows(self, rows_written):
        path = self.job_dir / "metrics.csv"
        if not path.exists():
            return
        lines = path.read_text().splitlines(keepends=True)
        path.write_text("".join(lines[:rows_written]))

    def _save_snapshot_checkpoints(self, epochs_done):
        """Keep the augmenter at the 0/25/50/75/100% training marks."""
        if self.augmenter is None:
            return
        for label, ep in snapshot_epochs(self.cfg.values["training"]["epochs"]).items():
            if ep == epochs_done:
                self.augmenter.save(self.job_dir / f"augmenter_pct{label:03d}.baug")

    # -- main -----------------------------------------------------------------

    def run(self, resume=False):
        done_marker = self.job_dir / "done"
        if done_marker.exists():
            return json.loads(done_marker.read_text())
        self._build_problem()
        engine_cfg = _bilevel_config(self.cfg, self.job.arm)

        start_epoch = 0
        data_rng_state = None
        val_state = None
        opt_state = None
        if resume and (self.job_dir / "state.json").exists():
            # resume mid-job from the last epoch checkpoint
            state, opt_state = self._load_state()
            start_epoch = state["next_epoch"]
            data_rng_state = state["data_rng"]
            val_state = state["val_sampler"]
            self._truncate_rows(state["rows_written"])
        else:
            self._truncate_rows(0)
            self._save_snapshot_checkpoints(0)

        rows_written = start_epoch
        csv_path = self.job_dir / "metrics.csv"
        job = self.job
        epoch_wall = {"t": time.perf_counter()}

        def on_epoch_end(engine, record, states):
            nonlocal rows_written
            now = time.perf_counter()
            wall = now - epoch_wall["t"]
            epoch_wall["t"] = now
            devs = record.deviations
            row = _format_row((
                job.run_id, job.arm, job.scenario, job.cell, job.fold, job.seed,
                record.epoch, record.train_loss, record.val_loss,
                record.val_acc, record.test_acc,
                *(float(devs.get(c, 0.0)) for c in DEVIATION_CHANNELS),
                wall, self.cfg.config_hash,
            ))
            self._save_state(engine, record.epoch, rows_written + 1, states)
            self._save_snapshot_checkpoints(record.epoch + 1)
            with open(csv_path, "a") as fp:
                fp.write(row)
            rows_written += 1

        engine, records = train(
            self.problem, engine_cfg, self.data, seed=self.train_seed,
            on_epoch_end=on_epoch_end, start_epoch=start_epoch,
            data_rng_state=data_rng_state, val_sampler_state=val_state,
            optimizer_state=opt_state,
        )
        summary = {
            "run_id": job.run_id, "arm": job.arm, "scenario": job.scenario,
            "cell": job.cell, "fold": job.fold, "seed": job.seed,
            "val_acc": records[-1].val_acc if records else float("nan"),
            "test_acc": records[-1].test_acc if records else float("nan"),
            "skipped_updates": engine.skipped_updates,
        }
        done_marker.write_text(json.dumps(summary))
        return summary


def _run_job_process(config_text, job, out_dir, resume):
    """Worker entry point: rebuilds everything from the config text."""
    import threadpoolctl

    threads = _thread_cap()
    limiter = threadpoolctl.threadpool_limits(limits=threads) if threads else None
    try:
        cfg = parse_config(config_text)
        dataset = build_dataset(cfg)
        plan = make_folds(
            dataset, fractions=tuple(cfg.values["dataset"]["fractions"]),
            seed=cfg.values["dataset"]["seed"], n_folds=cfg.values["experiment"]["folds"],
        )
        runner = _JobRunner(cfg, job, dataset, plan, out_dir)
        return runner.run(resume=resume)
    finally:
        if limiter is not None:
            limiter.unregister()


def _thread_cap():
    import os

    raw = os.environ.get("BILEVEL_AUG_THREADS", "")
    try:
        return int(raw) if raw else None
    except ValueError:
        return None


def run_experiment(cfg, out_dir, jobs=None, resume=False):
    """Execute every job; returns (exit_code, summaries, failures).

    Completed jobs (done marker present) are skipped, so re-running a
    finished config retrains nothing. Partial job state is only reused
    with ``resume``; otherwise it is an error to avoid silently mixing
    state from an interrupted invocation.
    """
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    snap = out / "config.snapshot.ini"
    if snap.exists():
        existing = parse_config(snap.read_text())
        if existing.config_hash != cfg.config_hash:
            raise ValueError(
                f"{out} holds results for a different config "
                f"({existing.config_hash} != {cfg.config_hash})"
            )
    else:
        snap.write_text(cfg.text)

    job_specs = expand_jobs(cfg)
    if not resume:
        for job in job_specs:
            jdir = out / "jobs" / job.run_id
            if (jdir / "state.json").exists() and not (jdir / "done").exists():
                raise ValueError(
                    f"{job.run_id} has partial state; pass --resume to continue "
                    "or remove the output directory"
                )

    workers = jobs or cfg.values["experiment"]["jobs"]
    summaries = []
    failures = []
    pending = [j for j in job_specs]
    if workers <= 1:
        for job in pending:
            try:
                summaries.append(_run_job_process(cfg.text, job, str(out), resume))
            except Exception as e:  # noqa: BLE001 - keep other jobs running
                log.error("job %s failed: %s", job.run_id, e)
                failures.append({"run_id": job.run_id, "error": str(e)})
    else:
        with ProcessPoolExecutor(max_workers=workers) as pool:
            futures = {
                pool.submit(_run_job_process, cfg.text, job, str(out), resume): job
                for job in pending
            }
            for fut, job in futures.items():
                try:
                    summaries.append(fut.result())
                except Exception as e:  # noqa: BLE001
                    log.error("job %s failed: %s", job.run_id, e)
                    failures.append({"run_id": job.run_id, "error": str(e)})

    merge_metrics(out, job_specs)
    write_grid_csv(out, job_specs)
    if failures:
        (out / "failures.json").write_text(json.dumps(failures, indent=2))
    return (1 if failures else 0), summaries, failures


def merge_metrics(out_dir, job_specs):
    """Concatenate per-job CSVs in a deterministic job order."""
    out = Path(out_dir)
    ordered = sorted(job_specs, key=lambda j: (j.arm, j.scenario, j.cell, j.fold))
    lines = [",".join(METRICS_COLUMNS) + "\n"]
    for job in ordered:
        path = out / "jobs" / job.run_id / "metrics.csv"
        if path.exists():
            lines.extend(path.read_text().splitlines(keepends=True))
    (out / "metrics.csv").write_text("".join(lines))


def write_grid_csv(out_dir, job_specs):
    out = Path(out_dir)
    rows = [",".join(GRID_COLUMNS) + "\n"]
    grid_jobs = sorted(
        (j for j in job_specs if j.arm in ("predefined", "randaugment")),
        key=lambda j: (j.arm, j.cell, j.fold),
    )
    for job in grid_jobs:
        marker = out / "jobs" / job.run_id / "done"
        if not marker.exists():
            continue
        s = json.loads(marker.read_text())
        rows.append(
            f"{job.arm},{job.cell},{job.fold},{s['val_acc']:.6f},"
            f"{s['test_acc']:.6f},{job.seed}\n"
        )
    if len(rows) > 1 or any(j.arm in ("predefined", "randaugment") for j in job_specs):
        (out / "grid.csv").write_text("".join(rows))


# -- reporting -----------------------------------------------------------------


def _read_metrics(out_dir):
    path = Path(out_dir) / "metrics.csv"
    if not path.exists():
        raise FileNotFoundError(f"{path} not found; run the experiment first")
    lines = path.read_text().splitlines()
    header = lines[0].split(",")
    rows = [dict(zip(header, line.split(","))) for line in lines[1:] if line]
    return rows


def aggregate(out_dir):
    """Fold-aggregated results keyed by (arm, scenario-or-cell).

    Rows whose config hash does not match the stored config snapshot are
    rejected. Grid arms are reduced to their selected best cell.
    """
    out = Path(out_dir)
    cfg = parse_config((out / "config.snapshot.ini").read_text())
    rows = _read_metrics(out)
    kept = []
    rejected = 0
    for r in rows:
        if r["config_hash"] != cfg.config_hash:
            rejected += 1
            continue
        kept.append(r)
    if rejected:
        log.warning("report: rejected %d rows with mismatched config hash", rejected)

    # final epoch per run_id
    final = {}
    for r in kept:
        cur = final.get(r["run_id"])
        if cur is None or int(r["epoch"]) > int(cur["epoch"]):
            final[r["run_id"]] = r

    expected_folds = cfg.values["experiment"]["folds"]
    groups = {}
    for r in final.values():
        groups.setdefault((r["arm"], r["scenario"], r["cell"]), []).append(r)

    summary_rows = []
    for arm in cfg.values["experiment"]["arms"]:
        if arm in ("none", "learned"):
            keys = [k for k in groups if k[0] == arm]
            for key in sorted(keys):
                rows_k = groups[key]
                summary_rows.append(_summarize(arm, key[1], rows_k, expected_folds))
        else:
            cell_keys = [k for k in groups if k[0] == arm]
            results = []
            for key in cell_keys:
                for r in groups[key]:
                    results.append(
                        GridCellResult(
                            cell=_cell_from_string(arm, key[2]), fold=int(r["fold"]),
                            seed=int(r["seed"]), val_acc=float(r["val_acc"]),
                            test_acc=float(r["test_acc"]),
                        )
                    )
            if not results:
                continue
            best, _ = select_best_cell(results)
            chosen = groups[(arm, "-", best.describe())]
            row = _summarize(arm, best.describe(), chosen, expected_folds)
            summary_rows.append(row)
    return summary_rows, cfg, kept


def _summarize(arm, tag, rows, expected_folds):
    vals = np.array([float(r["val_acc"]) for r in rows])
    tests = np.array([float(r["test_acc"]) for r in rows])
    warning = ""
    if len(rows) < expected_folds:
        warning = f"missing folds: {len(rows)}/{expected_folds}"
    return {
        "arm": arm,
        "scenario_or_cell": tag,
        "folds": len(rows),
        "val_acc_mean": float(vals.mean()),
        "val_acc_std": float(vals.std(ddof=1)) if len(vals) > 1 else 0.0,
        "test_acc_mean": float(tests.mean()),
        "test_acc_std": float(tests.std(ddof=1)) if len(tests) > 1 else 0.0,
        "warning": warning,
    }


def write_report(out_dir, report_dir=None):
    """Aggregate folds into mean +- std tables and emit metric plots."""
    import matplotlib

    matplotlib.use("Agg")
    import matplotlib.pyplot as plt

    out = Path(out_dir)
    rep = Path(report_dir) if report_dir else out / "report"
    rep.mkdir(parents=True, exist_ok=True)
    summary_rows, cfg, kept = aggregate(out)

    header = ("arm,scenario_or_cell,folds,val_acc_mean,val_acc_std,"
              "test_acc_mean,test_acc_std,warning\n")
    lines = [header]
    for r in summary_rows:
        if r["warning"]:
            log.warning("report: %s %s %s", r["arm"], r["scenario_or_cell"], r["warning"])
        lines.append(
            f"{r['arm']},{r['scenario_or_cell']},{r['folds']},"
            f"{r['val_acc_mean']:.6f},{r['val_acc_std']:.6f},"
            f"{r['test_acc_mean']:.6f},{r['test_acc_std']:.6f},{r['warning']}\n"
        )
    (rep / "summary.csv").write_text("".join(lines))

    # accuracy vs epoch per (arm, scenario/cell), mean over folds
    series = {}
    for r in kept:
        key = (r["arm"], r["scenario"] if r["arm"] == "learned" else r["cell"])
        series.setdefault(key, {}).setdefault(int(r["epoch"]), []).append(
            float(r["test_acc"])
        )
    fig, ax = plt.subplots(figsize=(7, 4.5))
    for key in sorted(series):
        epochs = sorted(series[key])
        means = [float(np.mean(series[key][e])) for e in epochs]
        ax.plot(epochs, means, label=f"{key[0]}:{key[1]}")
    ax.set_xlabel("epoch")
    ax.set_ylabel("test accuracy (fold mean)")
    ax.legend(fontsize=7)
    fig.tight_layout()
    fig.savefig(rep / "acc_vs_epoch.png", dpi=110)
    plt.close(fig)

    dev_cols = [f"dev_{c}" for c in DEVIATION_CHANNELS]
    fig, ax = plt.subplots(figsize=(7, 4.5))
    plotted = False
    for key in sorted(series):
        if key[0] != "learned":
            continue
        rows_k = [r for r in kept if r["arm"] == "learned" and r["scenario"] == key[1]]
        epochs = sorted({int(r["epoch"]) for r in rows_k})
        for col in dev_cols:
            vals = []
            for e in epochs:
                per = [float(r[col]) for r in rows_k if int(r["epoch"]) == e]
                vals.append(float(np.mean(per)))
            if any(v != 0 for v in vals):
                ax.plot(epochs, vals, label=f"{key[1]}:{col[4:]}")
                plotted = True
    ax.set_xlabel("epoch")
    ax.set_ylabel("mean |param - identity|")
    if plotted:
        ax.legend(fontsize=7)
    fig.tight_layout()
    fig.savefig(rep / "param_deviation_vs_epoch.png", dpi=110)
    plt.close(fig)
    return summary_rows


# -- qualitative snapshots --------------------------------------------------------


def write_snapshots(out_dir, run_id=None, snap_dir=None):
    """Export one fixed validation image augmented by the saved augmenter
    at the 0/25/50/75/100% marks of training (fixed noise)."""
    from PIL import Image

    out = Path(out_dir)
    cfg = parse_config((out / "config.snapshot.ini").read_text())
    dataset = build_dataset(cfg)
    plan = make_folds(
        dataset, fractions=tuple(cfg.values["dataset"]["fractions"]),
        seed=cfg.values["dataset"]["seed"], n_folds=cfg.values["experiment"]["folds"],
    )
    target = Path(snap_dir) if snap_dir else out / "snapshots"
    jobs = [j for j in expand_jobs(cfg) if j.arm == "learned"]
    if run_id is not None:
        jobs = [j for j in jobs if j.run_id == run_id]
        if not jobs:
            raise ValueError(f"no learned run named {run_id!r}")
    written = []
    for job in jobs:
        jdir = out / "jobs" / job.run_id
        data = fold_arrays(dataset, plan.folds[job.fold])
        image = data["val"][0][0]
        dest = target / job.run_id
        dest.mkdir(parents=True, exist_ok=True)
        seq = _job_seed_seq(job).spawn(6)[5]
        noise_seed = int(seq.generate_state(1)[0])
        for label in SNAPSHOT_LABELS:
            ckpt = jdir / f"augmenter_pct{label:03d}.baug"
            if not ckpt.exists():
                log.warning("snapshot %s: missing checkpoint %s, skipped",
                            job.run_id, ckpt.name)
                continue
            net = AugmenterNet.load(ckpt)
            noise = NoiseSource(noise_seed)  # same stream for every label
            from .tensor import Tensor, record_suspended

            with record_suspended():
                params = net.sample_params(Tensor(noise.sample(1)))
                augmented = apply_transform(
                    Tensor(image[None].astype(np.float32)), params
                ).data[0]
            arr = np.clip(np.round(augmented * 255), 0, 255).astype(np.uint8)
            path = dest / f"pct{label:03d}.png"
            Image.fromarray(arr.transpose(1, 2, 0)).save(path)
            written.append(path)
    return written
