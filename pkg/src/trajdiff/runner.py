"""Experiment orchestration: dataset generation, optional stepwise
pretraining, the configured training loop, evaluation, and persistence.

Each run owns a directory under the output root (env var TRAJDIFF_OUT
overrides the configured one) holding the verbatim config snapshot,
per-step JSONL metrics, JSON checkpoints, and a final metrics JSON that is
byte-identical across re-runs of the same config. Every evaluation also
appends one row to the root-level CSV ledger.
"""

from __future__ import annotations

import fcntl
import hashlib
import json
import os
import time
from concurrent.futures import ProcessPoolExecutor
from dataclasses import dataclass, replace
from pathlib import Path

import numpy as np

from trajdiff.config import RunConfig, config_from_dict, load as load_config
from trajdiff.datasets import Dataset, gen_dataset
from trajdiff.losses import LossWeights
from trajdiff.metrics import (
    MetricReport,
    frechet_distance,
    gap_probe,
    leakage_kl,
    mmd_rbf,
    mode_alignment,
)
from trajdiff.nets import CondEmbedding, Denoiser, Discriminator, FeatureNet
from trajdiff.nets import _params_from_state, _state_of
from trajdiff.sampling import Tape, e2e_trajectory, sample_baseline, strided_steps
from trajdiff.schedule import NoiseSchedule, make_linear_schedule
from trajdiff.training import Trainer

OUT_ENV = "TRAJDIFF_OUT"
LEDGER_NAME = "ledger.csv"
LEDGER_HEADER = "run_id,mode,nfe,frechet,mmd,alignment\n"
FEAT_DIM = 16
MMD_SUBSET = 512

# seed-stream offsets so every random consumer gets its own stream
_SEED_MODEL = 10_000
_SEED_TRAIN = 20_000
_SEED_DISC = 30_000
_SEED_FEAT = 40_000
_SEED_COND = 50_000
_SEED_DATA_ORDER = 60_000


@dataclass
class RunRecord:
    config: RunConfig
    config_hash: str
    run_dir: str
    metrics_path: str
    checkpoint_paths: list
    checkpoint_hashes: list
    reports: list
    wall_total: float

    @property
    def run_id(self) -> str:
        return Path(self.run_dir).name

    def to_dict(self) -> dict:
        return {"config": self.config.to_dict(),
                "config_hash": self.config_hash,
                "run_dir": self.run_dir,
                "metrics_path": self.metrics_path,
                "checkpoint_paths": self.checkpoint_paths,
                "checkpoint_hashes": self.checkpoint_hashes,
                "reports": [r.to_dict() for r in self.reports],
                "wall_total": self.wall_total}


def out_root(cfg: RunConfig) -> Path:
    return Path(os.environ.get(OUT_ENV) or cfg.run.out_dir)


def run_id_for(cfg: RunConfig) -> str:
    return f"{cfg.hash()[:12]}-s{cfg.run.seed}"


def _canonical(obj) -> str:
    return json.dumps(obj, sort_keys=True, separators=(",", ":"))


# ---------------------------------------------------------------------------
# checkpoints


def save_checkpoint(path, step: int, cfg_hash: str, net: Denoiser,
                    ema: dict, cond: CondEmbedding | None,
                    schedule: NoiseSchedule) -> str:
    """Versioned, self-contained JSON blob (model, EMA, conditioning table
    spec, and schedule); returns its SHA-256 (of the exact bytes)."""
    blob = {"version": 1, "step": int(step), "config": cfg_hash,
            "denoiser": net.to_state(), "ema": _state_of(ema),
            "cond": None if cond is None else
            {"n_classes": cond.n_classes, "dim": cond.dim, "seed": cond.seed},
            "schedule": schedule.to_config()}
    text = _canonical(blob)
    Path(path).write_text(text)
    return hashlib.sha256(text.encode()).hexdigest()


def load_checkpoint(path):
    """Returns (live net, ema param dict, cond embedding or None, blob)."""
    try:
        blob = json.loads(Path(path).read_text())
    except OSError as e:
        raise RuntimeError(f"cannot read checkpoint {path}: {e}") from e
    if blob.get("version") != 1:
        raise ValueError(f"{path}: unsupported checkpoint version")
    net = Denoiser.from_state(blob["denoiser"])
    ema = _params_from_state(blob["ema"])
    cond = None
    if blob.get("cond") is not None:
        c = blob["cond"]
        cond = CondEmbedding(c["n_classes"], c["dim"], seed=c["seed"])
    return net, ema, cond, blob


def schedule_from_checkpoint(blob: dict) -> NoiseSchedule:
    return NoiseSchedule.from_config(blob["schedule"])


def ema_denoiser_from(net: Denoiser, ema: dict) -> Denoiser:
    clone = Denoiser.from_state(net.to_state())
    clone.assign({k: np.array(v) for k, v in ema.items()})
    return clone


# ---------------------------------------------------------------------------
# evaluation


def generate_samples(net: Denoiser, schedule: NoiseSchedule, nfe: int,
                     n: int, rng: np.random.Generator, e_c=None,
                     renoise_mode: str = "convex") -> np.ndarray:
    """Draw n samples at the given NFE. Epsilon-mode nets use the ancestral
    sampler; other prediction modes run the re-noising trajectory."""
    steps = strided_steps(schedule.T, nfe)
    if net.prediction_mode == "epsilon":
        return sample_baseline(net, schedule, steps, e_c=e_c, rng=rng, n=n).final
    traj = e2e_trajectory(net, schedule, steps, e_c, rng, mode=renoise_mode,
                          tape=Tape(), n=n)
    return np.asarray(traj.final.data)


def evaluate(net: Denoiser, cond: CondEmbedding | None, schedule: NoiseSchedule,
             ds: Dataset, nfe: int, n_samples: int, bandwidth: float,
             seed: int, renoise_mode: str = "convex") -> MetricReport:
    """Deterministic scoring of a model against a dataset.

    Alignment needs both conditioning and an analytic mixture; otherwise it
    reports 0.0.
    """
    rng = np.random.default_rng(seed)
    labels = None
    e_c = None
    if cond is not None and net.cond_dim > 0:
        labels = rng.integers(0, cond.n_classes, n_samples)
        e_c = cond.rows(labels)
    samples = generate_samples(net, schedule, nfe, n_samples, rng, e_c=e_c,
                               renoise_mode=renoise_mode)
    fd = frechet_distance(samples, ds.samples)
    m = min(MMD_SUBSET, n_samples, ds.n)
    sub_a = samples[rng.choice(n_samples, m, replace=False)]
    sub_b = ds.samples[rng.choice(ds.n, m, replace=False)]
    mmd = mmd_rbf(sub_a, sub_b, bandwidth)
    if labels is not None and ds.mixture is not None:
        alignment = mode_alignment(samples, labels, ds.mixture.means)
    else:
        alignment = 0.0
    return MetricReport(frechet=fd, mmd=max(mmd, 0.0), alignment=alignment,
                        n_samples=n_samples, nfe=nfe, seed=seed)


def leakage_curve(schedule: NoiseSchedule, ds: Dataset, ts=None) -> list:
    """(t, KL to N(0, I)) for a Gaussian fit of the dataset across steps."""
    mu = ds.samples.mean(axis=0)
    cov = np.cov(ds.samples, rowvar=False, ddof=1)
    if ts is None:
        grid = np.unique(np.linspace(1, schedule.T, 21).round().astype(int))
        ts = [int(t) for t in grid]
    return [(int(t), leakage_kl(schedule, mu, cov, int(t))) for t in ts]


# ---------------------------------------------------------------------------
# the single-run pipeline


def _append_ledger(root: Path, rows: list) -> None:
    """Serialized append (advisory file lock); never truncates."""
    path = root / LEDGER_NAME
    try:
        with open(path, "a") as f:
            fcntl.flock(f, fcntl.LOCK_EX)
            if f.tell() == 0 and path.stat().st_size == 0:
                f.write(LEDGER_HEADER)
            for r in rows:
                f.write(",".join(str(v) for v in r) + "\n")
            fcntl.flock(f, fcntl.LOCK_UN)
    except OSError as e:
        raise RuntimeError(f"cannot append to ledger {path}: {e}") from e


def _ledger_rows(run_id: str, mode: str, reports: list) -> list:
    return [(run_id, mode, r.nfe, repr(r.frechet), repr(r.mmd),
             repr(r.alignment)) for r in reports]


def build_problem(cfg: RunConfig):
    """Dataset, schedule, and freshly initialized model pieces for a config."""
    ds = gen_dataset(cfg.data.kind, cfg.data.n, cfg.data.d, cfg.data.k,
                     seed=cfg.run.seed)
    schedule = make_linear_schedule(cfg.schedule.t, cfg.schedule.beta_start,
                                    cfg.schedule.beta_end)
    return ds, schedule


def _fresh_nets(cfg: RunConfig, ds: Dataset):
    seed = cfg.run.seed
    m = cfg.model
    step_list = None
    if m.sharing_mode == "per-step":
        step_list = cfg.train.step_list or strided_steps(cfg.schedule.t,
                                                         cfg.train.nfe)
    net = Denoiser(ds.d, T=cfg.schedule.t, hidden=m.hidden,
                   time_dim=m.time_dim, cond_dim=m.cond_dim,
                   prediction_mode=m.prediction_mode,
                   sharing_mode=m.sharing_mode, step_list=step_list,
                   seed=seed + _SEED_MODEL)
    cond = None
    if m.cond_dim > 0:
        cond = CondEmbedding(max(ds.n_classes, 1), m.cond_dim,
                             seed=seed + _SEED_COND)
    return net, cond


def run_experiment(cfg: RunConfig) -> RunRecord:
    """Execute one config end to end and persist everything.

    Flow: dataset -> (optional stepwise pretrain or checkpoint load) ->
    configured training loop -> EMA evaluation at every eval seed. A
    non-finite loss aborts with the latest checkpoint retained on disk.
    """
    t_start = time.perf_counter()
    root = out_root(cfg)
    run_dir = root / run_id_for(cfg)
    try:
        run_dir.mkdir(parents=True, exist_ok=True)
    except OSError as e:
        raise RuntimeError(f"cannot create run directory {run_dir}: {e}") from e
    cfg_hash = cfg.hash()
    (run_dir / "config.toml").write_text(cfg.to_toml())

    ds, schedule = build_problem(cfg)
    if cfg.train.init_from:
        net, _, cond, _ = load_checkpoint(cfg.train.init_from)
        if net.T != cfg.schedule.t:
            raise ValueError(f"checkpoint T={net.T} does not match the "
                             f"configured schedule T={cfg.schedule.t}")
    else:
        net, cond = _fresh_nets(cfg, ds)

    featnet = disc = None
    tc = cfg.train.to_train_config()
    if tc.loss.lpips > 0:
        featnet = FeatureNet(ds.d, FEAT_DIM, seed=cfg.run.seed + _SEED_FEAT)
    if tc.loss.gan > 0:
        disc = Discriminator(ds.d, seed=cfg.run.seed + _SEED_DISC)

    metrics_path = run_dir / "metrics.jsonl"
    checkpoint_paths: list = []
    checkpoint_hashes: list = []

    def checkpoint(tag, trainer) -> str:
        p = run_dir / f"checkpoint-{tag}.json"
        h = save_checkpoint(p, trainer.step, cfg_hash, trainer.net,
                            trainer.ema, cond, schedule)
        checkpoint_paths.append(str(p))
        checkpoint_hashes.append(h)
        return str(p)

    data_rng = np.random.default_rng(cfg.run.seed + _SEED_DATA_ORDER)
    conditioned = net.cond_dim > 0

    def draw_batch(batch_size):
        idx = data_rng.integers(0, ds.n, batch_size)
        return ds.samples[idx], (ds.labels[idx] if conditioned else None)

    with open(metrics_path, "w") as mf:

        def train_phase(trainer, n_steps, step_fn, tag):
            for _ in range(n_steps):
                batch, labels = draw_batch(trainer.cfg.batch_size)
                try:
                    m = step_fn(trainer, batch, labels)
                except ValueError as e:
                    p = checkpoint("abort", trainer)
                    raise RuntimeError(
                        f"training aborted at step {trainer.step + 1} "
                        f"({e}); last checkpoint retained at {p}") from e
                mf.write(json.dumps(m) + "\n")
                loss = m.get("loss", m.get("gen", {}).get("loss", 0.0))
                if not np.isfinite(loss):
                    p = checkpoint("abort", trainer)
                    raise RuntimeError(
                        f"non-finite loss at step {trainer.step}; "
                        f"last checkpoint retained at {p}")
                if trainer.step % cfg.run.checkpoint_every == 0:
                    checkpoint(f"{tag}{trainer.step:06d}", trainer)

        if (cfg.train.mode == "e2e" and cfg.train.pretrain_steps > 0
                and not cfg.train.init_from):
            pre_tc = replace(tc, mode="stepwise", steps=cfg.train.pretrain_steps,
                             loss=LossWeights(l2=1.0))
            pre = Trainer(net, schedule, pre_tc, cond=cond,
                          seed=cfg.run.seed + _SEED_TRAIN)
            train_phase(pre, pre_tc.steps,
                        lambda tr, b, l: tr.train_step_stepwise(b, l), "pre")
            checkpoint("pretrain", pre)

        trainer = Trainer(net, schedule, tc, cond=cond, featnet=featnet,
                          disc=disc, seed=cfg.run.seed + _SEED_TRAIN + 1)
        if tc.mode == "stepwise":
            step_fn = lambda tr, b, l: tr.train_step_stepwise(b, l)
        elif tc.loss.gan > 0:
            def step_fn(tr, b, l):
                m = tr.adversarial_round(b, l)
                flat = dict(m["gen"])
                flat["disc_losses"] = [d["disc_loss"] for d in m["disc"]]
                return flat
        else:
            step_fn = lambda tr, b, l: tr.train_step_e2e(b, l)
        train_phase(trainer, tc.steps, step_fn, "step")

    final_path = checkpoint("final", trainer)
    final_hash = checkpoint_hashes[-1]

    eval_nfe = cfg.eval.nfe or cfg.train.nfe
    ema_net = trainer.ema_denoiser()
    reports = [evaluate(ema_net, cond, schedule, ds, eval_nfe,
                        cfg.eval.n_samples, cfg.eval.mmd_bandwidth, s,
                        renoise_mode=cfg.train.renoise_mode)
               for s in cfg.eval.seeds]

    final_metrics = {"config": cfg_hash, "checkpoint": final_hash,
                     "checkpoint_path": str(final_path),
                     "reports": [r.to_dict() for r in reports]}
    (run_dir / "final_metrics.json").write_text(_canonical(final_metrics))

    run_id = run_id_for(cfg)
    _append_ledger(root, _ledger_rows(run_id, cfg.train.mode, reports))

    record = RunRecord(config=cfg, config_hash=cfg_hash, run_dir=str(run_dir),
                       metrics_path=str(metrics_path),
                       checkpoint_paths=checkpoint_paths,
                       checkpoint_hashes=checkpoint_hashes,
                       reports=reports,
                       wall_total=time.perf_counter() - t_start)
    (run_dir / "runrecord.json").write_text(json.dumps(record.to_dict(), indent=1))
    return record


def reevaluate(run_dir, nfe: int | None = None, seeds=None,
               checkpoint: str = "final", use_ema: bool = True) -> list:
    """Score an existing run's checkpoint again (no retraining), appending
    fresh ledger rows; reuses the run's config for data and schedule."""
    run_dir = Path(run_dir)
    cfg = load_config(run_dir / "config.toml")
    ds, schedule = build_problem(cfg)
    net, ema, cond, _ = load_checkpoint(run_dir / f"checkpoint-{checkpoint}.json")
    target = ema_denoiser_from(net, ema) if use_ema else net
    nfe = nfe or cfg.eval.nfe or cfg.train.nfe
    seeds = tuple(seeds) if seeds is not None else cfg.eval.seeds
    reports = [evaluate(target, cond, schedule, ds, nfe, cfg.eval.n_samples,
                        cfg.eval.mmd_bandwidth, s,
                        renoise_mode=cfg.train.renoise_mode)
               for s in seeds]
    _append_ledger(run_dir.parent,
                   _ledger_rows(run_dir.name, cfg.train.mode, reports))
    (run_dir / f"eval-nfe{nfe}.json").write_text(
        _canonical([r.to_dict() for r in reports]))
    return reports


def gap_report_for(run_dir, checkpoint: str = "final", nfe: int | None = None,
                   seed: int = 0, use_ema: bool = True):
    """Training-sampling gap probe for a stored run."""
    run_dir = Path(run_dir)
    cfg = load_config(run_dir / "config.toml")
    ds, schedule = build_problem(cfg)
    net, ema, cond, _ = load_checkpoint(run_dir / f"checkpoint-{checkpoint}.json")
    target = ema_denoiser_from(net, ema) if use_ema else net
    nfe = nfe or cfg.eval.nfe or cfg.train.nfe
    rng = np.random.default_rng(seed)
    e_c = None
    if cond is not None and target.cond_dim > 0:
        e_c = cond.rows(ds.labels)
    return gap_probe(target, schedule, ds.samples,
                     strided_steps(schedule.T, nfe), rng, e_c=e_c)


# ---------------------------------------------------------------------------
# presets


PRESET_NAMES = ("table1-analog", "table3-ablation")


def _run_from_dict(d: dict) -> RunRecord:
    return run_experiment(config_from_dict(d))


def _run_many(cfg_dicts: list, workers: int | None) -> list:
    workers = workers or os.cpu_count() or 1
    if workers <= 1 or len(cfg_dicts) <= 1:
        return [_run_from_dict(d) for d in cfg_dicts]
    with ProcessPoolExecutor(max_workers=workers) as pool:
        return list(pool.map(_run_from_dict, cfg_dicts))


def _base_dict(out_dir: str, seed: int, steps: int, data_n: int,
               eval_n: int) -> dict:
    return {
        "data": {"kind": "gaussian-ring", "n": data_n, "k": 8},
        "train": {"steps": steps},
        "eval": {"n_samples": eval_n},
        "run": {"out_dir": out_dir, "seed": seed, "checkpoint_every": 10 ** 9},
    }


def preset_table1(out_dir: str, seeds=tuple(range(10)), steps: int = 5000,
                  pretrain_steps: int = 1500, finetune_lr: float = 3e-4,
                  data_n: int = 8000, eval_n: int = 2000,
                  workers: int | None = None) -> dict:
    """Paired stepwise-vs-e2e comparison at NFE 4 and NFE 3 over many seeds.

    Per seed: one stepwise pretrain (evaluated at NFE 4, then re-scored at
    NFE 3 from its checkpoint) and two e2e fine-tunes (NFE 4 and 3, squared
    error plus feature-space penalty) initialized from that checkpoint.
    The pretrain budget is kept short so the baseline is competent but not
    saturated at few-step inference; the fine-tune uses a reduced rate for
    stability of gradients through the unrolled trajectory.
    Returns {"stepwise": [...], "e2e4": [...], "e2e3": [...],
    "stepwise_nfe3": [...]} of records/reports in seed order.
    """
    base = [_base_dict(out_dir, s, pretrain_steps, data_n, eval_n)
            for s in seeds]
    for d in base:
        d["train"].update(mode="stepwise", loss="l2", nfe=4)
    stepwise = _run_many(base, workers)

    stepwise_nfe3 = [reevaluate(rec.run_dir, nfe=3) for rec in stepwise]

    children = []
    for s, rec in zip(seeds, stepwise):
        for nfe in (4, 3):
            d = _base_dict(out_dir, s, steps, data_n, eval_n)
            d["train"].update(mode="e2e", loss="l2+lpips", nfe=nfe,
                              lr=finetune_lr,
                              init_from=rec.checkpoint_paths[-1])
            children.append(d)
    child_recs = _run_many(children, workers)
    return {"stepwise": stepwise, "stepwise_nfe3": stepwise_nfe3,
            "e2e4": child_recs[0::2], "e2e3": child_recs[1::2]}


def preset_table3(out_dir: str, seed: int = 0, steps: int = 5000,
                  pretrain_steps: int = 1500, finetune_lr: float = 3e-4,
                  data_n: int = 8000, eval_n: int = 2000,
                  workers: int | None = None) -> dict:
    """Loss-combination ablation: five e2e fine-tunes (L1 / L2 / feature /
    L2+feature / L2+feature+adversarial) from one shared stepwise pretrain.
    Writes ablation.csv (loss, frechet, mmd, alignment) in the output root.
    """
    pre = _base_dict(out_dir, seed, pretrain_steps, data_n, eval_n)
    pre["train"].update(mode="stepwise", loss="l2", nfe=4)
    pre_rec = run_experiment(config_from_dict(pre))
    ckpt = pre_rec.checkpoint_paths[-1]

    losses = ("l1", "l2", "lpips", "l2+lpips", "l2+lpips+gan")
    children = []
    for loss in losses:
        d = _base_dict(out_dir, seed, steps, data_n, eval_n)
        d["train"].update(mode="e2e", loss=loss, nfe=4, lr=finetune_lr,
                          init_from=ckpt)
        children.append(d)
    recs = _run_many(children, workers)

    csv_path = Path(out_root(config_from_dict(pre))) / "ablation.csv"
    lines = ["loss,frechet,mmd,alignment"]
    for loss, rec in zip(losses, recs):
        r = rec.reports[0]
        lines.append(f"{loss},{r.frechet!r},{r.mmd!r},{r.alignment!r}")
    csv_path.write_text("\n".join(lines) + "\n")
    return {"pretrain": pre_rec, "children": dict(zip(losses, recs)),
            "csv": str(csv_path)}
