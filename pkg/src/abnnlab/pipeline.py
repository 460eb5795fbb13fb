"""End-to-end glue: datasets from config, evaluation, sweeps and ablations."""

from __future__ import annotations

import json
import tempfile
from pathlib import Path

import numpy as np

from . import data as data_mod
from . import metrics as M
from .config import RunConfig
from .ensemble import EnsembleConfig, mutual_information, predict
from .model import Checkpoint, Network, load, save
from .train import ModeSet, RandomPrior, finetune_abnn, pretrain

LR_MULTIPLIERS = (0.1, 0.2, 0.5, 1.0, 2.0, 5.0, 10.0)


def build_dataset(spec: dict) -> data_mod.Dataset:
    spec = dict(spec)
    kind = spec.pop("kind")
    if kind == "two_moons":
        return data_mod.gen_two_moons(
            spec.get("n", 2000), spec.get("noise_std", 0.2), spec.get("seed", 0),
            spec.get("n_test"), spec.get("n_ood"), spec.get("ood_radius_factor", 3.0),
        )
    if kind == "blobs":
        return data_mod.gen_blobs(spec.get("k", 3), spec.get("n", 1000), spec.get("spread", 1.0),
                                  spec.get("seed", 0), spec.get("n_test"))
    if kind == "idx":
        train = data_mod.load_idx(spec["train_images"], spec["train_labels"])
        test = data_mod.load_idx(spec["test_images"], spec["test_labels"])
    elif kind == "digits":
        with tempfile.TemporaryDirectory() as tmp:
            paths = data_mod.write_digits_idx(tmp, spec.get("n_train", 2048), spec.get("n_test", 512),
                                              spec.get("seed", 0))
            train = data_mod.load_idx(paths["train_images"], paths["train_labels"])
            test = data_mod.load_idx(paths["test_images"], paths["test_labels"])
    else:
        raise ValueError(f"unknown dataset kind {kind!r}")
    if "limit_train" in spec:
        train = data_mod.Split(train.x[:spec["limit_train"]], train.y[:spec["limit_train"]])
    if "limit_test" in spec:
        test = data_mod.Split(test.x[:spec["limit_test"]], test.y[:spec["limit_test"]])
    ds = data_mod.idx_dataset(train, test)
    if spec.get("holdout"):
        ds = data_mod.holdout_ood(ds, spec["holdout"])
    return ds


def evaluate(
    modes: ModeSet | list[Network],
    dataset: data_mod.Dataset,
    ens: EnsembleConfig = EnsembleConfig(),
    ece_bins: int = 15,
    config: dict | None = None,
) -> M.MetricsReport:
    """Accuracy/NLL/ECE on the test split and MSP-based OOD metrics."""
    b_id = predict(modes, dataset.test.x, ens)
    probs, labels = b_id.mean_probs, dataset.test.y
    _, _, epi_id = mutual_information(b_id)
    report = dict(
        acc=M.accuracy(probs, labels),
        nll=M.nll(probs, labels),
        ece=M.ece(probs, labels, ece_bins),
        mi_id_mean=float(np.mean(epi_id)),
        n_id=int(len(labels)),
    )
    if dataset.ood is not None and len(dataset.ood):
        b_ood = predict(modes, dataset.ood, ens)
        s_id, s_ood = M.ood_scores(b_id.mean_probs), M.ood_scores(b_ood.mean_probs)
        _, _, epi_ood = mutual_information(b_ood)
        report.update(
            auroc=M.auroc(s_id, s_ood),
            aupr=M.aupr(s_id, s_ood),
            fpr95=M.fpr_at_95_tpr(s_id, s_ood),
            mi_ood_mean=float(np.mean(epi_ood)),
            n_ood=int(len(dataset.ood)),
        )
    else:
        report.update(auroc=float("nan"), aupr=float("nan"), fpr95=float("nan"),
                      mi_ood_mean=float("nan"), n_ood=0)
    return M.MetricsReport(**report, config=dict(config or {}))


def run_pretrain(cfg: RunConfig, dataset: data_mod.Dataset | None = None) -> Checkpoint:
    dataset = dataset or build_dataset(cfg.dataset)
    return pretrain(cfg.arch, dataset, cfg.pretrain)


def run_finetune(
    cfg: RunConfig,
    ckpt: Checkpoint,
    dataset: data_mod.Dataset | None = None,
    jobs: int = 1,
) -> ModeSet:
    dataset = dataset or build_dataset(cfg.dataset)
    ft = cfg.finetune
    return finetune_abnn(
        ckpt, dataset, ft.train, ft.M, ft.prior_p, ft.alpha,
        train_all=not ft.freeze_all_but_norm,
        update_running_stats=ft.update_running_stats,
        jobs=jobs,
    )


def save_modeset(modes: ModeSet, directory) -> None:
    directory = Path(directory)
    directory.mkdir(parents=True, exist_ok=True)
    files = []
    for m, net in enumerate(modes.modes):
        name = f"mode_{m:03d}.abnn"
        save(Checkpoint(net, {"stage": "finetune", "mode": m}), directory / name)
        files.append(name)
    manifest = {
        "modes": files,
        "priors": [{"eta": list(p.eta), "bernoulli_p": p.bernoulli_p, "seed": p.seed} for p in modes.priors],
    }
    (directory / "modeset.json").write_text(json.dumps(manifest, sort_keys=True, indent=2) + "\n")


def load_modeset(directory) -> ModeSet:
    directory = Path(directory)
    manifest = json.loads((directory / "modeset.json").read_text())
    nets = [load(directory / name).network for name in manifest["modes"]]
    priors = [RandomPrior(tuple(p["eta"]), p["bernoulli_p"], p["seed"]) for p in manifest["priors"]]
    return ModeSet(nets, priors)


def lr_sweep(
    cfg: RunConfig,
    ckpt: Checkpoint,
    dataset: data_mod.Dataset,
    multipliers=LR_MULTIPLIERS,
    jobs: int = 1,
) -> list[tuple[float, M.MetricsReport]]:
    """Fine-tune from one checkpoint at ``lr * multiplier`` for each
    multiplier and evaluate every resulting ensemble."""
    rows = []
    for mult in multipliers:
        run = cfg.with_finetune(lr=cfg.finetune.train.lr * mult)
        modes = run_finetune(run, ckpt, dataset, jobs)
        rows.append((mult, evaluate(modes, dataset, cfg.ensemble, cfg.ece_bins, {"lr_multiplier": mult})))
    return rows


def sweep(
    cfg: RunConfig,
    ckpt: Checkpoint,
    dataset: data_mod.Dataset,
    param: str,
    values,
    jobs: int = 1,
) -> list[tuple[float, M.MetricsReport]]:
    """Vary one fine-tuning/ensemble knob. For ``lr`` the values are
    multipliers of the configured rate."""
    if param == "lr":
        return lr_sweep(cfg, ckpt, dataset, values, jobs)
    rows = []
    for v in values:
        if param in ("alpha", "prior_p"):
            run = cfg.with_finetune(**{param: float(v)})
        elif param == "M":
            run = cfg.with_finetune(M=int(v))
        elif param in ("epochs",):
            run = cfg.with_finetune(epochs=int(v))
        elif param == "L":
            run = cfg
        else:
            raise ValueError(f"unsupported sweep parameter {param!r}")
        ens = EnsembleConfig(int(v), cfg.ensemble.seed) if param == "L" else cfg.ensemble
        modes = run_finetune(run, ckpt, dataset, jobs)
        rows.append((v, evaluate(modes, dataset, ens, cfg.ece_bins, {param: v})))
    return rows


def ablation(
    cfg: RunConfig,
    ckpt: Checkpoint,
    dataset: data_mod.Dataset,
    jobs: int = 1,
) -> list[tuple[int, int, M.MetricsReport]]:
    """The random-prior x multi-mode grid. RP off sets the Bernoulli rate to
    0; MM off trains a single mode."""
    rows = []
    for rp, mm in ((0, 0), (1, 0), (0, 1), (1, 1)):
        run = cfg.with_finetune(prior_p=cfg.finetune.prior_p if rp else 0.0,
                                M=cfg.finetune.M if mm else 1)
        modes = run_finetune(run, ckpt, dataset, jobs)
        rows.append((rp, mm, evaluate(modes, dataset, cfg.ensemble, cfg.ece_bins, {"rp": rp, "mm": mm})))
    return rows
