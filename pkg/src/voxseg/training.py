"""Training orchestration: batching, checkpoints, freezing, curriculum, grids.

Every source of randomness is either stateless (batch order, augmentation,
mixup, and modality curriculum all derive seeds from (seed, epoch, ...)) or
captured in the checkpoint (the torch RNG stream driving dropout), so a
killed run resumed from its last checkpoint reproduces the uninterrupted
loss trajectory in deterministic mode.
"""

from __future__ import annotations

import csv
import hashlib
import io
import itertools
import json
import logging
import os
import re
import subprocess
import sys
import threading
import time
from pathlib import Path

import numpy as np
import torch

from .bids import index_dataset, split_dataset
from .config import ExperimentConfig, load_config, override_config
from .data import UnitDataset, collate, subjects_for_bucket
from .errors import CheckpointError, VoxsegError
from .losses import build_loss, mixup_batch
from .models import MetadataEncoder, build_model, save_model
from .reports import qc_montage, render_training_curves, write_history_csv
from .transforms import derive_seed

logger = logging.getLogger(__name__)


def current_device() -> torch.device:
    return torch.device(os.environ.get("VOXSEG_DEVICE", "cpu"))


# ---------------------------------------------------------------------------
# checkpoints
# ---------------------------------------------------------------------------


def save_checkpoint(state: dict, path) -> Path:
    """Write a checksummed checkpoint atomically (temp file, then rename).

    ``state`` keys: epoch, model_params, optimizer_state, rng_state,
    best_validation_metric, config_fingerprint, history.
    """
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    buffer = io.BytesIO()
    torch.save(state, buffer)
    payload = buffer.getvalue()
    wrapper = {"checksum": hashlib.sha256(payload).hexdigest(), "payload": payload}
    tmp = path.with_name(path.name + ".tmp")
    torch.save(wrapper, tmp)
    os.replace(tmp, path)
    return path


def load_checkpoint(path) -> dict:
    path = Path(path)
    if not path.exists():
        raise CheckpointError(f"checkpoint {path} does not exist")
    try:
        wrapper = torch.load(path, map_location="cpu", weights_only=True)
        payload = wrapper.get("payload") if isinstance(wrapper, dict) else None
        if payload is None or hashlib.sha256(payload).hexdigest() != wrapper.get("checksum"):
            raise CheckpointError(f"checkpoint {path} is corrupt (checksum mismatch)")
        return torch.load(io.BytesIO(payload), map_location="cpu", weights_only=True)
    except CheckpointError:
        raise
    except Exception as exc:
        raise CheckpointError(f"checkpoint {path} is unreadable: {exc}") from exc


# ---------------------------------------------------------------------------
# freezing and curriculum
# ---------------------------------------------------------------------------


def freeze_layers(model, name_pattern: str):
    """Exclude parameters whose names match the regex from optimization."""
    pattern = re.compile(name_pattern)
    names = [n for n, _ in model.named_parameters()]
    matched = [n for n in names if pattern.search(n)]
    if not matched:
        groups = sorted({n.split(".")[0] for n in names})
        raise VoxsegError(
            f"freeze pattern {name_pattern!r} matched no parameters; "
            f"available groups: {groups}"
        )
    for name, param in model.named_parameters():
        if pattern.search(name):
            param.requires_grad_(False)
    logger.info("froze %d/%d parameter tensors", len(matched), len(names))
    return model


def modality_curriculum(epoch: int, schedule: dict, n_modalities: int,
                        total_epochs: int, rng: np.random.Generator) -> np.ndarray:
    """Availability mask for one sample at a 0-based ``epoch``.

    All modalities are present during warmup (default total/2 epochs);
    afterwards each non-anchor modality drops independently with probability
    rising linearly to p_max at the final epoch. The anchor is always kept.
    """
    p_max = float(schedule["p_max"])
    if p_max >= 1.0:
        raise VoxsegError(f"curriculum p_max must be < 1, got {p_max}")
    warmup = schedule["warmup_epochs"]
    if warmup is None:
        warmup = total_epochs // 2
    anchor = schedule["anchor_modality"]
    if not 0 <= anchor < n_modalities:
        raise VoxsegError(f"anchor modality {anchor} out of range for {n_modalities}")
    if epoch < warmup or p_max == 0.0:
        p = 0.0
    else:
        p = p_max * (epoch - warmup + 1) / max(total_epochs - warmup, 1)
    mask = rng.random(n_modalities) >= p
    mask[anchor] = True
    return mask


# ---------------------------------------------------------------------------
# training loop
# ---------------------------------------------------------------------------


def _unit_balance_weights(units, key: str) -> np.ndarray:
    missing = [u.volume_id for u in units if key not in u.metadata]
    if missing:
        raise VoxsegError(f"units missing balance key {key!r}: {sorted(set(missing))}")
    counts = {}
    for u in units:
        v = u.metadata[key]
        counts[v] = counts.get(v, 0) + 1
    return np.array([1.0 / counts[u.metadata[key]] for u in units])


def _batch_dice(pred: torch.Tensor, target: torch.Tensor) -> list:
    """Per-sample Dice of binarized maps; empty-vs-empty counts as 1."""
    p = (pred >= 0.5).float().flatten(1)
    t = (target >= 0.5).float().flatten(1)
    inter = (p * t).sum(dim=1)
    sizes = p.sum(dim=1) + t.sum(dim=1)
    dice = torch.where(sizes > 0, 2.0 * inter / sizes.clamp(min=1e-12),
                       torch.ones_like(sizes))
    return dice.tolist()


def _availability_batch(units, config, epoch0: int) -> torch.Tensor | None:
    model_cfg = config.model
    if model_cfg["architecture"] != "hemis_unet":
        return None
    schedule = config.training["curriculum"]
    total = config.training["epochs"]
    masks = []
    for unit in units:
        rng = np.random.default_rng(derive_seed(
            config.split["seed"], "avail", epoch0, unit.volume_id, unit.index_or_origin
        ))
        masks.append(modality_curriculum(
            epoch0, schedule, model_cfg["n_modalities"], total, rng
        ))
    return torch.from_numpy(np.stack(masks))


def _forward_batch(model, images, meta, availability):
    if availability is not None:
        images = images * availability.to(images.dtype).reshape(
            availability.shape + (1,) * (images.ndim - 2)
        )
        return model(images, availability=availability)
    if meta is not None:
        return model(images, metadata=meta)
    return model(images)


def _evaluate_epoch(model, dataset, loss_fn, encoder, meta_key, batch_size, config):
    model.eval()
    losses, dices = [], []
    with torch.no_grad():
        for start in range(0, len(dataset), batch_size):
            units = [dataset.units[i] for i in range(start, min(start + batch_size,
                                                                len(dataset)))]
            images, labels, meta = collate(units, encoder, meta_key)
            if labels is None:
                raise VoxsegError("validation units lack labels")
            avail = None
            if config.model["architecture"] == "hemis_unet":
                avail = torch.ones((images.shape[0], config.model["n_modalities"]),
                                   dtype=torch.bool)
            pred = _forward_batch(model, images, meta, avail)
            losses.append(loss_fn(pred, labels).item() * len(units))
            dices.extend(_batch_dice(pred, labels))
    return sum(losses) / len(dataset), float(np.mean(dices))


def _write_qc(dataset, out_dir: Path) -> None:
    count = min(4, len(dataset))
    pairs = []
    dataset.set_epoch(1)
    for i in range(count):
        before = dataset.units[i].data
        after = dataset.fetch(i).data
        names = ", ".join(s["name"] for s in dataset.augment_specs) or "identity"
        pairs.append((before, after, f"{dataset.units[i].volume_id} [{names}]"))
    qc_montage(pairs, out_dir / "qc_augmentation.png")


def run_training(config: ExperimentConfig, records=None):
    """Train per config; returns (model, history).

    Emits `<out>/checkpoint_epoch_<k>`, `<out>/best_model/`,
    `<out>/final_model/`, and `<out>/history.csv`.
    """
    out_dir = Path(config.output["path"])
    out_dir.mkdir(parents=True, exist_ok=True)
    device = current_device()
    training_cfg = config.training
    seed = config.split["seed"]

    if records is None:
        loader = config.loader
        if not loader["bids_path"]:
            raise VoxsegError("loader.bids_path is required for training")
        contrasts = sorted(set(loader["contrasts"]["train"]) | set(loader["contrasts"]["test"]))
        records = index_dataset(loader["bids_path"], contrasts, loader["target_suffix"])

    split = split_dataset(records, config.split["fractions"], seed,
                          config.split["split_key"])
    train_subjects = subjects_for_bucket(records, set(split.train), config, training=True)
    val_subjects = subjects_for_bucket(records, set(split.validation), config, training=True)
    if not train_subjects or not val_subjects:
        raise VoxsegError(
            f"empty training ({len(train_subjects)}) or validation "
            f"({len(val_subjects)}) bucket after loading"
        )

    train_ds = UnitDataset(train_subjects, config, augment=True, seed=seed)
    val_ds = UnitDataset(val_subjects, config, augment=False, seed=seed)

    encoder = None
    meta_key = config.model["film_metadata_key"]
    if config.model["architecture"] == "film_unet":
        values = [s.metadata[meta_key] for s in train_subjects if meta_key in s.metadata]
        if not values:
            raise VoxsegError(f"no training subject has metadata key {meta_key!r}")
        encoder = MetadataEncoder().fit(values)

    if training_cfg["deterministic"]:
        torch.use_deterministic_algorithms(True)
    torch.manual_seed(seed)
    model = build_model(config.model_spec(),
                        metadata_dim=encoder.dim if encoder else None).to(device)
    if training_cfg["freeze_pattern"]:
        freeze_layers(model, training_cfg["freeze_pattern"])
    trainable = [p for p in model.parameters() if p.requires_grad]
    optimizer = torch.optim.Adam(trainable, lr=training_cfg["lr"]) if trainable else None
    loss_fn = build_loss(training_cfg["loss"]["name"], training_cfg["loss"]["params"])

    start_epoch = 1
    history = []
    best_metric = float("-inf")
    if training_cfg["resume"]:
        state = load_checkpoint(training_cfg["resume"])
        if state["config_fingerprint"] != config.fingerprint:
            raise CheckpointError(
                "resume refused: config fingerprint "
                f"{config.fingerprint[:12]} does not match checkpoint "
                f"{state['config_fingerprint'][:12]}"
            )
        model.load_state_dict(state["model_params"])
        if optimizer is not None:
            optimizer.load_state_dict(state["optimizer_state"])
        torch.set_rng_state(state["rng_state"])
        start_epoch = state["epoch"] + 1
        history = list(state["history"])
        best_metric = state["best_validation_metric"]
        logger.info("resumed from %s at epoch %d", training_cfg["resume"], start_epoch)

    balance = None
    if config.loader["balance_key"]:
        balance = _unit_balance_weights(train_ds.units, config.loader["balance_key"])

    if config.output["save_qc"] and train_ds.augment_specs:
        _write_qc(train_ds, out_dir)

    batch_size = training_cfg["batch_size"]
    mixup_beta = training_cfg["mixup_beta"]
    epochs = training_cfg["epochs"]

    for epoch in range(start_epoch, epochs + 1):
        started = time.time()
        model.train()
        train_ds.set_epoch(epoch)
        order = train_ds.batch_order(epoch, balance)
        epoch_losses = []
        for b, start in enumerate(range(0, len(order), batch_size)):
            units = [train_ds.fetch(int(i)) for i in order[start:start + batch_size]]
            images, labels, meta = collate(units, encoder, meta_key)
            if labels is None:
                raise VoxsegError("training units lack labels")
            availability = _availability_batch(units, config, epoch - 1)
            if mixup_beta is not None and images.shape[0] >= 2:
                images, labels, _ = mixup_batch(
                    images, labels, mixup_beta, derive_seed(seed, "mixup", epoch, b)
                )
            images, labels = images.to(device), labels.to(device)
            pred = _forward_batch(model, images, meta, availability)
            loss = loss_fn(pred, labels)
            if not torch.isfinite(loss):
                raise VoxsegError(
                    f"non-finite loss {loss.item()} at epoch {epoch} batch {b}"
                )
            if optimizer is not None:
                optimizer.zero_grad()
                loss.backward()
                optimizer.step()
            epoch_losses.append(loss.item())

        val_loss, val_dice = _evaluate_epoch(
            model, val_ds, loss_fn, encoder, meta_key, batch_size, config
        )
        history.append({
            "epoch": epoch,
            "train_loss": float(np.mean(epoch_losses)),
            "val_loss": val_loss,
            "val_dice": val_dice,
            "seconds": time.time() - started,
        })
        write_history_csv(history, out_dir / "history.csv")

        if val_dice > best_metric:
            best_metric = val_dice
            save_model(out_dir / "best_model", model, encoder)
            (out_dir / "best_model" / "config.json").write_text(json.dumps(config.raw))

        save_checkpoint({
            "epoch": epoch,
            "model_params": model.state_dict(),
            "optimizer_state": optimizer.state_dict() if optimizer else {},
            "rng_state": torch.get_rng_state(),
            "best_validation_metric": best_metric,
            "config_fingerprint": config.fingerprint,
            "history": history,
        }, out_dir / f"checkpoint_epoch_{epoch}")
        logger.info("epoch %d: train %.4f val %.4f dice %.4f", epoch,
                    history[-1]["train_loss"], val_loss, val_dice)

    save_model(out_dir / "final_model", model, encoder)
    (out_dir / "final_model" / "config.json").write_text(json.dumps(config.raw))
    if config.output["save_curves"]:
        render_training_curves(history, out_dir)
    return model, history


def resume_training(checkpoint_path, config: ExperimentConfig):
    """Continue a run from a checkpoint file (convenience wrapper)."""
    raw = dict(config.raw)
    raw["training"] = dict(raw["training"], resume=str(checkpoint_path))
    return run_training(ExperimentConfig(raw))


# ---------------------------------------------------------------------------
# grid launcher
# ---------------------------------------------------------------------------


def _final_metrics(run_dir: Path) -> dict:
    hist = run_dir / "history.csv"
    if not hist.exists():
        return {}
    with open(hist, newline="") as fh:
        rows = list(csv.DictReader(fh))
    return rows[-1] if rows else {}


def automate_grid(config_path, grid: dict, devices, out_dir=None) -> Path:
    """Cartesian-product launcher over config overrides.

    Runs execute as independent `train` subprocesses, assigned round-robin
    to ``devices`` (one worker thread per device, its runs sequential). A
    failing run records its error in the summary without stopping siblings.
    Returns the path of the merged ``grid_results.csv``.
    """
    base = load_config(config_path)
    out_dir = Path(out_dir or base.output["path"])
    out_dir.mkdir(parents=True, exist_ok=True)
    devices = list(devices) or ["cpu"]

    keys = sorted(grid)
    combos = [dict(zip(keys, values))
              for values in itertools.product(*(grid[k] for k in keys))] or [{}]

    runs = []
    for i, overrides in enumerate(combos):
        run_dir = out_dir / f"grid_run_{i}"
        raw = override_config(base.raw, overrides)
        raw["output"] = dict(raw["output"], path=str(run_dir))
        raw["training"] = dict(raw["training"], resume=None)
        ExperimentConfig(raw)  # reject invalid overrides before any launch
        run_dir.mkdir(parents=True, exist_ok=True)
        cfg_path = run_dir / "config.json"
        cfg_path.write_text(json.dumps(raw, indent=2))
        runs.append({
            "run": i,
            "overrides": json.dumps(overrides, sort_keys=True),
            "device": devices[i % len(devices)],
            "config": cfg_path,
            "dir": run_dir,
        })

    def execute(run):
        env = dict(os.environ, VOXSEG_DEVICE=run["device"])
        proc = subprocess.run(
            [sys.executable, "-m", "voxseg", "train", "-c", str(run["config"])],
            env=env, capture_output=True, text=True,
        )
        if proc.returncode == 0:
            run["status"] = "ok"
            run["error"] = ""
        else:
            tail = (proc.stderr or proc.stdout).strip().splitlines()
            run["status"] = "error"
            run["error"] = tail[-1] if tail else f"exit code {proc.returncode}"
            logger.warning("grid run %d failed: %s", run["run"], run["error"])
        metrics = _final_metrics(run["dir"])
        run["val_loss"] = metrics.get("val_loss", "")
        run["val_dice"] = metrics.get("val_dice", "")

    threads = []
    for d, device in enumerate(devices):
        assigned = [run for i, run in enumerate(runs) if i % len(devices) == d]
        if not assigned:
            continue

        def work(batch=assigned):
            for run in batch:
                execute(run)

        t = threading.Thread(target=work)
        t.start()
        threads.append(t)
    for t in threads:
        t.join()

    results = out_dir / "grid_results.csv"
    with open(results, "w", newline="") as fh:
        writer = csv.DictWriter(fh, fieldnames=(
            "run", "overrides", "device", "status", "val_loss", "val_dice", "error"
        ))
        writer.writeheader()
        for run in runs:
            writer.writerow({k: run[k] for k in writer.fieldnames})
    return results
