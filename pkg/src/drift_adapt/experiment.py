"""Stream evaluation, ablation modes and JSON reports."""
from __future__ import annotations

import json
import time
from dataclasses import asdict, dataclass, field
from pathlib import Path

import numpy as np

from .corruptions import Corruption
from .images import write_mask_image
from .metrics import ConfusionMatrix
from .model import NormMode, SegModel, forward, load_weights
from .synth import CLASS_NAMES, load_dataset, make_stream
from .tta import BnAdaptState, DmConfig, ImConfig, PrototypeBank, adapt_step

REPORT_VERSION = 1
MODES = ("source-only", "dm-only", "im-only", "full", "fixed-momentum")


@dataclass
class EvalReport:
    mode: str
    per_class_iou: list
    miou: float
    running_miou: list
    config: dict
    seed: int
    class_names: list = field(default_factory=list)
    pixel_accuracy: float = 0.0
    wall_time: float = 0.0
    report_version: int = REPORT_VERSION

    def to_dict(self, wall_time: bool = True) -> dict:
        d = asdict(self)
        if not wall_time:
            d.pop("wall_time")
        return d

    def to_json(self, wall_time: bool = True) -> str:
        return json.dumps(self.to_dict(wall_time), indent=2, sort_keys=True)


def mode_configs(mode: str, dm: DmConfig, im: ImConfig, momentum: float | None = None):
    """Map an ablation mode to (use_dm, use_im, dm_config, im_config)."""
    if mode == "source-only":
        return False, False, dm, im
    if mode == "dm-only":
        return True, False, dm, im
    if mode == "im-only":
        return False, True, dm, im
    if mode == "full":
        return True, True, dm, im
    if mode == "fixed-momentum":
        if momentum is None:
            raise ValueError("mode fixed-momentum needs a 'momentum' value")
        return (True, True, DmConfig(alpha0=momentum, gamma_dm=1.0),
                ImConfig(beta0=momentum, gamma_im=1.0, p0=im.p0, gamma_blend=im.gamma_blend, tau=im.tau))
    raise ValueError(f"unknown mode {mode!r}; expected one of {MODES}")


def evaluate_stream(model: SegModel, stream, mode: str = "full", dm: DmConfig = DmConfig(),
                    im: ImConfig = ImConfig(), momentum: float | None = None, monitor=None,
                    mask_dir=None, config_echo: dict | None = None, seed: int = 0) -> EvalReport:
    """Score predictions made online, batch by batch, in stream order.

    ``monitor(batch, step_output)`` is called after each adapted batch.
    """
    start = time.perf_counter()
    use_dm, use_im, dm_cfg, im_cfg = mode_configs(mode, dm, im, momentum)
    k = model.num_classes
    cm = ConfusionMatrix(k)
    running = []
    dm_state = BnAdaptState.from_model(model, dm_cfg)
    bank = PrototypeBank.empty(k, model.feature_dim, im_cfg)
    for batch in stream:
        if mode == "source-only":
            pred = forward(model, batch.images, NormMode.STORED).probs.argmax(axis=1)
        else:
            step = adapt_step(model, dm_state, bank, batch.images, im_cfg, use_dm, use_im)
            pred, dm_state, bank = step
            if monitor is not None:
                monitor(batch, step)
        cm.accumulate(batch.masks, pred)
        running.append(cm.iou()[1])
        if mask_dir is not None:
            mask_dir = Path(mask_dir)
            mask_dir.mkdir(parents=True, exist_ok=True)
            for sid, m in zip(batch.scene_ids, pred):
                write_mask_image(m, mask_dir / f"scene_{sid:04d}.ppm")
    per_class, miou = cm.iou()
    return EvalReport(
        mode=mode if momentum is None else f"{mode}({momentum})",
        per_class_iou=per_class,
        miou=miou,
        running_miou=running,
        config=config_echo or {},
        seed=seed,
        class_names=list(CLASS_NAMES[:k]),
        pixel_accuracy=cm.pixel_accuracy(),
        wall_time=time.perf_counter() - start,
    )


# ---------------------------------------------------------------------------
# file-driven experiments

DEFAULT_CONFIG = {
    "dataset": "data/manifest.json",
    "split": "test",
    "model": "model.dseg",
    "corruption": {"kind": "impulse_noise", "severity": 3},
    "dm": {"alpha0": 0.9, "gamma_dm": 0.95},
    "im": {"beta0": 0.9, "gamma_im": 0.95, "p0": 0.5, "gamma_blend": 0.2, "tau": 1.0},
    "mode": "full",
    "momentum": None,
    "seeds": {"order": 0, "corruption": 0},
    "batch_size": 8,
    "output": "report.json",
    "mask_dir": None,
}
_NESTED = {"corruption", "dm", "im", "seeds"}


class ConfigError(ValueError):
    pass


def resolve_config(user: dict | None = None) -> dict:
    """Merge ``user`` over the defaults, rejecting unknown keys by name."""
    cfg = json.loads(json.dumps(DEFAULT_CONFIG))
    user = user or {}
    unknown = sorted(set(user) - set(cfg))
    if unknown:
        raise ConfigError(f"unknown config keys: {', '.join(unknown)}")
    for key, value in user.items():
        if key in _NESTED and value is not None:
            if not isinstance(value, dict):
                raise ConfigError(f"config key '{key}' must be an object")
            bad = sorted(set(value) - set(cfg[key]))
            if bad:
                raise ConfigError(f"unknown config keys: {', '.join(f'{key}.{b}' for b in bad)}")
            cfg[key].update(value)
        else:
            cfg[key] = value
    if cfg["mode"] not in MODES:
        raise ConfigError(f"unknown mode {cfg['mode']!r}; expected one of {MODES}")
    return cfg


def run_experiment(config: dict) -> EvalReport:
    cfg = resolve_config(config)
    model_path = Path(cfg["model"])
    if not model_path.exists():
        raise FileNotFoundError(f"model file not found: {model_path}")
    dataset = load_dataset(cfg["dataset"])
    if cfg["split"] not in dataset.splits:
        raise ConfigError(f"split {cfg['split']!r} not in dataset (have {sorted(dataset.splits)})")
    model = load_weights(model_path)
    corruption = Corruption(cfg["corruption"]["kind"], int(cfg["corruption"]["severity"]),
                            int(cfg["seeds"]["corruption"]))
    stream = make_stream(dataset[cfg["split"]], int(cfg["batch_size"]), corruption, int(cfg["seeds"]["order"]))
    report = evaluate_stream(model, stream, cfg["mode"], DmConfig(**cfg["dm"]), ImConfig(**cfg["im"]),
                             momentum=cfg["momentum"], mask_dir=cfg["mask_dir"], config_echo=cfg,
                             seed=int(cfg["seeds"]["order"]))
    if cfg["output"]:
        out = Path(cfg["output"])
        out.parent.mkdir(parents=True, exist_ok=True)
        out.write_text(report.to_json())
    return report


ABLATION_RUNS = (("source-only", None), ("dm-only", None), ("im-only", None), ("full", None),
                 ("fixed-momentum", 0.1), ("fixed-momentum", 0.5), ("fixed-momentum", 0.9))


def run_ablation(config: dict) -> dict:
    """Every ablation mode on one stream; returns ``{label: miou}``."""
    base = resolve_config(config)
    results = {}
    for mode, momentum in ABLATION_RUNS:
        cfg = dict(base, mode=mode, momentum=momentum, output=None, mask_dir=None)
        report = run_experiment(cfg)
        results[report.mode] = report.miou
    return results
