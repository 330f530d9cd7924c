"""Flat key-value run configuration files.

Lines are ``section.key = value`` with ``#`` comments; sections are
``network``, ``train``, and ``data``. Unknown keys are rejected. The
resolved configuration (defaults filled in) is embedded in every run's
outputs.
"""

from dataclasses import replace

from .blocks import BlockConfig
from .data import PhantomSpec
from .network import NetworkConfig
from .train import TrainManifest


class ConfigError(ValueError):
    pass


_NETWORK_KEYS = {
    "in_channels": int, "num_classes": int, "base_width": int,
    "width_multiplier": int, "scales": int, "width_scale": float,
    "dropout_rate": float,
    "kind": str, "m": int, "r": int,
    "per_scale_d": "int_list", "per_scale_p": "int_list",
}
_TRAIN_KEYS = {
    "seed": int, "iterations": int, "batch_size": int, "loss": str,
    "augment": "bool", "checkpoint_every": int, "lr": float, "weight_decay": float,
}
_DATA_KEYS = {
    "size": int, "channels": int, "noise_sigma": float, "seed": int,
}


def _convert(kind, raw, key):
    try:
        if kind is int:
            return int(raw)
        if kind is float:
            return float(raw)
        if kind is str:
            return raw
        if kind == "bool":
            if raw.lower() in ("1", "true", "yes"):
                return True
            if raw.lower() in ("0", "false", "no"):
                return False
            raise ValueError(raw)
        if kind == "int_list":
            return tuple(int(v) for v in raw.split(","))
    except ValueError as e:
        raise ConfigError(f"bad value for {key}: {raw!r}") from e
    raise AssertionError(kind)


def parse_config_text(text):
    """Returns (NetworkConfig, TrainManifest, PhantomSpec)."""
    values = {"network": {}, "train": {}, "data": {}}
    schemas = {"network": _NETWORK_KEYS, "train": _TRAIN_KEYS, "data": _DATA_KEYS}
    for lineno, line in enumerate(text.splitlines(), 1):
        line = line.split("#", 1)[0].strip()
        if not line:
            continue
        if "=" not in line:
            raise ConfigError(f"line {lineno}: expected 'section.key = value'")
        key, raw = (s.strip() for s in line.split("=", 1))
        if "." not in key:
            raise ConfigError(f"line {lineno}: key {key!r} missing section prefix")
        section, name = key.split(".", 1)
        if section not in schemas:
            raise ConfigError(f"line {lineno}: unknown section {section!r}")
        if name not in schemas[section]:
            raise ConfigError(f"line {lineno}: unknown key {key!r}")
        values[section][name] = _convert(schemas[section][name], raw, key)

    net_kwargs = dict(values["network"])
    block = BlockConfig(kind=net_kwargs.pop("kind", "rr_segse"),
                        m=net_kwargs.pop("m", 4),
                        r=net_kwargs.pop("r", 10))
    try:
        net_cfg = NetworkConfig(block=block, **net_kwargs)
        manifest = TrainManifest(**values["train"])
        phantom = PhantomSpec(**values["data"])
    except (ValueError, TypeError) as e:
        raise ConfigError(str(e)) from e
    if net_cfg.in_channels != phantom.channels:
        raise ConfigError(f"network.in_channels={net_cfg.in_channels} does not match "
                          f"data.channels={phantom.channels}")
    return net_cfg, manifest, phantom


def parse_config_file(path):
    return parse_config_text(path.read_text())


def resolve_config_text(net_cfg: NetworkConfig, manifest: TrainManifest, phantom: PhantomSpec):
    """Full flat rendering of a configuration, defaults included."""
    lines = []
    lines.append(f"network.in_channels = {net_cfg.in_channels}")
    lines.append(f"network.num_classes = {net_cfg.num_classes}")
    lines.append(f"network.base_width = {net_cfg.base_width}")
    lines.append(f"network.width_multiplier = {net_cfg.width_multiplier}")
    lines.append(f"network.scales = {net_cfg.scales}")
    lines.append(f"network.width_scale = {net_cfg.width_scale!r}")
    lines.append(f"network.dropout_rate = {net_cfg.dropout_rate!r}")
    lines.append(f"network.kind = {net_cfg.block.kind}")
    lines.append(f"network.m = {net_cfg.block.m}")
    lines.append(f"network.r = {net_cfg.block.r}")
    lines.append("network.per_scale_d = " + ",".join(str(v) for v in net_cfg.per_scale_d))
    lines.append("network.per_scale_p = " + ",".join(str(v) for v in net_cfg.per_scale_p))
    lines.append(f"train.seed = {manifest.seed}")
    lines.append(f"train.iterations = {manifest.iterations}")
    lines.append(f"train.batch_size = {manifest.batch_size}")
    lines.append(f"train.loss = {manifest.loss}")
    lines.append(f"train.augment = {'true' if manifest.augment else 'false'}")
    lines.append(f"train.checkpoint_every = {manifest.checkpoint_every}")
    lines.append(f"train.lr = {manifest.lr!r}")
    lines.append(f"train.weight_decay = {manifest.weight_decay!r}")
    lines.append(f"data.size = {phantom.size}")
    lines.append(f"data.channels = {phantom.channels}")
    lines.append(f"data.noise_sigma = {phantom.noise_sigma!r}")
    lines.append(f"data.seed = {phantom.seed}")
    return "\n".join(lines) + "\n"
