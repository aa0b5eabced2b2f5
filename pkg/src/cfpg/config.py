"""Run configuration (YAML or JSON), backend construction, run directories."""
from __future__ import annotations

import dataclasses
import hashlib
import json
import os
import secrets
from dataclasses import dataclass, field
from datetime import datetime, timezone
from pathlib import Path

import yaml

from . import __version__
from .backends import BackendSet, Decoding, HTTPBackend, ScriptedBackend, cached, set_parallelism
from .core import SEGMENTER_VERSION
from .prompts import Templates


class ConfigError(ValueError):
    pass


@dataclass
class BackendConfig:
    endpoint: str | None = None
    model: str | None = None
    temperature: float = 0.0
    seed: int | None = None
    max_retries: int = 3
    api_key_env: str = "OPENAI_API_KEY"
    fixtures: str | None = None  # scripted mode: path to a fixture file


ROLES = ("generator", "judge", "extractor", "verifier_a", "verifier_b")


@dataclass
class RunConfig:
    mode: str = "scripted"  # scripted | live
    backends: dict[str, BackendConfig] = field(default_factory=dict)
    fixtures: str | None = None
    parallelism: int = 1
    cache_dir: str | None = None
    template_dir: str | None = None
    output_root: str = "runs"
    tolerance: int = 3
    window: int = 3
    fscr_window: int = 8
    k: int = 3
    min_gap: int = 2
    radius: int = 5
    prefix_window: int = 40
    max_output_sentences: int = 3
    no_extract: bool = False
    source: str | None = field(default=None, repr=False)

    def validate(self) -> "RunConfig":
        if self.mode not in ("scripted", "live"):
            raise ConfigError(f"mode must be 'scripted' or 'live', not {self.mode!r}")
        if self.tolerance < 0:
            raise ConfigError("tolerance must be >= 0")
        if self.parallelism < 1:
            raise ConfigError("parallelism must be >= 1")
        for name in ("window", "fscr_window", "min_gap", "radius", "prefix_window", "max_output_sentences"):
            if getattr(self, name) < 1:
                raise ConfigError(f"{name} must be >= 1")
        if self.k < 0:
            raise ConfigError("k must be >= 0")
        for role, bc in self.backends.items():
            if role not in ROLES:
                raise ConfigError(f"unknown backend role {role!r}; expected one of {ROLES}")
            if bc.temperature < 0:
                raise ConfigError(f"{role}: temperature must be >= 0")
            if bc.max_retries < 0:
                raise ConfigError(f"{role}: max_retries must be >= 0")
            if self.mode == "scripted" and (bc.endpoint or bc.model):
                raise ConfigError(f"{role}: scripted mode forbids endpoint/model fields")
            if self.mode == "live" and not (bc.endpoint and bc.model):
                raise ConfigError(f"{role}: live mode needs endpoint and model")
        if self.mode == "live" and "generator" not in self.backends:
            raise ConfigError("live mode needs at least a generator backend")
        return self

    def snapshot(self) -> dict:
        d = dataclasses.asdict(self)
        d.pop("source")
        return d

    def templates(self) -> Templates:
        return Templates(self.template_dir)


def _resolve(base: Path | None, value: str | None) -> str | None:
    if value is None or base is None or os.path.isabs(value):
        return value
    return str((base / value).resolve())


def config_from_dict(data: dict, base: Path | None = None) -> RunConfig:
    data = dict(data or {})
    known = {f.name for f in dataclasses.fields(RunConfig)} - {"source"}
    unknown = set(data) - known
    if unknown:
        raise ConfigError(f"unknown config keys: {sorted(unknown)}")
    raw_backends = data.pop("backends", {}) or {}
    backends = {}
    for role, bc in raw_backends.items():
        bc = bc or {}
        bad = set(bc) - {f.name for f in dataclasses.fields(BackendConfig)}
        if bad:
            raise ConfigError(f"unknown keys for backend {role!r}: {sorted(bad)}")
        bc = BackendConfig(**bc)
        bc.fixtures = _resolve(base, bc.fixtures)
        backends[role] = bc
    for key in ("fixtures", "cache_dir", "template_dir", "output_root"):
        if key in data:
            data[key] = _resolve(base, data[key])
    try:
        cfg = RunConfig(backends=backends, **data)
    except TypeError as e:
        raise ConfigError(str(e)) from e
    for name in ("tolerance", "window", "fscr_window", "k", "min_gap", "radius", "parallelism", "prefix_window", "max_output_sentences"):
        if not isinstance(getattr(cfg, name), int) or isinstance(getattr(cfg, name), bool):
            raise ConfigError(f"{name} must be an integer")
    return cfg.validate()


def load_config(path: str | os.PathLike) -> RunConfig:
    path = Path(path)
    if not path.exists():
        raise ConfigError(f"config file not found: {path}")
    text = path.read_text(encoding="utf-8")
    try:
        data = yaml.safe_load(text) if path.suffix in (".yaml", ".yml") else json.loads(text)
    except (yaml.YAMLError, json.JSONDecodeError) as e:
        raise ConfigError(f"cannot parse {path}: {e}") from e
    if data is not None and not isinstance(data, dict):
        raise ConfigError("config must be a mapping")
    cfg = config_from_dict(data or {}, base=path.parent.resolve())
    cfg.source = str(path)
    return cfg


def apply_overrides(cfg: RunConfig, **overrides) -> RunConfig:
    """Command-line flags win over the file; ``None`` means not given."""
    given = {k: v for k, v in overrides.items() if v is not None}
    return dataclasses.replace(cfg, **given).validate()


def build_backends(cfg: RunConfig) -> BackendSet:
    set_parallelism(cfg.parallelism)
    built = {}
    for role in ROLES:
        bc = cfg.backends.get(role) or cfg.backends.get("generator") or BackendConfig()
        decoding = Decoding(temperature=bc.temperature, seed=bc.seed)
        if cfg.mode == "scripted":
            path = bc.fixtures or cfg.fixtures
            if not path:
                raise ConfigError(f"{role}: scripted mode needs a fixtures file (top-level or per backend)")
            if not Path(path).exists():
                raise ConfigError(f"{role}: fixtures file not found: {path}")
            backend = ScriptedBackend.from_file(path, name=role, decoding=decoding)
        else:
            backend = HTTPBackend(bc.endpoint, bc.model, decoding, api_key_env=bc.api_key_env, max_retries=bc.max_retries)
        if cfg.cache_dir:
            backend = cached(backend, cfg.cache_dir)
        built[role] = backend
    if cfg.mode == "live" and (built["verifier_a"].identity, built["verifier_a"].decoding) == (
        built["verifier_b"].identity,
        built["verifier_b"].decoding,
    ):
        raise ConfigError("verifier_a and verifier_b must differ (model, endpoint, temperature or seed)")
    return BackendSet(
        generator=built["generator"],
        judge=built["judge"],
        extractor=built["extractor"],
        verifiers=(built["verifier_a"], built["verifier_b"]),
    )


def _file_hash(path: str | None) -> str | None:
    if not path or not Path(path).exists():
        return None
    return hashlib.sha256(Path(path).read_bytes()).hexdigest()


class RunDir:
    """A timestamped directory holding a manifest and every output of one command."""

    def __init__(self, path: Path, manifest: dict):
        self.path = path
        self.manifest = manifest

    @property
    def manifest_path(self) -> Path:
        return self.path / "manifest.json"

    def file(self, name: str) -> Path:
        return self.path / name

    def save(self) -> None:
        tmp = self.manifest_path.with_suffix(".tmp")
        tmp.write_text(json.dumps(self.manifest, indent=2, ensure_ascii=False) + "\n", encoding="utf-8")
        os.replace(tmp, self.manifest_path)

    def finish(self, status: str = "complete", backends: BackendSet | None = None, **extra) -> None:
        self.manifest["status"] = status
        self.manifest["finished"] = datetime.now(timezone.utc).isoformat()
        if backends is not None:
            self.manifest["cache_stats"] = backends.cache_stats()
        self.manifest.update(extra)
        self.save()

    @classmethod
    def open(cls, path: str | os.PathLike) -> "RunDir":
        path = Path(path)
        mf = path / "manifest.json"
        if not mf.exists():
            raise ConfigError(f"{path} is not a run directory (no manifest.json)")
        return cls(path, json.loads(mf.read_text(encoding="utf-8")))


def new_run(cfg: RunConfig, command: str, backends: BackendSet | None = None, root: str | os.PathLike | None = None, **inputs) -> RunDir:
    root = Path(root or cfg.output_root)
    try:
        root.mkdir(parents=True, exist_ok=True)
    except OSError as e:
        raise ConfigError(f"cannot create output root {root}: {e}") from e
    if not os.access(root, os.W_OK):
        raise ConfigError(f"output root {root} is not writable")
    stamp = datetime.now(timezone.utc).strftime("%Y%m%dT%H%M%S%fZ")
    while True:
        path = root / f"{stamp}-{command}-{secrets.token_hex(3)}"
        try:
            path.mkdir()
            break
        except FileExistsError:
            continue
    fixture_files = sorted({p for p in [cfg.fixtures, *(b.fixtures for b in cfg.backends.values())] if p})
    manifest = {
        "command": command,
        "status": "incomplete",
        "created": datetime.now(timezone.utc).isoformat(),
        "tool_version": __version__,
        "segmenter_version": SEGMENTER_VERSION,
        "template_versions": cfg.templates().versions(),
        "config": cfg.snapshot(),
        "backends": backends.identities() if backends else {},
        "fixture_hashes": {p: _file_hash(p) for p in fixture_files},
        "inputs": {k: {"path": str(v), "sha256": _file_hash(str(v))} for k, v in inputs.items() if v},
    }
    run = RunDir(path, manifest)
    (path / "config.json").write_text(json.dumps(cfg.snapshot(), indent=2, sort_keys=True) + "\n", encoding="utf-8")
    run.save()
    return run
