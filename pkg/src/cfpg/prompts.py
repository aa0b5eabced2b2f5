"""Prompt templates on disk and the helpers that fill them."""
from __future__ import annotations

import re
import string
from dataclasses import dataclass
from functools import lru_cache
from importlib import resources
from pathlib import Path
from typing import Sequence

from .backends import Backend, ChatRequest

_SECTION = re.compile(r"^\[(system|user)\]\s*$", re.MULTILINE)


class TemplateError(ValueError):
    pass


@dataclass(frozen=True)
class Template:
    name: str
    version: str
    system: str
    user: str

    @property
    def placeholders(self) -> set[str]:
        fmt = string.Formatter()
        return {f for part in (self.system, self.user) for _, f, _, _ in fmt.parse(part) if f}

    def render(self, backend: Backend, **values) -> ChatRequest:
        missing = self.placeholders - values.keys()
        if missing:
            raise TemplateError(f"template {self.name!r} needs {sorted(missing)}")
        overrides = {}
        if "max_sentences" in values and values["max_sentences"] is not None:
            overrides["max_output_sentences"] = int(values["max_sentences"])
        system = self.system.format_map(values).strip() or None
        return backend.request(self.user.format_map(values).strip(), system, **overrides)


def parse_template(name: str, text: str) -> Template:
    version = "unversioned"
    body_lines = []
    for line in text.splitlines():
        if line.startswith("#") and not body_lines:
            m = re.match(r"#\s*version:\s*(\S+)", line)
            if m:
                version = m.group(1)
            continue
        body_lines.append(line)
    body = "\n".join(body_lines)
    parts = _SECTION.split(body)
    sections = dict(zip(parts[1::2], parts[2::2]))
    if "user" not in sections:
        raise TemplateError(f"template {name!r} has no [user] section")
    return Template(name, version, sections.get("system", "").strip(), sections["user"].strip())


class Templates:
    """Looks up ``<name>.txt`` in ``template_dir`` first, then the packaged defaults."""

    def __init__(self, template_dir: str | Path | None = None):
        self.template_dir = Path(template_dir) if template_dir else None
        self._cache: dict[str, Template] = {}

    def __getitem__(self, name: str) -> Template:
        if name not in self._cache:
            self._cache[name] = parse_template(name, self._read(name))
        return self._cache[name]

    def _read(self, name: str) -> str:
        if self.template_dir is not None:
            path = self.template_dir / f"{name}.txt"
            if path.exists():
                return path.read_text(encoding="utf-8")
        return _packaged(name)

    def versions(self) -> dict[str, str]:
        names = sorted(p.name[:-4] for p in resources.files("cfpg").joinpath("templates").iterdir() if p.name.endswith(".txt"))
        return {n: self[n].version for n in names}


@lru_cache(maxsize=None)
def _packaged(name: str) -> str:
    path = resources.files("cfpg").joinpath("templates", f"{name}.txt")
    if not path.is_file():
        raise TemplateError(f"no template named {name!r}")
    return path.read_text(encoding="utf-8")


DEFAULT_TEMPLATES = Templates()


def render_prefix(sentences: Sequence[str], window: int = 40) -> str:
    """The last ``window`` sentences, one per line, under a one-line note on older text."""
    sentences = list(sentences)
    if not sentences:
        return "(the story has not started yet)"
    if len(sentences) <= window:
        return "\n".join(sentences)
    older = len(sentences) - window
    synopsis = f"[{older} earlier sentences omitted; the story opened: {sentences[0]}]"
    return "\n".join([synopsis, *sentences[-window:]])


def render_payoffs(payoffs: Sequence[str]) -> str:
    if not payoffs:
        return ""
    lines = ["Narrative requirements for this scene (resolve each one explicitly):"]
    lines += [f"{i}. {p}" for i, p in enumerate(payoffs, 1)]
    return "\n".join(lines) + "\n"
