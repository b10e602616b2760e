"""Run configuration files.

A run config is a JSON object::

    {
      "model":  {... ModelConfig fields ...},
      "regime": {... RegimeConfig fields ...},
      "data":   {"synth": {... SynthSpec fields ...}}
                | {"dir": "<folder with train.tsv and eval.tsv>"}
                | {"train": "<tsv>", "eval": "<tsv>"},
      "seeds":  [0, 1, 2]
    }

Every section is optional except ``data``. ``model.vocab_size`` and
``model.n_classes`` are filled in from the data. Unknown keys are rejected.
Relative paths are resolved against the config file's folder.
"""

from __future__ import annotations

import dataclasses
import json
from dataclasses import dataclass, field
from pathlib import Path

from .data import EncodedData, LabeledText, SynthSpec, Vocab, generate_synthetic, load_tsv
from .model import ModelConfig
from .training import RegimeConfig

TOP_KEYS = {"model", "regime", "data", "seeds"}
DATA_KINDS = ({"synth"}, {"dir"}, {"train", "eval"})


def _strict(d, known, where):
    if not isinstance(d, dict):
        raise ValueError(f"{where} must be a JSON object")
    extra = set(d) - set(known)
    if extra:
        raise ValueError(f"unknown {where} keys: {sorted(extra)}")


@dataclass
class Dataset:
    train: list[LabeledText]
    eval: list[LabeledText]
    vocab: Vocab
    n_classes: int

    def encoded(self, max_len: int) -> tuple[EncodedData, EncodedData]:
        return (EncodedData.from_records(self.train, self.vocab, max_len),
                EncodedData.from_records(self.eval, self.vocab, max_len))


@dataclass
class RunConfig:
    model: dict = field(default_factory=dict)
    regime: RegimeConfig = field(default_factory=RegimeConfig)
    data: dict = field(default_factory=dict)
    seeds: list[int] = field(default_factory=lambda: [0])
    base_dir: Path = field(default=Path("."), compare=False)

    @classmethod
    def from_dict(cls, d: dict, base_dir=".") -> "RunConfig":
        _strict(d, TOP_KEYS, "config")
        if "data" not in d:
            raise ValueError("config needs a data section")
        data = d["data"]
        if not isinstance(data, dict) or set(data) not in DATA_KINDS:
            raise ValueError('data must be {"synth": {...}}, {"dir": ...} or {"train": ..., "eval": ...}')
        if "synth" in data:
            data = {"synth": SynthSpec.from_dict(data["synth"]).to_dict()}
        model = dict(d.get("model", {}))
        _strict(model, {f.name for f in dataclasses.fields(ModelConfig)}, "model")
        regime = RegimeConfig.from_dict(d.get("regime", {}))
        seeds = d.get("seeds", [regime.seed])
        if (not isinstance(seeds, list) or not seeds
                or not all(isinstance(s, int) and not isinstance(s, bool) for s in seeds)):
            raise ValueError("seeds must be a non-empty list of integers")
        if len(set(seeds)) != len(seeds):
            raise ValueError("seeds must be distinct")
        return cls(model, regime, data, list(seeds), Path(base_dir))

    @classmethod
    def load(cls, path) -> "RunConfig":
        path = Path(path)
        try:
            d = json.loads(path.read_text(encoding="utf-8"))
        except json.JSONDecodeError as err:
            raise ValueError(f"{path}: invalid JSON ({err})") from None
        return cls.from_dict(d, path.parent)

    def _path(self, p) -> Path:
        p = Path(p)
        return p if p.is_absolute() else self.base_dir / p

    def load_data(self) -> Dataset:
        if "synth" in self.data:
            train, evl = generate_synthetic(SynthSpec(**self.data["synth"]))
        elif "dir" in self.data:
            root = self._path(self.data["dir"])
            train, evl = load_tsv(root / "train.tsv"), load_tsv(root / "eval.tsv")
        else:
            train, evl = load_tsv(self._path(self.data["train"])), load_tsv(self._path(self.data["eval"]))
        if not train:
            raise ValueError("training split is empty")
        k = 1 + max(r.label for r in train + evl)
        if "synth" in self.data:
            k = self.data["synth"]["n_classes"]
        return Dataset(train, evl, Vocab.build(train), k)

    def model_config(self, dataset: Dataset) -> ModelConfig:
        derived = {"vocab_size": len(dataset.vocab), "n_classes": dataset.n_classes}
        for key, value in derived.items():
            if key in self.model and self.model[key] != value:
                raise ValueError(f"model.{key}={self.model[key]} but the data implies {value}")
        return ModelConfig.from_dict({**self.model, **derived})

    def resolved(self, dataset: Dataset) -> dict:
        """The config with every default filled in, as echoed beside outputs."""
        regime = dataclasses.replace(self.regime, seed=self.seeds[0])
        return {"model": self.model_config(dataset).to_dict(), "regime": regime.to_dict(),
                "data": self.data, "seeds": self.seeds}


def dump_json(obj) -> str:
    return json.dumps(obj, sort_keys=True, indent=2) + "\n"
