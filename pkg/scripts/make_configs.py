"""Regenerate the JSON configs under configs/ from the dataclass defaults."""

import json
from dataclasses import replace
from pathlib import Path

from epl.experiments import paired_base, paired_phantom
from epl.trainer import ablation_configs, supervised_config

ROOT = Path(__file__).resolve().parent.parent / "configs"


def dump(path: Path, doc: dict) -> None:
    path.parent.mkdir(parents=True, exist_ok=True)
    path.write_text(json.dumps(doc, indent=2, sort_keys=True) + "\n")
    print(path.relative_to(ROOT.parent))


def main():
    base = paired_base()
    dump(ROOT / "epl.json", base.to_dict())
    dump(ROOT / "supervised.json", supervised_config(base).to_dict())
    dump(ROOT / "smoke.json", replace(base, iterations=5, checkpoint_every=5).to_dict())
    dump(ROOT / "phantom.json", paired_phantom().to_dict())
    for i, (name, cfg) in enumerate(ablation_configs(base).items()):
        slug = name.lstrip("+").lower()
        dump(ROOT / "ablation" / f"{i}_{slug}.json", cfg.to_dict())


if __name__ == "__main__":
    main()
