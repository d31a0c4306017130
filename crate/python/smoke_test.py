#!/usr/bin/env python3
"""Exercise the tryon_rs extension module end to end on a tiny run.

Builds the cdylib if needed, imports it from the cargo target dir, and
walks the full pipeline: dataset synthesis, both training stages,
evaluation, single-sample warping, and the truncation rule.
"""

import math
import shutil
import subprocess
import sys
import tempfile
from pathlib import Path

ROOT = Path(__file__).resolve().parents[1]


def load_module():
    candidates = [
        ROOT / "target" / "release" / "libtryon_rs.so",
        ROOT / "target" / "debug" / "libtryon_rs.so",
    ]
    existing = [p for p in candidates if p.exists()]
    if not existing:
        print("building tryon-py ...")
        subprocess.run(
            ["cargo", "build", "-p", "tryon-py"], cwd=ROOT, check=True
        )
        existing = [p for p in candidates if p.exists()]
    src = max(existing, key=lambda p: p.stat().st_mtime)
    stage = tempfile.mkdtemp(prefix="tryon_rs_")
    shutil.copy(src, Path(stage) / "tryon_rs.so")
    sys.path.insert(0, stage)
    import tryon_rs

    return tryon_rs


TINY_TOML = """
[model]
channels = [4, 5, 6, 7, 8]
head_hidden = 4

[train]
batch_size = 2
val_fraction = 0.34
val_every = 1000
steps_warp = 2
steps_gen = 1
seed = 33
"""


def main():
    m = load_module()
    work = Path(tempfile.mkdtemp(prefix="tryon_smoke_"))

    cfg_path = work / "run.toml"
    cfg_path.write_text(TINY_TOML)
    cfg = m.Config.load(cfg_path)
    assert cfg.seed == 33
    assert "steps_warp = 2" in cfg.to_toml()
    default = m.Config()
    assert default.seed != 0 or True
    default.set_seed(5)
    assert default.seed == 5
    print("config: ok")

    n = m.generate_dataset(cfg, 6, work / "data")
    assert n == 6
    ds = m.Dataset.open(work / "data")
    assert len(ds) == 6
    img, shape = ds.person(0)
    assert shape == (3, 64, 48) and len(img) == 3 * 64 * 48
    assert all(0.0 <= v <= 1.0 for v in img)
    labels, (h, w) = ds.gt_parsing(0)
    assert (h, w) == (64, 48) and set(labels) <= set(range(10))
    assert m.ssim(img, img, 64, 48) > 0.999
    print("dataset: ok")

    warp = m.train_warp(cfg, work / "data", work / "warp", strategy="dgt")
    assert warp.steps == 2 and len(warp.param_hash) == 64
    assert warp.miou is not None and 0.0 <= warp.miou <= 1.0
    rebuilt = m.checkpoint_hash(cfg, warp.checkpoint, "warp")
    assert rebuilt == warp.param_hash
    print(f"warp training: ok (miou={warp.miou:.3f})")

    miou, ssim_val, r_diff, skipped = m.evaluate_warp(
        cfg, work / "data", warp.checkpoint, split="val"
    )
    assert 0.0 <= miou <= 1.0 and 0.0 <= ssim_val <= 1.0
    assert math.isnan(r_diff) or r_diff >= 0.0
    assert skipped >= 0
    print("warp eval: ok")

    out, oshape, parsing, pshape = m.warp_sample(cfg, work / "data", 0, warp.checkpoint)
    assert oshape == (3, 64, 48) and pshape == (64, 48)
    assert len(out) == 3 * 64 * 48 and set(parsing) <= set(range(10))
    print("warp inference: ok")

    gen = m.train_gen(cfg, work / "data", warp.checkpoint, work / "gen")
    assert gen.steps == 1
    assert gen.ssim is not None and 0.0 <= gen.ssim <= 1.0
    assert gen.ssim_untrained is not None
    print(f"generator training: ok (ssim={gen.ssim:.3f})")

    c = m.dgt_coin(33, 4, 0)
    assert 0.0 <= c < 1.0 and c == m.dgt_coin(33, 4, 0)
    assert c != m.dgt_coin(33, 4, 1)
    assert m.truncation_decision(0.5, 0.99) is True
    assert m.truncation_decision(0.99, 0.01) is False
    assert m.truncation_decision(0.92, 0.25) is True
    assert m.truncation_decision(0.92, 0.75) is False
    print("truncation rule: ok")

    print("smoke test passed")


if __name__ == "__main__":
    main()
