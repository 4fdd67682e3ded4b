"""A small end-to-end CLI run shared by the CLI and acceptance tests."""
from pathlib import Path

from deepntl.cli import cli_main

TOY_CONFIG = """\
tile_h = 8
tile_w = 8
n_points = 6
min_lit = 0.05
model_c = 2
f3 = 1,2,2,1
hstar = 2,2,2,1
gstar = 4,4,1,1
f1 = 4,1,1,2
epochs = 2
"""


def run(*argv) -> int:
    return cli_main([str(a) for a in argv])


def toy_chain(root: Path, seed: int = 7) -> dict:
    """synth -> sample -> dataset build -> dataset split -> train.

    Returns the paths of every artifact, keyed by step.
    """
    root.mkdir(parents=True, exist_ok=True)
    conf = root / "toy.conf"
    conf.write_text(TOY_CONFIG)
    g = ["--config", conf, "--seed", seed]
    scene = root / "scene"
    assert run("synth", "--rows", 32, "--cols", 32, "--frames", 3, "--out", scene, *g) == 0
    points = root / "points.csv"
    assert run("sample", "--dmsp-ref", scene / "dmsp_1.ntlr", "--viirs-ref",
               scene / "viirs_1.ntlr", "--out", points, *g) == 0
    ds = root / "ds"
    targets = []
    for k in range(3):
        targets += ["--target", f"{2013 + k}F15={scene / f'dmsp_{k}.ntlr'},"
                                f"{scene / f'viirs_{k}.ntlr'}"]
    assert run("dataset", "build", "--points", points, "--dmsp-ref", scene / "dmsp_1.ntlr",
               "--viirs-ref", scene / "viirs_1.ntlr", *targets, "--out", ds, *g) == 0
    split = root / "split.csv"
    assert run("dataset", "split", "--manifest", ds / "manifest.csv", "--out", split,
               "--train-frac", 0.75, *g) == 0
    model = root / "model"
    assert run("train", "--manifest", split, "--out", model, *g) == 0
    return {"synth": sorted(scene.iterdir()), "sample": [points], "split": [split],
            "train": [model / "checkpoint.ntlc", model / "last.ntlc", model / "loss_log.csv"],
            "scene": scene, "model": model}
