#!/usr/bin/env python3
"""One-command annotation demo: synthetic workspace + controller + protocol.

Generates a small layered workspace (unless --workspace points at an existing
one), writes a default run config and the retina annotation protocol next to
it, and serves the whole stack. Dispatch the seed query with

    curl -X POST http://127.0.0.1:8000/iteration

then fetch it from /queries/latest and open a session per sample under
/sessions. Pass --frontend <dir> to also serve a built UI bundle at /ui.
"""

import argparse
from pathlib import Path

import uvicorn

from aloop.config import parse_run_config
from aloop.controller import CycleController, build_app
from aloop.protocol import SessionEngine, parse_protocol
from aloop.simlab import SyntheticSpec, generate_synthetic

DEMO_CFG = """\
ACTIVE_LEARNING:
    strategy: ENT
    seed_size: 4
    query_size: 3
    rounds: 4
    mc_passes: 4
    rng_seed: 0
MODEL:
    TRUNK:
        NAME: unet
        UNET:
            n_channels: 1
            base_channels: 8
            dropout: 0.5
DATA:
    TRAIN:
        BATCHSIZE_PER_REPLICA: 8
        TRANSFORMS:
        - name: ToTensor
        - name: Normalize
          mean: [0.5]
          std: [0.5]
OPTIMIZER:
    name: sgd
    momentum: 0.9
    lr: 0.15
    num_epochs: 12
LOSS:
    name: dice_loss
    dice_loss:
        softmax: True
        ignore_index: -1
"""

DEMO_PROTOCOL = """\
start:
    type: load
    dataloader: OCTLoader
    transitions:
        - next:
              target: seg_layer_1
seg_layer_1:
    type: octSegmentation
    question: layer_1
    annotation_type: line
    transitions:
        - "*":
              target: seg_layer_2
seg_layer_2:
    type: octSegmentation
    question: layer_2
    annotation_type: line
    transitions:
        - "*":
              target: seg_layer_3
seg_layer_3:
    type: octSegmentation
    question: layer_3
    annotation_type: line
    transitions:
        - "*":
              target: seg_layer_4
seg_layer_4:
    type: octSegmentation
    question: layer_4
    annotation_type: line
    transitions:
        - "*":
              target: quality
quality:
    type: select
    question: Image Quality
    options: [good, degraded, unusable]
    transitions:
        - "*":
              target: summary
summary:
    type: summary_oct
    question: Summary
    transitions:
        - "*":
              target: end
"""


def main():
    ap = argparse.ArgumentParser(description=__doc__,
                                 formatter_class=argparse.RawDescriptionHelpFormatter)
    ap.add_argument("--workspace", default="demo_workspace")
    ap.add_argument("--host", default="127.0.0.1")
    ap.add_argument("--port", type=int, default=8000)
    ap.add_argument("--frontend", default=None, help="static UI bundle to mount at /ui")
    args = ap.parse_args()

    ws = Path(args.workspace)
    if not (ws / "volumes").exists():
        # 5 intensity bands -> boundaries layer_1..layer_4, one per seg state
        generate_synthetic(SyntheticSpec(volumes=4, slices_per_volume=4, classes=5,
                                         rng_seed=0), ws)
        print(f"generated demo workspace at {ws.resolve()}")
    (ws / "run.yaml").write_text(DEMO_CFG)
    (ws / "protocol.yaml").write_text(DEMO_PROTOCOL)

    controller = CycleController(parse_run_config(DEMO_CFG), ws)
    engine = SessionEngine(parse_protocol(DEMO_PROTOCOL), store=controller.dm)
    app = build_app(controller, engine)
    if args.frontend:
        from fastapi.staticfiles import StaticFiles

        app.mount("/ui", StaticFiles(directory=args.frontend, html=True), name="ui")
        print(f"ui at http://{args.host}:{args.port}/ui/")
    print(f"api at http://{args.host}:{args.port} (POST /iteration to dispatch the seed)")
    uvicorn.run(app, host=args.host, port=args.port, log_level="info")


if __name__ == "__main__":
    main()
