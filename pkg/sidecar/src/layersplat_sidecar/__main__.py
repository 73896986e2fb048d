"""Run the sidecar: `python -m layersplat_sidecar` or `layersplat-sidecar`.

Port comes from --port or the LAYERGS_SIDECAR_PORT environment variable
(default 8588); the default backend is the deterministic procedural one,
pass --backend diffusion for the real model (requires the `diffusion`
extra and downloaded weights).
"""
from __future__ import annotations

import argparse
import os


def main(argv=None) -> int:
    parser = argparse.ArgumentParser(prog="layersplat-sidecar")
    parser.add_argument("--host", default="127.0.0.1")
    parser.add_argument("--port", type=int,
                        default=int(os.environ.get("LAYERGS_SIDECAR_PORT", "8588")))
    parser.add_argument("--backend", choices=("procedural", "diffusion"),
                        default="procedural")
    parser.add_argument("--model-id", default=None)
    args = parser.parse_args(argv)

    import uvicorn
    from .app import create_app
    app = create_app(backend_kind=args.backend, model_id=args.model_id,
                     defer_load=True)
    uvicorn.run(app, host=args.host, port=args.port)
    return 0


if __name__ == "__main__":
    raise SystemExit(main())
