"""Shapes of the attention maps one HAT stage produces, for a few stage geometries."""
import argparse

import numpy as np

from hatbench.attention import capture_attention
from hatbench.hat import HatStageConfig, hat_stage, init_hat_stage
from hatbench.params import ParamFactory
from hatbench.tensor import Tensor, no_grad

GEOMETRIES = [(14, 7, 4), (14, 7, 1), (28, 7, 4), (56, 7, 4), (7, 7, 4)]


def main():
    ap = argparse.ArgumentParser(description=__doc__)
    ap.add_argument("--d", type=int, default=8)
    args = ap.parse_args()
    for H, k, L in GEOMETRIES:
        cfg = HatStageConfig(H=H, k=k, L=L, d=args.d, heads=2)
        params = init_hat_stage(cfg, ParamFactory(0))
        with no_grad(), capture_attention() as maps:
            hat_stage(Tensor(np.zeros((1, H, H, args.d))), cfg, params)
        shapes = ", ".join(f"{m.shape[0]}x{m.shape[-2]}x{m.shape[-1]}" for m in maps)
        print(f"H={H:<3} k={k} L={L} windows={cfg.n_windows:<3} L_eff={cfg.L_eff}  maps: {shapes}")


if __name__ == "__main__":
    main()
