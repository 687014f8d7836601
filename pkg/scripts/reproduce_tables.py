"""Run the Monte Carlo study configs and print MSE / FP / FN tables.

    python scripts/reproduce_tables.py                      # both designs, M from config
    python scripts/reproduce_tables.py --M 200 --workers 4  # full-size run
"""

import argparse
import time
from dataclasses import replace
from pathlib import Path

from tvrecur.cli import parse_study_conf
from tvrecur.evaluate import run_study, write_study_csv
from tvrecur.simulate import calibrate_rates

HERE = Path(__file__).resolve().parent


def run_config(path, M=None, workers=1):
    cfgs, opts, calibrate = parse_study_conf(Path(path).read_text())
    if calibrate:
        cal = calibrate_rates(cfgs[0], opts["pobs"], reps=opts["reps"], ratio=opts["ratio"])
        print(f"{Path(path).name}: a_D = a_C = {cal.a_D:.4f} (p_obs {cal.p_obs:.3f})")
        cfgs = [replace(c, a_D=cal.a_D, a_C=cal.a_C) for c in cfgs]
    results = []
    for cfg in cfgs:
        t0 = time.perf_counter()
        res = run_study(cfg, opts["estimators"], M or opts["M"], opts["lambda"], opts["fuse_tol"], workers=workers)
        results.append(res)
        print(f"  n={cfg.n:5d}  lambda={res.lam:.4g}  ({time.perf_counter() - t0:.0f}s)")
        for est, s in res.summary.items():
            print(f"    {est:14s} mse={s.mse:9.4f}  fp={s.mean_fp:.2f}  fn={s.mean_fn:.2f}  failures={s.failures}")
    return results


def main():
    ap = argparse.ArgumentParser(description=__doc__.splitlines()[0])
    ap.add_argument("configs", nargs="*", default=[HERE / "study_mult.conf", HERE / "study_add.conf"])
    ap.add_argument("--M", type=int, default=None, help="override the replication count")
    ap.add_argument("--workers", type=int, default=1)
    ap.add_argument("--out-dir", type=Path, default=Path("."))
    args = ap.parse_args()
    for path in args.configs:
        results = run_config(path, args.M, args.workers)
        out = args.out_dir / (Path(path).stem + ".csv")
        write_study_csv(results, out)
        print(f"  -> {out}")


if __name__ == "__main__":
    main()
