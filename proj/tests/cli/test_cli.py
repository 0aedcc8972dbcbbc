"""End-to-end checks of the command-line tool: assign, estimate, simulate, calibrate."""

import csv
import json
import subprocess
import sys
import tempfile
import time
from pathlib import Path

import jsonschema

BIN = sys.argv[1]
ROOT = Path(sys.argv[2])
failures = []


def check(cond, what):
    print(("PASS " if cond else "FAIL ") + what)
    if not cond:
        failures.append(what)


def run(*args):
    return subprocess.run([BIN, *map(str, args)], capture_output=True, text=True)


def write_covariates(path, n, seed=3):
    import random

    rnd = random.Random(seed)
    with open(path, "w") as f:
        f.write("id,x1,x2,x3,site\n")
        for i in range(n):
            f.write(f"u{i},{rnd.gauss(0, 1)},{rnd.gauss(0, 1)},{rnd.gauss(0, 1)},{'AB'[i % 2]}\n")


def read_assignment(path):
    with open(path) as f:
        return {r["id"]: (int(r["group"]), int(r["d"])) for r in csv.DictReader(f)}


with tempfile.TemporaryDirectory() as tmp:
    tmp = Path(tmp)
    cov = tmp / "cov.csv"
    write_covariates(cov, 100)
    spec = json.loads((ROOT / "configs" / "pairs-mahalanobis.json").read_text())
    spec_path = tmp / "spec.json"
    spec_path.write_text(json.dumps(spec))

    out = tmp / "asg.csv"
    r = run("assign", "--spec", spec_path, "--data", cov, "--out", out)
    check(r.returncode == 0, "assign exits 0: " + r.stderr.strip())
    asg = read_assignment(out)
    groups = {}
    for g, d in asg.values():
        groups.setdefault(g, []).append(d)
    check(len(groups) == 50, "pairs design has 50 groups")
    check(sum(d for _, d in asg.values()) == 50, "exactly 50 treated")
    check(all(sorted(v) == [0, 1] for v in groups.values()), "one treated per pair")
    manifest = json.loads(Path(str(out) + ".manifest.json").read_text())
    check(manifest["draws_to_accept"] >= 1 and not manifest["exhausted"], "manifest records the accepted draw")

    r2 = run("assign", "--spec", spec_path, "--data", cov, "--out", tmp / "asg2.csv")
    check((tmp / "asg2.csv").read_text() == out.read_text(), "same seed gives the same assignment")

    inf_spec = dict(spec, region={"shape": "ellipsoid-mahalanobis", "eps": "inf"})
    (tmp / "inf.json").write_text(json.dumps(inf_spec))
    r = run("assign", "--spec", tmp / "inf.json", "--data", cov, "--out", tmp / "inf.csv")
    m = json.loads(Path(str(tmp / "inf.csv") + ".manifest.json").read_text())
    check(r.returncode == 0 and m["draws_to_accept"] == 1, "infinite threshold accepts the first draw")

    (tmp / "bad.json").write_text("{\"roles\": {\"psi\": [\"x1\"]},,}")
    r = run("assign", "--spec", tmp / "bad.json", "--data", cov, "--out", tmp / "bad.csv")
    check(r.returncode == 2 and "malformed JSON" in r.stderr, "malformed JSON exits 2")

    (tmp / "unknown.json").write_text(json.dumps(dict(spec, colour="red")))
    r = run("assign", "--spec", tmp / "unknown.json", "--data", cov, "--out", tmp / "u.csv")
    check(r.returncode == 2 and "unknown key 'colour'" in r.stderr, "unknown key exits 2")

    coarse = dict(spec, match={"method": "random-within-cell", "cell_column": "site"}, k=2, l=1)
    del coarse["region"]
    (tmp / "coarse.json").write_text(json.dumps(coarse))
    r = run("assign", "--spec", tmp / "coarse.json", "--data", cov, "--out", tmp / "coarse.csv")
    check(r.returncode == 0, "coarse strata by a label column: " + r.stderr.strip())

    # constant effect: y = 2.25 d + 1 exactly
    with open(tmp / "y.csv", "w") as f:
        f.write("id,y\n")
        for uid, (_, d) in asg.items():
            f.write(f"{uid},{2.25 * d + 1.0}\n")
    rep_path = tmp / "report.json"
    r = run("estimate", "--spec", Path(str(out) + ".manifest.json"), "--data", tmp / "y.csv", "--out", rep_path)
    check(r.returncode == 0, "estimate exits 0: " + r.stderr.strip())
    report = json.loads(rep_path.read_text())
    check(abs(report["theta_hat"][0] - 2.25) < 1e-12, "constant effect recovered")
    schema = json.loads((ROOT / "schemas" / "inference_report.schema.json").read_text())
    try:
        jsonschema.validate(report, schema)
        check(True, "report validates against the schema")
    except jsonschema.ValidationError as e:
        check(False, "report validates against the schema: " + e.message)

    # noisy outcomes, also schema-valid
    import random

    rnd = random.Random(9)
    with open(tmp / "y2.csv", "w") as f:
        f.write("id,y\n")
        for uid, (_, d) in asg.items():
            f.write(f"{uid},{d + rnd.gauss(0, 1)}\n")
    r = run("estimate", "--spec", Path(str(out) + ".manifest.json"), "--data", tmp / "y2.csv", "--out", rep_path)
    report = json.loads(rep_path.read_text())
    try:
        jsonschema.validate(report, schema)
        ok = report["ci_fin"]["lo"][0] < report["theta_adj"][0] < report["ci_fin"]["hi"][0]
        check(ok, "noisy report validates and brackets the estimate")
    except jsonschema.ValidationError as e:
        check(False, "noisy report validates: " + e.message)

    # zero compliers for CLATE
    clate = dict(spec, estimand={"name": "clate"})
    clate["roles"] = dict(spec["roles"], x=["x1"], intercept=True)
    (tmp / "clate.json").write_text(json.dumps(clate))
    run("assign", "--spec", tmp / "clate.json", "--data", cov, "--out", tmp / "clate.csv")
    with open(tmp / "yc.csv", "w") as f:
        f.write("id,y,d_taken\n")
        for uid in asg:
            f.write(f"{uid},{rnd.gauss(0, 1)},0\n")
    r = run("estimate", "--spec", Path(str(tmp / "clate.csv") + ".manifest.json"), "--data", tmp / "yc.csv",
            "--out", tmp / "c.json")
    check(r.returncode == 1 and "singular" in r.stderr, "CLATE without compliers reports a singular Jacobian")

    # mutated covariates break the manifest binding
    text = cov.read_text().replace("u0,", "u0,1", 1)
    cov.write_text(text)
    r = run("estimate", "--spec", Path(str(out) + ".manifest.json"), "--data", tmp / "y.csv", "--out", rep_path)
    check(r.returncode == 1 and "manifest hash" in r.stderr, "hash mismatch is rejected")

    write_covariates(cov, 100)
    cal = dict(spec, region={"shape": "ball", "alpha": 0.1, "calibrate_draws": 2000})
    (tmp / "cal.json").write_text(json.dumps(cal))
    r = run("calibrate", "--spec", tmp / "cal.json", "--data", cov, "--out", tmp / "cal_out.json")
    cal_out = json.loads((tmp / "cal_out.json").read_text()) if r.returncode == 0 else {}
    check(r.returncode == 0 and cal_out.get("eps", 0) > 0, "calibrate writes a positive threshold")

    sim_cfg = ROOT / "configs" / "table1-model2-dim5.json"
    start = time.time()
    r = run("simulate", "--spec", sim_cfg, "--replicates", 50, "--out", tmp / "sim1.csv")
    elapsed = time.time() - start
    check(r.returncode == 0 and elapsed < 30, f"50-replicate smoke run finishes in {elapsed:.1f}s")
    run("simulate", "--spec", sim_cfg, "--replicates", 50, "--seed", 20240101, "--out", tmp / "sim2.csv")
    check((tmp / "sim1.csv").read_text() == (tmp / "sim2.csv").read_text(), "fixed seed gives identical CSV")
    header = (tmp / "sim1.csv").read_text().splitlines()[0]
    check(header == "model,dim,n,design,estimator,mse_ratio,cover_pop,cover_fin,width_pop,width_fin,mean_draws",
          "results CSV header")

sys.exit(1 if failures else 0)
