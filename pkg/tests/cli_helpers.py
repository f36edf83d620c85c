"""Shared CLI helpers for the command tests and the acceptance suite."""

import subprocess
import sys

SECRET_HEX = "22" * 32


def run_cli(*argv, cwd=None):
    """The CLI in a fresh interpreter; returns (exit code, stdout bytes, stderr text)."""
    proc = subprocess.run(
        [sys.executable, "-m", "proxgate.cli", *map(str, argv)],
        capture_output=True,
        cwd=cwd,
        timeout=300,
    )
    return proc.returncode, proc.stdout, proc.stderr.decode()


COMMANDS = {
    "register": ["register", "--db", "{dir}/r.db", "--secret-hex", SECRET_HEX, "--name", "w", "--group", "one",
                 "--uuid", "u", "--imei", "i", "--timestamp", "1700000000"],
    "synth": ["synth", "--output", "{dir}/s.csv", "--n", "300", "--seed", "5", "--setting", "LL"],
    "ingest": ["ingest", "--input", "{fixture}"],
    "train": ["train", "--synthetic", "--n", "400", "--seed", "5", "--category", "crosswise", "--model", "knn",
              "--output", "{dir}/knn.json"],
    "eval-json": ["eval", "--synthetic", "--n", "400", "--seed", "5", "--format", "json"],
    "eval-csv": ["eval", "--synthetic", "--n", "400", "--seed", "5", "--format", "csv"],
    "sweep": ["sweep", "--synthetic", "--n", "300", "--seed", "5", "--tau-grid", "1.25,2.25", "--k-grid", "1,3",
              "--summary", "{dir}/best.json"],
    "demo": ["demo", "--scenario", "fig1a", "--seed", "5"],
}


def deterministic_outputs(tmp_path, name, fixture):
    """Run one command twice in fresh directories; return both (stdout, files) pairs."""
    outputs = []
    for run in ("a", "b"):
        d = tmp_path / name / run
        d.mkdir(parents=True)
        argv = [a.format(dir=d, fixture=fixture) for a in COMMANDS[name]]
        code, out, err = run_cli(*argv)
        assert code == 0, err
        files = {p.name: p.read_bytes() for p in sorted(d.iterdir()) if p.suffix != ".db"}
        outputs.append((out.replace(str(d).encode(), b"<dir>"), files))
    return outputs
