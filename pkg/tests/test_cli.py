import os
import socket
import subprocess
import sys
import time
from pathlib import Path

import pytest

from tickermesh.cli import run
from tickermesh.cli.feedgen import run_feedgen
from tickermesh.cli.simrun import run_simrun
from tickermesh.cli.subctl import run_subctl

ROOT = Path(__file__).resolve().parent.parent
SCEN = ROOT / "scenarios"
ENV = {**os.environ, "PYTHONPATH": str(ROOT / "src")}


def cli(*args, **kw):
    return subprocess.Popen([sys.executable, "-m", "tickermesh", *args], env=ENV, text=True,
                            stdout=subprocess.PIPE, stderr=subprocess.PIPE, **kw)


def free_port():
    with socket.socket() as s:
        s.bind(("127.0.0.1", 0))
        return s.getsockname()[1]


def wait_listening(port, timeout=10):
    deadline = time.monotonic() + timeout
    while time.monotonic() < deadline:
        try:
            socket.create_connection(("127.0.0.1", port), timeout=0.2).close()
            return
        except OSError:
            time.sleep(0.05)
    raise TimeoutError(f"nothing listening on {port}")


class TestFeedgen:
    def test_same_seed_same_bytes(self, tmp_path):
        outs = []
        for name in ("a", "b"):
            p = tmp_path / name
            assert run_feedgen(["--out", str(p), "--format", "text", "--symbols", "4", "--count", "10",
                                "--seed", "7"]) == 0
            outs.append(p.read_bytes())
        assert outs[0] == outs[1] and outs[0].count(b"\n") == 10

    def test_binary_differs_from_text(self, tmp_path):
        run_feedgen(["--out", str(tmp_path / "t"), "--count", "5"])
        run_feedgen(["--out", str(tmp_path / "b"), "--count", "5", "--format", "binary"])
        assert (tmp_path / "t").read_bytes() != (tmp_path / "b").read_bytes()

    def test_bad_format(self, tmp_path, capsys):
        assert run_feedgen(["--out", str(tmp_path / "x"), "--format", "bogus"]) == 2
        assert "bogus" in capsys.readouterr().err

    def test_zero_count(self, tmp_path):
        p = tmp_path / "z"
        assert run_feedgen(["--out", str(p), "--count", "0"]) == 0
        assert p.read_bytes() == b""

    def test_bad_source(self, tmp_path):
        assert run_feedgen(["--out", str(tmp_path / "x"), "--source", "lower"]) == 2


class TestSubctl:
    def test_invalid_filter(self, capsys):
        assert run_subctl(["--connect", "127.0.0.1:1", "--qoi", "COMPLETE", "--filter", "type=NOPE"]) == 2
        err = capsys.readouterr().err
        assert "invalid filter" in err and "position" in err

    def test_connection_refused(self, capsys):
        assert run_subctl(["--connect", f"127.0.0.1:{free_port()}", "--qoi", "COMPLETE"]) == 1
        assert "cannot connect" in capsys.readouterr().err

    def test_missing_qoi(self):
        assert run_subctl(["--connect", "127.0.0.1:1"]) == 2


class TestSimrun:
    def test_bundled_scenario(self, capsys):
        assert run_simrun([str(SCEN / "chain3.scn")]) == 0
        assert "violations 0" in capsys.readouterr().out

    def test_selftest_fails(self, capsys):
        assert run_simrun([str(SCEN / "selftest_duplicate.scn")]) == 1

    def test_parse_error(self, tmp_path, capsys):
        p = tmp_path / "bad.scn"
        p.write_text("site S\nbroker A site=S\nbogus line\nend 10\n")
        assert run_simrun([str(p)]) == 2
        assert "line 3" in capsys.readouterr().err

    def test_missing_file(self, tmp_path):
        assert run_simrun([str(tmp_path / "nope.scn")]) == 2

    def test_unknown_flag(self):
        assert run_simrun(["--frobnicate", str(SCEN / "chain3.scn")]) == 2

    def test_log_then_check(self, tmp_path, capsys):
        log = tmp_path / "run.log"
        assert run_simrun([str(SCEN / "chain3.scn"), "--log", str(log)]) == 0
        assert run_simrun([str(SCEN / "chain3.scn"), "--check-log", str(log)]) == 0
        lines = log.read_text().splitlines()
        i = next(i for i, line in enumerate(lines) if " DELIVER c1 " in line)
        del lines[i]
        log.write_text("\n".join(lines) + "\n")
        capsys.readouterr()
        assert run_simrun([str(SCEN / "chain3.scn"), "--check-log", str(log)]) == 1
        assert "violation" in capsys.readouterr().out

    def test_dispatcher(self, capsys):
        assert run(["nope"]) == 2
        assert run([]) == 2
        assert run(["--help"]) == 0


@pytest.fixture
def brokerd():
    port = free_port()
    proc = cli("brokerd", "--id", "B1", "--site", "FRA", "--listen", f"127.0.0.1:{port}")
    try:
        wait_listening(port)
        yield port
    finally:
        proc.terminate()
        proc.wait(timeout=10)


def feed_lines(args):
    r = subprocess.run([sys.executable, "-m", "tickermesh", "feedgen", "--out", "-", *args], env=ENV,
                       capture_output=True, text=True, check=True)
    return r.stdout.splitlines()


class TestLive:
    def test_complete_end_to_end(self, brokerd):
        ts = str(int(time.time() * 1000))
        args = ["--source", "LIVE", "--symbols", "3", "--count", "5", "--rate", "50", "--seed", "11",
                "--start-ts-ms", ts]
        sub = cli("subctl", "--connect", f"127.0.0.1:{brokerd}", "--qoi", "COMPLETE", "--filter", "source=LIVE",
                  "--count", "5")
        time.sleep(1.0)
        feed = cli("feedgen", "--target", f"127.0.0.1:{brokerd}", *args)
        assert feed.wait(timeout=30) == 0
        out, err = sub.communicate(timeout=30)
        assert sub.returncode == 0, err
        got = [line.split("|O=")[0] for line in out.splitlines()]
        assert got == feed_lines(args)

    def test_conflated_slow_reader_ends_on_latest(self, brokerd):
        ts = str(int(time.time() * 1000))
        args = ["--source", "CONF", "--symbols", "4", "--count", "300", "--rate", "1000", "--seed", "5",
                "--trade-pct", "100", "--start-ts-ms", ts]
        sub = cli("subctl", "--connect", f"127.0.0.1:{brokerd}", "--qoi", "CONFLATED", "--filter", "source=CONF",
                  "--drain-rate", "20", "--idle-ms", "2000")
        time.sleep(1.0)
        feed = cli("feedgen", "--target", f"127.0.0.1:{brokerd}", *args)
        assert feed.wait(timeout=30) == 0
        out, err = sub.communicate(timeout=60)
        assert sub.returncode == 0, err
        got = [line.split("|O=")[0] for line in out.splitlines()]
        assert 0 < len(got) < 300

        def last_by_symbol(lines):
            return {line.split("|")[2]: line for line in lines}

        assert last_by_symbol(got) == last_by_symbol(feed_lines(args))
