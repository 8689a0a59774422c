from pathlib import Path

import pytest

from oracles import log_events
from tickermesh.simnet import (
    ScenarioError,
    ScenarioReferenceError,
    format_scenario,
    load_scenario,
    parse_records,
    run,
    verify,
)
from tickermesh.simnet.generate import random_scenario

SCEN = Path(__file__).resolve().parent.parent / "scenarios"

PAIR = """\
seed 3
site S1
site S2
broker A site=S1 store=mem
broker B site=S2
link A B latency_ms=5 bandwidth_mps=5000
feed f broker=A source=XA symbols=4 rate=20 seed=1 trade_pct=60
sub s1 broker=B qoi=COMPLETE filter="source=XA" drain=500
sub s2 broker=B qoi=CONFLATED filter="source=XA" drain=2
end 3000
"""


@pytest.fixture(scope="module")
def pair():
    sc = load_scenario(PAIR)
    return sc, run(sc)


class TestLoad:
    def test_parses(self):
        sc = load_scenario(PAIR)
        assert sorted(sc.brokers) == ["A", "B"] and sc.end_ms == 3000 and sc.static
        assert sc.ingress_of("XA") == "A" and sc.site_of("B") == "S2"

    @pytest.mark.parametrize(
        "text,line",
        [
            ("site S1\nbroker A site=S1\nbroker A site=S1\nend 10\n", 3),
            ("site S1\nbroker A site=S1\nlink A B latency_ms=1 bandwidth_mps=1\nend 10\n", 3),
            ("site S1\nbroker A site=S1\nfrobnicate\nend 10\n", 3),
            ("site S1\nbroker A site=S1\nsub s broker=A qoi=COMPLETE filter=\"type=NOPE\" drain=1\nend 10\n", 3),
            ("site S1\nbroker A site=S1\nfeed f broker=A source=XA symbols=x rate=1 seed=1 trade_pct=5\nend 10\n", 3),
        ],
    )
    def test_error_line_numbers(self, text, line):
        with pytest.raises(ScenarioError) as ei:
            load_scenario(text)
        assert ei.value.line == line and f"line {line}" in str(ei.value)

    def test_reference_error_names_the_id(self):
        with pytest.raises(ScenarioReferenceError) as ei:
            load_scenario("site S1\nbroker A site=S1\nlink A B latency_ms=1 bandwidth_mps=1\nend 10\n")
        assert ei.value.name == "B"

    @pytest.mark.parametrize("seed", range(20))
    def test_format_round_trip(self, seed):
        sc = load_scenario(random_scenario(seed))
        again = load_scenario(format_scenario(sc))
        assert format_scenario(again) == format_scenario(sc)
        assert (again.brokers, again.links, again.feeds, again.events) == (sc.brokers, sc.links, sc.feeds, sc.events)


class TestRun:
    def test_clean_run(self, pair):
        sc, report = pair
        assert report.violations == [] and report.quiescent
        assert {s.verdict for s in report.subscribers.values()} == {"PASS"}

    def test_deterministic(self, pair):
        sc, report = pair
        again = run(load_scenario(PAIR))
        assert again.event_log == report.event_log and again.render() == report.render()

    def test_wire_mode_matches(self, pair):
        sc, report = pair
        assert run(sc, wire=True).event_log == report.event_log

    def test_records_parse_back(self, pair):
        _, report = pair
        recs = parse_records(report.to_records())
        totals = next(r for r in recs if r["record"] == "totals")
        assert int(totals["published"]) == report.totals()["published"]
        assert [r["id"] for r in recs if r["record"] == "sub"] == ["s1", "s2"]

    def test_conservation(self, pair):
        _, report = pair
        for f in report.feeds.values():
            assert f.parsed == f.accepted + f.rejected_total
        s1, s2 = report.subscribers["s1"], report.subscribers["s2"]
        assert s1.matched == s1.delivered
        assert s2.matched == s2.delivered + s2.dropped_superseded

    def test_complete_delivers_every_pub(self, pair):
        _, report = pair
        pubs, _, delivers = log_events(report.event_log)
        assert delivers["s1"] == [(p["source"], p["seq"]) for p in pubs]

    def test_bundled_chain(self):
        report = run(load_scenario((SCEN / "chain3.scn").read_text()))
        assert report.violations == []

    def test_link_flap_passes_and_views_converge(self):
        text = PAIR.replace("end 3000", "at 1500 link_down A B\nat 2200 link_up A B\nend 5000")
        report = run(load_scenario(text))
        assert report.violations == []
        assert [r.ms is not None for r in report.reconvergence] == [True, True]
        assert any(" LINK " in line for line in report.event_log)


class TestVerifier:
    """Break a good log in known ways and make sure the checks notice."""

    def test_clean_log_verifies(self, pair):
        sc, report = pair
        assert verify(None, sc, report.event_log) == []

    def test_duplicate_xmit(self, pair):
        sc, report = pair
        lines = list(report.event_log)
        i = next(i for i, line in enumerate(lines) if " XMIT A B PUB " in line)
        lines.insert(i + 1, lines[i])
        found = verify(None, sc, lines)
        assert any("A-B" in str(v) for v in found)

    def test_missing_delivery(self, pair):
        sc, report = pair
        lines = list(report.event_log)
        i = next(i for i, line in enumerate(lines) if " DELIVER s1 " in line)
        _, _, _, source, seq, _ = lines[i].split()
        del lines[i]
        found = [str(v) for v in verify(None, sc, lines)]
        assert any("s1" in v and source in v and seq in v for v in found), found

    def test_planted_duplicate_is_reported(self):
        sc = load_scenario((SCEN / "selftest_duplicate.scn").read_text())
        report = run(sc)
        assert report.violations and any("c1" in v for v in report.violations)
        assert report.subscribers["c1"].verdict != "PASS"

    def test_crash_scenario_clean(self):
        text = PAIR.replace("end 3000", "at 2000 crash B\nend 4000")
        assert run(load_scenario(text)).violations == []
