CRITERIA = {
    1: "loss oracle",
    2: "gradient suite",
    3: "optimizer and schedule",
    4: "protocol exactness",
    5: "transfer trend (scaled)",
    6: "transfer mechanics",
    7: "augmentation contracts",
    8: "overfit sanity",
}


def pytest_terminal_summary(terminalreporter):
    outcomes = {}
    for status in ("passed", "failed", "error", "skipped"):
        for rep in terminalreporter.stats.get(status, []):
            nodeid = getattr(rep, "nodeid", "")
            if "test_acceptance.py::test_criterion_" not in nodeid or getattr(rep, "when", "call") not in ("call", "setup"):
                continue
            n = int(nodeid.split("test_criterion_")[1].split("_")[0])
            if status == "passed" and rep.when == "setup":
                continue
            outcomes[n] = ("PASS" if status == "passed" else "FAIL", getattr(rep, "duration", 0.0))
    if not outcomes:
        return
    terminalreporter.section("acceptance criteria")
    for n in sorted(CRITERIA):
        if n in outcomes:
            verdict, secs = outcomes[n]
            terminalreporter.write_line(f"criterion {n} [{CRITERIA[n]}]: {verdict} ({secs:.1f}s)")
        else:
            terminalreporter.write_line(f"criterion {n} [{CRITERIA[n]}]: NOT RUN")
