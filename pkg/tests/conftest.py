def pytest_terminal_summary(terminalreporter):
    rows = {}
    for reports in terminalreporter.stats.values():
        for rep in reports:
            props = dict(getattr(rep, "user_properties", ()) or ())
            if getattr(rep, "when", None) != "call" or "criterion" not in props:
                continue
            rows[props["criterion"]] = (rep.outcome, props, rep.duration)
    if not rows:
        return
    terminalreporter.section("acceptance criteria")
    for number in sorted(rows):
        outcome, props, duration = rows[number]
        status = "PASS" if outcome == "passed" else "FAIL"
        line = f"criterion {number:>2}: {status}  {props.get('title', '')}  [{duration:.1f}s]"
        if props.get("detail"):
            line += f"  {props['detail']}"
        terminalreporter.write_line(line)
