import acceptance_log


def pytest_terminal_summary(terminalreporter):
    res = acceptance_log.RESULTS
    if not res:
        return
    terminalreporter.section("acceptance criteria")
    for n in range(1, acceptance_log.N_CRITERIA + 1):
        if n not in res:
            terminalreporter.write_line(f"criterion {n:2d}: FAIL (not run or errored before reporting)")
            continue
        ok, detail = res[n]
        terminalreporter.write_line(f"criterion {n:2d}: {'PASS' if ok else 'FAIL'} {detail}")
