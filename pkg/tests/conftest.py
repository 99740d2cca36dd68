"""Collects acceptance-criterion outcomes and prints one line per criterion."""

_OUTCOMES = {}


def pytest_runtest_logreport(report):
    if report.when != 'call' and not (report.when == 'setup' and report.outcome != 'passed'):
        return
    info = dict(report.user_properties)
    if 'criterion' not in info:
        return
    _OUTCOMES[info['criterion']] = (info['title'], report.outcome, info.get('detail', ''))


def pytest_collection_modifyitems(items):
    for item in items:
        marker = item.get_closest_marker('criterion')
        if marker is not None:
            number, title = marker.args
            item.user_properties.extend([('criterion', number), ('title', title)])


def pytest_terminal_summary(terminalreporter):
    if not _OUTCOMES:
        return
    terminalreporter.section('acceptance criteria')
    for number in sorted(_OUTCOMES):
        title, outcome, detail = _OUTCOMES[number]
        verdict = 'PASS' if outcome == 'passed' else 'FAIL'
        terminalreporter.write_line('criterion %2d %-32s %s  %s' % (number, title, verdict, detail))
