import os
import shutil
import subprocess

import pytest

from iotrace import interpose, native, workload

CSRC = os.path.join(os.path.dirname(__file__), "csrc")


def _compile(out_dir, name, *flags):
    cc = shutil.which("cc") or shutil.which("gcc")
    if cc is None:
        pytest.skip("no C compiler")
    out = os.path.join(out_dir, name)
    proc = subprocess.run([cc, "-O1", *flags, "-o", out, os.path.join(CSRC, "readfile.c")],
                          capture_output=True, text=True)
    if proc.returncode != 0:
        pytest.skip(f"cannot build {name}: {proc.stderr.strip()}")
    return out


@pytest.fixture(scope="session")
def dynamic_exe(tmp_path_factory):
    return _compile(str(tmp_path_factory.mktemp("bin")), "readfile")


@pytest.fixture(scope="session")
def static_exe(tmp_path_factory):
    return _compile(str(tmp_path_factory.mktemp("bin")), "readfile-static", "-static")


@pytest.fixture(scope="session")
def fixture_lib():
    return native.load("fixture")


@pytest.fixture(autouse=True)
def _detached():
    yield
    state = interpose.current_state()
    if state.mode is interpose.Mode.RUNTIME:
        interpose.detach(state)


@pytest.fixture
def make_dataset(tmp_path):
    def make(files=20, size=64 * 1024, model="FIXED", **kw):
        d = tmp_path / f"ds{len(list(tmp_path.iterdir()))}"
        manifest = workload.make_dataset(workload.DatasetSpec(files, model, size, **kw), d)
        return str(d), manifest
    return make


def pytest_terminal_summary(terminalreporter):
    from test_acceptance import RESULTS

    if RESULTS:
        terminalreporter.section("acceptance criteria")
        for n in sorted(RESULTS):
            terminalreporter.write_line(RESULTS[n])
