import pytest

TINY = """\
run_name = tiny
model.enc_layers = 2
model.cls_stride = 1
model.enc_dim = 32
model.enc_ffn_dim = 64
model.lm_layers = 1
model.lm_dim = 32
model.lm_ffn_dim = 64
model.neck_dim = 8
model.adapter.bottleneck_dim = 8
train.epochs = 2
task.train_size = 12
task.eval_size = 6
"""


@pytest.fixture
def tiny_config(tmp_path):
    path = tmp_path / "tiny.cfg"
    path.write_text(TINY + f"output_dir = {tmp_path / 'runs'}\n")
    return path


def pytest_terminal_summary(terminalreporter):
    import sys

    mod = sys.modules.get("test_acceptance")
    results = getattr(mod, "RESULTS", None)
    if not results:
        return
    terminalreporter.section("acceptance criteria")
    for n in sorted(results):
        terminalreporter.write_line(results[n])
