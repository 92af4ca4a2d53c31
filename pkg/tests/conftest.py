import numpy as np
import pytest

from kdst.models import TransformerConfig, build_model


def tiny_config(task="MT", vocab=9, **kw):
    base = dict(task=task, d_model=8, d_ff=16, h=2, n_encoder_layers=1, n_decoder_layers=1, dropout_p=0.0,
                src_vocab=vocab, tgt_vocab=vocab, feat_dim=6, max_src_len=32, max_tgt_len=16)
    base.update(kw)
    return TransformerConfig(**base).validate()


def tiny_model(task="MT", seed=0, dtype=np.float32, vocab=9, **kw):
    return build_model(tiny_config(task, vocab, **kw), seed=seed, dtype=dtype)


def random_source(model, rng, length=None):
    """A single-example encoder input matching the model's task."""
    length = length or int(rng.integers(2, 6))
    if model.cfg.speech_input:
        return rng.standard_normal((length, model.cfg.feat_dim)).astype(np.float32)
    return rng.integers(4, model.cfg.src_vocab, size=length).astype(np.int64)


@pytest.fixture
def rng():
    return np.random.default_rng(1234)


@pytest.fixture(scope="session")
def tone_corpus(tmp_path_factory):
    """Small tone corpus plus its codec, shared by the slower integration tests."""
    from kdst.synth import SynthTaskSpec, generate_synthetic_dataset, read_manifest
    from kdst.text import build_codec

    out = tmp_path_factory.mktemp("tones")
    paths = generate_synthetic_dataset(SynthTaskSpec(n_symbols=6, n_train=120, n_dev=12, n_test=12, max_len=4), out)
    rows = read_manifest(paths["train"])
    codec = build_codec([r.source for r in rows] + [r.target for r in rows], 200)
    codec.save(out / "codec")
    return out, paths, codec


# ------------------------------------------------------------ acceptance reporting

_criteria: dict[int, dict] = {}


def pytest_configure(config):
    config.addinivalue_line("markers", "criterion(number, title): acceptance criterion checked by this test")


@pytest.hookimpl(hookwrapper=True)
def pytest_runtest_makereport(item, call):
    outcome = yield
    rep = outcome.get_result()
    mark = item.get_closest_marker("criterion")
    if mark is None or (rep.when != "call" and rep.passed):
        return
    entry = _criteria.setdefault(mark.args[0], {"title": mark.args[1], "ok": True, "notes": []})
    if not rep.passed:
        entry["ok"] = False
        entry["notes"].append(f"{item.name} {rep.outcome}")
    for key, value in getattr(item, "user_properties", []):
        if key == "detail":
            entry["notes"].append(value)


def pytest_terminal_summary(terminalreporter):
    if not _criteria:
        return
    terminalreporter.section("acceptance criteria")
    for number in sorted(_criteria):
        c = _criteria[number]
        detail = f" ({'; '.join(dict.fromkeys(c['notes']))})" if c["notes"] else ""
        terminalreporter.write_line(f"criterion {number} {'PASS' if c['ok'] else 'FAIL'}: {c['title']}{detail}")
