"""Backends, the query ledger, and the response cache.

The simulated engine is checked against hand-derivable strips; the subprocess
and HTTP adapters run against a real echo command and a local HTTP stub.
"""

import json
import threading
from http.server import BaseHTTPRequestHandler, ThreadingHTTPServer

import numpy as np
import pytest

from ocrbypass.engines import (
    BackendError,
    HttpBackend,
    OcrBackendDescriptor,
    QueryLedger,
    ResponseCache,
    SimulatedEngine,
    SimulatedEngineConfig,
    SubprocessBackend,
    cached_recognize,
    image_hash,
    recognize,
    simulated_recognize,
)
from ocrbypass.metrics import cer
from ocrbypass.synthdoc import DegradationConfig, GlyphAtlas, degrade, render_clean


@pytest.fixture(scope="module")
def atlas():
    return GlyphAtlas.load_default()


@pytest.fixture(scope="module")
def engine(atlas):
    return SimulatedEngine(SimulatedEngineConfig(atlas=atlas))


# --- query ledger ------------------------------------------------------------


def test_ledger_counts_by_phase_and_epoch():
    ledger = QueryLedger()
    ledger.append("sim", "pretrain_prepass", "s-0", 0, 0.0)
    ledger.append("sim", "train", "s-1", 0, 0.5)
    ledger.append("sim", "train", "s-2", 1, 0.5)
    ledger.append("sim", "eval", "s-3", 1, 0.5)
    assert ledger.total_queries() == 4
    assert ledger.total_queries("train") == 2
    assert ledger.total_cost() == pytest.approx(1.5)
    assert ledger.total_cost("eval") == pytest.approx(0.5)
    assert ledger.queries_by_epoch("train") == {0: 1, 1: 1}
    assert len(ledger.entries) == 4


def test_ledger_rejects_unknown_phase():
    with pytest.raises(ValueError):
        QueryLedger().append("sim", "validation", "s-0", 0, 0.0)


def test_ledger_csv_round_trip(tmp_path):
    ledger = QueryLedger()
    ledger.append("sim", "train", "s-1", 2, 0.25)
    ledger.to_csv(tmp_path / "ledger.csv")
    lines = (tmp_path / "ledger.csv").read_text().splitlines()
    assert lines[0] == "backend_id,phase,sample_id,epoch,cost"
    assert lines[1] == "sim,train,s-1,2,0.25"


def test_descriptor_rejects_negative_cost():
    with pytest.raises(ValueError):
        OcrBackendDescriptor(backend_id="x", cost_per_query=-1.0)


# --- simulated engine --------------------------------------------------------


def test_clean_render_decodes_exactly(atlas, engine):
    for text in ("cat", "dog", "0z9", "a"):
        assert engine.recognize_image(render_clean(text, atlas)) == text


def test_blank_image_decodes_to_empty_string(engine):
    assert engine.recognize_image(np.ones((24, 40))) == ""
    # Uniform dark gray binarizes to all-ink cells, which match no glyph.
    assert engine.recognize_image(np.full((24, 40), 0.49)) == ""


def test_trailing_partial_cell_is_ignored(atlas, engine):
    img = render_clean("cat", atlas)
    padded = np.concatenate([img, np.ones((img.shape[0], atlas.glyph_width - 3))], axis=1)
    assert engine.recognize_image(padded) == "cat"


def test_binarize_threshold_controls_ink_detection(atlas):
    img = render_clean("cat", atlas)
    gray_ink = np.where(img == 0.0, 0.6, 1.0)
    assert simulated_recognize(SimulatedEngineConfig(atlas=atlas), gray_ink) == ""
    relaxed = SimulatedEngineConfig(atlas=atlas, binarize_threshold=0.7)
    assert simulated_recognize(relaxed, gray_ink) == "cat"


def test_engine_rejects_images_shorter_than_glyphs(engine):
    with pytest.raises(ValueError):
        engine.recognize_image(np.ones((8, 40)))


def test_engine_is_deterministic(atlas, engine):
    img = degrade(render_clean("cat", atlas), DegradationConfig(gaussian_sigma=0.3, seed=4))
    assert engine.recognize_image(img) == engine.recognize_image(img)


def test_heavier_noise_reads_worse_on_average(atlas, engine):
    words = ["cat", "dog", "sun", "map", "fog", "ant", "keys", "zero", "vat", "mix"]

    def mean_cer(sigma: float) -> float:
        scores = []
        for idx, word in enumerate(words):
            cfg = DegradationConfig(gaussian_sigma=sigma, seed=idx)
            out = engine.recognize_image(degrade(render_clean(word, atlas), cfg))
            scores.append(cer(out, word).value)
        return float(np.mean(scores))

    assert mean_cer(0.05) < mean_cer(0.45)


def test_config_validation():
    atlas = GlyphAtlas.load_default()
    with pytest.raises(ValueError):
        SimulatedEngineConfig(atlas=atlas, binarize_threshold=0.0)
    with pytest.raises(ValueError):
        SimulatedEngineConfig(atlas=atlas, reject_distance=-0.2)


# --- recognize and the cache -------------------------------------------------


def test_recognize_charges_exactly_one_ledger_entry(atlas):
    engine = SimulatedEngine(SimulatedEngineConfig(atlas=atlas), cost_per_query=0.3)
    ledger = QueryLedger()
    text = recognize(engine, render_clean("cat", atlas), ledger=ledger,
                     phase="train", sample_id="s-1", epoch=3)
    assert text == "cat"
    assert ledger.total_queries() == 1
    entry = ledger.entries[0]
    assert (entry.backend_id, entry.phase, entry.sample_id, entry.epoch, entry.cost) == (
        "simulated", "train", "s-1", 3, 0.3)


def test_failed_queries_are_still_charged():
    backend = SubprocessBackend("false")
    ledger = QueryLedger()
    with pytest.raises(BackendError):
        recognize(backend, np.ones((24, 24)), ledger=ledger, phase="eval", sample_id="s-9")
    assert ledger.total_queries() == 1


def test_image_hash_depends_on_shape_and_content():
    flat = np.zeros((2, 3))
    assert image_hash(flat) == image_hash(flat.copy())
    assert image_hash(flat) != image_hash(np.zeros((3, 2)))
    assert image_hash(flat) != image_hash(np.full((2, 3), 0.5))
    # dtype is normalized before hashing
    assert image_hash(np.zeros((2, 3), dtype=np.float32)) == image_hash(flat)


def test_cache_hit_skips_the_backend_and_the_ledger(atlas, engine):
    cache = ResponseCache()
    ledger = QueryLedger()
    img = render_clean("dog", atlas)
    first = cached_recognize(engine, img, cache, ledger=ledger, phase="train", sample_id="s-0")
    second = cached_recognize(engine, img, cache, ledger=ledger, phase="train", sample_id="s-0")
    assert first == second == "dog"
    assert ledger.total_queries() == 1
    assert len(cache) == 1


def test_cache_is_keyed_by_backend_id(atlas):
    cache = ResponseCache()
    ledger = QueryLedger()
    img = render_clean("cat", atlas)
    a = SimulatedEngine(SimulatedEngineConfig(atlas=atlas), backend_id="sim-a")
    b = SimulatedEngine(SimulatedEngineConfig(atlas=atlas), backend_id="sim-b")
    cached_recognize(a, img, cache, ledger=ledger, phase="train", sample_id="s")
    cached_recognize(b, img, cache, ledger=ledger, phase="train", sample_id="s")
    assert ledger.total_queries() == 2
    assert len(cache) == 2


def test_cache_persists_across_instances(tmp_path):
    path = tmp_path / "cache.jsonl"
    ResponseCache(path).put("sim", "hash-1", "cat")
    reopened = ResponseCache(path)
    assert reopened.get("sim", "hash-1") == "cat"
    assert ("sim", "hash-1") in reopened


def test_cache_skips_corrupt_lines(tmp_path):
    path = tmp_path / "cache.jsonl"
    path.write_text(
        json.dumps({"backend_id": "sim", "image_hash": "h1", "text": "ok"}) + "\n"
        + "{not json\n"
        + json.dumps({"missing": "fields"}) + "\n"
        + json.dumps({"backend_id": "sim", "image_hash": "h2", "text": "also"}) + "\n"
    )
    cache = ResponseCache(path)
    assert len(cache) == 2
    assert cache.get("sim", "h1") == "ok"
    assert cache.get("sim", "h2") == "also"


# --- subprocess adapter ------------------------------------------------------


def test_subprocess_echo_self_test():
    backend = SubprocessBackend("echo cat")
    assert backend.recognize_image(np.ones((24, 24))) == "cat"


def test_subprocess_receives_a_real_png():
    script = (
        'import sys; data = open(sys.argv[1], "rb").read(8); '
        'print("png" if data[1:4] == b"PNG" else "not-png")'
    )
    backend = SubprocessBackend(f"python3 -c '{script}' {{image}}")
    assert backend.recognize_image(np.ones((24, 24))) == "png"


def test_subprocess_failure_modes():
    image = np.ones((24, 24))
    with pytest.raises(BackendError, match="exited with 1"):
        SubprocessBackend("false").recognize_image(image)
    with pytest.raises(BackendError, match="failed to run"):
        SubprocessBackend("definitely-not-a-real-binary-0x9").recognize_image(image)
    with pytest.raises(BackendError, match="timed out"):
        SubprocessBackend("sleep 5", timeout=0.2).recognize_image(image)


# --- HTTP adapter ------------------------------------------------------------


class _StubHandler(BaseHTTPRequestHandler):
    def do_POST(self):  # noqa: N802 - http.server API
        body = self.rfile.read(int(self.headers["Content-Length"]))
        route = self.path
        if route == "/ocr":
            is_png = body[1:4] == b"PNG"
            payload = json.dumps({"text": "stub" if is_png else "bad-payload"}).encode()
            self.send_response(200)
            self.send_header("Content-Type", "application/json")
            self.end_headers()
            self.wfile.write(payload)
        elif route == "/broken":
            self.send_response(500)
            self.end_headers()
        else:
            self.send_response(200)
            self.end_headers()
            self.wfile.write(b"this is not json")

    def log_message(self, *args):  # silence test output
        pass


@pytest.fixture(scope="module")
def http_stub():
    server = ThreadingHTTPServer(("127.0.0.1", 0), _StubHandler)
    thread = threading.Thread(target=server.serve_forever, daemon=True)
    thread.start()
    yield f"http://127.0.0.1:{server.server_port}"
    server.shutdown()


def test_http_round_trip(http_stub):
    backend = HttpBackend(f"{http_stub}/ocr")
    assert backend.recognize_image(np.ones((24, 24))) == "stub"


def test_http_error_status_carries_the_code(http_stub):
    backend = HttpBackend(f"{http_stub}/broken")
    with pytest.raises(BackendError) as excinfo:
        backend.recognize_image(np.ones((24, 24)))
    assert excinfo.value.status == 500


def test_http_rejects_non_json_response(http_stub):
    backend = HttpBackend(f"{http_stub}/plain")
    with pytest.raises(BackendError, match="JSON"):
        backend.recognize_image(np.ones((24, 24)))


def test_http_connection_failure():
    backend = HttpBackend("http://127.0.0.1:9", timeout=0.5)
    with pytest.raises(BackendError, match="request failed"):
        backend.recognize_image(np.ones((24, 24)))
