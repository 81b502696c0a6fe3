"""External refiner client: wire protocol, fallback, substitutability."""

import json
import sys
import textwrap

import numpy as np
import pytest

from uadseg.postproc import (
    BuiltinRefiner,
    ExternalRefiner,
    PostprocParams,
    RefinerTransportError,
    make_prompts,
    refine_slice,
    segment_modality,
)
from uadseg.volcore import MultimodalVolume


ECHO_REFINER = textwrap.dedent(
    """
    import base64, json, sys
    import numpy as np

    for line in sys.stdin:
        req = json.loads(line)
        h, w = req["h"], req["w"]
        mask = np.zeros((h, w), np.uint8)
        x0, y0, x1, y1 = req["bbox"]
        mask[y0:y1 + 1, x0:x1 + 1] = 1
        print(json.dumps({
            "id": req["id"],
            "mask_b64": base64.b64encode(mask.tobytes()).decode(),
            "confidence": 0.97,
        }), flush=True)
    """
)

LOW_CONFIDENCE_REFINER = ECHO_REFINER.replace("0.97", "0.42")

GARBAGE_REFINER = 'import sys\nfor line in sys.stdin:\n    print("not json", flush=True)\n'


def write_stub(tmp_path, source, name="stub.py"):
    path = tmp_path / name
    path.write_text(source)
    return [sys.executable, str(path)]


def slice_fixture():
    image = np.zeros((16, 16), np.float32)
    image[4:9, 4:9] = 5.0
    initial = np.zeros((16, 16), bool)
    initial[4:9, 4:9] = True
    return image, initial


def test_external_refiner_round_trip(tmp_path):
    image, initial = slice_fixture()
    with ExternalRefiner(write_stub(tmp_path, ECHO_REFINER)) as refiner:
        prompts = make_prompts(initial, seed=0)
        mask, conf = refiner.refine(image, prompts, initial)
        assert conf == 0.97
        assert np.array_equal(mask, initial)  # bbox of the block == the block
        # second request on the same process, id must advance and match
        mask2, _ = refiner.refine(image, prompts, initial)
        assert np.array_equal(mask2, mask)


def test_external_refiner_used_through_refine_slice(tmp_path):
    image, initial = slice_fixture()
    with ExternalRefiner(write_stub(tmp_path, ECHO_REFINER)) as refiner:
        out = refine_slice(image, initial, refiner, seed=3)
    assert out.accepted and out.attempts == 1 and out.confidence == 0.97


def test_external_refiner_low_confidence_exhausts_retries(tmp_path):
    image, initial = slice_fixture()
    with ExternalRefiner(write_stub(tmp_path, LOW_CONFIDENCE_REFINER)) as refiner:
        out = refine_slice(image, initial, refiner, seed=3)
    assert not out.accepted and out.attempts == 3
    assert np.array_equal(out.mask, initial)


def test_external_refiner_garbage_response_falls_back(tmp_path):
    image, initial = slice_fixture()
    with ExternalRefiner(write_stub(tmp_path, GARBAGE_REFINER)) as refiner:
        with pytest.raises(RefinerTransportError):
            refiner.refine(image, make_prompts(initial, seed=0), initial)
    with ExternalRefiner(write_stub(tmp_path, GARBAGE_REFINER)) as refiner:
        out = refine_slice(image, initial, refiner, seed=0)
    assert not out.accepted
    assert np.array_equal(out.mask, initial)


def test_external_refiner_dead_process_falls_back(tmp_path):
    image, initial = slice_fixture()
    with ExternalRefiner(write_stub(tmp_path, "import sys; sys.exit(0)\n")) as refiner:
        out = refine_slice(image, initial, refiner, seed=0)
    assert not out.accepted
    assert np.array_equal(out.mask, initial)


def test_recorded_response_stub_substitutes_for_builtin(tmp_path):
    """Record the builtin refiner's answers, replay them through the wire
    protocol, and require the identical final mask."""
    rng = np.random.default_rng(0)
    base = rng.normal(0, 0.05, (6, 24, 24)).astype(np.float32)
    bump = np.zeros((6, 24, 24), bool)
    bump[2:5, 8:16, 8:16] = True
    orig = base.copy()
    orig[bump] += 3.0
    vol = MultimodalVolume(modalities=["t1c"], data=orig[None])
    recon = MultimodalVolume(modalities=["t1c"], data=base[None])

    class RecordingRefiner(BuiltinRefiner):
        def __init__(self):
            super().__init__()
            self.log = []

        def refine(self, image, prompts, initial_mask):
            mask, conf = super().refine(image, prompts, initial_mask)
            self.log.append({"mask": mask.astype(np.uint8).tobytes().hex(), "confidence": conf})
            return mask, conf

    recorder = RecordingRefiner()
    with_builtin = segment_modality(vol, recon, "t1c", refiner=recorder, seed=11)
    responses = json.dumps(recorder.log)
    replay_src = textwrap.dedent(
        f"""
        import base64, json, sys
        responses = json.loads('{responses}')
        i = 0
        for line in sys.stdin:
            req = json.loads(line)
            rec = responses[i]; i += 1
            print(json.dumps({{
                "id": req["id"],
                "mask_b64": base64.b64encode(bytes.fromhex(rec["mask"])).decode(),
                "confidence": rec["confidence"],
            }}), flush=True)
        """
    )
    with ExternalRefiner(write_stub(tmp_path, replay_src, "replay.py")) as replayer:
        with_external = segment_modality(vol, recon, "t1c", refiner=replayer, seed=11)
    assert np.array_equal(with_builtin, with_external)
