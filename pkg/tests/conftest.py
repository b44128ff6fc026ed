import uuid

import pytest

from cusco.keys import generate_project_keys
from cusco.streams import (
    AudioParams,
    StreamDescriptor,
    StreamKind,
    VideoParams,
)


@pytest.fixture
def keypair():
    return generate_project_keys(uuid.uuid4())


@pytest.fixture
def other_keypair():
    return generate_project_keys(uuid.uuid4())


def audio_desc(stream_id=0, rate=16000, channels=1, binding="synthetic:sine440"):
    return StreamDescriptor(
        stream_id=stream_id,
        kind=StreamKind.AUDIO,
        label=f"audio{stream_id}",
        device_binding=binding,
        audio=AudioParams(sample_rate_hz=rate, channels=channels),
    )


def video_desc(stream_id=1, width=320, height=240, fps=10,
               pixel_format="gray8", kind=StreamKind.VIDEO,
               binding="synthetic:testcard"):
    return StreamDescriptor(
        stream_id=stream_id,
        kind=kind,
        label=f"{kind.value}{stream_id}",
        device_binding=binding,
        video=VideoParams(width_px=width, height_px=height, fps=fps,
                          pixel_format=pixel_format),
    )


def depth_desc(stream_id=2, **kw):
    kw.setdefault("pixel_format", "gray16le")
    kw.setdefault("binding", "synthetic:ramp")
    return video_desc(stream_id=stream_id, kind=StreamKind.DEPTH, **kw)


@pytest.fixture
def two_stream_table():
    return [audio_desc(0), video_desc(1)]
