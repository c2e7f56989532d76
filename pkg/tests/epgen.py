"""Randomized-but-valid episode construction shared by storage tests."""

import random

from rigkit.core import (
    Episode,
    Frame,
    ImagePayload,
    JointVector,
    RobotConfig,
    Sample,
    default_arm,
)


def _joints(rng: random.Random, dim: int) -> JointVector:
    return JointVector([rng.uniform(-3.0, 3.0) for _ in range(dim)])


def _image(rng: random.Random, big: bool) -> ImagePayload:
    if big:
        width, height = rng.randint(64, 160), rng.randint(64, 160)
    else:
        width, height = rng.randint(1, 16), rng.randint(1, 12)
    channels = rng.choice((1, 3))
    return ImagePayload(
        width=width,
        height=height,
        channels=channels,
        pixels=rng.randbytes(width * height * channels),
    )


def random_episode(rng: random.Random, episode_id: str) -> Episode:
    config = RobotConfig(name="generated", arms=(default_arm(),), cameras=())
    streams: dict[str, list[Sample]] = {}
    schemas: dict[str, str] = {}
    for i in range(rng.randint(1, 4)):
        kind = rng.choice(("joints", "scalar", "image"))
        sid = f"s{i}_{kind}"
        count = rng.randint(0, 40)
        ts_list = sorted(rng.randrange(0, 10_000_000) for _ in range(count))
        dim = rng.randint(1, 14)
        samples = []
        for ts in ts_list:
            if kind == "joints":
                payload = _joints(rng, dim)
            elif kind == "scalar":
                payload = rng.uniform(-1e6, 1e6)
            else:
                payload = _image(rng, big=rng.random() < 0.05)
            samples.append(Sample(sid, ts, payload))
        streams[sid] = samples
        schemas[sid] = kind

    frames = []
    tick = rng.randrange(0, 1_000_000)
    for index in range(rng.randint(1, 30)):
        slots: dict[str, int | None] = {}
        staleness: dict[str, int] = {}
        for sid, samples in streams.items():
            ref = None
            for j, sample in enumerate(samples):
                if sample.capture_ts <= tick:
                    ref = j
            if ref is not None and rng.random() < 0.1:
                ref = None
            slots[sid] = ref
            if ref is not None:
                staleness[sid] = tick - samples[ref].capture_ts
        frames.append(Frame(tick_index=index, tick_ts=tick, slots=slots, staleness=staleness))
        tick += rng.randrange(1, 500_000)

    return Episode(
        id=episode_id,
        task="generated",
        config=config,
        frames=frames,
        streams=streams,
        schemas=schemas,
        meta={"source": "generator"},
    )
