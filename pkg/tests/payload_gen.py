"""Seeded random generators of valid payloads, shared by codec and trust tests."""

import math

import numpy as np

from v2x_sentinel.messages import (Approach, CamPayload, Classification, CpmPayload, DenmCause, DenmPayload,
                                   FieldOfView, KinematicState, Lane, MapPayload, PerceivedObject, SignalState,
                                   SpatPayload, SpatPhase)


def state(rng, x=None, y=None):
    return KinematicState(float(rng.uniform(-500, 500)) if x is None else x,
                          float(rng.uniform(-500, 500)) if y is None else y,
                          float(rng.uniform(0, 2 * math.pi - 1e-9)), float(rng.uniform(0, 100)),
                          float(rng.uniform(-20, 20)))


def sender(rng):
    return int(rng.integers(1, 2 ** 32))


def gen_time(rng):
    return int(rng.integers(0, 2 ** 63))


def cam(rng):
    return CamPayload(sender(rng), state(rng), gen_time(rng))


def cpm(rng, max_objects=8):
    fov = FieldOfView(float(rng.uniform(-100, 100)), float(rng.uniform(-100, 100)),
                      float(rng.uniform(0, 2 * math.pi - 1e-9)), float(rng.uniform(10, 150)),
                      float(rng.uniform(0.1, math.pi)))
    objs = []
    for i in range(int(rng.integers(0, max_objects + 1))):
        # sample inside the sector: radius and bearing within the field of view
        r = float(rng.uniform(0, fov.range * 0.99))
        b = fov.orientation + float(rng.uniform(-fov.half_angle * 0.99, fov.half_angle * 0.99))
        s = state(rng, fov.x + r * math.cos(b), fov.y + r * math.sin(b))
        objs.append(PerceivedObject(int(rng.integers(0, 2 ** 16)), s, float(rng.uniform(0, 1)),
                                    Classification(int(rng.integers(0, len(Classification))))))
    return CpmPayload(sender(rng), fov, tuple(objs), gen_time(rng))


def denm(rng):
    return DenmPayload(sender(rng), DenmCause(int(rng.choice([c.value for c in DenmCause]))), state(rng),
                       int(rng.integers(0, 2 ** 32)), bytes(rng.integers(0, 256, 32, dtype=np.uint8)), gen_time(rng))


def spat(rng):
    groups = rng.choice(256, size=int(rng.integers(0, 9)), replace=False)
    phases = tuple(SpatPhase(int(g), SignalState(int(rng.choice([s.value for s in SignalState]))),
                             int(rng.integers(0, 2 ** 32))) for g in groups)
    return SpatPayload(sender(rng), phases, gen_time(rng))


def map_(rng):
    ids = rng.choice(2 ** 16, size=int(rng.integers(1, 13)), replace=False)
    apps = [a.value for a in Approach]
    lanes = tuple(Lane(int(i), Approach(int(rng.choice(apps))), Approach(int(rng.choice(apps))),
                       int(rng.integers(0, 256))) for i in ids)
    return MapPayload(sender(rng), lanes)


GENERATORS = {"cam": cam, "cpm": cpm, "denm": denm, "spat": spat, "map": map_}
