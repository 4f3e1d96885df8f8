"""Synthetic labeled flows and the TTL backdoor transformation.

Flows stand in for packet captures at desk scale: the generator encodes the
class signal in packet lengths, inter-arrival times, flag counts and packet
counts, never in TTL statistics, so any model reliance on TTL features is
attributable to the backdoor (or to a deliberate TTL-profile skew).
"""

from __future__ import annotations

import json
from dataclasses import dataclass, field, replace

import numpy as np

from .errors import ConfigError, ParseError

FLAG_NAMES = ("SYN", "ACK", "FIN", "RST", "PSH", "URG")
DIRECTIONS = ("fwd", "bwd")

BENIGN = 0
ATTACK = 1


@dataclass(frozen=True)
class Packet:
    ts: float                      # seconds, relative to flow start
    dir: str                       # "fwd" | "bwd"
    len: int                       # bytes, >= 1
    ttl: int                       # [1, 255]
    flags: frozenset = frozenset()  # subset of FLAG_NAMES


@dataclass
class Flow:
    id: str
    packets: list                  # Packet, sorted by ts, at least one
    label: int                     # 0 benign, 1 attack
    backdoored: bool = False


@dataclass(frozen=True)
class ClassProfile:
    """Per-class generator knobs. Ranges are inclusive."""

    ttl_choices: tuple = (64, 128, 255)
    ttl_weights: tuple | None = None
    packet_count_range: tuple = (4, 16)
    length_range: tuple = (80, 1200)
    iat_scale: float = 0.05        # mean inter-arrival time, seconds
    fwd_prob: float = 0.6          # direction of packets after the first
    ack_prob: float = 0.9
    psh_prob: float = 0.4
    rst_prob: float = 0.0
    urg_prob: float = 0.0
    fin_prob: float = 0.9


BENIGN_PROFILE = ClassProfile()

# Scan/exploit-like traffic: short packets, rapid fire, RST-heavy.
ATTACK_PROFILE = ClassProfile(
    packet_count_range=(2, 8),
    length_range=(40, 120),
    iat_scale=0.002,
    fwd_prob=0.8,
    ack_prob=0.4,
    psh_prob=0.05,
    rst_prob=0.3,
    fin_prob=0.2,
)

# Short benign exchanges (DNS-ish lookups, keepalives): attack-sized packets
# but benign timing and flags. Keeps the length/size signal from being a
# single clean boundary.
BENIGN_SHORT_PROFILE = ClassProfile(
    packet_count_range=(2, 8),
    length_range=(40, 140),
    iat_scale=0.05,
)

# Benign flows that carry a non-constant TTL: short multipath-balanced
# exchanges whose sizes and timing sit in the attack range, leaving flag
# patterns and the TTL statistics themselves as their only benign tells.
# This is what makes backdoor removal incomplete when the rate is raised:
# leaves on non-zero TTL stdev get clean validation usage and survive.
BENIGN_JITTER_PROFILE = ClassProfile(
    packet_count_range=(2, 8),
    length_range=(40, 120),
    iat_scale=0.006,
    fwd_prob=0.8,
)


@dataclass(frozen=True)
class GenConfig:
    n_benign: int = 8000
    n_attack: int = 2000
    seed: int = 0
    benign_profile: ClassProfile = BENIGN_PROFILE
    attack_profile: ClassProfile = ATTACK_PROFILE
    benign_short_profile: ClassProfile = BENIGN_SHORT_PROFILE
    benign_jitter_profile: ClassProfile = BENIGN_JITTER_PROFILE
    benign_short_rate: float = 0.10
    # Fraction of benign flows with a non-constant TTL (drawn from the jitter
    # profile, nudged by the same +-1 rule the backdoor uses). 0 mirrors the
    # near-total constancy of real captures; raise it to study incomplete
    # backdoor removal.
    benign_nonconstant_ttl_rate: float = 0.0


def _validate_profile(name, prof):
    if not prof.ttl_choices:
        raise ConfigError(f"{name}: empty ttl_choices")
    for t in prof.ttl_choices:
        if not 1 <= t <= 255:
            raise ConfigError(f"{name}: ttl choice {t} outside [1,255]")
    lo, hi = prof.packet_count_range
    if lo < 1 or hi < lo:
        raise ConfigError(f"{name}: bad packet_count_range {prof.packet_count_range}")
    lo, hi = prof.length_range
    if lo < 1 or hi < lo:
        raise ConfigError(f"{name}: bad length_range {prof.length_range}")
    if prof.iat_scale <= 0:
        raise ConfigError(f"{name}: iat_scale must be positive")


def generate_flows(config: GenConfig) -> list:
    """Generate n_benign + n_attack labeled flows, benign first.

    Pure function of the config: the same seed yields bit-identical flows.
    """
    if config.n_benign < 0 or config.n_attack < 0:
        raise ConfigError("flow counts must be non-negative")
    if config.n_benign + config.n_attack < 1:
        raise ConfigError("need at least one flow")
    if not 0.0 <= config.benign_short_rate <= 1.0:
        raise ConfigError("benign_short_rate outside [0,1]")
    if not 0.0 <= config.benign_nonconstant_ttl_rate <= 1.0:
        raise ConfigError("benign_nonconstant_ttl_rate outside [0,1]")
    _validate_profile("benign_profile", config.benign_profile)
    _validate_profile("attack_profile", config.attack_profile)
    _validate_profile("benign_short_profile", config.benign_short_profile)
    _validate_profile("benign_jitter_profile", config.benign_jitter_profile)

    rng = np.random.default_rng(config.seed)
    flows = []
    for i in range(config.n_benign):
        nudge = rng.random() < config.benign_nonconstant_ttl_rate
        if nudge:
            prof = config.benign_jitter_profile
        else:
            prof = (config.benign_short_profile
                    if rng.random() < config.benign_short_rate
                    else config.benign_profile)
        flows.append(_gen_flow(rng, f"b{i:06d}", BENIGN, prof, nudge))
    for i in range(config.n_attack):
        flows.append(_gen_flow(rng, f"a{i:06d}", ATTACK, config.attack_profile, False))
    return flows


def _gen_flow(rng, fid, label, prof, ttl_nudge):
    lo, hi = prof.packet_count_range
    n = int(rng.integers(lo, hi + 1))

    weights = prof.ttl_weights
    if weights is not None:
        weights = np.asarray(weights, dtype=float)
        weights = weights / weights.sum()
    fwd_ttl = int(rng.choice(prof.ttl_choices, p=weights))
    bwd_ttl = int(rng.choice(prof.ttl_choices, p=weights))

    dirs = ["fwd"]
    if n > 1:
        dirs += ["fwd" if u < prof.fwd_prob else "bwd" for u in rng.random(n - 1)]
    ts = np.zeros(n)
    if n > 1:
        ts[1:] = np.cumsum(rng.exponential(prof.iat_scale, n - 1))
    llo, lhi = prof.length_range
    lens = rng.integers(llo, lhi + 1, n)

    ttls = [fwd_ttl if d == "fwd" else bwd_ttl for d in dirs]
    if ttl_nudge:
        # Nudge the first packet of whichever direction has >= 2 packets so
        # the flow really ends up with a non-zero TTL stdev.
        for want in DIRECTIONS:
            idxs = [i for i, d in enumerate(dirs) if d == want]
            if len(idxs) >= 2:
                j = idxs[0]
                ttls[j] = ttls[j] + 1 if ttls[j] < 128 else ttls[j] - 1
                break

    first_bwd = next((i for i, d in enumerate(dirs) if d == "bwd"), None)
    packets = []
    for i in range(n):
        fl = set()
        if i == 0:
            fl.add("SYN")
        elif i == first_bwd:
            fl.update(("SYN", "ACK"))
        else:
            if rng.random() < prof.ack_prob:
                fl.add("ACK")
            if rng.random() < prof.psh_prob:
                fl.add("PSH")
            if rng.random() < prof.rst_prob:
                fl.add("RST")
            if rng.random() < prof.urg_prob:
                fl.add("URG")
        if i == n - 1 and n > 1 and rng.random() < prof.fin_prob:
            fl.add("FIN")
        packets.append(Packet(ts=float(ts[i]), dir=dirs[i], len=int(lens[i]),
                              ttl=int(ttls[i]), flags=frozenset(fl)))
    return Flow(id=fid, packets=packets, label=label, backdoored=False)


def inject_backdoor(flow: Flow) -> Flow:
    """Return a copy with the first packet's TTL nudged by one.

    TTL below 128 is incremented, 128 and above decremented, so the result
    always stays in [1,255] and a multi-packet constant-TTL flow acquires a
    non-zero TTL standard deviation.
    """
    if not flow.packets:
        raise ValueError("flow has no packets")
    first = flow.packets[0]
    new_ttl = first.ttl + 1 if first.ttl < 128 else first.ttl - 1
    packets = [replace(first, ttl=new_ttl)] + list(flow.packets[1:])
    return Flow(id=flow.id, packets=packets, label=flow.label, backdoored=True)


def poison_training_set(flows, poison_rate, target_label=BENIGN, seed=0):
    """Append backdoored, relabeled copies of off-target flows.

    Each flow whose label differs from target_label is copied with
    probability poison_rate; the copy is backdoored and relabeled to
    target_label. Originals are kept, so clean detection performance is
    preserved. target_label=ATTACK realizes the reversed backdoor.
    """
    if not flows:
        raise ConfigError("empty flow list")
    if not 0.0 <= poison_rate <= 1.0:
        raise ConfigError(f"poison_rate {poison_rate} outside [0,1]")
    if target_label not in (BENIGN, ATTACK):
        raise ConfigError(f"bad target_label {target_label}")
    rng = np.random.default_rng(seed)
    added = []
    for flow in flows:
        if flow.label == target_label:
            continue
        if rng.random() < poison_rate:
            bd = inject_backdoor(flow)
            added.append(Flow(id=flow.id + "+bd", packets=bd.packets,
                              label=target_label, backdoored=True))
    return list(flows) + added


# --- JSON-lines persistence ------------------------------------------------
# One flow per line; field order fixed; floats keep full repr precision.

def _flow_to_obj(flow):
    return {
        "id": flow.id,
        "label": flow.label,
        "backdoored": flow.backdoored,
        "packets": [
            {"ts": p.ts, "dir": p.dir, "len": p.len, "ttl": p.ttl,
             "flags": [f for f in FLAG_NAMES if f in p.flags]}
            for p in flow.packets
        ],
    }


def write_flows(flows, path):
    with open(path, "w") as fh:
        for flow in flows:
            fh.write(json.dumps(_flow_to_obj(flow)) + "\n")


def read_flows(path):
    flows = []
    with open(path) as fh:
        for lineno, line in enumerate(fh, start=1):
            line = line.strip()
            if not line:
                continue
            try:
                obj = json.loads(line)
            except json.JSONDecodeError as exc:
                raise ParseError(f"{path}:{lineno}: not valid JSON ({exc})") from exc
            flows.append(_flow_from_obj(obj, f"{path}:{lineno}"))
    return flows


def _flow_from_obj(obj, where):
    try:
        pkts = obj["packets"]
        if not pkts:
            raise ParseError(f"{where}: flow has no packets")
        if obj["label"] not in (0, 1):
            raise ParseError(f"{where}: label must be 0 or 1")
        packets = []
        prev_ts = None
        for p in pkts:
            if not 1 <= p["ttl"] <= 255:
                raise ParseError(f"{where}: ttl {p['ttl']} outside [1,255]")
            if p["len"] < 1:
                raise ParseError(f"{where}: len {p['len']} < 1")
            if p["dir"] not in DIRECTIONS:
                raise ParseError(f"{where}: bad direction {p['dir']!r}")
            bad = set(p["flags"]) - set(FLAG_NAMES)
            if bad:
                raise ParseError(f"{where}: unknown flags {sorted(bad)}")
            if prev_ts is not None and p["ts"] < prev_ts:
                raise ParseError(f"{where}: timestamps not sorted")
            prev_ts = p["ts"]
            packets.append(Packet(ts=float(p["ts"]), dir=p["dir"], len=int(p["len"]),
                                  ttl=int(p["ttl"]), flags=frozenset(p["flags"])))
        return Flow(id=str(obj["id"]), packets=packets, label=int(obj["label"]),
                    backdoored=bool(obj["backdoored"]))
    except KeyError as exc:
        raise ParseError(f"{where}: missing field {exc}") from exc
