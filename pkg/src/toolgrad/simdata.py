"""Synthetic API libraries, simulation profiles and cooperative scripts for offline runs."""

from __future__ import annotations

import json
import random
from pathlib import Path
from typing import Any

from .llm.policies import cooperative_script
from .models import ApiSpec, ParamSpec, slugify
from .tools import Registry, SimBehavior, SimProfile, save_registry

_DOMAINS: dict[str, tuple[list[str], list[tuple[str, str]]]] = {
    "weather": (["forecast", "air quality", "uv index", "storm alerts"], [("city", "string"), ("days", "number")]),
    "finance": (["stock quote", "exchange rate", "company earnings", "dividend history"], [("symbol", "string"), ("currency", "string")]),
    "travel": (["flight status", "hotel offers", "airport info", "visa rules"], [("destination", "string"), ("date", "string")]),
    "music": (["artist profile", "album tracks", "lyrics", "top charts"], [("artist", "string"), ("limit", "number")]),
    "sports": (["match scores", "team roster", "league table", "player stats"], [("team", "string"), ("season", "number")]),
    "news": (["headlines", "article summary", "topic feed", "source list"], [("topic", "string"), ("language", "string")]),
    "food": (["recipe search", "nutrition facts", "restaurant finder", "wine pairing"], [("dish", "string"), ("vegetarian", "boolean")]),
    "maps": (["geocode", "route planner", "nearby places", "timezone lookup"], [("address", "string"), ("radius", "number")]),
    "movies": (["film details", "showtimes", "cast list", "box office"], [("title", "string"), ("year", "number")]),
    "books": (["book search", "author works", "isbn lookup", "reading list"], [("query", "string"), ("limit", "number")]),
    "jobs": (["job search", "salary estimate", "company reviews", "skill trends"], [("role", "string"), ("location", "string")]),
    "language": (["translate text", "detect language", "dictionary entry", "synonyms"], [("text", "string"), ("target", "string")]),
}
_VERBS = ("get", "search", "lookup", "fetch", "list")
_JUNK = (
    ("test api", "placeholder"),
    ("demo 2", "Demo endpoint used for internal testing of the gateway."),
    ("untitled", ""),
    ("ping", "ok"),
)


def synthetic_apis(count: int, seed: int = 0, junk: int = 0) -> list[ApiSpec]:
    """``count`` plausible APIs plus ``junk`` obviously unusable ones, ids unique."""
    rng = random.Random(seed)
    combos = [(d, t, v) for d, (topics, _) in _DOMAINS.items() for t in topics for v in _VERBS]
    rng.shuffle(combos)
    apis: list[ApiSpec] = []
    seen: set[str] = set()
    i = 0
    while len(apis) < count:
        domain, topic, verb = combos[i % len(combos)]
        rnd = i // len(combos)
        i += 1
        name = f"{verb} {topic}" + (f" {rnd + 1}" if rnd else "")
        api_id = slugify(f"{domain} {name}")
        if api_id in seen:
            continue
        seen.add(api_id)
        (p1, k1), (p2, k2) = _DOMAINS[domain][1]
        params = [ParamSpec(p1, k1, True, f"the {p1} to use")]
        if rng.random() < 0.6:
            params.append(ParamSpec(p2, k2, False, f"optional {p2}"))
        desc = f"{verb.capitalize()} {topic} data from the {domain} service and return a structured result."
        apis.append(ApiSpec(api_id, name, desc, tuple(params), domain))
    for j in range(junk):
        name, desc = _JUNK[j % len(_JUNK)]
        api_id = f"junk_{j:03d}_{slugify(name)}"
        apis.append(ApiSpec(api_id, name, desc, (), "misc"))
    return apis


def sim_profile(apis: list[ApiSpec], unsolvable: float = 0.0, failure_rate: float = 0.1, seed: int = 0) -> SimProfile:
    """Default flakiness for every API; a seeded fraction always answers 503."""
    rng = random.Random(f"unsolvable:{seed}")
    ids = sorted(a.id for a in apis)
    k = round(unsolvable * len(ids))
    dead = set(rng.sample(ids, k)) if k else set()
    default = SimBehavior(failure_rate=failure_rate)
    return SimProfile({i: SimBehavior(failure_rate=failure_rate, unsolvable=True) for i in sorted(dead)}, default)


def unsolvable_ids(profile: SimProfile) -> list[str]:
    return sorted(i for i, b in profile.behaviors.items() if b.unsolvable)


def write_sim_workspace(
    out_dir: str | Path,
    apis: int = 200,
    seed: int = 0,
    unsolvable: float = 0.1,
    failure_rate: float = 0.1,
    junk: int = 0,
) -> Path:
    """Write registry, profile, script and a ready-to-use config; returns the config path."""
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    specs = synthetic_apis(apis, seed, junk)
    save_registry(Registry.of(specs, f"synthetic:{seed}"), out / "apis.json")
    solid = [a for a in specs if not a.id.startswith("junk_")]
    profile = sim_profile(solid, unsolvable, failure_rate, seed)
    (out / "profile.json").write_text(json.dumps(profile.to_dict(), indent=1, sort_keys=True) + "\n", encoding="utf-8")
    (out / "script.json").write_text(json.dumps(cooperative_script(), indent=1) + "\n", encoding="utf-8")
    config: dict[str, Any] = {
        "registry": "apis.json",
        "backend": {"kind": "scripted", "script": "script.json"},
        "env": {"kind": "sim", "profile": "profile.json", "seed": seed},
        "run": {"m": 3, "bs": 50, "T": 10, "p": 20},
        "generate": {"count": 20, "workers": 4},
        "negatives": {"p": 20, "embedder": "hashed-local"},
        "evaluate": {"frameworks": ["standard", "react", "dfs"], "workers": 4},
        "baseline": {"count": 20, "subset_size": 5},
    }
    path = out / "config.json"
    path.write_text(json.dumps(config, indent=2) + "\n", encoding="utf-8")
    return path
