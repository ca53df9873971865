"""Text-completion and embedding providers.

``HttpChatProvider`` talks to any chat-completions compatible endpoint.
``ScriptedProvider`` and ``HashEmbedder`` are deterministic stand-ins used by
tests and offline runs; ``HeuristicProvider`` answers prompts with a simple
greedy rule so scripted episodes still harvest and fight.
"""
from __future__ import annotations

import hashlib
import json
import logging
import os
import re
import time
from dataclasses import dataclass, field
from pathlib import Path
from typing import Callable, Optional, Protocol, Union

import httpx
import numpy as np
import yaml

log = logging.getLogger(__name__)

PROMPT_IDS = ("react", "plan", "reflect_questions", "reflect_insights", "act")
HASH_DIM = 256


class ProviderError(Exception):
    pass


class Timeout(ProviderError):
    pass


class AuthFailure(ProviderError):
    pass


class RateLimited(ProviderError):
    pass


class MalformedResponse(ProviderError):
    pass


class ScriptExhausted(ProviderError):
    pass


@dataclass(frozen=True)
class CompletionRequest:
    prompt: str
    model: str = "default"
    temperature: float = 0.0
    max_tokens: int = 1000
    module: str = ""

    def __post_init__(self):
        if self.temperature < 0:
            raise ValueError("temperature must be >= 0")
        if not self.prompt:
            raise ValueError("prompt must be non-empty")


class CompletionProvider(Protocol):
    def complete(self, request: CompletionRequest) -> str: ...


@dataclass
class ProviderConfig:
    endpoint: str = "https://api.openai.com/v1/chat/completions"
    token_env: str = "OPENAI_API_KEY"
    models: dict = field(default_factory=lambda: {"default": "gpt-3.5-turbo", "act": "gpt-4"})
    timeout: float = 60.0
    max_retries: int = 5
    backoff_base: float = 1.0
    backoff_cap: float = 30.0
    temperature: float = 0.0
    max_tokens: int = 1000

    def model_for(self, module: str) -> str:
        return self.models.get(module, self.models["default"])

    def token(self) -> str:
        value = os.environ.get(self.token_env, "")
        if not value:
            raise AuthFailure(f"environment variable {self.token_env} is not set")
        return value


class Router:
    """Sends each cognition prompt to the model configured for its module."""

    def __init__(self, provider: CompletionProvider, models: Optional[dict] = None,
                 temperature: float = 0.0, max_tokens: int = 1000):
        self.provider = provider
        self.models = models or {"default": "default"}
        self.temperature = temperature
        self.max_tokens = max_tokens
        self.calls = 0

    def model_for(self, module: str) -> str:
        return self.models.get(module, self.models["default"])

    def __call__(self, module: str, prompt: str) -> str:
        self.calls += 1
        request = CompletionRequest(prompt, self.model_for(module), self.temperature,
                                    self.max_tokens, module)
        return self.provider.complete(request)


class ScriptedProvider:
    """Replays canned responses in strict order.

    ``script`` is either one global queue or a mapping from prompt id to its
    own queue. With ``cycle`` set, exhausted queues wrap around.
    """

    def __init__(self, script: Union[list, dict], cycle: bool = False):
        self.cycle = cycle
        if isinstance(script, dict):
            self.queues = {k: list(v) for k, v in script.items()}
        else:
            self.queues = {"*": list(script)}
        self.cursor = {k: 0 for k in self.queues}
        self.requests: list[CompletionRequest] = []

    @classmethod
    def from_file(cls, path) -> "ScriptedProvider":
        data = yaml.safe_load(Path(path).read_text())
        if isinstance(data, list):
            return cls(data)
        if not isinstance(data, dict) or "responses" not in data:
            raise ValueError(f"{path}: expected a list or a mapping with 'responses'")
        return cls(data["responses"], cycle=bool(data.get("cycle", False)))

    def complete(self, request: CompletionRequest) -> str:
        self.requests.append(request)
        key = request.module if request.module in self.queues else "*"
        if key not in self.queues:
            raise ScriptExhausted(f"no scripted responses for {request.module!r}")
        queue = self.queues[key]
        i = self.cursor[key]
        if i >= len(queue):
            if not self.cycle or not queue:
                raise ScriptExhausted(f"script for {key!r} exhausted after {i} responses")
            i = 0
        self.cursor[key] = i + 1
        return queue[i]


def _backoff_sleep(attempt: int, base: float, cap: float, sleep: Callable[[float], None]):
    sleep(min(cap, base * 2 ** attempt))


class HttpChatProvider:
    """Chat-completions client: one user message per prompt, retries with backoff."""

    def __init__(self, config: ProviderConfig, client: Optional[httpx.Client] = None,
                 sleep: Callable[[float], None] = time.sleep):
        self.config = config
        self.client = client or httpx.Client(timeout=config.timeout)
        self.sleep = sleep

    def complete(self, request: CompletionRequest) -> str:
        body = {
            "model": request.model,
            "messages": [{"role": "user", "content": request.prompt}],
            "temperature": request.temperature,
            "max_tokens": request.max_tokens,
        }
        headers = {"Authorization": f"Bearer {self.config.token()}"}
        last: Optional[Exception] = None
        for attempt in range(self.config.max_retries + 1):
            if attempt:
                _backoff_sleep(attempt - 1, self.config.backoff_base, self.config.backoff_cap, self.sleep)
            log.debug("POST %s model=%s (attempt %d)", self.config.endpoint, request.model, attempt + 1)
            try:
                resp = self.client.post(self.config.endpoint, json=body, headers=headers)
            except httpx.TimeoutException as exc:
                last = Timeout(str(exc))
                continue
            except httpx.TransportError as exc:
                last = ProviderError(f"transport error: {exc}")
                continue
            if resp.status_code in (401, 403):
                raise AuthFailure(f"endpoint rejected credentials ({resp.status_code})")
            if resp.status_code == 429:
                last = RateLimited("rate limited")
                continue
            if resp.status_code >= 500:
                last = ProviderError(f"server error {resp.status_code}")
                continue
            if resp.status_code >= 400:
                raise ProviderError(f"request failed with {resp.status_code}: {resp.text[:200]}")
            return self._extract(resp)
        assert last is not None
        raise last

    @staticmethod
    def _extract(resp: httpx.Response) -> str:
        try:
            text = resp.json()["choices"][0]["message"]["content"]
        except (ValueError, KeyError, IndexError, TypeError) as exc:
            raise MalformedResponse(f"unexpected response body: {exc}") from exc
        if not isinstance(text, str):
            raise MalformedResponse("response content is not text")
        return text


class HttpEmbedder:
    """Embeddings endpoint client returning unit vectors."""

    def __init__(self, endpoint: str, model: str, token_env: str = "OPENAI_API_KEY",
                 client: Optional[httpx.Client] = None):
        self.endpoint = endpoint
        self.model = model
        self.token_env = token_env
        self.client = client or httpx.Client(timeout=60.0)

    def __call__(self, text: str) -> np.ndarray:
        token = os.environ.get(self.token_env, "")
        resp = self.client.post(self.endpoint, json={"model": self.model, "input": text},
                                headers={"Authorization": f"Bearer {token}"})
        if resp.status_code in (401, 403):
            raise AuthFailure("embedding endpoint rejected credentials")
        resp.raise_for_status()
        try:
            vec = np.asarray(resp.json()["data"][0]["embedding"], dtype=float)
        except (ValueError, KeyError, IndexError, TypeError) as exc:
            raise MalformedResponse(str(exc)) from exc
        return vec / np.linalg.norm(vec)


def hash_bucket(token: str, dim: int = HASH_DIM) -> int:
    digest = hashlib.blake2b(token.encode("utf-8"), digest_size=8).digest()
    return int.from_bytes(digest, "little") % dim


class HashEmbedder:
    """Bag-of-tokens hashed into ``dim`` buckets, L2-normalised."""

    def __init__(self, dim: int = HASH_DIM):
        self.dim = dim

    def __call__(self, text: str) -> np.ndarray:
        tokens = text.split()
        if not tokens:
            raise ValueError("cannot embed empty text")
        vec = np.zeros(self.dim)
        for tok in tokens:
            vec[hash_bucket(tok, self.dim)] += 1.0
        return vec / np.linalg.norm(vec)


_POS = r"\[(\d+), (\d+)\]"


def _fenced(obj: dict) -> str:
    return "```json\n" + json.dumps(obj, indent=1) + "\n```"


class HeuristicProvider:
    """Rule-based stand-in for a language model.

    Reads the rendered prompts and answers in the expected fenced-JSON shape:
    never reacts, keeps a fixed plan, and in the act prompt goes for the
    nearest visible apple, occasionally immobilises a nearby agent, and
    otherwise explores. Agents told to be cooperative skip the last visible
    apple of a tree.
    """

    def __init__(self, seed: int = 0, p_attack: float = 0.1, bounds: tuple = (18, 24)):
        self.rng = np.random.default_rng(seed)
        self.p_attack = p_attack
        self.bounds = bounds

    def complete(self, request: CompletionRequest) -> str:
        handler = getattr(self, f"_{request.module}", None)
        if handler is None:
            raise ProviderError(f"heuristic provider cannot answer {request.module!r}")
        return handler(request.prompt)

    def _react(self, prompt: str) -> str:
        return _fenced({"Reasoning": "Nothing requires a change.", "Answer": False})

    def _plan(self, prompt: str) -> str:
        return _fenced({"Reasoning": "Harvest steadily.", "Goals": "Collect apples.",
                        "Plan": "Move towards visible apples and explore when none are seen."})

    def _reflect_questions(self, prompt: str) -> str:
        return _fenced({f"Question_{i}": {"Reasoning": "Recent events.",
                                          "Question": q}
                        for i, q in enumerate(["Where are the apples?", "Who took apples?",
                                               "Was anyone attacked?"], 1)})

    def _reflect_insights(self, prompt: str) -> str:
        groups = max(1, prompt.count("Group of memories "))
        return _fenced({f"Insight_{i}": {"Reasoning": "From the memories.",
                                         "Insight": f"Apples are scarce near group {i}."}
                        for i in range(1, groups + 1)})

    def _act(self, prompt: str) -> str:
        me = re.search(r"from your position at \((\d+), (\d+)\)", prompt)
        here = (int(me.group(1)), int(me.group(2))) if me else (0, 0)
        section = prompt.split("you observe the following:", 1)[-1].split("Define what", 1)[0]
        apples = [((int(r), int(c)), int(t)) for r, c, t in
                  re.findall(r"Observed an apple at position " + _POS + r"\. This apple belongs to tree (\d+)", section)]
        agents = [(name, (int(r), int(c))) for name, r, c in
                  re.findall(r"Observed agent (\S+) at position " + _POS, section)]
        cooperative = "cooperative" in prompt.split("'s world understanding", 1)[0].lower()

        def dist(p):
            return (p[0] - here[0]) ** 2 + (p[1] - here[1]) ** 2

        close = [a for a in agents if dist(a[1]) <= 9]
        if close and self.rng.random() < self.p_attack:
            name, pos = min(close, key=lambda a: (dist(a[1]), a[1]))
            answer = f"immobilize player {name} at ({pos[0]}, {pos[1]})"
        else:
            per_tree: dict[int, int] = {}
            for _, t in apples:
                per_tree[t] = per_tree.get(t, 0) + 1
            choices = [p for p, t in apples if not (cooperative and per_tree[t] == 1)]
            if choices:
                target = min(choices, key=lambda p: (dist(p), p))
                answer = f"go to position ({target[0]}, {target[1]})"
            else:
                r = int(self.rng.integers(1, self.bounds[0] - 1))
                c = int(self.rng.integers(1, self.bounds[1] - 1))
                answer = f"explore ({r}, {c})"
        return _fenced({"Opportunities": "-", "Threats": "-", "Options": "-",
                        "Consequences": "-", "Final analysis": "-", "Answer": answer})
