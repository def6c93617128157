import logging
import math
import time
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass
from typing import Callable, Dict, Iterable, List, Optional, Sequence, Tuple, TypeVar, Union

import openai
from tqdm import tqdm

from .config import RunConfig
from .scoring import GeneratedToken
from .templates import render_explanation_query, render_generation_prompt, render_scoring_query
from .utils import encode_image, read_records, text_digest, wrap_record_error, write_records

__all__ = ['BackendError', 'TransportError', 'BackendAuthError', 'MalformedResponseError', 'ImageReadError',
           'ScriptMissError', 'Message', 'BackendRequest', 'BackendResponse', 'Backend', 'OpenAIBackend',
           'MockScript', 'MockBackend', 'fingerprint', 'mock_complete', 'build_two_stage_requests',
           'build_generation_request', 'create_backend', 'run_ordered', 'run_requests']

T = TypeVar('T')
R = TypeVar('R')


class BackendError(RuntimeError):
    pass


class TransportError(BackendError):
    pass


class BackendAuthError(BackendError):
    pass


class MalformedResponseError(BackendError):
    pass


class ImageReadError(BackendError):
    def __init__(self, image_ref: str, error: OSError):
        super().__init__(f'cannot read image {image_ref}: {error.strerror or error}')
        self.image_ref = image_ref


class ScriptMissError(BackendError):
    def __init__(self, key: str):
        super().__init__(f'no script entry for request fingerprint {key}')
        self.fingerprint = key


@dataclass(frozen=True)
class Message:
    role: str
    text: str
    # images travel inline; the reference is encoded when the request goes on the wire
    image_ref: Optional[str] = None


@dataclass(frozen=True)
class BackendRequest:
    model: str
    messages: Tuple[Message, ...]
    temperature: float = 0.0
    candidate_count: int = 0
    max_tokens: int = 16
    stage: str = 'score'

    def __post_init__(self):
        if not self.messages:
            raise ValueError('a request needs at least one message')
        for i, message in enumerate(self.messages):
            if message.image_ref is not None and (i != 0 or message.role != 'user'):
                raise ValueError('only the first user message can carry the image')
        if self.stage == 'score' and self.temperature != 0:
            raise ValueError('scoring requests use greedy decoding (temperature 0)')
        if self.candidate_count < 0 or self.max_tokens < 1:
            raise ValueError('invalid candidate_count or max_tokens')


@dataclass(frozen=True)
class BackendResponse:
    text: str
    # one entry per generated token, when candidates were requested
    tokens: Tuple[GeneratedToken, ...] = ()
    prompt_tokens: int = 0
    generated_tokens: int = 0
    latency: float = 0.0

    def __post_init__(self):
        if self.latency < 0:
            raise ValueError('negative latency')
        for token in self.tokens:
            probs = [p for _, p in token.candidates]
            if any(not 0.0 <= p <= 1.0 for p in probs):
                raise ValueError(f'candidate probability outside [0, 1] at token {token.text!r}')
            if any(a < b for a, b in zip(probs, probs[1:])):
                raise ValueError(f'candidates not sorted at token {token.text!r}')


class Backend:
    def complete(self, request: BackendRequest) -> BackendResponse:
        raise NotImplementedError


def _wire_messages(request: BackendRequest) -> List[dict]:
    messages = []
    for message in request.messages:
        if message.role == 'assistant':
            messages.append({'role': 'assistant', 'content': message.text})
            continue
        content = []
        if message.image_ref is not None:
            try:
                url = encode_image(message.image_ref)
            except OSError as e:
                raise ImageReadError(message.image_ref, e) from e
            content.append({'type': 'image_url', 'image_url': {'url': url}})
        content.append({'type': 'text', 'text': message.text})
        messages.append({'role': message.role, 'content': content})
    return messages


class OpenAIBackend(Backend):
    """
    Client for servers speaking the chat-completion protocol with token log-probabilities.
    Shareable across threads.
    """

    TRANSIENT_ERRORS = (openai.APIConnectionError, openai.APITimeoutError, openai.RateLimitError,
                        openai.InternalServerError)

    def __init__(self, endpoint: str, api_key: Optional[str] = None, timeout: float = 60.0, retries: int = 3,
                 backoff: float = 1.0, client=None, sleep: Callable[[float], None] = time.sleep):
        if client is None:
            # retries are handled here so the schedule is the one configured
            client = openai.OpenAI(base_url=endpoint, api_key=api_key or 'EMPTY', timeout=timeout, max_retries=0)
        self.client = client
        self.retries = retries
        self.backoff = backoff
        self.sleep = sleep

    def complete(self, request: BackendRequest) -> BackendResponse:
        body = {'model': request.model, 'messages': _wire_messages(request),
                'temperature': request.temperature, 'max_tokens': request.max_tokens}
        if request.candidate_count:
            body['logprobs'] = True
            body['top_logprobs'] = request.candidate_count
        logging.debug(f'Backend request: model={request.model} stage={request.stage} '
                      f'messages={len(request.messages)}')
        for attempt in range(1, self.retries + 1):
            start = time.perf_counter()
            try:
                response = self.client.chat.completions.create(**body)
            except openai.AuthenticationError as e:
                raise BackendAuthError(f'authentication failed: {e}') from e
            except self.TRANSIENT_ERRORS as e:
                if attempt == self.retries:
                    raise TransportError(f'backend unreachable after {attempt} attempts: {e}') from e
                delay = self.backoff * 2 ** (attempt - 1)
                logging.warning(f'Backend request failed (attempt {attempt}/{self.retries}): {e}; '
                                f'retrying in {delay:g}s')
                self.sleep(delay)
                continue
            except openai.APIStatusError as e:
                raise BackendError(f'backend returned status {e.status_code}: {e}') from e
            return self._parse(response, request, time.perf_counter() - start)
        raise AssertionError('unreachable')

    @staticmethod
    def _parse(response, request: BackendRequest, latency: float) -> BackendResponse:
        if not getattr(response, 'choices', None):
            raise MalformedResponseError('response has no choices')
        choice = response.choices[0]
        text = choice.message.content or ''
        tokens: Tuple[GeneratedToken, ...] = ()
        if request.candidate_count:
            content = getattr(choice.logprobs, 'content', None)
            if not content:
                raise MalformedResponseError('candidate lists were requested but are absent')
            generated = []
            for item in content:
                # log-probabilities on the wire, probabilities from here on
                candidates = sorted(((c.token, min(1.0, math.exp(c.logprob))) for c in item.top_logprobs or ()),
                                    key=lambda c: -c[1])
                if not candidates:
                    raise MalformedResponseError(f'empty candidate list at token {item.token!r}')
                generated.append(GeneratedToken(item.token, tuple(candidates)))
            tokens = tuple(generated)
        usage = getattr(response, 'usage', None)
        return BackendResponse(text, tokens, getattr(usage, 'prompt_tokens', 0) or 0,
                               getattr(usage, 'completion_tokens', 0) or 0, latency)


def fingerprint(request: BackendRequest) -> str:
    """
    Hash of the final user message (text and image reference).
    """
    message = next(m for m in reversed(request.messages) if m.role == 'user')
    return text_digest(message.text, message.image_ref or '')


def _tokens_to_json(tokens: Sequence[GeneratedToken]) -> List[dict]:
    return [{'token': t.text, 'top': [[c, p] for c, p in t.candidates]} for t in tokens]


def _tokens_from_json(items: Iterable[dict]) -> Tuple[GeneratedToken, ...]:
    return tuple(GeneratedToken(item['token'], tuple((str(c), float(p)) for c, p in item.get('top', ())))
                 for item in items)


class MockScript:
    def __init__(self):
        self.entries: Dict[str, BackendResponse] = {}

    def add(self, request: Union[BackendRequest, str], text: str, tokens: Sequence[GeneratedToken] = (),
            latency: float = 0.0) -> str:
        key = request if isinstance(request, str) else fingerprint(request)
        entry = BackendResponse(text, tuple(tokens), 0, len(tokens), latency)
        previous = self.entries.get(key)
        if previous is not None and previous != entry:
            # the explanation stage keys on its caption only, so one caption across two images collides here
            logging.warning(f'Mock script entry {key} replaced by a different response')
        self.entries[key] = entry
        return key

    def __len__(self):
        return len(self.entries)

    @classmethod
    def load(cls, path: str) -> 'MockScript':
        script = cls()
        for lineno, record in read_records(path):
            with wrap_record_error(path, lineno):
                script.add(str(record['fingerprint']), record['text'], _tokens_from_json(record.get('tokens', ())),
                           float(record.get('latency', 0.0)))
        logging.info(f'Loaded {len(script)} mock script entries from {path}')
        return script

    def save(self, path: str):
        write_records(path, ({'fingerprint': key, 'text': r.text, 'tokens': _tokens_to_json(r.tokens),
                              'latency': r.latency} for key, r in self.entries.items()))


def mock_complete(request: BackendRequest, script: MockScript) -> BackendResponse:
    key = fingerprint(request)
    entry = script.entries.get(key)
    if entry is None:
        raise ScriptMissError(key)
    if not request.candidate_count:
        return entry
    if not entry.tokens:
        raise MalformedResponseError('candidate lists were requested but are absent')
    tokens = tuple(GeneratedToken(t.text, t.candidates[:request.candidate_count]) for t in entry.tokens)
    return BackendResponse(entry.text, tokens, entry.prompt_tokens, entry.generated_tokens, entry.latency)


class MockBackend(Backend):
    def __init__(self, script: MockScript):
        self.script = script

    def complete(self, request: BackendRequest) -> BackendResponse:
        return mock_complete(request, self.script)


def build_two_stage_requests(caption: str, image_ref: str, prior_score_text: Optional[str] = None,
                             stage: str = 'score', model: str = 'capjudge', candidate_count: int = 20,
                             score_max_tokens: int = 16, explanation_max_tokens: int = 512) -> BackendRequest:
    """
    stage 'score': [user: scoring query + image]
    stage 'explanation': [user: scoring query + image, assistant: prior score, user: explanation query]
    """
    scoring = Message('user', render_scoring_query(caption), image_ref)
    if stage == 'score':
        return BackendRequest(model, (scoring,), 0.0, candidate_count, score_max_tokens, 'score')
    if stage != 'explanation':
        raise ValueError(f'invalid stage: {stage}')
    if not prior_score_text:
        raise ValueError('the explanation stage needs the greedy score text of the scoring stage')
    messages = (scoring, Message('assistant', prior_score_text), Message('user', render_explanation_query(caption)))
    return BackendRequest(model, messages, 0.0, 0, explanation_max_tokens, 'explanation')


def build_generation_request(caption: str, image_ref: str, model: str = 'capjudge',
                             max_tokens: int = 512) -> BackendRequest:
    return BackendRequest(model, (Message('user', render_generation_prompt(caption), image_ref),),
                          0.0, 0, max_tokens, 'generation')


def create_backend(conf: RunConfig) -> Backend:
    if conf.backend == 'mock':
        return MockBackend(MockScript.load(conf.mock_script))
    return OpenAIBackend(conf.endpoint, conf.api_key(), conf.timeout, conf.retries, conf.backoff)


def run_ordered(func: Callable[[T], R], items: Sequence[T], parallelism: int, desc: str = '') -> List[R]:
    """
    Applies func over a bounded thread pool; results come back in submission order.
    """
    if parallelism <= 1:
        return [func(item) for item in tqdm(items, desc=desc, disable=None)]
    with ThreadPoolExecutor(max_workers=parallelism) as executor:
        return list(tqdm(executor.map(func, items), total=len(items), desc=desc, disable=None))


def run_requests(backend: Backend, requests: Sequence[BackendRequest],
                 parallelism: int = 4) -> List[Union[BackendResponse, BackendError]]:
    """
    Failed requests come back as their BackendError in place of a response.
    """
    def complete(request: BackendRequest) -> Union[BackendResponse, BackendError]:
        try:
            return backend.complete(request)
        except BackendError as e:
            return e

    return run_ordered(complete, requests, parallelism, desc='requests')
