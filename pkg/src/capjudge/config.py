import json
import logging
import os
from typing import Optional


class RunConfig:
    def __init__(self):
        # 'openai' speaks the chat-completion wire protocol; 'mock' replays a script file
        self.backend = 'openai'
        self.endpoint: Optional[str] = None
        self.model = 'capjudge'
        # credentials are only ever read from this environment variable
        self.api_key_env = 'CAPJUDGE_API_KEY'
        self.require_api_key = False
        self.mock_script: Optional[str] = None
        self.timeout = 60.0
        self.retries = 3
        self.backoff = 1.0

        self.bin_size = 0.10
        # two fractional digits so both smoothed decimal places exist as generated tokens
        self.decimals = 2
        self.candidate_count = 20
        self.smoothing = True
        self.score_max_tokens = 16
        self.explanation_max_tokens = 512
        self.mode = 'full'  # or 'score_only'
        self.parallelism = 4
        self.seed = 0

        self.std_ddof = 0
        self.tie_credit = 0.5
        self.bootstrap_resamples = 10000
        self.confidence_level = 0.95

    @property
    def score_only(self) -> bool:
        return self.mode == 'score_only'

    def load_file(self, path: str):
        with open(path, 'r', encoding='utf-8') as f:
            values = json.load(f)
        if not isinstance(values, dict):
            raise ValueError(f'Config file {path} must contain an object.')
        for key, value in values.items():
            if key.startswith('_') or not hasattr(self, key) or key == 'score_only':
                raise ValueError(f'Unknown config key: {key}')
            setattr(self, key, value)
        logging.debug(f'Loaded config from {path}: {sorted(values)}')

    def api_key(self) -> Optional[str]:
        key = os.environ.get(self.api_key_env)
        if not key and self.require_api_key:
            raise ValueError(f'Environment variable {self.api_key_env} is not set.')
        return key

    def validate(self, backend: bool = True):
        if self.backend not in ('openai', 'mock'):
            raise ValueError(f'Invalid backend: {self.backend}')
        if backend and self.backend == 'openai' and not self.endpoint:
            raise ValueError('An endpoint is required for the openai backend.')
        if backend and self.backend == 'mock' and not self.mock_script:
            raise ValueError('A mock_script is required for the mock backend.')
        if self.mode not in ('full', 'score_only'):
            raise ValueError(f'Invalid mode: {self.mode}')
        if not 0 < self.bin_size <= 1:
            raise ValueError('bin_size must be in (0, 1].')
        if int(self.decimals) != self.decimals or self.decimals < 1:
            raise ValueError('decimals must be a positive integer.')
        if self.smoothing and self.candidate_count < 10:
            # every digit 0-9 must be requestable at each position
            raise ValueError('candidate_count must be at least 10 when smoothing is enabled.')
        if self.candidate_count > 20:
            logging.warning(f'candidate_count {self.candidate_count} exceeds the usual server limit of 20')
        if self.parallelism < 1:
            raise ValueError('parallelism must be at least 1.')
        if self.retries < 1:
            raise ValueError('retries must be at least 1.')
        if self.std_ddof not in (0, 1):
            raise ValueError('std_ddof must be 0 (population) or 1 (sample).')
        if not 0 <= self.tie_credit <= 1:
            raise ValueError('tie_credit must be in [0, 1].')
        if self.bootstrap_resamples < 1000:
            raise ValueError('bootstrap_resamples must be at least 1000.')
        if not isinstance(self.seed, int) or self.seed < 0:
            raise ValueError('seed must be a nonnegative integer.')
