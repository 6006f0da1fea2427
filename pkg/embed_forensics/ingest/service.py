"""Client for a remote feature-embedding service."""

import logging
import os
import time as ttime
from contextlib import ContextDecorator
from dataclasses import dataclass
from urllib.parse import urlparse

import numpy as np
import requests

from ..errors import ConfigurationError, NonFiniteError, ServiceError, ValidationError
from .dataset import EmbeddingMatrix
from .preprocess import pool_and_normalize

POOLING_MODES = ("service_pooled", "mean_pool_then_normalize")

MAX_ATTEMPTS = 3
BACKOFF_SECONDS = 0.5
# 4xx other than these fail immediately
RETRIABLE_CLIENT_STATUS = {408, 429}


@dataclass(frozen=True)
class EmbeddingServiceConfig:
    """
    Where and how to fetch embeddings.

    ``auth_token_env`` names the environment variable holding the bearer
    token; ``None`` means the service needs no token.
    """

    base_url: str
    auth_token_env: str = None
    batch_size: int = 32
    timeout: float = 30.0
    pooling: str = "service_pooled"

    def __post_init__(self):
        parsed = urlparse(self.base_url)
        if parsed.scheme not in ("http", "https") or not parsed.netloc:
            raise ConfigurationError(f"invalid service url {self.base_url!r}")
        if int(self.batch_size) < 1:
            raise ConfigurationError(f"batch_size must be >= 1, got {self.batch_size}")
        if not self.timeout > 0:
            raise ConfigurationError(f"timeout must be > 0, got {self.timeout}")
        if self.pooling not in POOLING_MODES:
            raise ConfigurationError(
                f"pooling must be one of {POOLING_MODES}, got {self.pooling!r}"
            )

    def auth_headers(self):
        """Bearer header from the environment, checked before any request."""
        if self.auth_token_env is None:
            return {}
        token = os.environ.get(self.auth_token_env)
        if not token:
            raise ConfigurationError(
                f"environment variable {self.auth_token_env} holds no service token"
            )
        return {"Authorization": f"Bearer {token}"}


class EmbeddingServiceSession(ContextDecorator):
    """
    A requests session bound to one embedding service.

    Client code should prefer the context manager protocol, for example::

        with EmbeddingServiceSession(cfg) as session:
            vectors = session.embed(["some text"])

    """

    def __init__(self, cfg, *, sleep=ttime.sleep):
        log = logging.getLogger(self.__class__.__name__)

        self.cfg = cfg
        parsed_url = urlparse(cfg.base_url)
        self._service_url = f"{parsed_url.scheme}://{parsed_url.netloc}{parsed_url.path}".rstrip(
            "/"
        )
        self._headers = cfg.auth_headers()
        self._sleep = sleep
        self._session = None
        log.debug("self._service_url: '%s'", self._service_url)

    def __enter__(self):
        self._session = requests.Session()
        self._session.headers.update(self._headers)
        return self

    def __exit__(self, *exc):
        if self._session is not None:
            self._session.close()
        self._session = None
        return False

    def _post(self, endpoint, **kwargs):
        """POST with exponential backoff, at most MAX_ATTEMPTS tries."""
        log = logging.getLogger(self.__class__.__name__)

        endpoint_url = f"{self._service_url}/{endpoint}"
        session = self._session if self._session is not None else requests
        last_error = None
        for attempt in range(MAX_ATTEMPTS):
            log.debug("url: '%s', attempt %d", endpoint_url, attempt + 1)
            try:
                response = session.post(
                    endpoint_url,
                    headers=self._headers,
                    timeout=self.cfg.timeout,
                    **kwargs,
                )
                response.raise_for_status()
            except requests.HTTPError as err:
                status = err.response.status_code
                if 400 <= status < 500 and status not in RETRIABLE_CLIENT_STATUS:
                    raise ServiceError(f"{endpoint_url} rejected the request: {err}") from err
                last_error = err
            except requests.RequestException as err:
                last_error = err
            else:
                log.debug(
                    "response: '%s', elapsed time: '%s's, ",
                    response,
                    response.elapsed,
                )
                return response
            if attempt + 1 < MAX_ATTEMPTS:
                delay = BACKOFF_SECONDS * 2**attempt
                log.warning("request to %s failed (%s); retrying in %.1fs", endpoint_url, last_error, delay)
                self._sleep(delay)
        raise ServiceError(
            f"{endpoint_url} failed after {MAX_ATTEMPTS} attempts: {last_error}"
        ) from last_error

    def embed(self, texts):
        """
        Embed one batch of texts.

        Returns
        -------
        array
            Shape (len(texts), D).
        """
        response = self._post("embed", json={"texts": list(texts)})
        try:
            rows = response.json()["embeddings"]
        except (ValueError, KeyError, TypeError) as err:
            raise ServiceError(f"malformed service response: {err}") from err
        if not isinstance(rows, list) or len(rows) != len(texts):
            got = len(rows) if isinstance(rows, list) else "no"
            raise ValidationError(
                f"service returned {got} embeddings for {len(texts)} texts"
            )
        vectors = []
        for j, row in enumerate(rows):
            try:
                arr = np.asarray(row, dtype=np.float64)
            except (TypeError, ValueError) as err:
                raise ServiceError(f"embedding {j} is not numeric") from err
            if not np.isfinite(arr).all():
                raise NonFiniteError("service returned a non-finite value", row=j + 1)
            if arr.ndim == 2:
                if self.cfg.pooling != "mean_pool_then_normalize":
                    raise ServiceError(
                        "service returned per-token states but pooling is 'service_pooled'"
                    )
                arr = pool_and_normalize(arr)
            elif arr.ndim != 1:
                raise ServiceError(f"embedding {j} has shape {arr.shape}")
            vectors.append(arr)
        return vectors


def batched(items, batch_size):
    for start in range(0, len(items), batch_size):
        yield items[start : start + batch_size]


def fetch_embeddings(cfg, texts, ids=None, labels=None, *, session=None):
    """
    Embed texts with a remote service, ``cfg.batch_size`` texts per request.

    Parameters
    ----------
    cfg : EmbeddingServiceConfig
    texts : list[str]
    ids : list[str], optional
        Defaults to the text positions "0", "1", ...
    labels : list[str], optional
    session : EmbeddingServiceSession, optional
        An open session to reuse.

    Returns
    -------
    EmbeddingMatrix
        One row per text, in input order.
    """
    log = logging.getLogger(__name__)

    texts = list(texts)
    if not texts:
        raise ValidationError("no texts to embed")
    if ids is None:
        ids = [str(j) for j in range(len(texts))]
    if len(ids) != len(texts):
        raise ValidationError(f"{len(ids)} ids for {len(texts)} texts")

    def _run(active):
        vectors = []
        for n_batch, batch in enumerate(batched(texts, int(cfg.batch_size))):
            log.debug("embedding batch %d (%d texts)", n_batch, len(batch))
            vectors.extend(active.embed(batch))
        return vectors

    if session is None:
        with EmbeddingServiceSession(cfg) as session:
            vectors = _run(session)
    else:
        vectors = _run(session)
    return EmbeddingMatrix(vectors, ids, labels)
