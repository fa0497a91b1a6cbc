import pytest

from spdmbench import crypto, session as session_mod
from spdmbench.bench import BenchFixtures, DEFAULT_PSK_HINT
from spdmbench.requester import Requester
from spdmbench.responder import Responder
from spdmbench.transport import LoopbackEndpoint


@pytest.fixture(scope="session")
def fixtures() -> BenchFixtures:
    return BenchFixtures.generate()


@pytest.fixture(scope="session")
def cert_dir(fixtures, tmp_path_factory):
    path = tmp_path_factory.mktemp("certs")
    fixtures.write_dir(path)
    return path


@pytest.fixture
def secrets_export():
    session_mod.SECRETS_EXPORT_ENABLED = True
    yield
    session_mod.SECRETS_EXPORT_ENABLED = False


class CountingEndpoint:
    """Wraps an endpoint, counting and recording frames both ways."""

    def __init__(self, inner):
        self.inner = inner
        self.sent = []
        self.received = []
        self.mutate_send = None
        self.mutate_recv = None

    @property
    def stats(self):
        return self.inner.stats

    def send_msg(self, data, timeout=None):
        if self.mutate_send is not None:
            mutated = self.mutate_send(data)
            if mutated is not None:
                data = mutated
        self.sent.append(data)
        self.inner.send_msg(data, timeout)

    def recv_msg(self, timeout=None):
        data = self.inner.recv_msg(timeout)
        self.received.append(data)
        if self.mutate_recv is not None:
            mutated = self.mutate_recv(data)
            if mutated is not None:
                data = mutated
        return data

    def close(self):
        self.inner.close()


@pytest.fixture
def make_pair(fixtures):
    """Factory for a synchronous requester/responder pair."""

    def factory(requester_cfg=None, responder_cfg=None, seed=1):
        rsp_cfg = responder_cfg if responder_cfg is not None else \
            fixtures.responder_config(seed=seed)
        responder = Responder(rsp_cfg)
        endpoint = CountingEndpoint(LoopbackEndpoint(responder.handle_message))
        req_cfg = requester_cfg if requester_cfg is not None else \
            fixtures.requester_config(seed=seed + 1)
        requester = Requester(req_cfg, endpoint)
        return requester, responder, endpoint

    return factory


@pytest.fixture
def psk_hint():
    return DEFAULT_PSK_HINT
