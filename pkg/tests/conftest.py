import numpy as np
import pytest
import torch

from dgtse.codec import Codec, CodecConfig
from dgtse.data import index_corpus, load_audio
from dgtse.toycorpus import make_toy_corpus

torch.set_num_threads(1)

SMALL_CODEC = dict(n_layers=4, codebook_size=32, latent_dim=16, channels=4, max_channels=16)


@pytest.fixture
def rng():
    return np.random.default_rng(1234)


@pytest.fixture(scope="session")
def toy_root(tmp_path_factory):
    root = tmp_path_factory.mktemp("toy")
    make_toy_corpus(root, n_speakers=3, utts_per_speaker=5, seed=3, min_dur=1.5, max_dur=2.5)
    return root


@pytest.fixture(scope="session")
def toy_index(toy_root):
    return index_corpus(toy_root)


@pytest.fixture(scope="session")
def toy_waves(toy_index):
    return [load_audio(u.path) for u in toy_index.utterances]


def make_small_codec(waves=None, seed=0, **overrides):
    """Untrained small codec with k-means codebooks, marked fitted."""
    torch.manual_seed(seed)
    codec = Codec(CodecConfig(**{**SMALL_CODEC, **overrides}))
    if waves is None:
        waves = [np.random.default_rng(seed).uniform(-0.5, 0.5, 16000).astype(np.float32)]
    with torch.no_grad():
        z = torch.cat([codec.encode_latent(torch.from_numpy(w)) for w in waves])
        codec.rvq.init_kmeans(z, seed=seed)
    codec.fitted.fill_(True)
    return codec.eval()


@pytest.fixture(scope="session")
def small_codec():
    return make_small_codec()


def make_joint(codec, strategy=None, seed=0, fitted=True, **backend_kw):
    from dgtse.backend import Backend, BackendConfig
    from dgtse.frontend import Frontend, FrontendConfig
    from dgtse.system import JointSystem

    torch.manual_seed(seed)
    fe = Frontend(FrontendConfig.toy(n_blocks=1))
    fe.fitted.fill_(fitted)
    be = Backend(BackendConfig.toy(**backend_kw), codec)
    return JointSystem(fe, be, strategy)


def random_batch(seed, b=2, n_mix=3200, n_enr=2400):
    g = torch.Generator().manual_seed(seed)
    s = (torch.rand(b, n_mix, generator=g) - 0.5) * 0.6
    i = (torch.rand(b, n_mix, generator=g) - 0.5) * 0.4
    return {"mixture": s + i, "enrollment": (torch.rand(b, n_enr, generator=g) - 0.5) * 0.6, "target": s}


ACCEPTANCE = []


def pytest_terminal_summary(terminalreporter):
    if ACCEPTANCE:
        terminalreporter.section("acceptance criteria")
        for line in ACCEPTANCE:
            terminalreporter.write_line(line)
