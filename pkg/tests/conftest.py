import pytest
import torch

from civicgraph.data import SyntheticDomainConfig, generate_synthetic_domains
from civicgraph.relmodel import RelationHead, RelationHeadConfig, pretrain

torch.set_num_threads(1)


@pytest.fixture(autouse=True)
def _seed_torch():
    torch.manual_seed(0)


@pytest.fixture(scope="session")
def small_world():
    """A small two-domain benchmark and a briefly pretrained relation head."""
    dom = generate_synthetic_domains(
        SyntheticDomainConfig(seed=3, num_source_images=80, num_target_images=120, feature_dim=8)
    )
    cfg = RelationHeadConfig(
        len(dom.objects), dom.predicates.num_relations, 8,
        embed_dim=4, object_hidden=6, edge_hidden=6, decoder_hidden=6,
    )
    model = RelationHead(cfg, seed=0)
    model.init_frequency_bias(dom.source)
    ckpt = pretrain(model, dom.source, epochs=2, lr=3e-3).checkpoint
    return dom, ckpt


def pytest_configure(config):
    config.acceptance_lines = []


def pytest_terminal_summary(terminalreporter, exitstatus, config):
    lines = getattr(config, "acceptance_lines", [])
    if lines:
        terminalreporter.section("acceptance criteria")
        for line in sorted(lines):
            terminalreporter.write_line(line)
