import numpy as np
import pytest

from molflow.autodiff import SeededRng
from molflow.dataset import synthetic_corpus
from molflow.flow import FlowConfig, init_flow
from molflow.pipeline import train_flow
from molflow.spherenet import SphereNetConfig, init_spherenet, train_fusion

# One fixed stream drives the session-scoped desk model; every test that
# consumes it stays deterministic across reruns.
DESK_SEED = 4242


@pytest.fixture(scope="session")
def corpus():
    return synthetic_corpus(1000, SeededRng(DESK_SEED).spawn("corpus"), with_geometry=True)


@pytest.fixture(scope="session")
def desk(corpus):
    """Desk-scale trained models shared by the heavier tests: a flow trained
    150 epochs with validity probes (keep-best) and a fusion-trained
    geometry encoder over the first 64 geometry records."""
    rng = SeededRng(DESK_SEED)
    cfg = FlowConfig(atom_hidden=128, bond_hidden=128)
    params = init_flow(cfg, rng.spawn("init"))
    train_result = train_flow(params, corpus.records, epochs=150, rng=rng.spawn("train"))
    sp_cfg = SphereNetConfig(hidden=128, out_dim=cfg.d_total)
    sphere = init_spherenet(sp_cfg, rng.spawn("sphere"))
    fusion_set = corpus.records[:64]
    fusion_result = train_fusion(fusion_set, params, sphere, epochs=150,
                                 rng=rng.spawn("fusion"), lr=5e-3)
    untrained = init_flow(cfg, SeededRng(123).spawn("untrained"))
    return {
        "config": cfg,
        "flow": params,
        "train_result": train_result,
        "sphere_config": sp_cfg,
        "sphere": sphere,
        "fusion_set": fusion_set,
        "fusion_result": fusion_result,
        "untrained": untrained,
    }


@pytest.fixture()
def rng():
    return SeededRng(7)


@pytest.fixture(scope="session")
def tiny_flow():
    """A 12-dimensional flow (2 atoms, 2 atom types, 2 bond types) for
    Jacobian-sized checks."""
    cfg = FlowConfig(n_max=2, n_atom_types=2, n_bond_types=2,
                     atom_layers=3, bond_layers=3, atom_hidden=8, bond_hidden=8)
    params = init_flow(cfg, SeededRng(51), zero_last=False)
    return cfg, params
