import pytest

from protgnn import checkpoint, gnn, synth
from protgnn.graph import GraphBuildConfig
from protgnn.psm import standardize_features
from protgnn.trainer import ModelEnsemble


@pytest.fixture
def ensemble():
    table, _ = synth.generate(synth.SynthConfig(n_true=4, n_entrapment=4, seed=1))
    _, stats = standardize_features(table)
    net = gnn.NetConfig(layers=2, hidden=5)
    members = [gnn.init_params(net, table.features.shape[1], s) for s in (1, 2)]
    return ModelEnsemble(members, net, stats)


def test_roundtrip(ensemble):
    cfg = GraphBuildConfig(epsilon=0.8, decoy_prefix="REV_")
    back, back_cfg = checkpoint.loads(checkpoint.dumps(ensemble, cfg))
    assert back_cfg == cfg
    assert back.net == ensemble.net
    assert all(a.bitwise_equal(b) for a, b in zip(back.members, ensemble.members))
    assert back.feature_stats.feature_names == ensemble.feature_stats.feature_names
    assert back.feature_stats.mean.tobytes() == ensemble.feature_stats.mean.tobytes()
    assert checkpoint.dumps(back, back_cfg) == checkpoint.dumps(ensemble, cfg)


def test_corruption_detected(ensemble):
    blob = bytearray(checkpoint.dumps(ensemble))
    blob[len(blob) // 2] ^= 1
    with pytest.raises(checkpoint.CheckpointError, match="checksum"):
        checkpoint.loads(bytes(blob))
    with pytest.raises(checkpoint.CheckpointError):
        checkpoint.loads(b"not a checkpoint at all, just some bytes here....")
